//! Truncated signed distance fusion and surface extraction.
//!
//! The volume accumulates masked RGBD observations into a regular grid of
//! truncated signed distances (normalized to `[-1, 1]` in units of the
//! truncation band) plus running color averages. Three kinds of evidence are
//! recorded per frame:
//!
//! - pixels inside the object mask update the band around the observed
//!   surface (`sdf = depth - voxel_depth`, clamped),
//! - voxels in front of the observed surface along masked rays are carved as
//!   free space (the clamp saturates them to +1),
//! - voxels projecting onto background pixels are carved as free space too,
//!   since the ray demonstrably passed through them unobstructed.
//!
//! Voxels more than one truncation band behind the surface keep their prior
//! state: the frame says nothing about them. Voxels never observed by any
//! frame are treated as *presumed interior* (effective value −1) during
//! extraction and raycasting. Because free space is carved explicitly, the
//! unobserved region is enclosed by carved space and observed surface, so the
//! extracted mesh closes around everything no reference has seen — and those
//! closure faces are exactly the ones downstream visibility labeling marks
//! uncertain. Fully observed objects have their interior surrounded by the
//! observed negative band, so no spurious interior surface appears.

use crate::geom::{GeomError, Intrinsics, Pose};
use crate::img::{ColorImage, DepthImage, Frame, ImgError, MaskImage};
use crate::mc_tables::{CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE};
use crate::mesh::TriangleMesh;
use crate::par;
use nalgebra::Vector3;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("cannot initialize a volume from an empty point set")]
    EmptyPointCloud,
    #[error("volume resolution must be at least 2 (got {0})")]
    BadResolution(usize),
    #[error("truncation must be positive (got {0})")]
    BadTruncation(f64),
    #[error("no zero crossings: the volume contains no extractable surface")]
    EmptyMesh,
    #[error(transparent)]
    Frame(#[from] ImgError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Per-voxel fusion state. Color keeps its own observation count because
/// free-space carving updates the distance field without color evidence.
#[derive(Debug, Clone, Copy, Default)]
pub struct Voxel {
    pub tsdf: f32,
    pub weight: f32,
    pub color: [f32; 3],
    pub color_weight: f32,
}

#[derive(Debug, Clone)]
pub struct TsdfVolume {
    /// Object-frame position of the center of voxel (0, 0, 0).
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    /// Truncation band in meters; stored distances are `sdf / truncation`.
    pub truncation: f64,
    pub voxels: Vec<Voxel>,
}

/// Counters reported by one fusion step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FusionStats {
    /// Voxels updated through an in-mask depth observation (band or carve).
    pub band_updates: usize,
    /// Voxels carved through background pixels.
    pub background_carves: usize,
}

impl FusionStats {
    pub fn is_noop(&self) -> bool {
        self.band_updates == 0 && self.background_carves == 0
    }
}

/// Sizes a fresh volume around a point cloud: the axis-aligned bounding box
/// grown by `padding` on every side, with cubic voxels sized so the longest
/// axis spans `resolution` voxels.
pub fn init_volume(
    points: &[Vector3<f64>],
    padding: f64,
    resolution: usize,
    truncation: f64,
) -> Result<TsdfVolume, VolumeError> {
    if points.is_empty() {
        return Err(VolumeError::EmptyPointCloud);
    }
    if resolution < 2 {
        return Err(VolumeError::BadResolution(resolution));
    }
    if truncation <= 0.0 {
        return Err(VolumeError::BadTruncation(truncation));
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    lo -= Vector3::from_element(padding);
    hi += Vector3::from_element(padding);
    let extent = hi - lo;
    let max_extent = extent.max();
    let voxel_size = max_extent / resolution as f64;
    let dims = [
        ((extent.x / voxel_size - 1e-9).ceil() as usize).max(2),
        ((extent.y / voxel_size - 1e-9).ceil() as usize).max(2),
        ((extent.z / voxel_size - 1e-9).ceil() as usize).max(2),
    ];
    Ok(TsdfVolume {
        // `origin` addresses voxel centers, so shift by half a voxel.
        origin: lo + Vector3::from_element(voxel_size / 2.0),
        voxel_size,
        dims,
        truncation,
        voxels: vec![Voxel::default(); dims[0] * dims[1] * dims[2]],
    })
}

impl TsdfVolume {
    #[inline]
    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    /// Object-frame center of a voxel.
    #[inline]
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        self.origin
            + Vector3::new(x as f64, y as f64, z as f64) * self.voxel_size
    }

    /// Effective field value at a grid node: observed voxels report their
    /// fused distance, unobserved voxels are presumed interior (−1). See the
    /// module docs for why.
    #[inline]
    pub fn effective(&self, x: usize, y: usize, z: usize) -> f64 {
        let v = &self.voxels[self.voxel_index(x, y, z)];
        if v.weight > 0.0 {
            v.tsdf as f64
        } else {
            -1.0
        }
    }

    /// Fuses one masked RGBD frame observed from `pose` (object-to-camera).
    pub fn integrate_frame(
        &mut self,
        frame: &Frame,
        pose: &Pose,
        k: &Intrinsics,
    ) -> Result<FusionStats, VolumeError> {
        frame.validate()?;
        k.validate()?;
        if frame.depth.width() != k.width || frame.depth.height() != k.height {
            return Err(ImgError::SizeMismatch(frame.depth.width(), frame.depth.height(), k.width, k.height).into());
        }
        let (nx, ny) = (self.dims[0], self.dims[1]);
        let slab = nx * ny;
        let origin = self.origin;
        let voxel_size = self.voxel_size;
        let trunc = self.truncation;
        let stats = par::map_chunks_mut(&mut self.voxels, slab, |offset, chunk| {
            let z_idx = offset / slab;
            let mut local = FusionStats::default();
            for (i, vox) in chunk.iter_mut().enumerate() {
                let y = i / nx;
                let x = i % nx;
                let p_obj =
                    origin + Vector3::new(x as f64, y as f64, z_idx as f64) * voxel_size;
                let p_cam = pose.transform_point(&p_obj);
                if p_cam.z <= 0.0 {
                    continue;
                }
                let u = k.fx * p_cam.x / p_cam.z + k.cx;
                let v = k.fy * p_cam.y / p_cam.z + k.cy;
                let Some((px, py)) = k.pixel_of(u, v) else { continue };
                if *frame.mask.get(px, py) {
                    let d = *frame.depth.get(px, py) as f64;
                    if d <= 0.0 {
                        continue;
                    }
                    let sdf = d - p_cam.z;
                    if sdf < -trunc {
                        // Occluded: the surface hides this voxel.
                        continue;
                    }
                    let obs = (sdf / trunc).clamp(-1.0, 1.0) as f32;
                    let w = vox.weight;
                    vox.tsdf = (vox.tsdf * w + obs) / (w + 1.0);
                    vox.weight = w + 1.0;
                    let c = frame.color.get(px, py);
                    let cw = vox.color_weight;
                    for ch in 0..3 {
                        vox.color[ch] = (vox.color[ch] * cw + c[ch]) / (cw + 1.0);
                    }
                    vox.color_weight = cw + 1.0;
                    local.band_updates += 1;
                } else {
                    // Background pixel: the ray passed through freely.
                    let w = vox.weight;
                    vox.tsdf = (vox.tsdf * w + 1.0) / (w + 1.0);
                    vox.weight = w + 1.0;
                    local.background_carves += 1;
                }
            }
            local
        });
        let mut total = FusionStats::default();
        for s in stats {
            total.band_updates += s.band_updates;
            total.background_carves += s.background_carves;
        }
        Ok(total)
    }

    /// Trilinear interpolation of the effective field at an object-frame
    /// point. Outside the grid, clamps to the border nodes.
    pub fn sample_effective(&self, p: &Vector3<f64>) -> f64 {
        let g = (p - self.origin) / self.voxel_size;
        let (x0, fx) = split_axis(g.x, self.dims[0]);
        let (y0, fy) = split_axis(g.y, self.dims[1]);
        let (z0, fz) = split_axis(g.z, self.dims[2]);
        let mut acc = 0.0;
        for (dz, wz) in [(0usize, 1.0 - fz), (1, fz)] {
            for (dy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0usize, 1.0 - fx), (1, fx)] {
                    let w = wx * wy * wz;
                    if w > 0.0 {
                        acc += w
                            * self.effective(
                                (x0 + dx).min(self.dims[0] - 1),
                                (y0 + dy).min(self.dims[1] - 1),
                                (z0 + dz).min(self.dims[2] - 1),
                            );
                    }
                }
            }
        }
        acc
    }

    /// Trilinear color at an object-frame point, weighting corners by their
    /// color evidence. Unobserved regions come back mid-gray.
    pub fn sample_color(&self, p: &Vector3<f64>) -> [f32; 3] {
        let g = (p - self.origin) / self.voxel_size;
        let (x0, fx) = split_axis(g.x, self.dims[0]);
        let (y0, fy) = split_axis(g.y, self.dims[1]);
        let (z0, fz) = split_axis(g.z, self.dims[2]);
        let mut acc = [0.0f64; 3];
        let mut total = 0.0f64;
        for (dz, wz) in [(0usize, 1.0 - fz), (1, fz)] {
            for (dy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0usize, 1.0 - fx), (1, fx)] {
                    let w = wx * wy * wz;
                    if w <= 0.0 {
                        continue;
                    }
                    let vox = &self.voxels[self.voxel_index(
                        (x0 + dx).min(self.dims[0] - 1),
                        (y0 + dy).min(self.dims[1] - 1),
                        (z0 + dz).min(self.dims[2] - 1),
                    )];
                    if vox.color_weight > 0.0 {
                        for ch in 0..3 {
                            acc[ch] += w * vox.color[ch] as f64;
                        }
                        total += w;
                    }
                }
            }
        }
        if total > 1e-12 {
            [
                (acc[0] / total) as f32,
                (acc[1] / total) as f32,
                (acc[2] / total) as f32,
            ]
        } else {
            [0.5, 0.5, 0.5]
        }
    }

    /// Central-difference gradient of the effective field; points from inside
    /// (negative) toward outside (positive), i.e. along the outward normal.
    pub fn gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let h = self.voxel_size;
        let mut g = Vector3::zeros();
        for a in 0..3 {
            let mut hi = *p;
            let mut lo = *p;
            hi[a] += h;
            lo[a] -= h;
            g[a] = (self.sample_effective(&hi) - self.sample_effective(&lo)) / (2.0 * h);
        }
        g
    }

    /// Runs marching cubes over the effective field.
    ///
    /// Vertices are deduplicated through canonical `(grid node, axis)` edge
    /// keys and appear in cell scan order (x fastest), so identical volumes
    /// produce bit-identical meshes. Errors when the field contains no zero
    /// crossing at all.
    pub fn extract_mesh(&self) -> Result<TriangleMesh, VolumeError> {
        let [nx, ny, nz] = self.dims;
        let mut edge_cache: HashMap<(u32, u32, u32, u8), u32> = HashMap::new();
        let mut vertices: Vec<Vector3<f64>> = Vec::new();
        let mut faces: Vec<[u32; 3]> = Vec::new();

        let mut corner_vals = [0.0f64; 8];
        for z in 0..nz - 1 {
            for y in 0..ny - 1 {
                for x in 0..nx - 1 {
                    let mut case = 0usize;
                    for (ci, off) in CORNER_OFFSETS.iter().enumerate() {
                        let val = self.effective(x + off[0], y + off[1], z + off[2]);
                        corner_vals[ci] = val;
                        if val <= 0.0 {
                            case |= 1 << ci;
                        }
                    }
                    if case == 0 || case == 255 {
                        continue;
                    }
                    let row = &TRI_TABLE[case];
                    let mut t = 0;
                    while row[t] >= 0 {
                        let mut tri = [0u32; 3];
                        for (j, slot) in tri.iter_mut().enumerate() {
                            *slot = self.edge_vertex(
                                x,
                                y,
                                z,
                                row[t + j] as usize,
                                &corner_vals,
                                &mut edge_cache,
                                &mut vertices,
                            );
                        }
                        if tri[0] != tri[1] && tri[1] != tri[2] && tri[0] != tri[2] {
                            faces.push(tri);
                        }
                        t += 3;
                    }
                }
            }
        }
        if faces.is_empty() {
            return Err(VolumeError::EmptyMesh);
        }
        let colors = par::map_slice(&vertices, |v| self.sample_color(v));
        Ok(TriangleMesh { vertices, colors, faces })
    }

    /// Outward vertex normals for an extracted mesh, from the field gradient.
    /// Falls back to zero where the gradient vanishes.
    pub fn vertex_normals_from_gradient(&self, mesh: &TriangleMesh) -> Vec<Vector3<f64>> {
        par::map_slice(&mesh.vertices, |v| {
            let g = self.gradient(v);
            let n = g.norm();
            if n > 1e-12 {
                g / n
            } else {
                Vector3::zeros()
            }
        })
    }

    fn edge_vertex(
        &self,
        x: usize,
        y: usize,
        z: usize,
        edge: usize,
        vals: &[f64; 8],
        cache: &mut HashMap<(u32, u32, u32, u8), u32>,
        vertices: &mut Vec<Vector3<f64>>,
    ) -> u32 {
        let (ca, cb) = EDGE_CORNERS[edge];
        let oa = CORNER_OFFSETS[ca];
        let ob = CORNER_OFFSETS[cb];
        // Canonical key: the lower grid node of the edge plus its axis.
        let bx = x + oa[0].min(ob[0]);
        let by = y + oa[1].min(ob[1]);
        let bz = z + oa[2].min(ob[2]);
        let axis = (0..3).find(|&a| oa[a] != ob[a]).expect("edge spans one axis") as u8;
        let key = (bx as u32, by as u32, bz as u32, axis);
        if let Some(&idx) = cache.get(&key) {
            return idx;
        }
        let va = vals[ca];
        let vb = vals[cb];
        let t = if (va - vb).abs() > 1e-12 { (va / (va - vb)).clamp(0.0, 1.0) } else { 0.5 };
        let pa = self.voxel_center(x + oa[0], y + oa[1], z + oa[2]);
        let pb = self.voxel_center(x + ob[0], y + ob[1], z + ob[2]);
        let idx = vertices.len() as u32;
        vertices.push(pa + (pb - pa) * t);
        cache.insert(key, idx);
        idx
    }

    /// Axis-aligned bounds of the grid node lattice (voxel centers).
    pub fn node_bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let hi = self.origin
            + Vector3::new(
                (self.dims[0] - 1) as f64,
                (self.dims[1] - 1) as f64,
                (self.dims[2] - 1) as f64,
            ) * self.voxel_size;
        (self.origin, hi)
    }
}

fn split_axis(g: f64, dim: usize) -> (usize, f64) {
    let max = (dim - 1) as f64;
    let c = g.clamp(0.0, max);
    let i = (c.floor() as usize).min(dim - 2);
    (i, c - i as f64)
}

/// Parameters for volumetric rendering.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RaycastConfig {
    /// Sharpness of the surface density bell, in 1/meters.
    pub alpha: f64,
    /// March step in meters. Clamped to half a voxel at render time.
    pub step: f64,
    /// Half-width of the integration window in meters (the window spans
    /// `[z - near_band, z + 0.5 * near_band]` around the surface depth).
    pub near_band: f64,
    /// Minimum accumulated density for a pixel to count as covered.
    pub density_threshold: f64,
}

impl RaycastConfig {
    pub fn for_volume(vol: &TsdfVolume, alpha: f64) -> Self {
        Self {
            alpha,
            step: vol.voxel_size / 2.0,
            near_band: vol.truncation,
            density_threshold: 1e-3,
        }
    }
}

/// Bell-shaped density around the zero level set: the product of opposing
/// sigmoids `σ(αΩ) σ(−αΩ)`, peaking at 1/4 on the surface.
pub fn surface_density(alpha: f64, omega_m: f64) -> f64 {
    let a = alpha * omega_m;
    (1.0 / (1.0 + (-a).exp())) * (1.0 / (1.0 + a.exp()))
}

/// Images produced by [`raycast_render`].
#[derive(Debug, Clone)]
pub struct RaycastOutput {
    pub color: ColorImage,
    pub depth: DepthImage,
    pub mask: MaskImage,
}

/// Renders the volume from `pose` by marching rays through the effective
/// field.
///
/// Each ray locates the first outside-to-inside zero crossing — restricted to
/// the window around `guide_depth` when one is supplied — then integrates
/// color and depth over the asymmetric window `[z − near_band, z + 0.5 ·
/// near_band]` with the surface-density bell as weight. Pixels whose window
/// holds no crossing, or whose accumulated density stays below the threshold,
/// are background.
pub fn raycast_render(
    vol: &TsdfVolume,
    pose: &Pose,
    k: &Intrinsics,
    cfg: &RaycastConfig,
    guide_depth: Option<&DepthImage>,
) -> RaycastOutput {
    let step = cfg.step.min(vol.voxel_size / 2.0).max(1e-6);
    let origin_obj = pose.camera_center();
    let rot_t = pose.rotation().transpose();
    let (lo, hi) = vol.node_bounds();

    let rows: Vec<Vec<([f32; 3], f32)>> = par::map_indexed(k.height, |py| {
        let mut row = Vec::with_capacity(k.width);
        for px in 0..k.width {
            let dir_cam = Vector3::new(
                (px as f64 + 0.5 - k.cx) / k.fx,
                (py as f64 + 0.5 - k.cy) / k.fy,
                1.0,
            );
            let inv_len = 1.0 / dir_cam.norm();
            let dz = inv_len; // camera depth gained per unit ray length
            let dir_obj = rot_t * (dir_cam * inv_len);
            row.push(march_ray(
                vol,
                cfg,
                step,
                &origin_obj,
                &dir_obj,
                dz,
                &lo,
                &hi,
                guide_depth.and_then(|g| {
                    let d = *g.get(px, py);
                    (d > 0.0).then_some(d as f64)
                }),
            ));
        }
        row
    });

    let mut color = ColorImage::new(k.width, k.height, [0.0; 3]);
    let mut depth = DepthImage::new(k.width, k.height, 0.0);
    let mut mask = MaskImage::new(k.width, k.height, false);
    for (py, row) in rows.into_iter().enumerate() {
        for (px, (c, d)) in row.into_iter().enumerate() {
            if d > 0.0 {
                color.set(px, py, c);
                depth.set(px, py, d);
                mask.set(px, py, true);
            }
        }
    }
    RaycastOutput { color, depth, mask }
}

#[allow(clippy::too_many_arguments)]
fn march_ray(
    vol: &TsdfVolume,
    cfg: &RaycastConfig,
    step: f64,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    dz: f64,
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
    guide: Option<f64>,
) -> ([f32; 3], f32) {
    const MISS: ([f32; 3], f32) = ([0.0; 3], 0.0);
    let Some((t_enter, t_exit)) = slab_intersect(origin, dir, lo, hi) else {
        return MISS;
    };
    if t_exit <= t_enter.max(0.0) {
        return MISS;
    }
    let t_enter = t_enter.max(0.0);

    // Search range for the zero crossing: the guide window when guided,
    // otherwise the whole traversal.
    let (search_lo, search_hi) = match guide {
        Some(z) => {
            let lo_t = ((z - cfg.near_band) / dz).max(t_enter);
            let hi_t = ((z + 0.5 * cfg.near_band) / dz).min(t_exit);
            if hi_t <= lo_t {
                return MISS;
            }
            (lo_t, hi_t)
        }
        None => (t_enter, t_exit),
    };

    // Locate the first positive-to-nonpositive transition of the field.
    let mut t_cross = None;
    let mut prev_t = search_lo;
    let mut prev_v = vol.sample_effective(&(origin + dir * prev_t));
    if prev_v <= 0.0 {
        t_cross = Some(prev_t);
    } else {
        let mut t = search_lo + step;
        while t <= search_hi {
            let v = vol.sample_effective(&(origin + dir * t));
            if v <= 0.0 {
                let f = if (prev_v - v).abs() > 1e-12 { prev_v / (prev_v - v) } else { 0.5 };
                t_cross = Some(prev_t + (t - prev_t) * f);
                break;
            }
            prev_t = t;
            prev_v = v;
            t += step;
        }
    }
    let Some(t_cross) = t_cross else { return MISS };

    // Integration window: guide-centered when guided, crossing-centered
    // otherwise. Both span [z − band, z + band/2].
    let z_center = match guide {
        Some(z) => z,
        None => t_cross * dz,
    };
    let w_lo = ((z_center - cfg.near_band) / dz).max(t_enter);
    let w_hi = ((z_center + 0.5 * cfg.near_band) / dz).min(t_exit);
    if w_hi <= w_lo {
        return MISS;
    }

    let mut density = 0.0f64;
    let mut depth_acc = 0.0f64;
    let mut color_acc = [0.0f64; 3];
    let mut t = w_lo;
    while t <= w_hi {
        let p = origin + dir * t;
        let omega_m = vol.sample_effective(&p) * vol.truncation;
        let w = surface_density(cfg.alpha, omega_m);
        if w > 0.0 {
            density += w;
            depth_acc += w * t * dz;
            let c = vol.sample_color(&p);
            for ch in 0..3 {
                color_acc[ch] += w * c[ch] as f64;
            }
        }
        t += step;
    }
    if density <= cfg.density_threshold {
        return MISS;
    }
    let d = depth_acc / density;
    (
        [
            (color_acc[0] / density) as f32,
            (color_acc[1] / density) as f32,
            (color_acc[2] / density) as f32,
        ],
        d as f32,
    )
}

/// Ray / axis-aligned box intersection (slab method). Returns the parameter
/// interval, which may lie behind the origin.
fn slab_intersect(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let mut ta = (lo[a] - origin[a]) * inv;
        let mut tb = (hi[a] - origin[a]) * inv;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::look_at_rotation;
    use approx::assert_relative_eq;

    fn unit_cube_points() -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    pts.push(Vector3::new(x, y, z));
                }
            }
        }
        pts
    }

    #[test]
    fn init_sizes_cube_exactly() {
        let vol = init_volume(&unit_cube_points(), 0.05, 64, 0.01).unwrap();
        assert_eq!(vol.dims, [64, 64, 64]);
        let expected_voxel = 1.1 / 64.0;
        assert_relative_eq!(vol.voxel_size, expected_voxel, epsilon = 1e-12);
        // Origin addresses voxel centers: box corner plus half a voxel.
        for a in 0..3 {
            assert_relative_eq!(vol.origin[a], -0.05 + expected_voxel / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn init_single_point_becomes_padding_cube() {
        let vol = init_volume(&[Vector3::new(0.3, 0.3, 0.3)], 0.05, 16, 0.01).unwrap();
        assert_eq!(vol.dims, [16, 16, 16]);
        assert_relative_eq!(vol.voxel_size, 0.1 / 16.0, epsilon = 1e-12);
    }

    #[test]
    fn init_rejects_bad_inputs() {
        assert!(matches!(init_volume(&[], 0.05, 64, 0.01), Err(VolumeError::EmptyPointCloud)));
        let p = [Vector3::zeros()];
        assert!(matches!(init_volume(&p, 0.05, 1, 0.01), Err(VolumeError::BadResolution(1))));
        assert!(matches!(init_volume(&p, 0.05, 64, 0.0), Err(VolumeError::BadTruncation(_))));
    }

    /// Camera at the origin looking down +z; a fronto-parallel plane of depth
    /// `d` filling the mask.
    fn plane_frame(k: &Intrinsics, d: f32) -> Frame {
        Frame {
            color: ColorImage::new(k.width, k.height, [0.5; 3]),
            depth: DepthImage::new(k.width, k.height, d),
            mask: MaskImage::new(k.width, k.height, true),
        }
    }

    fn small_k() -> Intrinsics {
        Intrinsics::new(80.0, 80.0, 40.0, 30.0, 80, 60)
    }

    #[test]
    fn plane_band_carve_and_occlusion() {
        let k = small_k();
        let trunc = 0.01;
        // Points spanning depth 0.4..0.6 around the plane at z = 0.5.
        let pts =
            vec![Vector3::new(-0.1, -0.1, 0.4), Vector3::new(0.1, 0.1, 0.6)];
        let mut vol = init_volume(&pts, 0.02, 48, trunc).unwrap();
        let frame = plane_frame(&k, 0.5);
        let stats = vol.integrate_frame(&frame, &Pose::identity(), &k).unwrap();
        assert!(stats.band_updates > 0);

        let probe = |vol: &TsdfVolume, z: f64| -> (f64, f32) {
            // Voxel closest to (0, 0, z).
            let g = (Vector3::new(0.0, 0.0, z) - vol.origin) / vol.voxel_size;
            let (xi, yi, zi) =
                (g.x.round() as usize, g.y.round() as usize, g.z.round() as usize);
            let v = &vol.voxels[vol.voxel_index(xi, yi, zi)];
            let center = vol.voxel_center(xi, yi, zi);
            // Report the exact expected sdf for the probed voxel center.
            (0.5 - center.z, v.tsdf)
        };

        // On-surface voxel: tsdf ~ its own (sub-voxel) offset from the plane.
        let (sdf, tsdf) = probe(&vol, 0.5);
        assert!((tsdf as f64 - (sdf / trunc).clamp(-1.0, 1.0)).abs() < 1e-5);
        // Far in front: carved free space.
        let (_, tsdf_front) = probe(&vol, 0.5 - 2.0 * trunc);
        assert_eq!(tsdf_front, 1.0);
        // Far behind: untouched (weight stays zero).
        let g = (Vector3::new(0.0, 0.0, 0.5 + 2.0 * trunc) - vol.origin) / vol.voxel_size;
        let idx = vol.voxel_index(
            g.x.round() as usize,
            g.y.round() as usize,
            g.z.round() as usize,
        );
        assert_eq!(vol.voxels[idx].weight, 0.0);
    }

    #[test]
    fn fusion_is_order_insensitive() {
        let k = small_k();
        let pts = vec![Vector3::new(-0.1, -0.1, 0.4), Vector3::new(0.1, 0.1, 0.6)];
        let a_frame = plane_frame(&k, 0.5);
        let b_frame = plane_frame(&k, 0.52);

        let mut ab = init_volume(&pts, 0.02, 32, 0.01).unwrap();
        ab.integrate_frame(&a_frame, &Pose::identity(), &k).unwrap();
        ab.integrate_frame(&b_frame, &Pose::identity(), &k).unwrap();

        let mut ba = init_volume(&pts, 0.02, 32, 0.01).unwrap();
        ba.integrate_frame(&b_frame, &Pose::identity(), &k).unwrap();
        ba.integrate_frame(&a_frame, &Pose::identity(), &k).unwrap();

        let max_diff = ab
            .voxels
            .iter()
            .zip(&ba.voxels)
            .map(|(x, y)| (x.tsdf - y.tsdf).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff < 1e-5, "order changed fusion by {max_diff}");
    }

    #[test]
    fn empty_volume_has_no_mesh() {
        let vol = init_volume(&[Vector3::zeros()], 0.05, 16, 0.01).unwrap();
        assert!(matches!(vol.extract_mesh(), Err(VolumeError::EmptyMesh)));
    }

    #[test]
    fn density_bell_shape() {
        assert_relative_eq!(surface_density(300.0, 0.0), 0.25, epsilon = 1e-12);
        for d in [0.001, 0.004, 0.01] {
            assert_relative_eq!(
                surface_density(300.0, d),
                surface_density(300.0, -d),
                epsilon = 1e-12
            );
        }
        assert!(surface_density(300.0, 0.002) > surface_density(300.0, 0.006));
    }

    /// Fuses analytic depth maps of a sphere from several views and checks
    /// the extracted surface against the analytic radius.
    #[test]
    fn sphere_fusion_extraction_accuracy() {
        let k = Intrinsics::new(160.0, 160.0, 80.0, 60.0, 160, 120);
        let radius = 0.08;
        let center = Vector3::new(0.0, 0.0, 0.0);
        let cam_dist = 0.45;
        let dirs = crate::geom::icosphere(0).unwrap().vertices;

        // Bounds from back-projected masked points of the first view.
        let mut vol = init_volume(
            &[
                center + Vector3::from_element(radius),
                center - Vector3::from_element(radius),
            ],
            0.04,
            96,
            0.01,
        )
        .unwrap();

        for dir in &dirs {
            let eye = center + dir * cam_dist;
            let rot = look_at_rotation(&eye, &center);
            let pose = Pose::new(rot, -(rot * eye));
            let (depth, mask) = crate::synth::sphere_depth_map(&k, &pose, &center, radius);
            let frame = Frame {
                color: ColorImage::new(k.width, k.height, [0.6, 0.4, 0.2]),
                depth,
                mask,
            };
            vol.integrate_frame(&frame, &pose, &k).unwrap();
        }

        let mesh = vol.extract_mesh().unwrap();
        assert!(!mesh.is_empty());
        let within = mesh
            .vertices
            .iter()
            .filter(|v| ((*v - center).norm() - radius).abs() <= 1.5 * vol.voxel_size)
            .count();
        let frac = within as f64 / mesh.vertices.len() as f64;
        assert!(frac >= 0.95, "only {frac:.3} of vertices near the sphere");

        // Full coverage must close the surface: every edge borders two faces.
        let mut edge_counts: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &mesh.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                *edge_counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        let open = edge_counts.values().filter(|&&c| c != 2).count();
        assert_eq!(open, 0, "{open} non-manifold edges");

        // Winding / gradient agreement: gradient normals must point outward.
        let normals = vol.vertex_normals_from_gradient(&mesh);
        let outward = mesh
            .vertices
            .iter()
            .zip(&normals)
            .filter(|(v, n)| n.dot(&(*v - center)) > 0.0)
            .count();
        assert!(outward as f64 / mesh.vertices.len() as f64 > 0.99);
    }

    #[test]
    fn raycast_matches_analytic_sphere() {
        let k = Intrinsics::new(120.0, 120.0, 60.0, 45.0, 120, 90);
        let radius = 0.08;
        let center = Vector3::new(0.0, 0.0, 0.0);
        let cam_dist = 0.4;
        let dirs = crate::geom::icosphere(0).unwrap().vertices;
        let mut vol = init_volume(
            &[
                center + Vector3::from_element(radius),
                center - Vector3::from_element(radius),
            ],
            0.03,
            96,
            0.01,
        )
        .unwrap();
        let mut poses = Vec::new();
        for dir in &dirs {
            let eye = center + dir * cam_dist;
            let rot = look_at_rotation(&eye, &center);
            let pose = Pose::new(rot, -(rot * eye));
            let (depth, mask) = crate::synth::sphere_depth_map(&k, &pose, &center, radius);
            let frame =
                Frame { color: ColorImage::new(k.width, k.height, [0.5; 3]), depth, mask };
            vol.integrate_frame(&frame, &pose, &k).unwrap();
            poses.push(pose);
        }

        let cfg = RaycastConfig::for_volume(&vol, 300.0);
        let out = raycast_render(&vol, &poses[0], &k, &cfg, None);
        let (gt_depth, gt_mask) = crate::synth::sphere_depth_map(&k, &poses[0], &center, radius);

        let mut ok = 0usize;
        let mut total = 0usize;
        for py in 0..k.height {
            for px in 0..k.width {
                if *gt_mask.get(px, py) && *out.mask.get(px, py) {
                    total += 1;
                    let err = (*out.depth.get(px, py) - *gt_depth.get(px, py)).abs();
                    if err <= 0.002 {
                        ok += 1;
                    }
                }
            }
        }
        assert!(total > 500, "raycast barely hit the sphere ({total} px)");
        let frac = ok as f64 / total as f64;
        assert!(frac >= 0.95, "only {frac:.3} of pixels within 2 mm");
        // Coverage agreement between analytic and rendered silhouettes.
        let iou = out.mask.iou(&gt_mask).unwrap();
        assert!(iou > 0.9, "silhouette IoU {iou:.3}");
    }

    #[test]
    fn guided_raycast_agrees_with_unguided() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 40.0, 100, 80);
        let radius = 0.07;
        let center = Vector3::zeros();
        let eye = Vector3::new(0.0, 0.0, -0.35);
        let rot = look_at_rotation(&eye, &center);
        let pose = Pose::new(rot, -(rot * eye));
        let mut vol = init_volume(
            &[center + Vector3::from_element(radius), center - Vector3::from_element(radius)],
            0.03,
            64,
            0.01,
        )
        .unwrap();
        let (depth, mask) = crate::synth::sphere_depth_map(&k, &pose, &center, radius);
        let frame = Frame { color: ColorImage::new(k.width, k.height, [0.5; 3]), depth: depth.clone(), mask };
        vol.integrate_frame(&frame, &pose, &k).unwrap();

        let cfg = RaycastConfig::for_volume(&vol, 300.0);
        let free = raycast_render(&vol, &pose, &k, &cfg, None);
        let guided = raycast_render(&vol, &pose, &k, &cfg, Some(&depth));
        let mut diffs = 0usize;
        let mut compared = 0usize;
        for py in 0..k.height {
            for px in 0..k.width {
                if *free.mask.get(px, py) && *guided.mask.get(px, py) {
                    compared += 1;
                    if (*free.depth.get(px, py) - *guided.depth.get(px, py)).abs() > 0.002 {
                        diffs += 1;
                    }
                }
            }
        }
        assert!(compared > 300);
        assert!((diffs as f64) < 0.05 * compared as f64);
    }
}
