//! Deterministic software rasterization and vertex visibility.
//!
//! The rasterizer is a plain z-buffered triangle scanner: perspective
//! projection, edge-function coverage at pixel centers, perspective-correct
//! color interpolation, strict depth test. Triangles are never culled by
//! winding — extracted meshes can contain either orientation.
//!
//! Parallelism is over horizontal bands of [`BAND_ROWS`] rows. Every band
//! processes its triangles in ascending face order with a strict `<` depth
//! test, so coincident depths resolve to the lowest face index and the output
//! is bit-identical however the bands are scheduled (or whether the `parallel`
//! feature is enabled at all).

use crate::geom::{GeomError, Intrinsics, Pose};
use crate::img::{ColorImage, DepthImage, MaskImage};
use crate::mesh::TriangleMesh;
use crate::model::HybridModel;
use crate::par;
use thiserror::Error;

/// Rows per rasterization band.
pub const BAND_ROWS: usize = 16;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("cannot render an empty mesh")]
    EmptyMesh,
    #[error("uncertainty labels ({0}) do not match vertex count ({1})")]
    LabelMismatch(usize, usize),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Images produced by one rasterization pass. `mask` marks covered pixels;
/// `uncertainty` marks covered pixels whose triangle has at least two
/// uncertain vertices (always false when no labels were supplied).
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: ColorImage,
    pub depth: DepthImage,
    pub mask: MaskImage,
    pub uncertainty: MaskImage,
}

#[derive(Clone, Copy)]
struct FaceSetup {
    // Projected vertices: (u, v, z).
    a: (f64, f64, f64),
    b: (f64, f64, f64),
    c: (f64, f64, f64),
    idx: [u32; 3],
    uncertain: bool,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

/// Renders a labeled model. See [`rasterize_mesh`].
pub fn rasterize(
    model: &HybridModel,
    pose: &Pose,
    k: &Intrinsics,
) -> Result<RenderOutput, RasterError> {
    rasterize_mesh(&model.mesh, Some(&model.uncertain), pose, k)
}

/// Renders `mesh` from `pose` (object-to-camera) under intrinsics `k`.
///
/// Triangles with any vertex at or behind the camera plane are skipped rather
/// than clipped; the near-field clip is irrelevant for outside-in object
/// viewing. Pixels keep the strictly nearest triangle; depth ties keep the
/// lowest face index.
pub fn rasterize_mesh(
    mesh: &TriangleMesh,
    labels: Option<&[bool]>,
    pose: &Pose,
    k: &Intrinsics,
) -> Result<RenderOutput, RasterError> {
    if mesh.is_empty() {
        return Err(RasterError::EmptyMesh);
    }
    k.validate()?;
    if let Some(l) = labels {
        if l.len() != mesh.vertices.len() {
            return Err(RasterError::LabelMismatch(l.len(), mesh.vertices.len()));
        }
    }

    let proj: Vec<Option<(f64, f64, f64)>> = par::map_slice(&mesh.vertices, |v| {
        let p = pose.transform_point(v);
        (p.z > 1e-9).then(|| (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy, p.z))
    });

    let setups: Vec<Option<FaceSetup>> = par::map_slice(&mesh.faces, |f| {
        let a = proj[f[0] as usize]?;
        let b = proj[f[1] as usize]?;
        let c = proj[f[2] as usize]?;
        let area2 = edge_fn(a.0, a.1, b.0, b.1, c.0, c.1);
        if area2.abs() < 1e-12 {
            return None;
        }
        let u_lo = a.0.min(b.0).min(c.0);
        let u_hi = a.0.max(b.0).max(c.0);
        let v_lo = a.1.min(b.1).min(c.1);
        let v_hi = a.1.max(b.1).max(c.1);
        if u_hi < 0.0 || v_hi < 0.0 || u_lo >= k.width as f64 || v_lo >= k.height as f64 {
            return None;
        }
        // Conservative pixel bounds: a pixel is touched only if its center
        // can fall inside, so round the box to center coordinates.
        let x0 = (u_lo - 0.5).max(0.0) as usize;
        let x1 = ((u_hi - 0.5).ceil().max(0.0) as usize).min(k.width - 1);
        let y0 = (v_lo - 0.5).max(0.0) as usize;
        let y1 = ((v_hi - 0.5).ceil().max(0.0) as usize).min(k.height - 1);
        let uncertain = labels
            .map(|l| {
                let n = usize::from(l[f[0] as usize])
                    + usize::from(l[f[1] as usize])
                    + usize::from(l[f[2] as usize]);
                n >= 2
            })
            .unwrap_or(false);
        Some(FaceSetup { a, b, c, idx: *f, uncertain, x0, x1, y0, y1 })
    });

    let n_bands = k.height.div_ceil(BAND_ROWS);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); n_bands];
    for (fi, s) in setups.iter().enumerate() {
        if let Some(s) = s {
            for band in (s.y0 / BAND_ROWS)..=(s.y1 / BAND_ROWS) {
                bins[band].push(fi as u32);
            }
        }
    }

    struct BandBuf {
        depth: Vec<f32>,
        color: Vec<[f32; 3]>,
        uncertain: Vec<bool>,
    }

    let bands: Vec<BandBuf> = par::map_indexed(n_bands, |bi| {
        let y_start = bi * BAND_ROWS;
        let y_end = (y_start + BAND_ROWS).min(k.height);
        let rows = y_end - y_start;
        let mut buf = BandBuf {
            depth: vec![f32::INFINITY; rows * k.width],
            color: vec![[0.0; 3]; rows * k.width],
            uncertain: vec![false; rows * k.width],
        };
        for &fi in &bins[bi] {
            let s = setups[fi as usize].as_ref().expect("binned faces are set up");
            let (ia, ib, ic) =
                (s.idx[0] as usize, s.idx[1] as usize, s.idx[2] as usize);
            let (ca, cb, cc) = (mesh.colors[ia], mesh.colors[ib], mesh.colors[ic]);
            let area2 = edge_fn(s.a.0, s.a.1, s.b.0, s.b.1, s.c.0, s.c.1);
            let inv_area = 1.0 / area2;
            for y in s.y0.max(y_start)..=s.y1.min(y_end - 1) {
                let vy = y as f64 + 0.5;
                let row = (y - y_start) * k.width;
                for x in s.x0..=s.x1 {
                    let vx = x as f64 + 0.5;
                    let w0 = edge_fn(s.b.0, s.b.1, s.c.0, s.c.1, vx, vy);
                    let w1 = edge_fn(s.c.0, s.c.1, s.a.0, s.a.1, vx, vy);
                    let w2 = edge_fn(s.a.0, s.a.1, s.b.0, s.b.1, vx, vy);
                    let covered = (w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0)
                        || (w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0);
                    if !covered {
                        continue;
                    }
                    let l0 = w0 * inv_area;
                    let l1 = w1 * inv_area;
                    let l2 = w2 * inv_area;
                    // 1/z interpolates linearly in screen space.
                    let inv_z = l0 / s.a.2 + l1 / s.b.2 + l2 / s.c.2;
                    if inv_z <= 0.0 {
                        continue;
                    }
                    let z = (1.0 / inv_z) as f32;
                    let at = row + x;
                    if z < buf.depth[at] {
                        buf.depth[at] = z;
                        let zf = 1.0 / inv_z;
                        for ch in 0..3 {
                            buf.color[at][ch] = (zf
                                * (l0 * ca[ch] as f64 / s.a.2
                                    + l1 * cb[ch] as f64 / s.b.2
                                    + l2 * cc[ch] as f64 / s.c.2))
                                as f32;
                        }
                        buf.uncertain[at] = s.uncertain;
                    }
                }
            }
        }
        buf
    });

    let mut color = ColorImage::new(k.width, k.height, [0.0; 3]);
    let mut depth = DepthImage::new(k.width, k.height, 0.0);
    let mut mask = MaskImage::new(k.width, k.height, false);
    let mut uncertainty = MaskImage::new(k.width, k.height, false);
    for (bi, buf) in bands.into_iter().enumerate() {
        let y_start = bi * BAND_ROWS;
        for (i, d) in buf.depth.iter().enumerate() {
            if d.is_finite() {
                let y = y_start + i / k.width;
                let x = i % k.width;
                depth.set(x, y, *d);
                color.set(x, y, buf.color[i]);
                mask.set(x, y, true);
                uncertainty.set(x, y, buf.uncertain[i]);
            }
        }
    }
    Ok(RenderOutput { color, depth, mask, uncertainty })
}

#[inline]
fn edge_fn(x0: f64, y0: f64, x1: f64, y1: f64, px: f64, py: f64) -> f64 {
    (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
}

/// Marks every vertex that is visible from `pose`: it projects into the
/// image, survives the depth buffer within `eps` meters, and (when a
/// reference mask is given) lands on a masked pixel.
///
/// The depth test scans the 5x5 pixel neighborhood of the projection and
/// passes if *any* covered depth there is no more than `eps` in front of the
/// vertex. The depth buffer is sampled at pixel centers, so the single
/// containing pixel can sit a half-pixel away along a slanted surface (an
/// error proportional to the depth slope, unbounded near silhouettes) or be
/// uncovered entirely at a sharp corner; a neighbor on the far side of the
/// vertex bounds its depth from above instead. Occluded vertices still fail
/// everywhere in the window — the nearest surface in front of them beats
/// them by far more than a few pixels of slope. `eps` then only needs to
/// absorb the voxel-scale offset between an extracted vertex and the fused
/// surface.
pub fn vertex_visibility(
    mesh: &TriangleMesh,
    pose: &Pose,
    k: &Intrinsics,
    reference_mask: Option<&MaskImage>,
    eps: f64,
) -> Result<Vec<bool>, RasterError> {
    let render = rasterize_mesh(mesh, None, pose, k)?;
    Ok(par::map_slice(&mesh.vertices, |v| {
        let p = pose.transform_point(v);
        if p.z <= 0.0 {
            return false;
        }
        let u = k.fx * p.x / p.z + k.cx;
        let vv = k.fy * p.y / p.z + k.cy;
        let Some((px, py)) = k.pixel_of(u, vv) else { return false };
        if let Some(m) = reference_mask {
            if !*m.get(px, py) {
                return false;
            }
        }
        let x_lo = px.saturating_sub(2);
        let y_lo = py.saturating_sub(2);
        for y in y_lo..=(py + 2).min(k.height - 1) {
            for x in x_lo..=(px + 2).min(k.width - 1) {
                let d = *render.depth.get(x, y) as f64;
                if d > 0.0 && p.z - d <= eps {
                    return true;
                }
            }
        }
        false
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::look_at_rotation;
    use nalgebra::Vector3;

    fn k_small() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 40.0, 100, 80)
    }

    /// One triangle parallel to the image plane at z = 2.
    fn flat_tri() -> TriangleMesh {
        TriangleMesh {
            vertices: vec![
                Vector3::new(-0.5, -0.4, 2.0),
                Vector3::new(0.5, -0.4, 2.0),
                Vector3::new(0.0, 0.6, 2.0),
            ],
            colors: vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            faces: vec![[0, 1, 2]],
        }
    }

    #[test]
    fn covers_expected_pixels_at_expected_depth() {
        let k = k_small();
        let out = rasterize_mesh(&flat_tri(), None, &Pose::identity(), &k).unwrap();
        // Centroid projects to (50, 36.67); must be covered at depth 2.
        assert!(*out.mask.get(50, 36));
        assert!((*out.depth.get(50, 36) - 2.0).abs() < 1e-6);
        // Colors at the centroid blend all three vertices.
        let c = out.color.get(50, 36);
        assert!(c.iter().all(|&ch| ch > 0.1));
        // Far corner: background.
        assert!(!*out.mask.get(0, 0));
        assert_eq!(*out.depth.get(0, 0), 0.0);
        // Coverage roughly matches the projected triangle area: at z = 2 the
        // 1.0 x 1.0 extents project to 50 x 50 px -> ~1250 px².
        let n = out.mask.count() as f64;
        assert!((n - 1250.0).abs() < 100.0, "coverage {n}");
    }

    #[test]
    fn winding_does_not_matter() {
        let k = k_small();
        let mut rev = flat_tri();
        rev.faces[0] = [2, 1, 0];
        let a = rasterize_mesh(&flat_tri(), None, &Pose::identity(), &k).unwrap();
        let b = rasterize_mesh(&rev, None, &Pose::identity(), &k).unwrap();
        assert_eq!(a.mask.data(), b.mask.data());
        assert_eq!(a.depth.data(), b.depth.data());
    }

    #[test]
    fn nearer_triangle_wins_and_ties_keep_first() {
        let k = k_small();
        let mut mesh = flat_tri();
        // Same triangle again, closer, uniform white.
        mesh.vertices.extend([
            Vector3::new(-0.25, -0.2, 1.0),
            Vector3::new(0.25, -0.2, 1.0),
            Vector3::new(0.0, 0.3, 1.0),
        ]);
        mesh.colors.extend([[1.0; 3], [1.0; 3], [1.0; 3]]);
        mesh.faces.push([3, 4, 5]);
        let out = rasterize_mesh(&mesh, None, &Pose::identity(), &k).unwrap();
        assert!((*out.depth.get(50, 36) - 1.0).abs() < 1e-6);

        // Exact duplicate of face 0 with different color: face 0 must keep
        // every pixel (strict depth test, ascending face order).
        let mut dup = flat_tri();
        dup.vertices.extend(flat_tri().vertices);
        dup.colors.extend([[1.0; 3], [1.0; 3], [1.0; 3]]);
        dup.faces.push([3, 4, 5]);
        let out = rasterize_mesh(&dup, None, &Pose::identity(), &k).unwrap();
        let c = out.color.get(50, 36);
        assert!(c[0] < 0.99 || c[1] < 0.99 || c[2] < 0.99, "duplicate face stole the pixel");
    }

    #[test]
    fn depth_is_perspective_correct_on_slanted_plane() {
        let k = k_small();
        // A big slanted triangle: depth varies with y.
        let mesh = TriangleMesh {
            vertices: vec![
                Vector3::new(-2.0, -1.5, 2.0),
                Vector3::new(2.0, -1.5, 2.0),
                Vector3::new(0.0, 2.0, 4.0),
            ],
            colors: vec![[0.5; 3]; 3],
            faces: vec![[0, 1, 2]],
        };
        let out = rasterize_mesh(&mesh, None, &Pose::identity(), &k).unwrap();
        // Check a handful of covered pixels against exact ray-plane hits.
        let (p0, p1, p2) = (mesh.vertices[0], mesh.vertices[1], mesh.vertices[2]);
        let n = (p1 - p0).cross(&(p2 - p0));
        let d0 = n.dot(&p0);
        let mut checked = 0;
        for (px, py) in [(50, 40), (45, 30), (60, 50), (50, 60)] {
            if !*out.mask.get(px, py) {
                continue;
            }
            let dir = k.back_project(px as f64 + 0.5, py as f64 + 0.5, 1.0);
            let t = d0 / n.dot(&dir);
            let analytic_z = t; // dir.z == 1
            assert!(
                (*out.depth.get(px, py) as f64 - analytic_z).abs() < 1e-5,
                "pixel ({px},{py})"
            );
            checked += 1;
        }
        assert!(checked >= 3);
    }

    #[test]
    fn behind_camera_faces_are_skipped() {
        let k = k_small();
        let mut mesh = flat_tri();
        mesh.vertices[0].z = -0.5;
        let out = rasterize_mesh(&mesh, None, &Pose::identity(), &k).unwrap();
        assert_eq!(out.mask.count(), 0);
    }

    #[test]
    fn face_uncertainty_needs_two_vertices() {
        let k = k_small();
        let mesh = flat_tri();
        let one = rasterize_mesh(&mesh, Some(&[true, false, false]), &Pose::identity(), &k)
            .unwrap();
        assert_eq!(one.uncertainty.count(), 0);
        let two = rasterize_mesh(&mesh, Some(&[true, true, false]), &Pose::identity(), &k)
            .unwrap();
        assert_eq!(two.uncertainty.count(), two.mask.count());
    }

    #[test]
    fn rejects_bad_inputs() {
        let k = k_small();
        let empty = TriangleMesh { vertices: vec![], colors: vec![], faces: vec![] };
        assert!(matches!(
            rasterize_mesh(&empty, None, &Pose::identity(), &k),
            Err(RasterError::EmptyMesh)
        ));
        assert!(matches!(
            rasterize_mesh(&flat_tri(), Some(&[true]), &Pose::identity(), &k),
            Err(RasterError::LabelMismatch(1, 3))
        ));
    }

    #[test]
    fn repeated_renders_are_bit_identical() {
        let k = k_small();
        let mesh = crate::synth::icosphere_mesh(0.5, 2).unwrap();
        let eye = Vector3::new(0.3, 0.2, -2.0);
        let rot = look_at_rotation(&eye, &Vector3::zeros());
        let pose = Pose::new(rot, -(rot * eye));
        let a = rasterize_mesh(&mesh, None, &pose, &k).unwrap();
        let b = rasterize_mesh(&mesh, None, &pose, &k).unwrap();
        assert_eq!(a.depth.data(), b.depth.data());
        assert_eq!(a.color.data(), b.color.data());
    }

    #[test]
    fn visibility_separates_front_from_back() {
        let k = k_small();
        let mesh = crate::synth::icosphere_mesh(0.4, 2).unwrap();
        // Camera on -z looking at the origin: vertices with z < 0 face it.
        let eye = Vector3::new(0.0, 0.0, -2.0);
        let rot = look_at_rotation(&eye, &Vector3::zeros());
        let pose = Pose::new(rot, -(rot * eye));
        let vis = vertex_visibility(&mesh, &pose, &k, None, 1e-4).unwrap();
        let mut front_vis = 0;
        let mut front = 0;
        let mut back_vis = 0;
        let mut back = 0;
        for (v, &seen) in mesh.vertices.iter().zip(&vis) {
            if v.z < -0.1 {
                front += 1;
                front_vis += usize::from(seen);
            } else if v.z > 0.1 {
                back += 1;
                back_vis += usize::from(seen);
            }
        }
        assert!(front_vis as f64 > 0.9 * front as f64, "{front_vis}/{front} front visible");
        assert!(back_vis == 0, "{back_vis}/{back} back vertices leaked through");
    }

    #[test]
    fn visibility_respects_reference_mask() {
        let k = k_small();
        let mesh = flat_tri();
        let all = vertex_visibility(&mesh, &Pose::identity(), &k, None, 1e-4).unwrap();
        assert_eq!(all, vec![true, true, true]);
        let none = MaskImage::new(k.width, k.height, false);
        let masked = vertex_visibility(&mesh, &Pose::identity(), &k, Some(&none), 1e-4).unwrap();
        assert_eq!(masked, vec![false, false, false]);
    }
}
