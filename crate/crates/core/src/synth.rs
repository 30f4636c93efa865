//! Synthetic scenes: textured primitives, camera trajectories, and RGBD
//! sequence rendering with optional occlusion and depth noise.
//!
//! Everything here is deterministic given the scene seed, so tests and
//! benchmarks can regenerate identical sequences on any machine.

use crate::geom::{self, GeomError, Intrinsics, Pose};
use crate::img::{DepthImage, Frame, MaskImage};
use crate::mesh::TriangleMesh;
use crate::model::{RefFrame, ReferenceSet};
use crate::raster::{rasterize_mesh, RasterError};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{0}")]
    BadParams(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

/// Axis-aligned box centered at the origin with `subdiv` cells per face edge.
/// Each face carries a distinct base tint with a checker brightness pattern,
/// giving the photometric term something to lock onto. Face grids do not
/// share vertices, so colors stay crisp across edges.
pub fn box_mesh(extents: Vector3<f64>, subdiv: usize) -> Result<TriangleMesh, SynthError> {
    if !(extents.min() > 0.0) || subdiv == 0 {
        return Err(SynthError::BadParams(format!(
            "box needs positive extents and subdiv >= 1 (got {extents:?}, {subdiv})"
        )));
    }
    let tints: [[f32; 3]; 6] = [
        [0.9, 0.2, 0.2],
        [0.2, 0.9, 0.2],
        [0.2, 0.3, 0.9],
        [0.9, 0.8, 0.2],
        [0.8, 0.3, 0.8],
        [0.2, 0.8, 0.8],
    ];
    let half = extents / 2.0;
    let mut mesh = TriangleMesh { vertices: vec![], colors: vec![], faces: vec![] };
    let mut face_id = 0usize;
    for axis in 0..3 {
        let ua = (axis + 1) % 3;
        let va = (axis + 2) % 3;
        for sign in [-1.0f64, 1.0] {
            let base = mesh.vertices.len() as u32;
            let n = subdiv + 1;
            for j in 0..n {
                for i in 0..n {
                    let fu = i as f64 / subdiv as f64;
                    let fv = j as f64 / subdiv as f64;
                    let mut p = Vector3::zeros();
                    p[axis] = sign * half[axis];
                    p[ua] = (fu - 0.5) * extents[ua];
                    p[va] = (fv - 0.5) * extents[va];
                    mesh.vertices.push(p);
                    let checker = (i + j) % 2;
                    let b = if checker == 0 { 0.45 } else { 1.0 };
                    let t = tints[face_id];
                    mesh.colors.push([t[0] * b, t[1] * b, t[2] * b]);
                }
            }
            for j in 0..subdiv {
                for i in 0..subdiv {
                    let a = base + (j * n + i) as u32;
                    let b = a + 1;
                    let c = a + n as u32;
                    let d = c + 1;
                    mesh.faces.push([a, b, d]);
                    mesh.faces.push([a, d, c]);
                }
            }
            face_id += 1;
        }
    }
    Ok(mesh)
}

/// Unit-sphere subdivision scaled to `radius`, colored by surface direction
/// so every hemisphere looks different.
pub fn icosphere_mesh(radius: f64, level: usize) -> Result<TriangleMesh, SynthError> {
    if radius <= 0.0 {
        return Err(SynthError::BadParams(format!("radius must be positive (got {radius})")));
    }
    let geo = geom::icosphere(level)?;
    let colors = geo
        .vertices
        .iter()
        .map(|v| {
            [
                (0.5 + 0.5 * v.x) as f32,
                (0.5 + 0.5 * v.y) as f32,
                (0.5 + 0.5 * v.z) as f32,
            ]
        })
        .collect();
    Ok(TriangleMesh {
        vertices: geo.vertices.into_iter().map(|v| v * radius).collect(),
        colors,
        faces: geo.faces,
    })
}

/// Closed cylinder along the y axis, centered at the origin. Colors form a
/// pure height gradient, so the appearance (like the shape) is invariant to
/// rotation about the axis — handy for exercising symmetry-aware metrics.
pub fn cylinder_mesh(
    radius: f64,
    height: f64,
    radial_segments: usize,
    height_segments: usize,
) -> Result<TriangleMesh, SynthError> {
    if radius <= 0.0 || height <= 0.0 || radial_segments < 3 || height_segments < 1 {
        return Err(SynthError::BadParams(format!(
            "cylinder needs radius > 0, height > 0, >= 3 radial and >= 1 height segments \
             (got {radius}, {height}, {radial_segments}, {height_segments})"
        )));
    }
    let mut mesh = TriangleMesh { vertices: vec![], colors: vec![], faces: vec![] };
    let color_at = |t: f64| -> [f32; 3] {
        [(0.2 + 0.6 * t) as f32, 0.45, (0.8 - 0.6 * t) as f32]
    };
    let nr = radial_segments as u32;
    // Side rings (shared seam vertex via modular indexing).
    for j in 0..=height_segments {
        let t = j as f64 / height_segments as f64;
        let y = (t - 0.5) * height;
        for i in 0..radial_segments {
            let a = 2.0 * std::f64::consts::PI * i as f64 / radial_segments as f64;
            mesh.vertices.push(Vector3::new(radius * a.cos(), y, radius * a.sin()));
            mesh.colors.push(color_at(t));
        }
    }
    for j in 0..height_segments as u32 {
        for i in 0..nr {
            let a = j * nr + i;
            let b = j * nr + (i + 1) % nr;
            let c = a + nr;
            let d = b + nr;
            mesh.faces.push([a, b, d]);
            mesh.faces.push([a, d, c]);
        }
    }
    // Caps.
    for (ring_j, t) in [(0usize, 0.0f64), (height_segments, 1.0)] {
        let center = mesh.vertices.len() as u32;
        mesh.vertices.push(Vector3::new(0.0, (t - 0.5) * height, 0.0));
        mesh.colors.push(color_at(t));
        let ring_base = (ring_j as u32) * nr;
        for i in 0..nr {
            mesh.faces.push([center, ring_base + i, ring_base + (i + 1) % nr]);
        }
    }
    Ok(mesh)
}

// ---------------------------------------------------------------------------
// Analytic depth
// ---------------------------------------------------------------------------

/// Exact depth map of a sphere (center given in the object frame, observed
/// through `pose`). Used as ground truth when validating fusion and
/// raycasting, since it has no rasterization error at silhouettes.
pub fn sphere_depth_map(
    k: &Intrinsics,
    pose: &Pose,
    center_obj: &Vector3<f64>,
    radius: f64,
) -> (DepthImage, MaskImage) {
    let c = pose.transform_point(center_obj);
    let mut depth = DepthImage::new(k.width, k.height, 0.0);
    let mut mask = MaskImage::new(k.width, k.height, false);
    let cc = c.dot(&c);
    for py in 0..k.height {
        for px in 0..k.width {
            let d = k
                .back_project(px as f64 + 0.5, py as f64 + 0.5, 1.0)
                .normalize();
            let dc = d.dot(&c);
            let disc = dc * dc - (cc - radius * radius);
            if disc < 0.0 {
                continue;
            }
            let t = dc - disc.sqrt();
            if t <= 0.0 {
                continue;
            }
            depth.set(px, py, (t * d.z) as f32);
            mask.set(px, py, true);
        }
    }
    (depth, mask)
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Camera pose for an eye position looking at the origin-centered object.
fn camera_pose(eye: Vector3<f64>, target: Vector3<f64>) -> Pose {
    let rot = geom::look_at_rotation(&eye, &target);
    Pose::new(rot, -(rot * eye))
}

/// Object motion patterns. All poses are object-to-camera.
#[derive(Debug, Clone)]
pub enum Trajectory {
    /// Fixed camera at `distance` and `elevation_deg`; the object spins about
    /// its y axis by exactly `deg_per_frame` between consecutive frames.
    Turntable { frames: usize, deg_per_frame: f64, distance: f64, elevation_deg: f64 },
    /// Fixed camera; the object takes seeded random rotation steps of up to
    /// `max_step_deg` about random axes.
    Tumble { frames: usize, distance: f64, max_step_deg: f64, seed: u64 },
    /// Explicit pose list, used verbatim.
    Scripted(Vec<Pose>),
}

/// Expands a trajectory into per-frame object-to-camera poses.
pub fn trajectory_poses(t: &Trajectory) -> Vec<Pose> {
    match t {
        Trajectory::Turntable { frames, deg_per_frame, distance, elevation_deg } => {
            let el = elevation_deg.to_radians();
            let eye = Vector3::new(0.0, el.sin(), -el.cos()) * *distance;
            let cam = camera_pose(eye, Vector3::zeros());
            (0..*frames)
                .map(|i| {
                    let spin =
                        Pose::new(rot_y((i as f64) * deg_per_frame.to_radians()), Vector3::zeros());
                    cam.compose(&spin)
                })
                .collect()
        }
        Trajectory::Tumble { frames, distance, max_step_deg, seed } => {
            let cam = camera_pose(Vector3::new(0.0, 0.0, -*distance), Vector3::zeros());
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut r = Matrix3::identity();
            let mut out = Vec::with_capacity(*frames);
            for _ in 0..*frames {
                out.push(cam.compose(&Pose::new(r, Vector3::zeros())));
                let axis = loop {
                    let v = Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    );
                    let n = v.norm();
                    if n > 1e-3 {
                        break v / n;
                    }
                };
                let angle = rng.gen_range(0.3..1.0) * max_step_deg.to_radians();
                r = geom::orthonormalize(&(geom::exp_so3(&(axis * angle)) * r));
            }
            out
        }
        Trajectory::Scripted(poses) => poses.clone(),
    }
}

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

/// A static distractor placed in the camera frame (its pose is constant over
/// the sequence, like furniture in front of a sensor).
#[derive(Debug, Clone)]
pub struct Occluder {
    pub mesh: TriangleMesh,
    pub pose: Pose,
}

/// Fully specified synthetic sequence.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub mesh: TriangleMesh,
    /// Ground-truth object-to-camera pose per frame.
    pub poses: Vec<Pose>,
    pub k: Intrinsics,
    /// Std-dev of additive Gaussian depth noise, in meters.
    pub depth_sigma: f64,
    pub occluder: Option<Occluder>,
    pub seed: u64,
}

/// One rendered observation plus its ground truth.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub frame: Frame,
    pub gt_pose: Pose,
}

/// Renders frame `i` of the scene: object and occluder are depth-composited,
/// the mask keeps only pixels the object wins, and seeded Gaussian noise is
/// added to every valid depth sample. Each frame draws from its own RNG
/// stream, so rendering order (or rendering a single frame in isolation)
/// cannot change the result.
pub fn render_frame(scene: &SyntheticScene, i: usize) -> Result<RenderedFrame, SynthError> {
    let pose = scene
        .poses
        .get(i)
        .ok_or_else(|| SynthError::BadParams(format!("frame {i} out of range")))?;
    let obj = rasterize_mesh(&scene.mesh, None, pose, &scene.k)?;
    let (mut color, mut depth, mut mask) = (obj.color, obj.depth, obj.mask);
    if let Some(occ) = &scene.occluder {
        let o = rasterize_mesh(&occ.mesh, None, &occ.pose, &scene.k)?;
        for py in 0..scene.k.height {
            for px in 0..scene.k.width {
                let od = *o.depth.get(px, py);
                if od <= 0.0 {
                    continue;
                }
                let sd = *depth.get(px, py);
                if sd <= 0.0 || od < sd {
                    // Occluder owns the pixel.
                    depth.set(px, py, od);
                    color.set(px, py, *o.color.get(px, py));
                    mask.set(px, py, false);
                }
            }
        }
    }
    if scene.depth_sigma > 0.0 {
        let mut rng =
            ChaCha8Rng::seed_from_u64(scene.seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        for d in depth.data_mut() {
            if *d > 0.0 {
                *d += (scene.depth_sigma * gaussian(&mut rng)) as f32;
            }
        }
    }
    Ok(RenderedFrame { frame: Frame { color, depth, mask }, gt_pose: *pose })
}

/// Renders the whole sequence. Memory scales with frame count; callers that
/// stream to disk should use [`render_frame`] directly.
pub fn render_sequence(scene: &SyntheticScene) -> Result<Vec<RenderedFrame>, SynthError> {
    (0..scene.poses.len()).map(|i| render_frame(scene, i)).collect()
}

/// Standard-normal sample via Box–Muller.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Renders clean (noise-free, exactly posed) reference views of a mesh from
/// the given viewing directions, at `distance` from the mesh centroid.
pub fn reference_views_from_dirs(
    mesh: &TriangleMesh,
    k: &Intrinsics,
    dirs: &[Vector3<f64>],
    distance: f64,
) -> Result<ReferenceSet, SynthError> {
    if mesh.is_empty() {
        return Err(SynthError::BadParams("cannot render references of an empty mesh".into()));
    }
    let center = mesh.centroid();
    let mut frames = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let eye = center + dir.normalize() * distance;
        let pose = camera_pose(eye, center);
        let out = rasterize_mesh(mesh, None, &pose, k)?;
        frames.push(RefFrame {
            frame: Frame { color: out.color, depth: out.depth, mask: out.mask },
            pose,
            k: *k,
        });
    }
    Ok(ReferenceSet { frames })
}

/// Reference views from the first `count` vertices of an icosphere level,
/// at `distance_factor` times the mesh diameter.
pub fn icosphere_reference_views(
    mesh: &TriangleMesh,
    k: &Intrinsics,
    level: usize,
    count: usize,
    distance_factor: f64,
) -> Result<ReferenceSet, SynthError> {
    let geo = geom::icosphere(level)?;
    if count == 0 || count > geo.vertices.len() {
        return Err(SynthError::BadParams(format!(
            "count {count} out of range for icosphere level {level}"
        )));
    }
    let distance = distance_factor * mesh.diameter_subsampled(2000);
    reference_views_from_dirs(mesh, k, &geo.vertices[..count], distance)
}

// ---------------------------------------------------------------------------
// Declarative scene specs (CLI input)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectSpec {
    Box { extents: [f64; 3], subdiv: usize },
    Sphere { radius: f64, level: usize },
    Cylinder { radius: f64, height: f64, radial_segments: usize, height_segments: usize },
    /// A mesh file (PLY or OBJ) to load. Resolved by the caller, which owns
    /// file access; [`object_mesh`] rejects this variant.
    Mesh { path: String },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectorySpec {
    Turntable { frames: usize, deg_per_frame: f64, distance: f64, elevation_deg: f64 },
    Tumble { frames: usize, distance: f64, max_step_deg: f64 },
    /// Explicit object-to-camera poses, 4x4 row-major.
    Scripted { poses: Vec<[f64; 16]> },
}

/// A fronto-parallel rectangular panel in the camera frame.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OccluderSpec {
    pub width: f64,
    pub height: f64,
    pub distance: f64,
    #[serde(default)]
    pub offset_x: f64,
    #[serde(default)]
    pub offset_y: f64,
}

/// Reference captures to render alongside a synthetic sequence: `count`
/// noise-free posed views from the leading icosphere directions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ReferencesSpec {
    pub count: usize,
    pub level: usize,
    pub distance_factor: f64,
}

impl Default for ReferencesSpec {
    fn default() -> Self {
        Self { count: 12, level: 1, distance_factor: 2.5 }
    }
}

/// Declarative description of a synthetic sequence, as read by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneSpec {
    pub object: ObjectSpec,
    pub trajectory: TrajectorySpec,
    pub intrinsics: Intrinsics,
    #[serde(default)]
    pub depth_sigma_mm: f64,
    #[serde(default)]
    pub occluder: Option<OccluderSpec>,
    #[serde(default)]
    pub seed: u64,
    /// When present, the CLI also writes a reference-view directory.
    #[serde(default)]
    pub references: Option<ReferencesSpec>,
}

/// Builds the object mesh for a spec. `Mesh` specs must be resolved by the
/// caller (see [`build_scene_from_mesh`]).
pub fn object_mesh(spec: &ObjectSpec) -> Result<TriangleMesh, SynthError> {
    match spec {
        ObjectSpec::Box { extents, subdiv } => {
            box_mesh(Vector3::new(extents[0], extents[1], extents[2]), *subdiv)
        }
        ObjectSpec::Sphere { radius, level } => icosphere_mesh(*radius, *level),
        ObjectSpec::Cylinder { radius, height, radial_segments, height_segments } => {
            cylinder_mesh(*radius, *height, *radial_segments, *height_segments)
        }
        ObjectSpec::Mesh { path } => Err(SynthError::BadParams(format!(
            "mesh spec '{path}' must be loaded from disk by the caller"
        ))),
    }
}

/// Instantiates a renderable scene from its declarative spec.
pub fn build_scene(spec: &SceneSpec) -> Result<SyntheticScene, SynthError> {
    build_scene_from_mesh(spec, object_mesh(&spec.object)?)
}

/// [`build_scene`] with the object mesh supplied by the caller — the path
/// for `ObjectSpec::Mesh`, where the mesh comes off disk.
pub fn build_scene_from_mesh(
    spec: &SceneSpec,
    mesh: TriangleMesh,
) -> Result<SyntheticScene, SynthError> {
    spec.intrinsics.validate()?;
    let trajectory = match spec.trajectory {
        TrajectorySpec::Turntable { frames, deg_per_frame, distance, elevation_deg } => {
            Trajectory::Turntable { frames, deg_per_frame, distance, elevation_deg }
        }
        TrajectorySpec::Tumble { frames, distance, max_step_deg } => {
            Trajectory::Tumble { frames, distance, max_step_deg, seed: spec.seed }
        }
        TrajectorySpec::Scripted { ref poses } => {
            Trajectory::Scripted(poses.iter().map(Pose::from_row_major).collect())
        }
    };
    let poses = trajectory_poses(&trajectory);
    if poses.is_empty() {
        return Err(SynthError::BadParams("trajectory has no frames".into()));
    }
    let occluder = spec.occluder.as_ref().map(|o| {
        let hw = o.width / 2.0;
        let hh = o.height / 2.0;
        Occluder {
            mesh: TriangleMesh {
                vertices: vec![
                    Vector3::new(-hw, -hh, 0.0),
                    Vector3::new(hw, -hh, 0.0),
                    Vector3::new(hw, hh, 0.0),
                    Vector3::new(-hw, hh, 0.0),
                ],
                colors: vec![[0.35, 0.3, 0.25]; 4],
                faces: vec![[0, 1, 2], [0, 2, 3]],
            },
            pose: Pose::new(
                Matrix3::identity(),
                Vector3::new(o.offset_x, o.offset_y, o.distance),
            ),
        }
    });
    Ok(SyntheticScene {
        mesh,
        poses,
        k: spec.intrinsics,
        depth_sigma: spec.depth_sigma_mm / 1000.0,
        occluder,
        seed: spec.seed,
    })
}
