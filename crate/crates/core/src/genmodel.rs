//! Bootstrapping from an externally supplied mesh.
//!
//! When no posed reference captures exist, the pipeline can start from a
//! mesh produced elsewhere (a shape prior, a CAD model, a single-view
//! reconstruction). Such a mesh arrives with an unknown metric scale and no
//! trustworthy surface: everything on it starts *uncertain* except what the
//! single reference view corroborates. This module turns that mesh into a
//! hybrid model, recovers its scale against the first observation, and
//! renders synthetic augmentation views that keep rebuilds watertight until
//! real observations cover the object.

use crate::geom::{self, GeomError, Intrinsics, Pose};
use crate::img::{Frame, MaskImage};
use crate::mesh::{farthest_pair_distance, stride_subsample, MeshError, TriangleMesh};
use crate::model::{HybridModel, ModelError, Provenance, ReferenceSet};
use crate::par;
use crate::pose::{
    score_pose, refine_pose, CertainSurface, IcpParams, ScoreWeights, ScoredPose, Thresholds,
};
use crate::raster::{rasterize, vertex_visibility, RasterError};
use crate::synth::{reference_views_from_dirs, SynthError};
use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenModelError {
    #[error("mesh is not closed enough to seed a model ({0:.1}% boundary edges)")]
    NotClosed(f64),
    #[error("reference mask selects no pixels")]
    EmptyMask,
    #[error("not enough observed surface to estimate scale")]
    NoObservedSurface,
    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pose(#[from] crate::pose::PoseError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Largest tolerated fraction of boundary (single-face) edges. The fusion
/// and raycasting stages assume a surface that separates inside from
/// outside; a mesh leaking more than this is rejected up front.
pub const MAX_BOUNDARY_FRACTION: f64 = 0.02;

/// Wraps an externally generated mesh as a hybrid model.
///
/// The mesh is assumed to sit at `assumed_pose` in the first frame (the
/// caller typically centers it on the back-projected mask centroid).
/// Vertices the reference view corroborates — visible from `assumed_pose`
/// inside `reference_mask` — start certain; everything else is uncertain.
/// No volume is fused here; the first rebuild replaces the geometry with
/// fused observations.
pub fn init_generated_model(
    mesh: TriangleMesh,
    assumed_pose: &Pose,
    reference_mask: &MaskImage,
    k: &Intrinsics,
) -> Result<HybridModel, GenModelError> {
    mesh.validate()?;
    if mesh.is_empty() {
        return Err(GenModelError::DegenerateMesh("no faces".into()));
    }
    let boundary = mesh.boundary_edge_fraction();
    if boundary > MAX_BOUNDARY_FRACTION {
        return Err(GenModelError::NotClosed(boundary * 100.0));
    }
    if !reference_mask.any() {
        return Err(GenModelError::EmptyMask);
    }
    let diameter = mesh.diameter_subsampled(2000);
    if diameter <= 0.0 {
        return Err(GenModelError::DegenerateMesh("zero diameter".into()));
    }
    // Rasterized self-occlusion needs only interpolation slack; scale it with
    // the object so the tolerance is unit-free.
    let vis_eps = (1e-3 * diameter).max(1e-4);
    let visible = vertex_visibility(&mesh, assumed_pose, k, Some(reference_mask), vis_eps)?;
    let normals = mesh.vertex_normals();
    let uncertain = visible.iter().map(|v| !*v).collect();
    Ok(HybridModel {
        mesh,
        uncertain,
        normals,
        provenance: Provenance::FromGenerated,
        build_stamp: 0,
        vis_eps,
    })
}

/// Single-shot scale estimate: the farthest pair among back-projected mask
/// points over the mesh diameter. Crude — silhouettes under-estimate depth
/// extent — but it lands within the fine search's bracket.
pub fn coarse_scale(
    mesh: &TriangleMesh,
    frame: &Frame,
    k: &Intrinsics,
) -> Result<f64, GenModelError> {
    let mut pts: Vec<Vector3<f64>> = Vec::new();
    for y in 0..frame.mask.height() {
        for x in 0..frame.mask.width() {
            if *frame.mask.get(x, y) {
                let d = *frame.depth.get(x, y) as f64;
                if d > 0.0 {
                    pts.push(k.back_project(x as f64 + 0.5, y as f64 + 0.5, d));
                }
            }
        }
    }
    if pts.len() < 2 {
        return Err(GenModelError::NoObservedSurface);
    }
    let observed = farthest_pair_distance(&stride_subsample(&pts, 2000));
    let diameter = mesh.diameter_subsampled(2000);
    if diameter <= 0.0 || observed <= 0.0 {
        return Err(GenModelError::DegenerateMesh("zero extent".into()));
    }
    Ok(observed / diameter)
}

/// Returns a copy of the model scaled about its mesh centroid. Uncertainty
/// labels and unit normals are untouched — uniform scaling preserves both.
pub fn apply_scale(model: &HybridModel, scale: f64) -> HybridModel {
    let center = model.mesh.centroid();
    HybridModel { mesh: model.mesh.scaled_about(&center, scale), ..model.clone() }
}

/// Search schedule for [`fine_scale`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RescaleConfig {
    /// Bracket-and-halve rounds.
    pub iterations: usize,
    /// Scale candidates per round.
    pub n_scales: usize,
    /// Initial half-width of the multiplicative bracket (0.2 spans
    /// x0.8..x1.2 around the incoming estimate); halves each round.
    pub half_span: f64,
    /// Viewpoints tried per scale (leading coarse icosphere directions).
    pub n_viewpoints: usize,
    /// In-plane rotations per viewpoint.
    pub n_inplane: usize,
    /// ICP iterations applied to each candidate.
    pub refine_iters: usize,
}

impl Default for RescaleConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            n_scales: 11,
            half_span: 0.2,
            n_viewpoints: 5,
            n_inplane: 24,
            refine_iters: 2,
        }
    }
}

/// Winner of the fine scale search.
#[derive(Debug, Clone)]
pub struct Rescaled {
    /// Factor relative to the input model.
    pub scale: f64,
    /// The pose the winning scale aligned at.
    pub scored: ScoredPose,
}

/// Joint scale-and-pose search around a coarse estimate.
///
/// Each round lays `n_scales` multiplicative candidates across the current
/// bracket; every candidate model is aligned from a small rotation grid
/// (viewpoints x in-plane spins, all sharing the back-projected mask anchor)
/// with a couple of ICP steps, then scored like a pose hypothesis. The best
/// candidate recenters a halved bracket for the next round. Ties keep the
/// lowest (scale, rotation) index, so the search is deterministic.
pub fn fine_scale(
    model: &HybridModel,
    frame: &Frame,
    k: &Intrinsics,
    init_scale: f64,
    cfg: &RescaleConfig,
    th: &Thresholds,
    w: &ScoreWeights,
    truncation_m: f64,
    icp: &IcpParams,
) -> Result<Rescaled, GenModelError> {
    if cfg.n_scales < 2 || cfg.n_viewpoints == 0 || cfg.n_inplane == 0 {
        return Err(GenModelError::DegenerateMesh("empty rescale schedule".into()));
    }
    let anchor = crate::pose::init_translation(&frame.depth, &frame.mask, k)?;
    let views = geom::icosphere_viewpoints(0, &Vector3::zeros())?;
    if cfg.n_viewpoints > views.rotations.len() {
        return Err(GenModelError::DegenerateMesh(format!(
            "{} viewpoints exceed the coarse grid ({})",
            cfg.n_viewpoints,
            views.rotations.len()
        )));
    }
    let spins = geom::inplane_rotations(cfg.n_inplane)?;
    let centroid = model.mesh.centroid();
    let rotations: Vec<_> = views.rotations[..cfg.n_viewpoints]
        .iter()
        .flat_map(|v| spins.rotations.iter().map(move |s| s * v))
        .collect();

    let mut center = init_scale;
    let mut half_span = cfg.half_span;
    let mut best: Option<(f64, ScoredPose)> = None;

    for _round in 0..cfg.iterations {
        let lo = center * (1.0 - half_span);
        let hi = center * (1.0 + half_span);
        let mut round_best: Option<(f64, ScoredPose)> = None;

        for si in 0..cfg.n_scales {
            let s = lo + (hi - lo) * si as f64 / (cfg.n_scales - 1) as f64;
            if s <= 0.0 {
                continue;
            }
            let candidate = apply_scale(model, s);
            let surface = CertainSurface::from_model(&candidate, icp.max_points);
            if surface.is_empty() {
                continue;
            }
            // Scaling about the centroid keeps the centroid, so one anchor
            // serves every scale: the model centroid maps onto the mask.
            let hyps: Vec<Pose> = rotations
                .iter()
                .map(|r| Pose::new(*r, anchor - r * centroid))
                .collect();
            let scored: Vec<Result<ScoredPose, crate::pose::PoseError>> =
                par::map_slice(&hyps, |h| {
                    let refined = refine_pose(&surface, frame, k, h, cfg.refine_iters, icp);
                    score_pose(
                        &candidate, &surface, frame, k, &refined.pose, th, w, truncation_m, icp,
                    )
                });
            for sp in scored {
                let sp = sp?;
                let better = match &round_best {
                    None => true,
                    Some((_, b)) => match (sp.valid, b.valid) {
                        (true, false) => true,
                        (false, true) => false,
                        (true, true) => sp.score > b.score,
                        (false, false) => sp.seen_iou > b.seen_iou,
                    },
                };
                if better {
                    round_best = Some((s, sp));
                }
            }
        }

        let Some((s, sp)) = round_best else {
            return Err(GenModelError::NoObservedSurface);
        };
        center = s;
        half_span *= 0.5;
        best = Some((s, sp));
    }

    let (scale, scored) = best.expect("at least one search round");
    Ok(Rescaled { scale, scored })
}

/// Evenly spread directions: greedy farthest-point subset of the level-1
/// icosphere vertices, seeded at vertex 0. Deterministic; ties keep the
/// lowest index.
pub fn augmentation_directions(count: usize) -> Result<Vec<Vector3<f64>>, GeomError> {
    let geo = geom::icosphere(1)?;
    let verts = &geo.vertices;
    let count = count.min(verts.len());
    let mut chosen: Vec<usize> = vec![0];
    while chosen.len() < count {
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for (i, v) in verts.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&c| verts[c].dot(v).clamp(-1.0, 1.0).acos())
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        chosen.push(best.expect("icosphere has enough vertices"));
    }
    Ok(chosen.into_iter().map(|i| verts[i]).collect())
}

/// Synthetic reference views rendered from the generated model, plus a flag
/// per view saying whether it still earns its keep.
#[derive(Debug, Clone)]
pub struct AugmentationSet {
    pub refs: ReferenceSet,
    pub active: Vec<bool>,
}

impl AugmentationSet {
    pub fn empty() -> Self {
        Self { refs: ReferenceSet::default(), active: Vec::new() }
    }

    /// The views rebuilds should still fuse.
    pub fn active_references(&self) -> ReferenceSet {
        ReferenceSet {
            frames: self
                .refs
                .frames
                .iter()
                .zip(&self.active)
                .filter(|(_, a)| **a)
                .map(|(f, _)| f.clone())
                .collect(),
        }
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }
}

/// Renders `count` augmentation views of the model from evenly spread
/// directions at `distance_factor` x diameter. These views let rebuilds keep
/// unobserved parts of the object closed; they carry no observational
/// weight, so fused geometry they alone support stays uncertain.
pub fn render_augmentation(
    model: &HybridModel,
    k: &Intrinsics,
    count: usize,
    distance_factor: f64,
) -> Result<AugmentationSet, GenModelError> {
    let dirs = augmentation_directions(count)?;
    let distance = distance_factor * model.mesh.diameter_subsampled(2000);
    if distance <= 0.0 {
        return Err(GenModelError::DegenerateMesh("zero diameter".into()));
    }
    let refs = reference_views_from_dirs(&model.mesh, k, &dirs, distance)?;
    let active = vec![true; refs.len()];
    Ok(AugmentationSet { refs, active })
}

/// Retires augmentation views that real observations have overtaken.
///
/// A view is deactivated once more than `overlap_threshold` of its mask is
/// covered by the current model's *certain* pixels from the same pose — the
/// synthetic view no longer adds anything real data doesn't. Deactivation is
/// one-way; a view never comes back. Returns how many views this pass
/// retired.
pub fn filter_augmentation(
    aug: &mut AugmentationSet,
    model: &HybridModel,
    k: &Intrinsics,
    overlap_threshold: f64,
) -> Result<usize, GenModelError> {
    let mut retired = 0;
    for (rf, active) in aug.refs.frames.iter().zip(aug.active.iter_mut()) {
        if !*active {
            continue;
        }
        let total = rf.frame.mask.count();
        if total == 0 {
            *active = false;
            retired += 1;
            continue;
        }
        let render = rasterize(model, &rf.pose, k)?;
        let mut covered = 0usize;
        for i in 0..render.mask.len() {
            if rf.frame.mask.data()[i] && render.mask.data()[i] && !render.uncertainty.data()[i] {
                covered += 1;
            }
        }
        if covered as f64 / total as f64 > overlap_threshold {
            *active = false;
            retired += 1;
        }
    }
    Ok(retired)
}

/// Whether tracking has rotated far enough from the generated model's
/// initial view to warrant switching to fused-only geometry.
pub fn should_switch(initial: &Pose, current: &Pose, th: &Thresholds) -> bool {
    initial.rotation_geodesic_to(current) > th.t_gen
}
