//! Pose initialization, refinement, scoring, and selection.
//!
//! Estimation runs in three stages:
//!
//! 1. **Hypotheses** — a translation anchor is back-projected from the mask
//!    (centroid pixel at median masked depth), and candidate rotations come
//!    from the product of icosphere viewpoints with in-plane spins. Every
//!    hypothesis maps the model centroid to the same anchor point.
//! 2. **Refinement** — damped point-to-plane ICP against the frame's masked
//!    depth, using only the model's *certain* vertices. A backtracking line
//!    search guarantees the robust objective never increases within an
//!    iteration.
//! 3. **Scoring** — each candidate is rasterized and scored by how well its
//!    certain region explains the observation; candidates rendering mostly
//!    uncertain surface or missing the mask are gated out as unreliable.

use crate::geom::{self, GeomError, Intrinsics, Pose};
use crate::img::{DepthImage, Frame, MaskImage};
use crate::mesh::stride_subsample;
use crate::model::{self, HybridModel, ModelError};
use crate::par;
use crate::raster::{rasterize, RasterError};
use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("object mask is empty")]
    EmptyMask,
    #[error("no valid depth inside the object mask")]
    NoValidDepth,
    #[error("viewpoint count {0} is not an icosphere size (12, 42, 162, or 642)")]
    BadViewpointCount(usize),
    #[error("no pose hypotheses to select from")]
    NoHypotheses,
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Hypothesis generation and refinement schedule.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HypothesisConfig {
    /// Number of viewpoint rotations; must be an icosphere vertex count.
    pub n_viewpoints: usize,
    /// In-plane spins per viewpoint.
    pub n_inplane: usize,
    /// ICP iterations per hypothesis during (re-)initialization.
    pub refine_iters_first: usize,
    /// ICP iterations per frame during tracking.
    pub refine_iters_track: usize,
}

impl Default for HypothesisConfig {
    fn default() -> Self {
        Self { n_viewpoints: 42, n_inplane: 12, refine_iters_first: 5, refine_iters_track: 2 }
    }
}

/// Acceptance gates and decision thresholds. Angles in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// Max tolerated uncertainty rate of a render.
    pub t_u: f64,
    /// Min required seen-IoU of a render.
    pub t_s: f64,
    /// Min seen-IoU for memory-pool admission.
    pub t_conf: f64,
    /// Seen-IoU below this (strictly) requests completion.
    pub t_complete: f64,
    /// Min rotation to the last admitted frame for pool admission.
    pub t_geo: f64,
    /// Rotation from the assumed reference pose that unlocks the first
    /// rebuild of an externally supplied model.
    pub t_gen: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            t_u: 0.5,
            t_s: 0.5,
            t_conf: 0.5,
            t_complete: 0.7,
            t_geo: 10.0f64.to_radians(),
            t_gen: 45.0f64.to_radians(),
        }
    }
}

/// Weights of the selection score
/// `seen_iou − w_geo · (rms / truncation) − w_photo · photometric`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoreWeights {
    pub w_geo: f64,
    pub w_photo: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self { w_geo: 1.0, w_photo: 0.5 }
    }
}

/// ICP knobs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IcpParams {
    /// Huber transition point for the point-to-plane residual, in meters.
    pub huber_delta_m: f64,
    /// Reject correspondences farther apart than this, in meters.
    pub max_correspondence_dist_m: f64,
    /// Deterministic cap on the number of surface points used.
    pub max_points: usize,
    /// Below this many correspondences the step is not attempted.
    pub min_correspondences: usize,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            huber_delta_m: 0.01,
            max_correspondence_dist_m: 0.1,
            max_points: 10_000,
            min_correspondences: 10,
        }
    }
}

// ---------------------------------------------------------------------------
// Translation + hypotheses
// ---------------------------------------------------------------------------

/// Camera-space anchor for pose hypotheses: the mask centroid pixel
/// back-projected at the median masked depth. This lands on the visible
/// surface rather than the object center; the correspondence gate of the
/// ICP stage is sized to absorb that bias.
pub fn init_translation(
    depth: &DepthImage,
    mask: &MaskImage,
    k: &Intrinsics,
) -> Result<Vector3<f64>, PoseError> {
    let (cu, cv) = mask.centroid().ok_or(PoseError::EmptyMask)?;
    let mut ds: Vec<f32> = Vec::new();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if *mask.get(x, y) {
                let d = *depth.get(x, y);
                if d > 0.0 {
                    ds.push(d);
                }
            }
        }
    }
    if ds.is_empty() {
        return Err(PoseError::NoValidDepth);
    }
    ds.sort_by(f32::total_cmp);
    let median = if ds.len() % 2 == 1 {
        ds[ds.len() / 2] as f64
    } else {
        0.5 * (ds[ds.len() / 2 - 1] as f64 + ds[ds.len() / 2] as f64)
    };
    Ok(k.back_project(cu, cv, median))
}

/// Builds the rotation grid (icosphere viewpoints × in-plane spins) and
/// anchors every candidate so the model centroid projects to the same
/// back-projected mask point. Candidate order is deterministic: viewpoint
/// major, in-plane minor.
pub fn generate_hypotheses(
    model: &HybridModel,
    frame: &Frame,
    k: &Intrinsics,
    cfg: &HypothesisConfig,
) -> Result<Vec<Pose>, PoseError> {
    let level = (0..=geom::MAX_ICOSPHERE_LEVEL)
        .find(|&l| geom::icosphere_vertex_count(l) == cfg.n_viewpoints)
        .ok_or(PoseError::BadViewpointCount(cfg.n_viewpoints))?;
    let anchor = init_translation(&frame.depth, &frame.mask, k)?;
    let views = geom::icosphere_viewpoints(level, &Vector3::zeros())?;
    let spins = geom::inplane_rotations(cfg.n_inplane)?;
    let centroid = model.mesh.centroid();
    let mut out = Vec::with_capacity(views.rotations.len() * spins.rotations.len());
    for view in &views.rotations {
        for spin in &spins.rotations {
            let r = spin * view;
            out.push(Pose::new(r, anchor - r * centroid));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Certain surface cache
// ---------------------------------------------------------------------------

/// The refinement working set: certain model vertices with outward normals,
/// capped by deterministic striding so per-frame cost is bounded.
#[derive(Debug, Clone)]
pub struct CertainSurface {
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
}

impl CertainSurface {
    pub fn from_model(model: &HybridModel, max_points: usize) -> Self {
        let idx: Vec<usize> = (0..model.mesh.vertices.len())
            .filter(|&i| !model.uncertain[i] && model.normals[i].norm() > 0.5)
            .collect();
        let kept = stride_subsample(&idx, max_points.max(1));
        Self {
            points: kept.iter().map(|&i| model.mesh.vertices[i]).collect(),
            normals: kept.iter().map(|&i| model.normals[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The same surface under uniform scaling about `center` (normals are
    /// scale-invariant).
    pub fn scaled_about(&self, center: &Vector3<f64>, scale: f64) -> Self {
        Self {
            points: self.points.iter().map(|p| center + (p - center) * scale).collect(),
            normals: self.normals.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// ICP
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineStatus {
    /// At least one step was attempted (possibly zero if line search stalled).
    Refined,
    /// Fewer than the minimum correspondences at the starting pose.
    TooFewCorrespondences,
    /// The correspondence normals don't span 3D (or the solve failed); a
    /// reliable update is impossible.
    Degenerate,
}

/// One completed ICP iteration, for introspection and invariants.
#[derive(Debug, Clone, Copy)]
pub struct IcpStep {
    /// Robust objective over this iteration's correspondences, before the
    /// update.
    pub objective_before: f64,
    /// Same objective after the accepted (line-searched) update.
    pub objective_after: f64,
    pub correspondences: usize,
    /// Accepted step length (1, 1/2, 1/4, ...; 0 when the search stalled).
    pub step_scale: f64,
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub pose: Pose,
    pub status: RefineStatus,
    pub steps: Vec<IcpStep>,
    /// Point-to-plane RMS (meters) at the final pose, when measurable.
    pub final_rms: Option<f64>,
}

struct Corr {
    /// Model point in camera frame.
    p: Vector3<f64>,
    /// Model normal in camera frame (unit).
    n: Vector3<f64>,
    /// Observed point in camera frame.
    q: Vector3<f64>,
    /// Signed point-to-plane residual `n · (p − q)`.
    r: f64,
}

fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Projective data association of the certain surface into the frame.
fn correspondences(
    surface: &CertainSurface,
    frame: &Frame,
    k: &Intrinsics,
    pose: &Pose,
    params: &IcpParams,
) -> Vec<Corr> {
    let candidates: Vec<Option<Corr>> = par::map_indexed(surface.points.len(), |i| {
        let p = pose.transform_point(&surface.points[i]);
        if p.z <= 1e-9 {
            return None;
        }
        let n = pose.transform_vector(&surface.normals[i]);
        // Keep camera-facing surface only: the outward normal must oppose
        // the viewing ray.
        if n.dot(&p) >= 0.0 {
            return None;
        }
        let u = k.fx * p.x / p.z + k.cx;
        let v = k.fy * p.y / p.z + k.cy;
        let (px, py) = k.pixel_of(u, v)?;
        if !*frame.mask.get(px, py) {
            return None;
        }
        let d = *frame.depth.get(px, py) as f64;
        if d <= 0.0 {
            return None;
        }
        // Prefer depth bilinearly interpolated at the exact projection: the
        // pixel-center sample sits up to half a pixel off along the surface,
        // which puts a quantization floor under the refinement. Fall back to
        // the center sample when the 2x2 taps leave the image, hit a hole,
        // or straddle a depth discontinuity.
        let q = interpolate_depth(&frame.depth, u, v, d, params.max_correspondence_dist_m)
            .map_or_else(
                || k.back_project(px as f64 + 0.5, py as f64 + 0.5, d),
                |di| k.back_project(u, v, di),
            );
        if (p - q).norm() > params.max_correspondence_dist_m {
            return None;
        }
        let r = n.dot(&(p - q));
        Some(Corr { p, n, q, r })
    });
    candidates.into_iter().flatten().collect()
}

/// Bilinear depth at continuous image coordinates `(u, v)`, or `None` when
/// any of the four taps is missing, out of bounds, or further than
/// `max_spread` from the nearest-pixel depth `d0`.
fn interpolate_depth(
    depth: &crate::img::DepthImage,
    u: f64,
    v: f64,
    d0: f64,
    max_spread: f64,
) -> Option<f64> {
    let uc = u - 0.5;
    let vc = v - 0.5;
    let x0 = uc.floor();
    let y0 = vc.floor();
    if x0 < 0.0 || y0 < 0.0 {
        return None;
    }
    let (x0, y0) = (x0 as usize, y0 as usize);
    if x0 + 1 >= depth.width() || y0 + 1 >= depth.height() {
        return None;
    }
    let fu = uc - x0 as f64;
    let fv = vc - y0 as f64;
    let mut acc = 0.0;
    for (dx, dy, w) in [
        (0, 0, (1.0 - fu) * (1.0 - fv)),
        (1, 0, fu * (1.0 - fv)),
        (0, 1, (1.0 - fu) * fv),
        (1, 1, fu * fv),
    ] {
        let d = *depth.get(x0 + dx, y0 + dy) as f64;
        if d <= 0.0 || (d - d0).abs() > max_spread {
            return None;
        }
        acc += w * d;
    }
    Some(acc)
}

/// Damped point-to-plane ICP with Huber weighting and a backtracking line
/// search: within each iteration, the robust objective over that iteration's
/// correspondence set never increases. Runs at most `iterations` steps and
/// stops early when correspondences collapse or no descent step exists.
pub fn refine_pose(
    surface: &CertainSurface,
    frame: &Frame,
    k: &Intrinsics,
    init: &Pose,
    iterations: usize,
    params: &IcpParams,
) -> RefineResult {
    let mut pose = *init;
    let mut steps = Vec::with_capacity(iterations);
    let mut status = RefineStatus::Refined;

    for iter in 0..iterations {
        let corrs = correspondences(surface, frame, k, &pose, params);
        if corrs.len() < params.min_correspondences {
            if iter == 0 {
                return RefineResult {
                    pose: *init,
                    status: RefineStatus::TooFewCorrespondences,
                    steps,
                    final_rms: None,
                };
            }
            break;
        }

        // Translation observability: the normals must span 3D.
        let mut ncov = Matrix3::zeros();
        for c in &corrs {
            ncov += c.n * c.n.transpose();
        }
        let eig = ncov.symmetric_eigenvalues();
        let (lmin, lmax) = (eig.min(), eig.max());
        if !(lmax > 0.0) || lmin < 1e-9 * lmax {
            if iter == 0 {
                return RefineResult {
                    pose: *init,
                    status: RefineStatus::Degenerate,
                    steps,
                    final_rms: None,
                };
            }
            status = RefineStatus::Degenerate;
            break;
        }

        // Solve the damped, Huber-weighted normal equations about the
        // correspondence centroid (better conditioning than the camera
        // origin).
        let centroid: Vector3<f64> =
            corrs.iter().map(|c| c.p).sum::<Vector3<f64>>() / corrs.len() as f64;
        let mut a = Matrix6::<f64>::zeros();
        let mut b = Vector6::<f64>::zeros();
        let mut obj0 = 0.0;
        for c in &corrs {
            let w = if c.r.abs() <= params.huber_delta_m {
                1.0
            } else {
                params.huber_delta_m / c.r.abs()
            };
            let pc = c.p - centroid;
            let j_rot = pc.cross(&c.n);
            let mut j = Vector6::zeros();
            j.fixed_rows_mut::<3>(0).copy_from(&j_rot);
            j.fixed_rows_mut::<3>(3).copy_from(&c.n);
            a += w * j * j.transpose();
            b -= w * c.r * j;
            obj0 += huber(c.r, params.huber_delta_m);
        }
        let damping = 1e-9 * a.trace() / 6.0 + 1e-12;
        for i in 0..6 {
            a[(i, i)] += damping;
        }
        let Some(chol) = a.cholesky() else {
            if iter == 0 {
                return RefineResult {
                    pose: *init,
                    status: RefineStatus::Degenerate,
                    steps,
                    final_rms: None,
                };
            }
            status = RefineStatus::Degenerate;
            break;
        };
        let delta = chol.solve(&b);
        let omega = Vector3::new(delta[0], delta[1], delta[2]);
        let tau = Vector3::new(delta[3], delta[4], delta[5]);

        // Backtracking: halve the step until the objective doesn't increase.
        let eval = |s: f64| -> f64 {
            let dr = geom::exp_so3(&(omega * s));
            corrs
                .iter()
                .map(|c| {
                    let p_new = dr * (c.p - centroid) + centroid + tau * s;
                    huber(c.n.dot(&(p_new - c.q)), params.huber_delta_m)
                })
                .sum()
        };
        let mut s = 1.0;
        let mut accepted = None;
        for _ in 0..9 {
            let obj = eval(s);
            if obj <= obj0 {
                accepted = Some((s, obj));
                break;
            }
            s *= 0.5;
        }
        let Some((s, obj_after)) = accepted else {
            steps.push(IcpStep {
                objective_before: obj0,
                objective_after: obj0,
                correspondences: corrs.len(),
                step_scale: 0.0,
            });
            break;
        };

        let dr = geom::exp_so3(&(omega * s));
        let new_rot = dr * pose.rotation();
        let new_t = dr * (pose.translation() - centroid) + centroid + tau * s;
        pose = Pose::new(new_rot, new_t).orthonormalized();
        steps.push(IcpStep {
            objective_before: obj0,
            objective_after: obj_after,
            correspondences: corrs.len(),
            step_scale: s,
        });
    }

    let final_rms = residual_rms(surface, frame, k, &pose, params).map(|(rms, _)| rms);
    RefineResult { pose, status, steps, final_rms }
}

/// Point-to-plane RMS (meters) and correspondence count at a pose, or `None`
/// below the minimum correspondence count.
pub fn residual_rms(
    surface: &CertainSurface,
    frame: &Frame,
    k: &Intrinsics,
    pose: &Pose,
    params: &IcpParams,
) -> Option<(f64, usize)> {
    let corrs = correspondences(surface, frame, k, pose, params);
    if corrs.len() < params.min_correspondences {
        return None;
    }
    let ss: f64 = corrs.iter().map(|c| c.r * c.r).sum();
    Some(((ss / corrs.len() as f64).sqrt(), corrs.len()))
}

// ---------------------------------------------------------------------------
// Scoring and selection
// ---------------------------------------------------------------------------

/// A pose with its evidence. `valid` reflects the reliability gates; `score`
/// orders candidates during selection.
#[derive(Debug, Clone, Copy)]
pub struct ScoredPose {
    pub pose: Pose,
    pub seen_iou: f64,
    pub uncertainty_rate: f64,
    /// Point-to-plane RMS in meters (infinite when unmeasurable).
    pub geometric_rms: f64,
    /// Mean absolute color difference over certain overlapping pixels
    /// (1.0 when there is no overlap).
    pub photometric: f64,
    pub score: f64,
    pub valid: bool,
}

/// Renders and scores a single pose candidate.
///
/// Candidates that render off-screen get the worst possible evidence (rate 1,
/// IoU 0, score −∞) and are invalid. The geometric term is normalized by the
/// fusion truncation so the score mixes comparable magnitudes.
pub fn score_pose(
    m: &HybridModel,
    surface: &CertainSurface,
    frame: &Frame,
    k: &Intrinsics,
    pose: &Pose,
    th: &Thresholds,
    w: &ScoreWeights,
    truncation_m: f64,
    icp: &IcpParams,
) -> Result<ScoredPose, PoseError> {
    let render = rasterize(m, pose, k)?;
    let rate = match model::uncertainty_rate(&render) {
        Ok(r) => r,
        Err(ModelError::EmptyRender) => {
            return Ok(ScoredPose {
                pose: *pose,
                seen_iou: 0.0,
                uncertainty_rate: 1.0,
                geometric_rms: f64::INFINITY,
                photometric: 1.0,
                score: f64::NEG_INFINITY,
                valid: false,
            });
        }
        Err(e) => return Err(e.into()),
    };
    let iou = model::seen_iou(&render, &frame.mask)?;
    let geo = residual_rms(surface, frame, k, pose, icp)
        .map(|(rms, _)| rms)
        .unwrap_or(f64::INFINITY);

    // Photometric term over pixels that are certain in the render and masked
    // in the observation.
    let mut photo_sum = 0.0;
    let mut photo_n = 0usize;
    for y in 0..k.height {
        for x in 0..k.width {
            if *render.mask.get(x, y)
                && !*render.uncertainty.get(x, y)
                && *frame.mask.get(x, y)
            {
                let a = render.color.get(x, y);
                let b = frame.color.get(x, y);
                photo_sum += (0..3).map(|c| (a[c] - b[c]).abs() as f64).sum::<f64>() / 3.0;
                photo_n += 1;
            }
        }
    }
    let photo = if photo_n > 0 { photo_sum / photo_n as f64 } else { 1.0 };

    let score = if geo.is_finite() {
        iou - w.w_geo * (geo / truncation_m) - w.w_photo * photo
    } else {
        f64::NEG_INFINITY
    };
    Ok(ScoredPose {
        pose: *pose,
        seen_iou: iou,
        uncertainty_rate: rate,
        geometric_rms: geo,
        photometric: photo,
        score,
        valid: rate <= th.t_u && iou >= th.t_s,
    })
}

/// Scores every candidate and picks the best valid one (strictly greater
/// score wins; ties keep the lowest index). When every candidate is gated
/// out, returns the best by seen-IoU with `valid = false` so the caller can
/// tell estimation failed. The winner's index is returned alongside.
#[allow(clippy::too_many_arguments)]
pub fn select_pose(
    m: &HybridModel,
    surface: &CertainSurface,
    frame: &Frame,
    k: &Intrinsics,
    candidates: &[Pose],
    th: &Thresholds,
    w: &ScoreWeights,
    truncation_m: f64,
    icp: &IcpParams,
) -> Result<(ScoredPose, usize), PoseError> {
    if candidates.is_empty() {
        return Err(PoseError::NoHypotheses);
    }
    let scored: Vec<Result<ScoredPose, PoseError>> =
        par::map_slice(candidates, |p| score_pose(m, surface, frame, k, p, th, w, truncation_m, icp));
    let mut all = Vec::with_capacity(scored.len());
    for s in scored {
        all.push(s?);
    }
    let mut best_valid: Option<usize> = None;
    let mut best_any = 0usize;
    for (i, s) in all.iter().enumerate() {
        if s.valid && best_valid.map_or(true, |b| s.score > all[b].score) {
            best_valid = Some(i);
        }
        if s.seen_iou > all[best_any].seen_iou {
            best_any = i;
        }
    }
    Ok(match best_valid {
        Some(i) => (all[i], i),
        None => (ScoredPose { valid: false, ..all[best_any] }, best_any),
    })
}

/// Full (re-)initialization: generate hypotheses, refine each, select.
#[allow(clippy::too_many_arguments)]
pub fn estimate_pose(
    m: &HybridModel,
    surface: &CertainSurface,
    frame: &Frame,
    k: &Intrinsics,
    cfg: &HypothesisConfig,
    th: &Thresholds,
    w: &ScoreWeights,
    truncation_m: f64,
    icp: &IcpParams,
) -> Result<(ScoredPose, usize), PoseError> {
    let hyps = generate_hypotheses(m, frame, k, cfg)?;
    let refined: Vec<Pose> = par::map_slice(&hyps, |h| {
        refine_pose(surface, frame, k, h, cfg.refine_iters_first, icp).pose
    });
    select_pose(m, surface, frame, k, &refined, th, w, truncation_m, icp)
}

/// Frame-to-frame tracking: a short refinement from the previous pose,
/// then scoring. The caller decides what to do when the result is invalid
/// (typically fall back to [`estimate_pose`]).
#[allow(clippy::too_many_arguments)]
pub fn track_frame(
    m: &HybridModel,
    surface: &CertainSurface,
    frame: &Frame,
    k: &Intrinsics,
    prev: &Pose,
    cfg: &HypothesisConfig,
    th: &Thresholds,
    w: &ScoreWeights,
    truncation_m: f64,
    icp: &IcpParams,
) -> Result<ScoredPose, PoseError> {
    let refined = refine_pose(surface, frame, k, prev, cfg.refine_iters_track, icp);
    score_pose(m, surface, frame, k, &refined.pose, th, w, truncation_m, icp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::img::ColorImage;
    use crate::model::{build_model, BuildParams, Provenance};
    use crate::synth;
    use approx::assert_relative_eq;

    fn k() -> Intrinsics {
        Intrinsics::new(160.0, 160.0, 60.0, 45.0, 120, 90)
    }

    #[test]
    fn translation_from_centered_block() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 40.0, 100, 80);
        let mut mask = MaskImage::new(100, 80, false);
        let mut depth = DepthImage::new(100, 80, 0.0);
        for y in 30..50 {
            for x in 40..60 {
                mask.set(x, y, true);
                depth.set(x, y, 0.8);
            }
        }
        let t = init_translation(&depth, &mask, &k).unwrap();
        // Centroid pixel center: (50, 40) exactly; principal point too.
        assert_relative_eq!(t.x, 0.0, epsilon = 1e-9);
        assert_relative_eq!(t.y, 0.0, epsilon = 1e-9);
        assert_relative_eq!(t.z, 0.8, epsilon = 1e-6);
    }

    #[test]
    fn translation_median_ignores_outlier_tail() {
        let k = Intrinsics::new(100.0, 100.0, 50.0, 40.0, 100, 80);
        let mut mask = MaskImage::new(100, 80, false);
        let mut depth = DepthImage::new(100, 80, 0.0);
        for x in 0..9 {
            mask.set(x, 0, true);
            depth.set(x, 0, if x < 6 { 0.5 } else { 3.0 });
        }
        let t = init_translation(&depth, &mask, &k).unwrap();
        assert_relative_eq!(t.z, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn translation_error_cases() {
        let k = Intrinsics::new(10.0, 10.0, 5.0, 5.0, 10, 10);
        let mask = MaskImage::new(10, 10, false);
        let depth = DepthImage::new(10, 10, 1.0);
        assert!(matches!(init_translation(&depth, &mask, &k), Err(PoseError::EmptyMask)));
        let full = MaskImage::new(10, 10, true);
        let invalid = DepthImage::new(10, 10, 0.0);
        assert!(matches!(
            init_translation(&invalid, &full, &k),
            Err(PoseError::NoValidDepth)
        ));
    }

    /// Model, scene, and a rendered frame at a known ground-truth pose.
    fn sphere_setup() -> (HybridModel, CertainSurface, Frame, Pose) {
        let mesh = synth::icosphere_mesh(0.08, 2).unwrap();
        let refs = synth::icosphere_reference_views(&mesh, &k(), 0, 12, 2.5).unwrap();
        let model = build_model(
            &refs,
            &BuildParams { resolution: 64, ..BuildParams::default() },
        )
        .unwrap();
        let surface = CertainSurface::from_model(&model, 10_000);
        let gt = refs.frames[3].pose;
        let frame = refs.frames[3].frame.clone();
        (model, surface, frame, gt)
    }

    #[test]
    fn hypotheses_share_the_anchor_point() {
        let (model, _, frame, _) = sphere_setup();
        let cfg = HypothesisConfig::default();
        let hyps = generate_hypotheses(&model, &frame, &k(), &cfg).unwrap();
        assert_eq!(hyps.len(), 504);
        let centroid = model.mesh.centroid();
        let anchor = hyps[0].transform_point(&centroid);
        for h in &hyps {
            assert!((h.transform_point(&centroid) - anchor).norm() < 1e-9);
        }
        // Regenerating yields the identical list.
        let again = generate_hypotheses(&model, &frame, &k(), &cfg).unwrap();
        for (a, b) in hyps.iter().zip(&again) {
            assert_eq!(a.to_row_major(), b.to_row_major());
        }
        // Unsupported viewpoint counts are rejected.
        let bad = HypothesisConfig { n_viewpoints: 40, ..cfg };
        assert!(matches!(
            generate_hypotheses(&model, &frame, &k(), &bad),
            Err(PoseError::BadViewpointCount(40))
        ));
    }

    #[test]
    fn rotation_grid_covers_so3() {
        // Any rotation should be within ~45° of the 42x12 grid.
        let views = geom::icosphere_viewpoints(1, &Vector3::zeros()).unwrap();
        let spins = geom::inplane_rotations(12).unwrap();
        let grid: Vec<Matrix3<f64>> = views
            .rotations
            .iter()
            .flat_map(|v| spins.rotations.iter().map(move |s| s * v))
            .collect();
        let mut worst: f64 = 0.0;
        for seed in 0..40u64 {
            let probe = random_rotation(seed);
            let best = grid
                .iter()
                .map(|g| geom::rotation_angle(g, &probe))
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(best);
        }
        assert!(worst.to_degrees() < 45.0, "grid gap {:.1}°", worst.to_degrees());
    }

    fn random_rotation(seed: u64) -> Matrix3<f64> {
        // Deterministic pseudo-random axis-angle from the seed.
        let a = (seed as f64 * 0.7391) % 1.0 * std::f64::consts::TAU;
        let b = (seed as f64 * 0.3571) % 1.0 * 2.0 - 1.0;
        let c = (seed as f64 * 0.9241) % 1.0 * std::f64::consts::PI;
        let axis = Vector3::new(
            (1.0f64 - b * b).sqrt() * a.cos(),
            (1.0f64 - b * b).sqrt() * a.sin(),
            b,
        );
        geom::exp_so3(&(axis * c))
    }

    /// A box observed corner-on: three visible faces pin all six degrees of
    /// freedom, unlike a sphere whose rotation geometry cannot reveal.
    fn box_setup() -> (HybridModel, CertainSurface, Frame, Pose) {
        let mesh = synth::box_mesh(Vector3::new(0.10, 0.14, 0.08), 6).unwrap();
        let eye = Vector3::new(1.0, 0.8, 1.2).normalize() * 0.45;
        let rot = geom::look_at_rotation(&eye, &Vector3::zeros());
        let gt = Pose::new(rot, -(rot * eye));
        let out = crate::raster::rasterize_mesh(&mesh, None, &gt, &k()).unwrap();
        let frame = Frame { color: out.color, depth: out.depth, mask: out.mask };
        let normals = mesh.vertex_normals();
        let surface =
            CertainSurface { points: mesh.vertices.clone(), normals: normals.clone() };
        let n = mesh.vertices.len();
        let model = HybridModel {
            mesh,
            uncertain: vec![false; n],
            normals,
            provenance: Provenance::FromReferences,
            build_stamp: 0,
            vis_eps: 1e-3,
        };
        (model, surface, frame, gt)
    }

    #[test]
    fn refinement_recovers_small_perturbations() {
        let (_, surface, frame, gt) = box_setup();
        let icp = IcpParams::default();
        // Perturb: 3° about a skew axis plus 5 mm.
        let axis = Vector3::new(1.0, 0.5, -0.3).normalize();
        let perturbed = Pose::new(
            geom::exp_so3(&(axis * 3.0f64.to_radians())) * gt.rotation(),
            gt.translation() + Vector3::new(0.003, -0.003, 0.002),
        );
        let res = refine_pose(&surface, &frame, &k(), &perturbed, 10, &icp);
        assert_eq!(res.status, RefineStatus::Refined);
        let rot_err = res.pose.rotation_geodesic_to(&gt).to_degrees();
        let t_err = (res.pose.translation() - gt.translation()).norm();
        assert!(rot_err < 0.5, "rotation error {rot_err:.3}°");
        assert!(t_err < 0.001, "translation error {:.4} m", t_err);
        // Within-iteration descent.
        for s in &res.steps {
            assert!(
                s.objective_after <= s.objective_before + 1e-12,
                "objective rose: {} -> {}",
                s.objective_before,
                s.objective_after
            );
        }
        assert!(res.final_rms.unwrap() < 0.001);
    }

    #[test]
    fn refinement_reports_too_few_correspondences() {
        let (_, surface, mut frame, gt) = sphere_setup();
        // Wipe the mask: no correspondences can form.
        frame.mask = MaskImage::new(frame.mask.width(), frame.mask.height(), false);
        let res = refine_pose(&surface, &frame, &k(), &gt, 5, &IcpParams::default());
        assert_eq!(res.status, RefineStatus::TooFewCorrespondences);
        assert_eq!(res.pose.to_row_major(), gt.to_row_major());
        assert!(res.steps.is_empty());
    }

    #[test]
    fn planar_geometry_is_degenerate() {
        // A synthetic plane: normals all agree, so translation along the
        // plane is unobservable and the normal covariance is rank 1.
        let kk = Intrinsics::new(100.0, 100.0, 50.0, 40.0, 100, 80);
        let mut points = Vec::new();
        let mut normals = Vec::new();
        for y in -10..=10 {
            for x in -10..=10 {
                points.push(Vector3::new(x as f64 * 0.01, y as f64 * 0.01, 0.5));
                normals.push(Vector3::new(0.0, 0.0, -1.0));
            }
        }
        let surface = CertainSurface { points, normals };
        let frame = Frame {
            color: ColorImage::new(100, 80, [0.5; 3]),
            depth: DepthImage::new(100, 80, 0.5),
            mask: MaskImage::new(100, 80, true),
        };
        let res = refine_pose(&surface, &frame, &kk, &Pose::identity(), 3, &IcpParams::default());
        assert_eq!(res.status, RefineStatus::Degenerate);
        assert_eq!(res.pose.to_row_major(), Pose::identity().to_row_major());
    }

    #[test]
    fn gt_outscores_rotated_candidate() {
        let (model, surface, frame, gt) = sphere_setup();
        let th = Thresholds::default();
        let w = ScoreWeights::default();
        let icp = IcpParams::default();
        let spun = Pose::new(
            geom::exp_so3(&(Vector3::x() * std::f64::consts::FRAC_PI_2)) * gt.rotation(),
            *gt.translation(),
        );
        let a = score_pose(&model, &surface, &frame, &k(), &gt, &th, &w, 0.01, &icp).unwrap();
        let b = score_pose(&model, &surface, &frame, &k(), &spun, &th, &w, 0.01, &icp).unwrap();
        assert!(a.valid);
        assert!(a.score > b.score, "gt {:.3} vs spun {:.3}", a.score, b.score);
        assert!(a.seen_iou > 0.8, "gt seen-iou {:.3}", a.seen_iou);
    }

    #[test]
    fn selection_breaks_ties_by_index_and_flags_all_gated() {
        let (model, surface, frame, gt) = sphere_setup();
        let w = ScoreWeights::default();
        let icp = IcpParams::default();
        let th = Thresholds::default();
        // Identical candidates: scores tie exactly; index 0 must win.
        let dup = vec![gt, gt, gt];
        let (_, idx) =
            select_pose(&model, &surface, &frame, &k(), &dup, &th, &w, 0.01, &icp).unwrap();
        assert_eq!(idx, 0);

        // Impossible gates: everything invalid, best-IoU candidate returned.
        let strict = Thresholds { t_s: 1.01, ..th };
        let (sel, _) =
            select_pose(&model, &surface, &frame, &k(), &dup, &strict, &w, 0.01, &icp).unwrap();
        assert!(!sel.valid);
        assert!(sel.seen_iou > 0.5);
    }

    #[test]
    fn tracking_follows_a_small_motion() {
        let (model, surface, _, gt) = box_setup();
        // Synthesize the next observation 2° later.
        let step = Pose::new(
            geom::exp_so3(&(Vector3::y() * 2.0f64.to_radians())),
            Vector3::zeros(),
        );
        let next_gt = gt.compose(&step);
        let out = crate::raster::rasterize_mesh(&model.mesh, None, &next_gt, &k()).unwrap();
        let frame = Frame { color: out.color, depth: out.depth, mask: out.mask };
        let tracked = track_frame(
            &model,
            &surface,
            &frame,
            &k(),
            &gt,
            &HypothesisConfig::default(),
            &Thresholds::default(),
            &ScoreWeights::default(),
            0.01,
            &IcpParams::default(),
        )
        .unwrap();
        assert!(tracked.valid, "tracking lost a 2° step");
        let rot_err = tracked.pose.rotation_geodesic_to(&next_gt).to_degrees();
        assert!(rot_err < 1.0, "rotation error {rot_err:.2}°");
    }
}
