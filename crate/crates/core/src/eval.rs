//! Pose and reconstruction accuracy metrics.
//!
//! Pose error is measured on the model's own points: ADD is the mean
//! distance between corresponding points under the ground-truth and the
//! estimated pose, ADD-S its symmetric-object variant using nearest
//! neighbors instead of correspondences. Both summarize across a sequence
//! as the exact area under the accuracy-threshold curve. Reconstruction
//! quality is a sampled chamfer distance between meshes.

use crate::geom::Pose;
use crate::mesh::TriangleMesh;
use crate::par;
use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no points to evaluate on")]
    NoPoints,
    #[error("no errors to aggregate")]
    NoErrors,
    #[error("threshold must be positive (got {0})")]
    BadThreshold(f64),
    #[error("ground truth and estimates differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cannot sample an empty mesh")]
    EmptyMesh,
}

/// Mean distance between the same model point under two poses.
pub fn add_error(points: &[Vector3<f64>], gt: &Pose, est: &Pose) -> Result<f64, EvalError> {
    if points.is_empty() {
        return Err(EvalError::NoPoints);
    }
    let sum = par::sum_indexed(points.len(), |i| {
        (gt.transform_point(&points[i]) - est.transform_point(&points[i])).norm()
    });
    Ok(sum / points.len() as f64)
}

/// Mean distance from each ground-truth-posed point to its *nearest*
/// estimated-posed point. Invariant to self-symmetries of the point set,
/// which makes it the honest metric for objects like cylinders.
pub fn adds_error(points: &[Vector3<f64>], gt: &Pose, est: &Pose) -> Result<f64, EvalError> {
    if points.is_empty() {
        return Err(EvalError::NoPoints);
    }
    let gt_pts: Vec<Vector3<f64>> = points.iter().map(|p| gt.transform_point(p)).collect();
    let est_pts: Vec<Vector3<f64>> = points.iter().map(|p| est.transform_point(p)).collect();
    let sum = par::sum_indexed(gt_pts.len(), |i| {
        est_pts
            .iter()
            .map(|q| (gt_pts[i] - q).norm_squared())
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    });
    Ok(sum / points.len() as f64)
}

/// Exact area under the accuracy-threshold curve over `[0, threshold]`,
/// scaled to 0..100.
///
/// The curve is a step function of the sorted errors, so the integral has
/// the closed form `100 * mean(1 - min(e, T) / T)` — no binning involved.
pub fn auc(errors: &[f64], threshold: f64) -> Result<f64, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::NoErrors);
    }
    if !(threshold > 0.0) {
        return Err(EvalError::BadThreshold(threshold));
    }
    let sum: f64 = errors.iter().map(|e| 1.0 - e.min(threshold).max(0.0) / threshold).sum();
    Ok(100.0 * sum / errors.len() as f64)
}

/// Sampled chamfer distance between two surfaces, in centimeters.
///
/// Both meshes are sampled uniformly by area (`samples` points each, seeded
/// deterministically); distances are nearest-neighbor means, averaged over
/// both directions unless `symmetric` is off (then only `a -> b`, useful
/// when `b` is a complete ground truth and `a` a partial reconstruction).
pub fn chamfer_cm(
    a: &TriangleMesh,
    b: &TriangleMesh,
    samples: usize,
    seed: u64,
    symmetric: bool,
) -> Result<f64, EvalError> {
    let pa = a.sample_surface(samples, seed);
    let pb = b.sample_surface(samples, seed.wrapping_add(1));
    if pa.is_empty() || pb.is_empty() {
        return Err(EvalError::EmptyMesh);
    }
    let dir = |from: &[Vector3<f64>], to: &[Vector3<f64>]| -> f64 {
        par::sum_indexed(from.len(), |i| {
            to.iter()
                .map(|q| (from[i] - q).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        }) / from.len() as f64
    };
    let fwd = dir(&pa, &pb);
    let m = if symmetric { 0.5 * (fwd + dir(&pb, &pa)) } else { fwd };
    Ok(m * 100.0)
}

/// One frame's pose estimate against ground truth.
#[derive(Debug, Clone, Copy)]
pub struct PoseEstimate {
    pub frame_id: u64,
    pub gt: Pose,
    pub est: Pose,
    /// Whether the tracker itself believed this estimate.
    pub valid: bool,
}

/// Per-frame metric breakdown.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct FrameMetric {
    pub frame_id: u64,
    pub add_m: f64,
    pub adds_m: f64,
    pub rotation_deg: f64,
    pub translation_m: f64,
    pub valid: bool,
}

/// Sequence-level summary.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub frames: Vec<FrameMetric>,
    /// AUC of ADD at the threshold used, 0..100.
    pub auc_add: f64,
    /// AUC of ADD-S at the threshold used, 0..100.
    pub auc_adds: f64,
    pub auc_threshold_m: f64,
    pub mean_add_m: f64,
    pub mean_adds_m: f64,
    pub mean_rotation_deg: f64,
    pub mean_translation_m: f64,
    pub valid_frames: usize,
}

/// Evaluates a tracked sequence on the given model points.
pub fn evaluate(
    points: &[Vector3<f64>],
    estimates: &[PoseEstimate],
    auc_threshold_m: f64,
) -> Result<MetricReport, EvalError> {
    if estimates.is_empty() {
        return Err(EvalError::NoErrors);
    }
    let mut frames = Vec::with_capacity(estimates.len());
    for e in estimates {
        frames.push(FrameMetric {
            frame_id: e.frame_id,
            add_m: add_error(points, &e.gt, &e.est)?,
            adds_m: adds_error(points, &e.gt, &e.est)?,
            rotation_deg: e.gt.rotation_geodesic_to(&e.est).to_degrees(),
            translation_m: (e.gt.translation() - e.est.translation()).norm(),
            valid: e.valid,
        });
    }
    let adds: Vec<f64> = frames.iter().map(|f| f.add_m).collect();
    let addss: Vec<f64> = frames.iter().map(|f| f.adds_m).collect();
    let n = frames.len() as f64;
    Ok(MetricReport {
        auc_add: auc(&adds, auc_threshold_m)?,
        auc_adds: auc(&addss, auc_threshold_m)?,
        auc_threshold_m,
        mean_add_m: adds.iter().sum::<f64>() / n,
        mean_adds_m: addss.iter().sum::<f64>() / n,
        mean_rotation_deg: frames.iter().map(|f| f.rotation_deg).sum::<f64>() / n,
        mean_translation_m: frames.iter().map(|f| f.translation_m).sum::<f64>() / n,
        valid_frames: frames.iter().filter(|f| f.valid).count(),
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::exp_so3;
    use crate::synth;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;

    fn cloud() -> Vec<Vector3<f64>> {
        synth::icosphere_mesh(0.05, 1).unwrap().vertices
    }

    #[test]
    fn identical_poses_score_perfectly() {
        let pts = cloud();
        let p = Pose::new(exp_so3(&Vector3::new(0.3, -0.2, 0.1)), Vector3::new(0.1, 0.0, 0.5));
        assert_eq!(add_error(&pts, &p, &p).unwrap(), 0.0);
        assert_eq!(adds_error(&pts, &p, &p).unwrap(), 0.0);
        let est = [PoseEstimate { frame_id: 0, gt: p, est: p, valid: true }];
        let report = evaluate(&pts, &est, 0.1).unwrap();
        assert_eq!(report.auc_add, 100.0);
        assert_eq!(report.auc_adds, 100.0);
        assert_eq!(report.mean_rotation_deg, 0.0);
    }

    #[test]
    fn pure_translation_offset_is_exact() {
        let pts = cloud();
        let gt = Pose::identity();
        let est = Pose::new(Matrix3::identity(), Vector3::new(0.003, -0.004, 0.0));
        // Every point moves by exactly |t| = 5 mm.
        assert_relative_eq!(add_error(&pts, &gt, &est).unwrap(), 0.005, epsilon = 1e-12);
        let report = evaluate(
            &pts,
            &[PoseEstimate { frame_id: 0, gt, est, valid: true }],
            0.1,
        )
        .unwrap();
        assert_relative_eq!(report.auc_add, 100.0 * (1.0 - 0.005 / 0.1), epsilon = 1e-9);
        assert_relative_eq!(report.mean_translation_m, 0.005, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_metric_forgives_axis_spin() {
        // Spinning a cylinder about its axis by exactly one radial segment
        // maps every vertex onto another vertex: ADD-S vanishes while ADD
        // sees the full chord displacement.
        let mesh = synth::cylinder_mesh(0.04, 0.1, 24, 4).unwrap();
        let gt = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 0.4));
        let spin = 2.0 * std::f64::consts::PI / 24.0;
        let est = Pose::new(
            gt.rotation() * exp_so3(&(Vector3::y() * spin)),
            *gt.translation(),
        );
        let add = add_error(&mesh.vertices, &gt, &est).unwrap();
        let adds = adds_error(&mesh.vertices, &gt, &est).unwrap();
        // Side vertices move by a full chord; only the two cap centers stay.
        let chord = 2.0 * 0.04 * (spin / 2.0).sin();
        assert!(add > 0.8 * chord, "ADD should see the spin, got {add}");
        assert!(adds < 1e-9, "ADD-S should forgive the spin, got {adds}");
    }

    #[test]
    fn auc_closed_form_matches_hand_computation() {
        let t = 0.1;
        // Contributions: 1, 0.5, 0, 0 -> mean 0.375.
        let errors = [0.0, 0.05, 0.1, 0.2];
        assert_relative_eq!(auc(&errors, t).unwrap(), 37.5, epsilon = 1e-12);
        // All past the threshold: zero area.
        assert_eq!(auc(&[1.0, 2.0], t).unwrap(), 0.0);
        // All perfect: full area.
        assert_eq!(auc(&[0.0, 0.0], t).unwrap(), 100.0);
        assert!(matches!(auc(&[], t), Err(EvalError::NoErrors)));
        assert!(matches!(auc(&[0.1], 0.0), Err(EvalError::BadThreshold(_))));
    }

    #[test]
    fn chamfer_sees_concentric_sphere_gap() {
        let a = synth::icosphere_mesh(0.05, 3).unwrap();
        let b = synth::icosphere_mesh(0.06, 3).unwrap();
        let d = chamfer_cm(&a, &b, 4000, 11, true).unwrap();
        // True surface-to-surface gap is 1 cm; sampling noise stays small at
        // this density.
        assert_relative_eq!(d, 1.0, max_relative = 0.1);
        // Identical meshes: only sampling noise remains.
        let same = chamfer_cm(&a, &a, 4000, 11, true).unwrap();
        assert!(same < 0.15, "self-chamfer should be near zero, got {same}");
    }

    #[test]
    fn one_directional_chamfer_ignores_missing_geometry() {
        // A partial reconstruction (half the sphere) against the full truth:
        // forward distance stays small, symmetric blows up.
        let full = synth::icosphere_mesh(0.05, 3).unwrap();
        let mut half = full.clone();
        half.faces.retain(|f| {
            let c = (half.vertices[f[0] as usize]
                + half.vertices[f[1] as usize]
                + half.vertices[f[2] as usize])
                / 3.0;
            c.z < 0.0
        });
        let forward = chamfer_cm(&half, &full, 3000, 5, false).unwrap();
        let sym = chamfer_cm(&half, &full, 3000, 5, true).unwrap();
        assert!(forward < 0.1, "partial->full should be tiny, got {forward}");
        assert!(sym > 5.0 * forward, "symmetric should punish the hole");
    }
}
