//! The object model: explicit triangle geometry plus per-vertex uncertainty.
//!
//! A model vertex is *certain* when at least one real reference view saw it:
//! it rasterizes into that view unoccluded (within a depth tolerance) and
//! lands inside the view's object mask. Everything else — back sides,
//! self-occluded patches, and the closure surfaces the fusion stage invents
//! around unobserved space — is *uncertain*. Downstream stages lean on that
//! split: pose scoring ignores uncertain pixels, refinement ignores uncertain
//! vertices, and completion targets the uncertain set.
//!
//! Views rendered from the model itself (pose-hypothesis augmentation for
//! externally supplied meshes) may contribute geometry to fusion but never
//! mark a vertex certain; only observations that actually happened do.

use crate::geom::{GeomError, Intrinsics, Pose};
use crate::img::{Frame, ImgError, MaskImage};
use crate::mesh::TriangleMesh;
use crate::raster::{vertex_visibility, RasterError, RenderOutput};
use crate::volume::{init_volume, TsdfVolume, VolumeError};
use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("no reference observations to build from")]
    NoReferences,
    #[error("reference views contain no valid masked depth")]
    EmptyObservations,
    #[error("render covers no pixels; uncertainty rate is undefined")]
    EmptyRender,
    #[error("model has {uncertain} uncertainty labels for {vertices} vertices")]
    LabelMismatch { uncertain: usize, vertices: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Img(#[from] ImgError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Where a model came from — bookkeeping that the pipeline uses to decide
/// when rescaling/augmentation logic still applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Fused from posed reference views (or the first test frame).
    FromReferences,
    /// An externally supplied mesh, aligned but not yet re-fused.
    FromGenerated,
    /// Produced by an online completion rebuild.
    Rebuilt,
}

/// Triangle geometry with per-vertex uncertainty and outward normals.
#[derive(Debug, Clone)]
pub struct HybridModel {
    pub mesh: TriangleMesh,
    /// True for vertices no real observation has confirmed.
    pub uncertain: Vec<bool>,
    /// Outward unit normals (distance-field gradient for fused models).
    pub normals: Vec<Vector3<f64>>,
    pub provenance: Provenance,
    /// Increments on every successful rebuild.
    pub build_stamp: u64,
    /// Depth tolerance used for visibility labeling, in meters.
    pub vis_eps: f64,
}

impl HybridModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.uncertain.len() != self.mesh.vertices.len()
            || self.normals.len() != self.mesh.vertices.len()
        {
            return Err(ModelError::LabelMismatch {
                uncertain: self.uncertain.len(),
                vertices: self.mesh.vertices.len(),
            });
        }
        Ok(())
    }

    pub fn certain_vertex_fraction(&self) -> f64 {
        if self.uncertain.is_empty() {
            return 0.0;
        }
        let certain = self.uncertain.iter().filter(|&&u| !u).count();
        certain as f64 / self.uncertain.len() as f64
    }

    /// Fraction of surface area whose faces render as certain (a face is
    /// uncertain when at least two of its vertices are).
    pub fn certain_area_fraction(&self) -> f64 {
        let mut certain = 0.0;
        let mut total = 0.0;
        for (fi, f) in self.mesh.faces.iter().enumerate() {
            let a = self.mesh.face_area(fi);
            total += a;
            let n = usize::from(self.uncertain[f[0] as usize])
                + usize::from(self.uncertain[f[1] as usize])
                + usize::from(self.uncertain[f[2] as usize]);
            if n < 2 {
                certain += a;
            }
        }
        if total > 0.0 {
            certain / total
        } else {
            0.0
        }
    }
}

/// One posed reference observation.
#[derive(Debug, Clone)]
pub struct RefFrame {
    pub frame: Frame,
    /// Object-to-camera pose of the observation.
    pub pose: Pose,
    pub k: Intrinsics,
}

/// An ordered collection of posed reference observations.
#[derive(Debug, Clone, Default)]
pub struct ReferenceSet {
    pub frames: Vec<RefFrame>,
}

impl ReferenceSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Fusion parameters for model building.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BuildParams {
    /// Voxels along the longest bounding-box axis.
    pub resolution: usize,
    /// Truncation band in meters.
    pub truncation_m: f64,
    /// Bounding-box padding in meters.
    pub padding_m: f64,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self { resolution: 128, truncation_m: 0.01, padding_m: 0.05 }
    }
}

/// Builds a model by fusing real reference views. See [`build_model_with`].
pub fn build_model(refs: &ReferenceSet, params: &BuildParams) -> Result<HybridModel, ModelError> {
    build_model_with(refs, &ReferenceSet::default(), params, Provenance::FromReferences, 0)
}

/// Fuses `real` and `augmented` views into a fresh volume, extracts the
/// surface, and labels vertex certainty from the *real* views only.
///
/// The volume is sized from the union of back-projected masked depth across
/// all contributing views, so rebuilds adapt to however much of the object
/// has been seen. Returns the fused volume alongside the model so callers
/// that need volumetric renders don't have to re-fuse.
pub fn build_model_with(
    real: &ReferenceSet,
    augmented: &ReferenceSet,
    params: &BuildParams,
    provenance: Provenance,
    build_stamp: u64,
) -> Result<HybridModel, ModelError> {
    Ok(build_model_and_volume(real, augmented, params, provenance, build_stamp)?.0)
}

/// [`build_model_with`], also handing back the fused volume.
pub fn build_model_and_volume(
    real: &ReferenceSet,
    augmented: &ReferenceSet,
    params: &BuildParams,
    provenance: Provenance,
    build_stamp: u64,
) -> Result<(HybridModel, TsdfVolume), ModelError> {
    if real.is_empty() && augmented.is_empty() {
        return Err(ModelError::NoReferences);
    }
    let mut lo = Vector3::from_element(f64::INFINITY);
    let mut hi = Vector3::from_element(f64::NEG_INFINITY);
    for rf in real.frames.iter().chain(&augmented.frames) {
        let inv = rf.pose.inverse();
        for py in 0..rf.k.height {
            for px in 0..rf.k.width {
                if !*rf.frame.mask.get(px, py) {
                    continue;
                }
                let d = *rf.frame.depth.get(px, py) as f64;
                if d <= 0.0 {
                    continue;
                }
                let p = inv.transform_point(&rf.k.back_project(
                    px as f64 + 0.5,
                    py as f64 + 0.5,
                    d,
                ));
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
    }
    if !lo.x.is_finite() {
        return Err(ModelError::EmptyObservations);
    }
    let mut vol =
        init_volume(&[lo, hi], params.padding_m, params.resolution, params.truncation_m)?;
    for rf in real.frames.iter().chain(&augmented.frames) {
        vol.integrate_frame(&rf.frame, &rf.pose, &rf.k)?;
    }
    let mesh = vol.extract_mesh()?;
    let vis_eps = (0.5 * vol.voxel_size).max(1e-4);
    let uncertain = label_uncertain(&mesh, real, vis_eps)?;

    // Prefer field-gradient normals; fall back to area-weighted normals in
    // the rare spots where the gradient vanishes.
    let mut normals = vol.vertex_normals_from_gradient(&mesh);
    if normals.iter().any(|n| n.norm() < 0.5) {
        let area = mesh.vertex_normals();
        for (n, a) in normals.iter_mut().zip(area) {
            if n.norm() < 0.5 {
                *n = a;
            }
        }
    }

    Ok((
        HybridModel { mesh, uncertain, normals, provenance, build_stamp, vis_eps },
        vol,
    ))
}

/// Labels each vertex uncertain unless some view in `refs` sees it: visible
/// in the depth buffer within `eps` and inside that view's object mask.
///
/// Adding views can only turn labels from uncertain to certain, never back.
pub fn label_uncertain(
    mesh: &TriangleMesh,
    refs: &ReferenceSet,
    eps: f64,
) -> Result<Vec<bool>, ModelError> {
    let mut uncertain = vec![true; mesh.vertices.len()];
    for rf in &refs.frames {
        let vis = vertex_visibility(mesh, &rf.pose, &rf.k, Some(&rf.frame.mask), eps)?;
        for (u, v) in uncertain.iter_mut().zip(vis) {
            if v {
                *u = false;
            }
        }
    }
    Ok(uncertain)
}

/// Fraction of rendered pixels that are uncertain. Errors when the render
/// covers nothing — the caller decides what an off-screen hypothesis means.
pub fn uncertainty_rate(render: &RenderOutput) -> Result<f64, ModelError> {
    let total = render.mask.count();
    if total == 0 {
        return Err(ModelError::EmptyRender);
    }
    let mut unc = 0usize;
    for (m, u) in render.mask.data().iter().zip(render.uncertainty.data()) {
        if *m && *u {
            unc += 1;
        }
    }
    Ok(unc as f64 / total as f64)
}

/// IoU between the *certain* rendered region and an observed mask. Returns 0
/// when both are empty (no evidence either way).
pub fn seen_iou(render: &RenderOutput, test_mask: &MaskImage) -> Result<f64, ModelError> {
    render.mask.check_same_size(test_mask)?;
    let mut seen = MaskImage::new(test_mask.width(), test_mask.height(), false);
    for y in 0..test_mask.height() {
        for x in 0..test_mask.width() {
            seen.set(x, y, *render.mask.get(x, y) && !*render.uncertainty.get(x, y));
        }
    }
    Ok(seen.iou(test_mask)?)
}
