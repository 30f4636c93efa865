//! Rigid-body poses, pinhole intrinsics, and viewpoint sampling.
//!
//! Conventions used throughout the crate:
//!
//! - A [`Pose`] maps object-frame points into camera-frame points:
//!   `p_cam = R * p_obj + t`. Matrices are row-major when flattened.
//! - The camera looks down +z; x is the image u axis, y the image v axis.
//! - Pixel `(i, j)` covers the square `[i, i+1) x [j, j+1)` in continuous
//!   image coordinates, so its center sits at `(i + 0.5, j + 0.5)`.
//! - Rotation distance is the geodesic angle on SO(3).

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("matrix is not a rotation: deviation from orthonormality {0:.2e} exceeds 1e-4")]
    InvalidRotation(f64),
    #[error("icosphere subdivision level {0} not supported (max {MAX_ICOSPHERE_LEVEL})")]
    InvalidSubdivision(usize),
    #[error("in-plane rotation count must be positive")]
    EmptyInplaneSet,
    #[error("intrinsics invalid: {0}")]
    InvalidIntrinsics(String),
    #[error("point behind camera (z = {0})")]
    BehindCamera(f64),
}

/// Highest supported icosphere subdivision (642 vertices).
pub const MAX_ICOSPHERE_LEVEL: usize = 3;

/// Rigid transform from object to camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Camera center expressed in the object frame.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        Self {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// Row-major flattening of the 4x4 homogeneous matrix, as stored in pose
    /// files and trajectory records.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64; 16]) -> Self {
        let mut m = Matrix4::zeros();
        for r in 0..4 {
            for c in 0..4 {
                m[(r, c)] = v[r * 4 + c];
            }
        }
        Self::from_matrix(&m)
    }

    /// Geodesic rotation distance to `other`, without orthonormality checks.
    pub fn rotation_geodesic_to(&self, other: &Pose) -> f64 {
        rotation_angle(&self.rotation, &other.rotation)
    }

    /// Projects the rotation part back onto SO(3) (nearest rotation in the
    /// Frobenius sense). Call after chains of incremental updates.
    pub fn orthonormalized(&self) -> Pose {
        Pose { rotation: orthonormalize(&self.rotation), translation: self.translation }
    }
}

/// Deviation of `m` from being a proper rotation: max of `|mᵀm - I|` entries
/// and `|det(m) - 1|`.
pub fn rotation_defect(m: &Matrix3<f64>) -> f64 {
    let gram = m.transpose() * m - Matrix3::identity();
    let mut d: f64 = (m.determinant() - 1.0).abs();
    for v in gram.iter() {
        d = d.max(v.abs());
    }
    d
}

/// Nearest rotation matrix via polar decomposition.
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd with u");
    let vt = svd.v_t.expect("svd with v_t");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        // Flip the axis of least significance to stay in SO(3).
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    r
}

/// Unchecked geodesic angle between two rotations:
/// `arccos(clamp((tr(aᵀb) - 1) / 2, -1, 1))`.
pub fn rotation_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let tr = (a.transpose() * b).trace();
    (0.5 * (tr - 1.0)).clamp(-1.0, 1.0).acos()
}

/// Geodesic rotation distance with input validation: both matrices must be
/// orthonormal with determinant +1 within `1e-4`.
pub fn geodesic_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> Result<f64, GeomError> {
    for m in [a, b] {
        let d = rotation_defect(m);
        if d > 1e-4 {
            return Err(GeomError::InvalidRotation(d));
        }
    }
    Ok(rotation_angle(a, b))
}

/// Rodrigues' formula: rotation matrix for an axis-angle vector.
pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    if theta < 1e-12 {
        return Matrix3::identity();
    }
    let k = w / theta;
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Matrix3::identity() + kx * theta.sin() + kx * kx * (1.0 - theta.cos())
}

/// Pinhole camera intrinsics with image size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self { fx, fy, cx, cy, width, height }
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeomError::InvalidIntrinsics("zero image size".into()));
        }
        Ok(())
    }

    /// Projects a camera-frame point to continuous pixel coordinates plus its
    /// camera depth. Fails for points at or behind the camera plane.
    pub fn project(&self, p: &Vector3<f64>) -> Result<(f64, f64, f64), GeomError> {
        if p.z <= 0.0 {
            return Err(GeomError::BehindCamera(p.z));
        }
        Ok((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy, p.z))
    }

    /// Back-projects pixel `(u, v)` at camera depth `z` to a camera-frame point.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z)
    }

    /// Pixel index containing continuous coordinates `(u, v)`, or `None` when
    /// outside the image.
    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        if u < 0.0 || v < 0.0 {
            return None;
        }
        let (i, j) = (u as usize, v as usize);
        (i < self.width && j < self.height).then_some((i, j))
    }
}

/// How a set of candidate viewpoint rotations was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewpointSource {
    /// Vertices of a subdivided icosahedron, cameras facing the target.
    Icosphere { level: usize },
    /// Rotations about the optical axis.
    Inplane { count: usize },
    /// Product of an icosphere set with an in-plane set.
    Product,
}

/// A deterministic, duplicate-free set of candidate rotations.
#[derive(Debug, Clone)]
pub struct ViewpointSet {
    pub rotations: Vec<Matrix3<f64>>,
    pub source: ViewpointSource,
}

impl ViewpointSet {
    /// Checks that no two rotations coincide within `1e-6` radians. Quadratic;
    /// intended for tests and one-off validation.
    pub fn is_duplicate_free(&self) -> bool {
        for i in 0..self.rotations.len() {
            for j in (i + 1)..self.rotations.len() {
                if rotation_angle(&self.rotations[i], &self.rotations[j]) < 1e-6 {
                    return false;
                }
            }
        }
        true
    }
}

/// Unit icosphere geometry: vertices on the unit sphere plus triangle faces.
/// Subdivision `0` is the icosahedron (12 vertices); each level splits every
/// edge at its midpoint. Vertex order is deterministic: the previous level's
/// vertices first, then one midpoint per edge in sorted `(lo, hi)` index order.
#[derive(Debug, Clone)]
pub struct IcosphereGeometry {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
}

/// Builds the unit icosphere at the given subdivision level.
pub fn icosphere(level: usize) -> Result<IcosphereGeometry, GeomError> {
    if level > MAX_ICOSPHERE_LEVEL {
        return Err(GeomError::InvalidSubdivision(level));
    }
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let raw = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ];
    let mut vertices: Vec<Vector3<f64>> =
        raw.iter().map(|&(x, y, z)| Vector3::new(x, y, z).normalize()).collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..level {
        // Assign midpoint indices in sorted edge order so vertex numbering is
        // independent of face traversal order.
        let mut edges: Vec<(u32, u32)> = Vec::with_capacity(faces.len() * 3 / 2);
        for f in &faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let e = (a.min(b), a.max(b));
                edges.push(e);
            }
        }
        edges.sort_unstable();
        edges.dedup();
        let base = vertices.len() as u32;
        let mut midpoint = std::collections::HashMap::with_capacity(edges.len());
        for (i, &(a, b)) in edges.iter().enumerate() {
            let m = (vertices[a as usize] + vertices[b as usize]).normalize();
            vertices.push(m);
            midpoint.insert((a, b), base + i as u32);
        }
        let mid = |a: u32, b: u32| midpoint[&(a.min(b), a.max(b))];
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let (a, b, c) = (f[0], f[1], f[2]);
            let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    Ok(IcosphereGeometry { vertices, faces })
}

/// Number of icosphere vertices at a subdivision level (12, 42, 162, 642).
pub fn icosphere_vertex_count(level: usize) -> usize {
    // V_{k+1} = V_k + E_k with E_0 = 30 and E_{k+1} = 2 E_k + 3 F_k, F_0 = 20.
    let (mut v, mut e, mut f) = (12usize, 30usize, 20usize);
    for _ in 0..level {
        v += e;
        e = 2 * e + 3 * f;
        f *= 4;
    }
    v
}

/// World-to-camera rotation for a camera at `eye` looking at `target`.
/// Rows are the camera axes in world coordinates; the camera z-axis points
/// from `eye` toward `target`. Up reference is world +y, falling back to
/// world +x when the view direction is within `1e-6` of ±y.
pub fn look_at_rotation(eye: &Vector3<f64>, target: &Vector3<f64>) -> Matrix3<f64> {
    let z = (target - eye).normalize();
    let up = Vector3::new(0.0, 1.0, 0.0);
    let up = if z.cross(&up).norm() < 1e-6 { Vector3::new(1.0, 0.0, 0.0) } else { up };
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

/// Camera rotations facing `target_center` from every icosphere vertex
/// direction. Rotations are translation-invariant, so the set depends only on
/// the subdivision level; `target_center` fixes the orientation convention.
pub fn icosphere_viewpoints(
    level: usize,
    target_center: &Vector3<f64>,
) -> Result<ViewpointSet, GeomError> {
    let geo = icosphere(level)?;
    let rotations = geo
        .vertices
        .iter()
        .map(|v| look_at_rotation(&(target_center + v), target_center))
        .collect();
    Ok(ViewpointSet { rotations, source: ViewpointSource::Icosphere { level } })
}

/// `n` evenly spaced rotations about the camera optical axis, starting at the
/// identity.
pub fn inplane_rotations(n: usize) -> Result<ViewpointSet, GeomError> {
    if n == 0 {
        return Err(GeomError::EmptyInplaneSet);
    }
    let rotations = (0..n)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            let (s, c) = a.sin_cos();
            Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
        })
        .collect();
    Ok(ViewpointSet { rotations, source: ViewpointSource::Inplane { count: n } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rot_x(a: f64) -> Matrix3<f64> {
        let (s, c) = a.sin_cos();
        Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
    }

    #[test]
    fn geodesic_identity_is_zero() {
        let i = Matrix3::identity();
        assert_eq!(geodesic_distance(&i, &i).unwrap(), 0.0);
    }

    #[test]
    fn geodesic_quarter_turn() {
        let i = Matrix3::identity();
        let r = rot_x(std::f64::consts::FRAC_PI_2);
        assert_relative_eq!(
            geodesic_distance(&i, &r).unwrap(),
            std::f64::consts::FRAC_PI_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn geodesic_half_turn_hits_pi() {
        let i = Matrix3::identity();
        let r = rot_x(std::f64::consts::PI);
        assert_relative_eq!(geodesic_distance(&i, &r).unwrap(), std::f64::consts::PI, epsilon = 1e-9);
    }

    #[test]
    fn geodesic_rejects_non_rotation() {
        let i = Matrix3::identity();
        let bad = Matrix3::identity() * 1.01;
        assert!(matches!(geodesic_distance(&i, &bad), Err(GeomError::InvalidRotation(_))));
    }

    #[test]
    fn geodesic_is_symmetric() {
        let a = rot_x(0.3);
        let b = rot_x(1.2) * rot_z(0.4);
        assert_relative_eq!(
            geodesic_distance(&a, &b).unwrap(),
            geodesic_distance(&b, &a).unwrap(),
            epsilon = 1e-12
        );
    }

    fn rot_z(a: f64) -> Matrix3<f64> {
        let (s, c) = a.sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn icosphere_vertex_counts() {
        for (level, count) in [(0, 12), (1, 42), (2, 162), (3, 642)] {
            let geo = icosphere(level).unwrap();
            assert_eq!(geo.vertices.len(), count, "level {level}");
            assert_eq!(icosphere_vertex_count(level), count);
            for v in &geo.vertices {
                assert_relative_eq!(v.norm(), 1.0, epsilon = 1e-12);
            }
        }
        assert!(matches!(icosphere(4), Err(GeomError::InvalidSubdivision(4))));
    }

    #[test]
    fn icosphere_viewpoints_face_target_and_are_distinct() {
        let target = Vector3::new(0.2, -0.1, 0.4);
        let set = icosphere_viewpoints(1, &target).unwrap();
        assert_eq!(set.rotations.len(), 42);
        assert!(set.is_duplicate_free());
        let geo = icosphere(1).unwrap();
        for (r, v) in set.rotations.iter().zip(&geo.vertices) {
            // Camera z-axis (third row) must point from eye back at the target.
            let z = Vector3::new(r[(2, 0)], r[(2, 1)], r[(2, 2)]);
            assert!((z + v).norm() < 1e-6, "z-axis not aimed at target");
            assert!(rotation_defect(r) < 1e-9);
        }
    }

    #[test]
    fn look_at_up_fallback_near_poles() {
        // View direction exactly along -y: the +y up reference degenerates.
        let r = look_at_rotation(&Vector3::new(0.0, 1.0, 0.0), &Vector3::zeros());
        assert!(rotation_defect(&r) < 1e-9);
        let z = Vector3::new(r[(2, 0)], r[(2, 1)], r[(2, 2)]);
        assert!((z - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn inplane_rotations_spacing() {
        let set = inplane_rotations(12).unwrap();
        assert_eq!(set.rotations.len(), 12);
        assert_eq!(set.rotations[0], Matrix3::identity());
        assert!(set.is_duplicate_free());
        let step = rotation_angle(&set.rotations[0], &set.rotations[1]);
        assert_relative_eq!(step, std::f64::consts::PI / 6.0, epsilon = 1e-12);
        assert!(matches!(inplane_rotations(0), Err(GeomError::EmptyInplaneSet)));
    }

    #[test]
    fn project_back_project_round_trip() {
        let k = Intrinsics::new(525.0, 525.0, 319.5, 239.5, 640, 480);
        for &z in &[0.1, 0.5, 1.7, 5.0] {
            let p = Vector3::new(0.05 * z, -0.03 * z, z);
            let (u, v, d) = k.project(&p).unwrap();
            let q = k.back_project(u, v, d);
            assert!((p - q).norm() < 1e-9);
        }
        assert!(matches!(
            k.project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(GeomError::BehindCamera(_))
        ));
    }

    #[test]
    fn pose_compose_inverse_round_trip() {
        let a = Pose::new(rot_x(0.7) * rot_z(-0.2), Vector3::new(0.1, 0.2, 0.3));
        let p = Vector3::new(0.4, -0.5, 0.6);
        let q = a.inverse().transform_point(&a.transform_point(&p));
        assert!((p - q).norm() < 1e-12);
        let id = a.compose(&a.inverse());
        assert!(rotation_angle(id.rotation(), &Matrix3::identity()) < 1e-12);
        assert!(id.translation().norm() < 1e-12);
    }

    #[test]
    fn pose_row_major_round_trip() {
        let a = Pose::new(rot_z(1.1), Vector3::new(-0.3, 0.9, 2.0));
        let b = Pose::from_row_major(&a.to_row_major());
        assert!((a.to_matrix() - b.to_matrix()).abs().max() < 1e-15);
    }

    #[test]
    fn orthonormalize_restores_rotation() {
        let noisy = rot_x(0.4) + Matrix3::from_element(1e-3);
        let r = orthonormalize(&noisy);
        assert!(rotation_defect(&r) < 1e-12);
        assert!(rotation_angle(&r, &rot_x(0.4)) < 0.01);
    }
}
