//! Indexed triangle meshes with per-vertex colors.

use crate::geom::Pose;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("face {0} references vertex {1} but the mesh has {2} vertices")]
    IndexOutOfRange(usize, u32, usize),
    #[error("colors length {0} does not match vertex count {1}")]
    ColorMismatch(usize, usize),
    #[error("mesh has no faces")]
    Empty,
}

#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    /// Per-vertex linear RGB in `[0, 1]`; same length as `vertices`.
    pub colors: Vec<[f32; 3]>,
    pub faces: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty() || self.vertices.is_empty()
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        if self.colors.len() != self.vertices.len() {
            return Err(MeshError::ColorMismatch(self.colors.len(), self.vertices.len()));
        }
        let n = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            for &v in f {
                if v as usize >= n {
                    return Err(MeshError::IndexOutOfRange(fi, v, n));
                }
            }
        }
        Ok(())
    }

    pub fn face_points(&self, f: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    /// Unnormalized face normal (twice the signed area vector).
    pub fn face_normal_raw(&self, f: usize) -> Vector3<f64> {
        let [a, b, c] = self.face_points(f);
        (b - a).cross(&(c - a))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        0.5 * self.face_normal_raw(f).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Area-weighted average of incident face normals, normalized. Vertices
    /// with no incident faces get a zero normal.
    pub fn vertex_normals(&self) -> Vec<Vector3<f64>> {
        let mut normals = vec![Vector3::zeros(); self.vertices.len()];
        for f in 0..self.faces.len() {
            let n = self.face_normal_raw(f);
            for &v in &self.faces[f] {
                normals[v as usize] += n;
            }
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 1e-18 {
                *n /= len;
            }
        }
        normals
    }

    /// One third of the summed area of each vertex's incident faces. Sums to
    /// the total surface area over all vertices.
    pub fn vertex_dual_areas(&self) -> Vec<f64> {
        let mut areas = vec![0.0; self.vertices.len()];
        for f in 0..self.faces.len() {
            let third = self.face_area(f) / 3.0;
            for &v in &self.faces[f] {
                areas[v as usize] += third;
            }
        }
        areas
    }

    pub fn centroid(&self) -> Vector3<f64> {
        if self.vertices.is_empty() {
            return Vector3::zeros();
        }
        self.vertices.iter().sum::<Vector3<f64>>() / self.vertices.len() as f64
    }

    pub fn bbox(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = *self.vertices.first()?;
        let mut lo = first;
        let mut hi = first;
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        Some((lo, hi))
    }

    pub fn transformed(&self, pose: &Pose) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|v| pose.transform_point(v)).collect(),
            colors: self.colors.clone(),
            faces: self.faces.clone(),
        }
    }

    /// Uniform scaling about a fixed center.
    pub fn scaled_about(&self, center: &Vector3<f64>, scale: f64) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|v| center + (v - center) * scale).collect(),
            colors: self.colors.clone(),
            faces: self.faces.clone(),
        }
    }

    /// Fraction of edges used by exactly one face. Zero for watertight meshes.
    pub fn boundary_edge_fraction(&self) -> f64 {
        let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return 0.0;
        }
        let boundary = counts.values().filter(|&&c| c == 1).count();
        boundary as f64 / counts.len() as f64
    }

    /// Longest pairwise vertex distance, computed on a deterministic
    /// subsample of at most `max_points` vertices (every k-th vertex).
    pub fn diameter_subsampled(&self, max_points: usize) -> f64 {
        let pts = stride_subsample(&self.vertices, max_points);
        farthest_pair_distance(&pts)
    }

    /// Draws `n` points uniformly over the surface area with a seeded RNG:
    /// faces are chosen by cumulative area, positions by barycentric sampling.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Vec<Vector3<f64>> {
        if self.faces.is_empty() || n == 0 {
            return Vec::new();
        }
        let mut cumulative = Vec::with_capacity(self.faces.len());
        let mut total = 0.0;
        for f in 0..self.faces.len() {
            total += self.face_area(f);
            cumulative.push(total);
        }
        if total <= 0.0 {
            return Vec::new();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let r = rng.gen::<f64>() * total;
            let f = cumulative.partition_point(|&c| c < r).min(self.faces.len() - 1);
            let [a, b, c] = self.face_points(f);
            let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            out.push(a + (b - a) * u + (c - a) * v);
        }
        out
    }
}

/// Deterministic at-most-`max` subsample: every k-th element, k chosen so the
/// whole span is covered.
pub fn stride_subsample<T: Copy>(items: &[T], max: usize) -> Vec<T> {
    if items.len() <= max || max == 0 {
        return items.to_vec();
    }
    let stride = items.len().div_ceil(max);
    items.iter().step_by(stride).copied().collect()
}

/// Exact farthest-pair distance by pairwise scan. Quadratic; callers bound
/// the input size via subsampling.
pub fn farthest_pair_distance(points: &[Vector3<f64>]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let d = (points[i] - points[j]).norm();
            if d > best {
                best = d;
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_quad() -> TriangleMesh {
        // Two triangles covering the unit square in the z=0 plane.
        TriangleMesh {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(1.0, 1.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
            colors: vec![[0.5; 3]; 4],
            faces: vec![[0, 1, 2], [0, 2, 3]],
        }
    }

    #[test]
    fn areas_and_normals() {
        let m = unit_quad();
        assert_relative_eq!(m.total_area(), 1.0, epsilon = 1e-12);
        let normals = m.vertex_normals();
        for n in normals {
            assert_relative_eq!(n.norm(), 1.0, epsilon = 1e-12);
            assert_relative_eq!(n.z.abs(), 1.0, epsilon = 1e-12);
        }
        let dual = m.vertex_dual_areas();
        assert_relative_eq!(dual.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn boundary_fraction_open_vs_closed() {
        let quad = unit_quad();
        // 5 distinct edges, 4 on the boundary.
        assert_relative_eq!(quad.boundary_edge_fraction(), 0.8, epsilon = 1e-12);
        let geo = crate::geom::icosphere(0).unwrap();
        let closed = TriangleMesh {
            colors: vec![[0.0; 3]; geo.vertices.len()],
            vertices: geo.vertices,
            faces: geo.faces,
        };
        assert_eq!(closed.boundary_edge_fraction(), 0.0);
    }

    #[test]
    fn surface_sampling_is_on_surface_and_seeded() {
        let m = unit_quad();
        let a = m.sample_surface(200, 7);
        let b = m.sample_surface(200, 7);
        assert_eq!(a, b, "same seed must give identical samples");
        let c = m.sample_surface(200, 8);
        assert_ne!(a, c, "different seed should differ");
        for p in &a {
            assert!(p.z.abs() < 1e-12);
            assert!((0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y));
        }
    }

    #[test]
    fn diameter_of_unit_quad() {
        let m = unit_quad();
        assert_relative_eq!(m.diameter_subsampled(1000), 2.0f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn validate_catches_bad_face() {
        let mut m = unit_quad();
        m.faces.push([0, 1, 9]);
        assert!(matches!(m.validate(), Err(MeshError::IndexOutOfRange(2, 9, 4))));
    }
}
