//! Owned row-major image buffers for color, depth, and masks.
//!
//! Color channels are linear floats in `[0, 1]`. Depth is metric (meters)
//! with `0` meaning invalid/missing. Masks are plain booleans.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImgError {
    #[error("image size mismatch: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("data length {0} does not match {1}x{2}")]
    BadLength(usize, usize, usize),
}

/// Rectangular buffer with `(0, 0)` at the top-left, stored row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type ColorImage = Image<[f32; 3]>;
pub type DepthImage = Image<f32>;
pub type MaskImage = Image<bool>;

impl<T: Clone> Image<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self { width, height, data: vec![fill; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self, ImgError> {
        if data.len() != width * height {
            return Err(ImgError::BadLength(data.len(), width, height));
        }
        Ok(Self { width, height, data })
    }
}

impl<T> Image<T> {
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_size<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_same_size<U>(&self, other: &Image<U>) -> Result<(), ImgError> {
        if self.same_size(other) {
            Ok(())
        } else {
            Err(ImgError::SizeMismatch(self.width, self.height, other.width, other.height))
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[self.idx(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        let i = self.idx(x, y);
        self.data[i] = v;
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl MaskImage {
    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    /// Mean pixel coordinates (continuous, pixel centers) of the set region.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut su, mut sv) = (0.0f64, 0.0f64);
        for y in 0..self.height {
            for x in 0..self.width {
                if *self.get(x, y) {
                    su += x as f64 + 0.5;
                    sv += y as f64 + 0.5;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (su / n as f64, sv / n as f64))
    }

    /// Intersection-over-union with another mask of the same size. Returns 0
    /// when both masks are empty.
    pub fn iou(&self, other: &MaskImage) -> Result<f64, ImgError> {
        self.check_same_size(other)?;
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.data.iter().zip(&other.data) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        if union == 0 {
            return Ok(0.0);
        }
        Ok(inter as f64 / union as f64)
    }
}

/// One RGBD observation: color, metric depth, and an object mask, all the
/// same size.
#[derive(Debug, Clone)]
pub struct Frame {
    pub color: ColorImage,
    pub depth: DepthImage,
    pub mask: MaskImage,
}

impl Frame {
    pub fn validate(&self) -> Result<(), ImgError> {
        self.color.check_same_size(&self.depth)?;
        self.color.check_same_size(&self.mask)?;
        Ok(())
    }
}
