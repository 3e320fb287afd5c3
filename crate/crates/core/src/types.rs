//! Shared data model: pixel grids, frame stacks and the two-class prior.
//!
//! Images are vectorized row-major everywhere (`index = row * width + col`),
//! so a frame column, a subspace basis column and an `ImageGrid` all index
//! pixels identically.

use nalgebra::{DMatrix, DVectorView};

use crate::error::{Error, Result};

/// Default pixel pitch in meters.
pub const DEFAULT_PIXEL_PITCH: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub width: usize,
    pub height: usize,
    pub pixel_pitch_x: f64,
    pub pixel_pitch_y: f64,
    values: Vec<f64>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        Self::with_pitch(
            width,
            height,
            DEFAULT_PIXEL_PITCH,
            DEFAULT_PIXEL_PITCH,
            values,
        )
    }

    pub fn with_pitch(
        width: usize,
        height: usize,
        pixel_pitch_x: f64,
        pixel_pitch_y: f64,
        values: Vec<f64>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Contract(format!(
                "grid dimensions must be positive, got {width}x{height}"
            )));
        }
        if values.len() != width * height {
            return Err(Error::Contract(format!(
                "grid {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite value at pixel {i}")));
        }
        if !(pixel_pitch_x > 0.0 && pixel_pitch_y > 0.0) {
            return Err(Error::Contract("pixel pitch must be positive".into()));
        }
        Ok(Self {
            width,
            height,
            pixel_pitch_x,
            pixel_pitch_y,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0.0; width * height])
    }

    pub fn num_pixels(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Same geometry, new pixel values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::with_pitch(
            self.width,
            self.height,
            self.pixel_pitch_x,
            self.pixel_pitch_y,
            values,
        )
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// `P x M` observation matrix: column `j` is the vectorized frame `y_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    pub width: usize,
    pub height: usize,
    pub pixel_pitch_x: f64,
    pub pixel_pitch_y: f64,
    frames: DMatrix<f64>,
    sample_times: Option<Vec<f64>>,
}

impl FrameStack {
    pub fn new(
        width: usize,
        height: usize,
        frames: DMatrix<f64>,
        sample_times: Option<Vec<f64>>,
    ) -> Result<Self> {
        Self::with_pitch(
            width,
            height,
            DEFAULT_PIXEL_PITCH,
            DEFAULT_PIXEL_PITCH,
            frames,
            sample_times,
        )
    }

    pub fn with_pitch(
        width: usize,
        height: usize,
        pixel_pitch_x: f64,
        pixel_pitch_y: f64,
        frames: DMatrix<f64>,
        sample_times: Option<Vec<f64>>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Contract(format!(
                "grid dimensions must be positive, got {width}x{height}"
            )));
        }
        if frames.nrows() != width * height {
            return Err(Error::Contract(format!(
                "frame matrix has {} rows, grid {width}x{height} needs {}",
                frames.nrows(),
                width * height
            )));
        }
        if frames.ncols() == 0 {
            return Err(Error::Contract(
                "a frame stack needs at least one frame".into(),
            ));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(
                "frame stack contains non-finite values".into(),
            ));
        }
        if let Some(times) = &sample_times {
            if times.len() != frames.ncols() {
                return Err(Error::Contract(format!(
                    "{} sample times for {} frames",
                    times.len(),
                    frames.ncols()
                )));
            }
            if times.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::Contract(
                    "sample times must be strictly increasing".into(),
                ));
            }
        }
        Ok(Self {
            width,
            height,
            pixel_pitch_x,
            pixel_pitch_y,
            frames,
            sample_times,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frames(&self) -> &DMatrix<f64> {
        &self.frames
    }

    pub fn frame(&self, j: usize) -> DVectorView<'_, f64> {
        self.frames.column(j)
    }

    pub fn sample_times(&self) -> Option<&[f64]> {
        self.sample_times.as_deref()
    }

    /// Frame `j` as a standalone image.
    pub fn frame_grid(&self, j: usize) -> ImageGrid {
        ImageGrid {
            width: self.width,
            height: self.height,
            pixel_pitch_x: self.pixel_pitch_x,
            pixel_pitch_y: self.pixel_pitch_y,
            values: self.frames.column(j).iter().copied().collect(),
        }
    }

    /// Geometry-only image with the given values.
    pub fn grid_with(&self, values: Vec<f64>) -> Result<ImageGrid> {
        ImageGrid::with_pitch(
            self.width,
            self.height,
            self.pixel_pitch_x,
            self.pixel_pitch_y,
            values,
        )
    }

    /// Sub-stack made of the listed frames, kept in ascending time order.
    pub fn select(&self, indices: &[usize]) -> Result<FrameStack> {
        let mut idx = indices.to_vec();
        idx.sort_unstable();
        idx.dedup();
        if idx.is_empty() || idx.len() != indices.len() {
            return Err(Error::Contract(
                "frame selection must be non-empty and unique".into(),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= self.num_frames()) {
            return Err(Error::Contract(format!(
                "frame {bad} out of range for {} frames",
                self.num_frames()
            )));
        }
        let frames = self.frames.select_columns(idx.iter());
        let times = self
            .sample_times
            .as_ref()
            .map(|t| idx.iter().map(|&j| t[j]).collect());
        FrameStack::with_pitch(
            self.width,
            self.height,
            self.pixel_pitch_x,
            self.pixel_pitch_y,
            frames,
            times,
        )
    }
}

/// Two-class truncated-normal prior on pixel reflectance plus the
/// observation noise variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    pub rho0: f64,
    pub rho1: f64,
    pub sigma0_sq: f64,
    pub sigma1_sq: f64,
    pub p0: f64,
    pub p1: f64,
    pub noise_sigma_sq: f64,
}

pub const PROBABILITY_TOLERANCE: f64 = 1e-9;

impl PriorConfig {
    pub fn new(
        rho0: f64,
        rho1: f64,
        sigma0_sq: f64,
        sigma1_sq: f64,
        p0: f64,
        p1: f64,
        noise_sigma_sq: f64,
    ) -> Result<Self> {
        let prior = Self {
            rho0,
            rho1,
            sigma0_sq,
            sigma1_sq,
            p0,
            p1,
            noise_sigma_sq,
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.rho0,
            self.rho1,
            self.sigma0_sq,
            self.sigma1_sq,
            self.p0,
            self.p1,
            self.noise_sigma_sq,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("prior parameters must be finite".into()));
        }
        if self.rho0 < 0.0 || self.rho1 < 0.0 {
            return Err(Error::Domain("class means must be non-negative".into()));
        }
        if self.rho0 == self.rho1 {
            return Err(Error::Domain(
                "class means rho0 and rho1 must differ".into(),
            ));
        }
        if !(self.sigma0_sq > 0.0 && self.sigma1_sq > 0.0) {
            return Err(Error::Domain("class variances must be positive".into()));
        }
        if !(self.noise_sigma_sq > 0.0) {
            return Err(Error::Domain("noise variance must be positive".into()));
        }
        if !(self.p0 > 0.0 && self.p0 < 1.0 && self.p1 > 0.0 && self.p1 < 1.0) {
            return Err(Error::Domain(
                "class probabilities must lie in (0, 1)".into(),
            ));
        }
        if (self.p0 + self.p1 - 1.0).abs() > PROBABILITY_TOLERANCE {
            return Err(Error::Domain(format!(
                "class probabilities must sum to 1, got {}",
                self.p0 + self.p1
            )));
        }
        Ok(())
    }

    pub fn mean(&self, class: u8) -> f64 {
        if class == 0 {
            self.rho0
        } else {
            self.rho1
        }
    }

    pub fn variance(&self, class: u8) -> f64 {
        if class == 0 {
            self.sigma0_sq
        } else {
            self.sigma1_sq
        }
    }

    pub fn probability(&self, class: u8) -> f64 {
        if class == 0 {
            self.p0
        } else {
            self.p1
        }
    }

    /// Copy with every length-like quantity scaled by `lambda`
    /// (class means, class std devs, noise std dev).
    pub fn scaled(&self, lambda: f64) -> Result<Self> {
        let l2 = lambda * lambda;
        Self::new(
            self.rho0 * lambda,
            self.rho1 * lambda,
            self.sigma0_sq * l2,
            self.sigma1_sq * l2,
            self.p0,
            self.p1,
            self.noise_sigma_sq * l2,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_bad_shapes() {
        assert!(ImageGrid::new(0, 3, vec![]).is_err());
        assert!(ImageGrid::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ImageGrid::new(1, 1, vec![f64::NAN]).is_err());
        assert!(ImageGrid::new(2, 1, vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn stack_requires_increasing_times() {
        let y = DMatrix::zeros(4, 2);
        assert!(FrameStack::new(2, 2, y.clone(), Some(vec![1.0, 1.0])).is_err());
        assert!(FrameStack::new(2, 2, y.clone(), Some(vec![1.0])).is_err());
        assert!(FrameStack::new(2, 2, y, Some(vec![1.0, 2.0])).is_ok());
        assert!(FrameStack::new(2, 2, DMatrix::zeros(4, 0), None).is_err());
    }

    #[test]
    fn select_keeps_time_order() {
        let y = DMatrix::from_fn(4, 3, |i, j| (i + 10 * j) as f64);
        let s = FrameStack::new(2, 2, y, Some(vec![0.0, 1.0, 2.0])).unwrap();
        let sub = s.select(&[2, 0]).unwrap();
        assert_eq!(sub.sample_times().unwrap(), &[0.0, 2.0]);
        assert_eq!(sub.frame(1)[0], 20.0);
        assert!(s.select(&[0, 0]).is_err());
        assert!(s.select(&[3]).is_err());
    }

    #[test]
    fn prior_rejects_degenerate() {
        assert!(PriorConfig::new(0.3, 0.1, 1e-10, 1e-10, 0.5, 0.5, 1e-4).is_ok());
        assert!(PriorConfig::new(0.3, 0.3, 1e-10, 1e-10, 0.5, 0.5, 1e-4).is_err());
        assert!(PriorConfig::new(0.3, 0.1, 1e-10, 1e-10, 0.7, 0.7, 1e-4).is_err());
        assert!(PriorConfig::new(0.3, 0.1, 0.0, 1e-10, 0.5, 0.5, 1e-4).is_err());
        assert!(PriorConfig::new(0.3, 0.1, 1e-10, 1e-10, 0.5, 0.5, 0.0).is_err());
    }
}
