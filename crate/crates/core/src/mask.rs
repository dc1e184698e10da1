//! Real-valued time-frequency masks.

use std::ops::Range;

use crate::error::{Error, Result};

/// What a mask stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskRole {
    Target,
    Interference,
    Noise,
    /// Speech-vs-noise (denoising) mask.
    Enhancement,
}

/// `[F x T]` mask with values in `[0, 1]`, stored frequency-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    bins: usize,
    frames: usize,
    values: Vec<f64>,
}

impl MaskTensor {
    pub fn new(bins: usize, frames: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != bins * frames {
            return Err(Error::ShapeMismatch(format!(
                "{} mask values for a {bins}x{frames} mask",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "mask value {} at (f={}, t={}) outside [0, 1]",
                values[i],
                i / frames.max(1),
                i % frames.max(1)
            )));
        }
        Ok(Self {
            bins,
            frames,
            values,
        })
    }

    pub fn filled(bins: usize, frames: usize, value: f64) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Self {
            bins,
            frames,
            values: vec![value; bins * frames],
        }
    }

    pub fn ones(bins: usize, frames: usize) -> Self {
        Self::filled(bins, frames, 1.0)
    }

    pub fn zeros(bins: usize, frames: usize) -> Self {
        Self::filled(bins, frames, 0.0)
    }

    /// Builds a mask from `value(f, t)`, clamping into `[0, 1]`.
    pub fn from_fn(bins: usize, frames: usize, mut value: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(bins * frames);
        for f in 0..bins {
            for t in 0..frames {
                values.push(value(f, t).clamp(0.0, 1.0));
            }
        }
        Self {
            bins,
            frames,
            values,
        }
    }

    pub fn num_bins(&self) -> usize {
        self.bins
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    #[inline]
    pub fn get(&self, f: usize, t: usize) -> f64 {
        self.values[f * self.frames + t]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Frames of frequency `f`.
    pub fn row(&self, f: usize) -> &[f64] {
        &self.values[f * self.frames..(f + 1) * self.frames]
    }

    pub fn slice_frames(&self, range: Range<usize>) -> Self {
        let frames = range.len();
        let mut values = Vec::with_capacity(self.bins * frames);
        for f in 0..self.bins {
            values.extend_from_slice(&self.row(f)[range.clone()]);
        }
        Self {
            bins: self.bins,
            frames,
            values,
        }
    }

    /// `1 - mask`.
    pub fn complement(&self) -> Self {
        Self {
            bins: self.bins,
            frames: self.frames,
            values: self.values.iter().map(|v| 1.0 - v).collect(),
        }
    }

    pub fn check_shape(&self, bins: usize, frames: usize) -> Result<()> {
        if self.bins != bins || self.frames != frames {
            return Err(Error::ShapeMismatch(format!(
                "mask is {}x{}, expected {bins}x{frames}",
                self.bins, self.frames
            )));
        }
        Ok(())
    }

    /// Concatenation along the frame axis.
    pub fn concat(parts: &[MaskTensor]) -> Result<Self> {
        let bins = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("no masks to concatenate".into()))?
            .bins;
        if parts.iter().any(|p| p.bins != bins) {
            return Err(Error::ShapeMismatch("masks differ in bin count".into()));
        }
        let frames = parts.iter().map(|p| p.frames).sum();
        let mut values = Vec::with_capacity(bins * frames);
        for f in 0..bins {
            for p in parts {
                values.extend_from_slice(p.row(f));
            }
        }
        Ok(Self {
            bins,
            frames,
            values,
        })
    }
}
