//! Frame stacks.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frames per clip used throughout training, sampling and evaluation.
pub const FRAMES: usize = 8;
/// Default square frame size.
pub const SIZE: usize = 32;
pub const CHANNELS: usize = 3;

/// A `[frames, height, width, channels]` stack with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pixels: Tensor,
}

impl Clip {
    pub fn new(pixels: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 4 || s.contains(&0) {
            return Err(Error::shape("clip", s, &[FRAMES, SIZE, SIZE, CHANNELS]));
        }
        if !pixels.is_finite() {
            return Err(Error::Numeric("clip contains non-finite pixels".into()));
        }
        Ok(Self { pixels })
    }

    /// Builds a clip from individual `[height, width, channels]` frames.
    pub fn from_frames(frames: &[Vec<f64>], height: usize, width: usize, channels: usize) -> Result<Self> {
        let plane = height * width * channels;
        let mut data = Vec::with_capacity(frames.len() * plane);
        for f in frames {
            if f.len() != plane {
                return Err(Error::shape("clip frame", &[f.len()], &[height, width, channels]));
            }
            data.extend_from_slice(f);
        }
        Self::new(Tensor::new(&[frames.len(), height, width, channels], data)?)
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    pub fn frames(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[3]
    }

    pub fn frame_len(&self) -> usize {
        self.height() * self.width() * self.channels()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.frame_len();
        &self.pixels.data()[i * n..(i + 1) * n]
    }

    pub fn frame_list(&self) -> Vec<Vec<f64>> {
        (0..self.frames()).map(|i| self.frame(i).to_vec()).collect()
    }

    /// Maps `[0, 1]` pixels to the `[-1, 1]` range the diffusion model works in.
    pub fn to_model_space(&self) -> Tensor {
        self.pixels.map(|p| 2.0 * p - 1.0)
    }

    /// Inverse of [`Clip::to_model_space`], clamping to the valid range.
    pub fn from_model_space(x: &Tensor) -> Result<Self> {
        Self::new(x.map(|v| ((v.clamp(-1.0, 1.0)) + 1.0) * 0.5))
    }

    /// 8-bit quantized pixel values, row-major.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .data()
            .iter()
            .map(|&p| libm::round(p.clamp(0.0, 1.0) * 255.0) as u8)
            .collect()
    }
}
