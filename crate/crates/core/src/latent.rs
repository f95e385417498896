//! Latent video container: a [B, L, H, W, D] array of finite values.
//!
//! There is no pretrained autoencoder here; the "latent" is a downsampled
//! pixel-space video (D = 3), which keeps every shape in the diffusion
//! objective intact while staying self-contained.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    tensor: Tensor,
}

impl LatentVideo {
    /// Wrap a [B, L, H, W, D] tensor, validating rank, nonzero dims and
    /// finiteness.
    pub fn new(tensor: Tensor) -> Result<LatentVideo> {
        if tensor.shape().len() != 5 {
            return Err(Error::invalid(format!(
                "latent video must be rank 5 [B, L, H, W, D], got {:?}",
                tensor.shape()
            )));
        }
        if tensor.shape().iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "latent video dims must all be >= 1, got {:?}",
                tensor.shape()
            )));
        }
        if !tensor.is_finite() {
            return Err(Error::invalid("latent video contains non-finite values"));
        }
        Ok(LatentVideo { tensor })
    }

    pub fn zeros(b: usize, l: usize, h: usize, w: usize, d: usize) -> LatentVideo {
        LatentVideo { tensor: Tensor::zeros(&[b, l, h, w, d]) }
    }

    pub fn randn(b: usize, l: usize, h: usize, w: usize, d: usize, rng: &mut Rng) -> LatentVideo {
        LatentVideo { tensor: Tensor::randn(&[b, l, h, w, d], rng) }
    }

    pub fn batch(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[3]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[4]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn same_shape(&self, other: &LatentVideo) -> bool {
        self.tensor.shape() == other.tensor.shape()
    }

    /// One batch element in the model's [L, D, H, W] layout.
    pub fn model_frames(&self, b: usize) -> Tensor {
        let (bs, l, h, w, d) =
            (self.batch(), self.frames(), self.height(), self.width(), self.channels());
        assert!(b < bs);
        let mut out = vec![0.0; l * d * h * w];
        let src = self.tensor.data();
        let vid = b * l * h * w * d;
        for li in 0..l {
            for y in 0..h {
                for x in 0..w {
                    let base = vid + ((li * h + y) * w + x) * d;
                    for di in 0..d {
                        out[((li * d + di) * h + y) * w + x] = src[base + di];
                    }
                }
            }
        }
        Tensor::from_vec(&[l, d, h, w], out).unwrap()
    }

    /// Inverse of `model_frames` for a single-element batch.
    pub fn from_model_frames(frames: &Tensor) -> LatentVideo {
        let (l, d, h, w) =
            (frames.shape()[0], frames.shape()[1], frames.shape()[2], frames.shape()[3]);
        let mut out = vec![0.0; l * h * w * d];
        for li in 0..l {
            for y in 0..h {
                for x in 0..w {
                    for di in 0..d {
                        out[((li * h + y) * w + x) * d + di] =
                            frames.data()[((li * d + di) * h + y) * w + x];
                    }
                }
            }
        }
        LatentVideo { tensor: Tensor::from_vec(&[1, l, h, w, d], out).unwrap() }
    }
}
