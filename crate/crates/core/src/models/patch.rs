//! Non-overlapping patch embedding and 2×2 patch merging.

use std::rc::Rc;

use rand::Rng;

use super::layers::{LayerNorm, Linear};
use crate::error::{dim_err, Result};
use crate::numerics::{ParamBuilder, Tensor};

/// Patch size and the resulting token layout for one image size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub patch_h: usize,
    pub patch_w: usize,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
}

impl PatchSpec {
    pub fn new(
        image_h: usize,
        image_w: usize,
        patch_h: usize,
        patch_w: usize,
        dim: usize,
    ) -> Result<Self> {
        if patch_h == 0 || patch_w == 0 || image_h % patch_h != 0 || image_w % patch_w != 0 {
            return Err(dim_err(
                "patch_embed",
                format!(
                    "{image_h}x{image_w} image does not divide into {patch_h}x{patch_w} patches"
                ),
            ));
        }
        Ok(Self {
            patch_h,
            patch_w,
            rows: image_h / patch_h,
            cols: image_w / patch_w,
            dim,
        })
    }

    /// Patch count `m`.
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    /// Flattened length of one patch of a `channels`-channel image.
    pub fn patch_len(&self, channels: usize) -> usize {
        channels * self.patch_h * self.patch_w
    }

    /// For every patch in raster order, the flat `[C, H, W]` offsets of its
    /// pixels, channel-major.
    fn gather_index(&self, channels: usize) -> Vec<usize> {
        let (h, w) = (self.rows * self.patch_h, self.cols * self.patch_w);
        let mut idx = Vec::with_capacity(self.count() * self.patch_len(channels));
        for pr in 0..self.rows {
            for pc in 0..self.cols {
                for c in 0..channels {
                    for y in 0..self.patch_h {
                        for x in 0..self.patch_w {
                            idx.push((c * h + pr * self.patch_h + y) * w + pc * self.patch_w + x);
                        }
                    }
                }
            }
        }
        idx
    }
}

/// Cuts `image: [C, H, W]` into patches and projects each one, giving
/// `[m, d]` in raster order.
pub fn patch_embed(image: &Tensor, spec: &PatchSpec, proj: &Linear) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3
        || shape[1] != spec.rows * spec.patch_h
        || shape[2] != spec.cols * spec.patch_w
    {
        return Err(dim_err(
            "patch_embed",
            format!(
                "image {:?} does not match {}x{} patches of {}x{}",
                shape, spec.rows, spec.cols, spec.patch_h, spec.patch_w
            ),
        ));
    }
    let channels = shape[0];
    let idx: Rc<[usize]> = spec.gather_index(channels).into();
    let patches = image.gather(idx, &[spec.count(), spec.patch_len(channels)])?;
    proj.forward(&patches)
}

/// Swin-style merging: each 2×2 block of tokens is concatenated to `4d`
/// channels, normalized and projected back to `d`.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduce: Linear,
}

impl PatchMerge {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, dim: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            norm: LayerNorm::new(&mut s, "norm", 4 * dim)?,
            reduce: Linear::new(&mut s, "reduce", 4 * dim, dim, false)?,
        })
    }

    /// `tokens: [g², d]` in raster order to `[(g/2)², d]`.
    pub fn forward(&self, tokens: &Tensor, grid: usize) -> Result<Tensor> {
        let shape = tokens.shape();
        if shape.len() != 2 || shape[0] != grid * grid || grid % 2 != 0 {
            return Err(dim_err(
                "patch_merge",
                format!("{:?} is not an even {grid}x{grid} token grid", shape),
            ));
        }
        let d = shape[1];
        let half = grid / 2;
        // Neighbour order (dy, dx): (0,0), (1,0), (0,1), (1,1).
        let offsets = [(0, 0), (1, 0), (0, 1), (1, 1)];
        let mut idx = Vec::with_capacity(half * half * 4 * d);
        for r in 0..half {
            for c in 0..half {
                for (dy, dx) in offsets {
                    let tok = (2 * r + dy) * grid + 2 * c + dx;
                    idx.extend(tok * d..(tok + 1) * d);
                }
            }
        }
        let merged = tokens.gather(idx.into(), &[half * half, 4 * d])?;
        self.reduce.forward(&self.norm.forward(&merged)?)
    }
}
