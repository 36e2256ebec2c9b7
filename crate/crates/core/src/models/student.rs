//! Toy convolutional student.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Linear;
use crate::error::{dim_err, Error, Result};
use crate::numerics::{ParamBuilder, ParamRegistry, Tensor};

pub const STUDENT_PREFIX: &str = "student";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub image: usize,
    /// Output channels per block; the last entry is the feature width `d`.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            image: 32,
            channels: vec![8, 16, 32],
            kernel: 3,
            stride: 2,
        }
    }
}

impl StudentConfig {
    pub fn dim(&self) -> usize {
        *self.channels.last().expect("validated nonempty")
    }

    fn padding(&self) -> usize {
        self.kernel / 2
    }

    /// Spatial side after every block.
    pub fn grids(&self) -> Vec<usize> {
        let mut side = self.image;
        self.channels
            .iter()
            .map(|_| {
                side = (side + 2 * self.padding() - self.kernel) / self.stride + 1;
                side
            })
            .collect()
    }

    pub fn final_grid(&self) -> usize {
        *self.grids().last().expect("validated nonempty")
    }

    /// Side of the input window that can influence one output position.
    pub fn receptive_field(&self) -> usize {
        self.channels
            .iter()
            .rev()
            .fold(1, |r, _| (r - 1) * self.stride + self.kernel)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "student channels {:?} must be nonzero",
                self.channels
            )));
        }
        if self.kernel == 0 || self.stride == 0 || self.kernel > self.image + 2 * self.padding() {
            return Err(Error::Config(format!(
                "student kernel {} / stride {} do not fit a {} image",
                self.kernel, self.stride, self.image
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    kernel: Tensor,
    bias: Tensor,
}

pub struct StudentOutput {
    /// Pixel features `[N, d]`, raster order over the final grid.
    pub features: Tensor,
    pub embedding: Tensor,
}

/// Stride-2 convolution stack. Every block is convolution plus channel
/// bias; all but the last are followed by ReLU.
#[derive(Debug, Clone)]
pub struct Student {
    pub config: StudentConfig,
    blocks: Vec<ConvBlock>,
    head: Linear,
}

impl Student {
    pub fn new<R: Rng>(
        config: StudentConfig,
        registry: &mut ParamRegistry,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder::new(registry, rng, STUDENT_PREFIX);
        let mut blocks = Vec::with_capacity(config.channels.len());
        let mut cin = 3;
        for (i, &cout) in config.channels.iter().enumerate() {
            let mut s = b.scope(&format!("conv.{i}"));
            let fan_in = (cin * config.kernel * config.kernel) as f64;
            blocks.push(ConvBlock {
                kernel: s.normal(
                    "weight",
                    &[cout, cin, config.kernel, config.kernel],
                    (2.0 / fan_in).sqrt(),
                )?,
                bias: s.constant("bias", &[cout], 0.0)?,
            });
            cin = cout;
        }
        let d = config.dim();
        let head = Linear::new(&mut b, "head", d, d, true)?;
        Ok(Self {
            config,
            blocks,
            head,
        })
    }

    /// Feature map `[1, d, g, g]` before flattening.
    pub fn feature_map(&self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != self.config.image || s[2] != self.config.image {
            return Err(dim_err(
                "student_forward",
                format!(
                    "image {:?}, expected [3, {n}, {n}]",
                    s,
                    n = self.config.image
                ),
            ));
        }
        let mut x = image.reshape(&[1, 3, s[1], s[2]])?;
        let last = self.blocks.len() - 1;
        for (i, blk) in self.blocks.iter().enumerate() {
            x = x
                .conv2d(&blk.kernel, self.config.stride, self.config.padding())?
                .add_channel_bias(&blk.bias)?;
            if i < last {
                x = x.relu();
            }
        }
        Ok(x)
    }

    pub fn forward(&self, image: &Tensor) -> Result<StudentOutput> {
        let map = self.feature_map(image)?;
        let (d, g) = (map.shape()[1], map.shape()[2]);
        let features = map.reshape(&[d, g * g])?.transpose()?;
        let embedding = self
            .head
            .forward(&features.mean_rows()?.reshape(&[1, d])?)?;
        Ok(StudentOutput {
            features,
            embedding: embedding.reshape(&[d])?,
        })
    }
}
