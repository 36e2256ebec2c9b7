//! Additive angular margin classification head.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::Tensor;

const NORM_EPS: f64 = 1e-24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArcFaceConfig {
    pub scale: f64,
    pub margin: f64,
    pub classes: usize,
}

impl ArcFaceConfig {
    pub fn new(scale: f64, margin: f64, classes: usize) -> Result<Self> {
        let cfg = Self {
            scale,
            margin,
            classes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!(
                "arcface scale {} must be positive",
                self.scale
            )));
        }
        if !(0.0..FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config(format!(
                "arcface margin {} outside [0, pi/2)",
                self.margin
            )));
        }
        if self.classes == 0 {
            return Err(Error::Config("arcface needs at least one class".into()));
        }
        Ok(())
    }
}

/// Cosine between `embedding: [d]` and each row of `weights: [classes, d]`.
pub fn class_cosines(embedding: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let d = embedding.numel();
    if weights.shape().len() != 2 || weights.shape()[1] != d {
        return Err(dim_err(
            "arcface",
            format!(
                "embedding of {d} values against class weights {:?}",
                weights.shape()
            ),
        ));
    }
    let e = embedding
        .reshape(&[d, 1])?
        .transpose()?
        .l2_normalize_rows(NORM_EPS)?;
    let w = weights.l2_normalize_rows(NORM_EPS)?;
    w.matmul(&e.transpose()?)?.reshape(&[weights.shape()[0]])
}

/// Cross-entropy over `s·cos(θ_y + m)` for the true class and `s·cos θ_c`
/// for the others.
pub fn arcface_loss(
    embedding: &Tensor,
    label: usize,
    config: &ArcFaceConfig,
    weights: &Tensor,
) -> Result<Tensor> {
    if weights.shape().first() != Some(&config.classes) {
        return Err(dim_err(
            "arcface",
            format!(
                "{} classes configured, weights {:?}",
                config.classes,
                weights.shape()
            ),
        ));
    }
    if label >= config.classes {
        return Err(Error::Contract(format!(
            "label {label} out of range for {} classes",
            config.classes
        )));
    }
    class_cosines(embedding, weights)?
        .arc_margin(label, config.margin)?
        .scale(config.scale)
        .cross_entropy(label)
}
