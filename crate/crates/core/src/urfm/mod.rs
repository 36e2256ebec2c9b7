//! Unified receptive-field mapping: local-center attention on both
//! branches, the shared alignment head and the two alignment losses.

pub mod attention;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attention::{
    center_indices, self_attention_mapping, urfm_attention, LocalCenters, Mapped, PeSettings,
    UrfmBranch,
};

use crate::error::{dim_err, Error, Result};
use crate::facegeom::{FacialMode, LandmarkSet};
use crate::models::MultiHeadSelfAttention;
use crate::numerics::{ParamBuilder, ParamRegistry, Tensor};

pub const URFM_PREFIX: &str = "urfm";
pub const ALIGN_PREFIX: &str = "align";

/// How pixel features become the compared representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingKind {
    /// Learnable local centers as queries, with facial positional encoding.
    Centers,
    /// Plain self-attention over the pixel features.
    SelfAttention,
}

impl std::fmt::Display for MappingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Centers => "centers",
            Self::SelfAttention => "self_attention",
        })
    }
}

impl std::str::FromStr for MappingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centers" => Ok(Self::Centers),
            "self_attention" => Ok(Self::SelfAttention),
            _ => Err(Error::Config(format!(
                "unknown mapping `{s}` (centers | self_attention)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UrfmConfig {
    pub mapping: MappingKind,
    /// Number of local centers `L`, a perfect square.
    pub centers: usize,
    pub dim: usize,
    pub image: usize,
    pub heads: usize,
    pub align_heads: usize,
    pub pe: PeSettings,
}

impl Default for UrfmConfig {
    fn default() -> Self {
        Self {
            mapping: MappingKind::Centers,
            centers: 49,
            dim: 32,
            image: 32,
            heads: 1,
            align_heads: 2,
            pe: PeSettings::default(),
        }
    }
}

/// Which side of the distillation pair a call refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Teacher,
    Student,
}

/// Both mapping branches and the alignment head. The centers are shared;
/// projections and positional buckets are per branch.
#[derive(Debug, Clone)]
pub struct Urfm {
    pub config: UrfmConfig,
    pub centers: LocalCenters,
    pub teacher: UrfmBranch,
    pub student: UrfmBranch,
    pub head: MultiHeadSelfAttention,
}

impl Urfm {
    pub fn new<R: Rng>(
        config: UrfmConfig,
        registry: &mut ParamRegistry,
        rng: &mut R,
    ) -> Result<Self> {
        let mut b = ParamBuilder::new(registry, rng, URFM_PREFIX);
        let centers = LocalCenters::new(&mut b, config.centers, config.dim, config.image)?;
        let teacher = UrfmBranch::new(
            &mut b.scope("teacher"),
            config.dim,
            &centers.grid,
            &config.pe,
        )?;
        let student = UrfmBranch::new(
            &mut b.scope("student"),
            config.dim,
            &centers.grid,
            &config.pe,
        )?;
        if config.mapping == MappingKind::SelfAttention {
            registry.set_trainable(&format!("{URFM_PREFIX}.centers"), false)?;
            for side in ["teacher", "student"] {
                registry.set_trainable(&format!("{URFM_PREFIX}.{side}.pe"), false)?;
            }
        }
        let mut hb = ParamBuilder::new(registry, rng, "");
        let head =
            MultiHeadSelfAttention::new(&mut hb, ALIGN_PREFIX, config.dim, config.align_heads)?;
        Ok(Self {
            config,
            centers,
            teacher,
            student,
            head,
        })
    }

    pub fn branch(&self, side: Side) -> &UrfmBranch {
        match side {
            Side::Teacher => &self.teacher,
            Side::Student => &self.student,
        }
    }

    /// Bucket indices of the centers for one face. Empty for the
    /// self-attention mapping.
    pub fn indices(&self, landmarks: Option<&LandmarkSet>) -> Result<Vec<usize>> {
        if self.config.mapping == MappingKind::SelfAttention {
            return Ok(Vec::new());
        }
        // Both branches share the index setup.
        center_indices(&self.centers, &self.teacher, landmarks)
    }

    pub fn map(&self, side: Side, features: &Tensor, indices: &[usize]) -> Result<Mapped> {
        match self.config.mapping {
            MappingKind::Centers => urfm_attention(
                features,
                &self.centers,
                self.branch(side),
                indices,
                self.config.heads,
            ),
            MappingKind::SelfAttention => {
                self_attention_mapping(features, self.branch(side), self.config.heads)
            }
        }
    }

    pub fn mode(&self) -> FacialMode {
        self.config.pe.mode
    }
}

/// Mean squared difference between two attention maps.
pub fn attention_alignment_loss(attn_t: &Tensor, attn_s: &Tensor) -> Result<Tensor> {
    if attn_t.shape() != attn_s.shape() {
        return Err(dim_err(
            "attention_alignment_loss",
            format!(
                "teacher map {:?} vs student map {:?}",
                attn_t.shape(),
                attn_s.shape()
            ),
        ));
    }
    attn_t.mse(attn_s)
}

/// Mean squared difference after passing both local features through the
/// shared head.
pub fn feature_alignment_loss(
    h_t: &Tensor,
    h_s: &Tensor,
    head: &MultiHeadSelfAttention,
) -> Result<Tensor> {
    if h_t.shape() != h_s.shape() {
        return Err(dim_err(
            "feature_alignment_loss",
            format!(
                "teacher features {:?} vs student features {:?}",
                h_t.shape(),
                h_s.shape()
            ),
        ));
    }
    let (a, _) = head.forward(h_t)?;
    let (b, _) = head.forward(h_s)?;
    a.mse(&b)
}
