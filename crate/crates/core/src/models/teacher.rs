//! Toy windowed-attention teacher with per-layer prompt tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{LayerNorm, Linear, Mlp};
use super::patch::{patch_embed, PatchMerge, PatchSpec};
use super::window::{WindowAttention, WindowPlan};
use crate::error::{Error, Result};
use crate::numerics::{ParamBuilder, ParamRegistry, Tensor};

/// Prefix of every teacher parameter name.
pub const TEACHER_PREFIX: &str = "teacher";
/// Prefix of the prompt parameters inside the teacher.
pub const PROMPT_PREFIX: &str = "teacher.prompts";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub image: usize,
    pub patch: usize,
    pub dim: usize,
    /// Blocks per stage; a patch merge sits between consecutive stages.
    pub depths: Vec<usize>,
    pub window: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Prompt tokens per layer.
    pub prompts: usize,
    pub keep_final_prompts: bool,
    pub frozen_backbone: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            image: 32,
            patch: 4,
            dim: 32,
            depths: vec![2, 2],
            window: 4,
            heads: 2,
            mlp_ratio: 2,
            prompts: 25,
            keep_final_prompts: false,
            frozen_backbone: true,
        }
    }
}

impl TeacherConfig {
    /// Total number of basic layers `K`.
    pub fn layers(&self) -> usize {
        self.depths.iter().sum()
    }

    /// Token grid side after all merges.
    pub fn final_grid(&self) -> usize {
        (self.image / self.patch) >> self.depths.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.depths.contains(&0) {
            return Err(Error::Config(format!(
                "teacher depths {:?} need nonzero stages",
                self.depths
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("teacher mlp_ratio must be positive".into()));
        }
        let spec = PatchSpec::new(self.image, self.image, self.patch, self.patch, self.dim)?;
        let mut grid = spec.rows;
        for stage in 0..self.depths.len() {
            if stage > 0 {
                if grid % 2 != 0 {
                    return Err(Error::Config(format!(
                        "stage {stage} cannot merge an odd {grid}x{grid} grid"
                    )));
                }
                grid /= 2;
            }
            WindowPlan::new(grid, self.window, false, 0)?;
        }
        Ok(())
    }
}

/// Fresh prompt tokens for each of the `K` layers.
#[derive(Debug, Clone)]
pub struct PromptBank {
    pub layers: Vec<Tensor>,
}

impl PromptBank {
    pub const INIT_STD: f64 = 0.02;

    pub fn count(&self) -> usize {
        self.layers.first().map_or(0, |p| p.shape()[0])
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    plan: WindowPlan,
}

impl Block {
    /// `z = [tokens; prompts]`; returns the updated rows in the same layout
    /// and the attention maps.
    fn forward(&self, z: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let out = self.attn.forward(&self.norm1.forward(z)?, &self.plan)?;
        let y = z.add(&out.rows)?;
        let y = y.add(&self.mlp.forward(&self.norm2.forward(&y)?)?)?;
        Ok((y, out.maps))
    }
}

/// Teacher forward output.
pub struct TeacherOutput {
    /// Pixel features `[N, d]`: merged patch tokens, plus the last prompt
    /// outputs when `keep_final_prompts` is set.
    pub features: Tensor,
    /// Identity embedding from the mean patch token.
    pub embedding: Tensor,
}

#[derive(Debug, Clone)]
pub struct Teacher {
    pub config: TeacherConfig,
    pub spec: PatchSpec,
    embed: Linear,
    stages: Vec<Vec<Block>>,
    merges: Vec<PatchMerge>,
    norm: LayerNorm,
    head: Linear,
    pub prompts: PromptBank,
}

impl Teacher {
    /// Builds the teacher under `teacher.*` and applies the freezing policy.
    pub fn new<R: Rng>(
        config: TeacherConfig,
        registry: &mut ParamRegistry,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let spec = PatchSpec::new(config.image, config.image, config.patch, config.patch, d)?;
        let mut b = ParamBuilder::new(registry, rng, TEACHER_PREFIX);
        let embed = Linear::new(&mut b, "patch_embed", spec.patch_len(3), d, true)?;

        let mut stages = Vec::with_capacity(config.depths.len());
        let mut merges = Vec::new();
        let mut grid = spec.rows;
        let mut layer = 0;
        for (s, &depth) in config.depths.iter().enumerate() {
            if s > 0 {
                merges.push(PatchMerge::new(&mut b, &format!("merge.{}", s - 1), d)?);
                grid /= 2;
            }
            let mut blocks = Vec::with_capacity(depth);
            for j in 0..depth {
                let mut lb = b.scope(&format!("layers.{layer}"));
                blocks.push(Block {
                    norm1: LayerNorm::new(&mut lb, "norm1", d)?,
                    attn: WindowAttention::new(
                        &mut lb,
                        "attn",
                        d,
                        config.heads,
                        config.window.min(grid),
                    )?,
                    norm2: LayerNorm::new(&mut lb, "norm2", d)?,
                    mlp: Mlp::new(&mut lb, "mlp", d, d * config.mlp_ratio)?,
                    plan: WindowPlan::new(grid, config.window, j % 2 == 1, config.prompts)?,
                });
                layer += 1;
            }
            stages.push(blocks);
        }
        let norm = LayerNorm::new(&mut b, "norm", d)?;
        let head = Linear::new(&mut b, "head", d, d, true)?;

        let mut prompt_layers = Vec::new();
        if config.prompts > 0 {
            let mut pb = b.scope("prompts");
            for i in 0..config.layers() {
                prompt_layers.push(pb.normal(
                    &i.to_string(),
                    &[config.prompts, d],
                    PromptBank::INIT_STD,
                )?);
            }
        }

        let teacher = Self {
            spec,
            embed,
            stages,
            merges,
            norm,
            head,
            prompts: PromptBank {
                layers: prompt_layers,
            },
            config,
        };
        teacher.apply_freezing(registry);
        Ok(teacher)
    }

    /// Frozen backbone: only prompts stay trainable. Otherwise every teacher
    /// parameter is trainable.
    pub fn apply_freezing(&self, registry: &mut ParamRegistry) {
        registry.set_trainable_prefix(TEACHER_PREFIX, !self.config.frozen_backbone);
        registry.set_trainable_prefix(PROMPT_PREFIX, true);
    }

    /// The prompted forward pass. Each layer sees its own fresh prompts; the
    /// prompt outputs of a layer are dropped before the next one.
    pub fn forward(&self, image: &Tensor) -> Result<TeacherOutput> {
        let t = self.config.prompts;
        let mut x = patch_embed(image, &self.spec, &self.embed)?;
        let mut grid = self.spec.rows;
        let mut layer = 0;
        let mut last_prompts = None;
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                x = self.merges[s - 1].forward(&x, grid)?;
                grid /= 2;
            }
            for block in blocks {
                let z = match self.prompts.layers.get(layer) {
                    Some(p) => Tensor::concat(&[x.clone(), p.clone()], 0)?,
                    None => x.clone(),
                };
                let (y, _) = block.forward(&z)?;
                let n = grid * grid;
                if t > 0 {
                    x = y.select_rows(&(0..n).collect::<Vec<_>>())?;
                    last_prompts = Some(y.select_rows(&(n..n + t).collect::<Vec<_>>())?);
                } else {
                    x = y;
                }
                layer += 1;
            }
        }
        let tokens = self.norm.forward(&x)?;
        let embedding = self
            .head
            .forward(&tokens.mean_rows()?.reshape(&[1, self.config.dim])?)?;
        let features = match (self.config.keep_final_prompts, last_prompts) {
            (true, Some(p)) => Tensor::concat(&[tokens, self.norm.forward(&p)?], 0)?,
            _ => tokens,
        };
        Ok(TeacherOutput {
            features,
            embedding: embedding.reshape(&[self.config.dim])?,
        })
    }
}
