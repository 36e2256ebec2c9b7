//! Flat `section.key=value` run configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::distill::{AlignMode, DistillObjective, FitOptions, OptimizerSchedule};
use crate::error::{Error, Result};
use crate::facegeom::FacialMode;
use crate::models::{ArcFaceConfig, StudentConfig, TeacherConfig};
use crate::urfm::{PeSettings, UrfmConfig};

use super::synth::SynthFaceSpec;

/// Everything a run depends on. One file fully describes a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SynthFaceSpec,
    /// Fraction of each identity's samples held out for evaluation.
    pub holdout: f64,
    pub dim: usize,
    pub teacher: TeacherConfig,
    pub student_channels: Vec<usize>,
    pub urfm: UrfmConfig,
    pub objective: DistillObjective,
    pub arcface_scale: f64,
    pub arcface_margin: f64,
    pub train: OptimizerSchedule,
    pub batch: usize,
    pub pretrain: OptimizerSchedule,
    pub perf_samples: usize,
    /// Local center probed by the PERF analysis; `None` picks the anchor.
    pub perf_center: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dim = 32;
        Self {
            seed: 0,
            data: SynthFaceSpec::default(),
            holdout: 0.2,
            dim,
            teacher: TeacherConfig::default(),
            student_channels: vec![8, 16, dim],
            urfm: UrfmConfig::default(),
            objective: DistillObjective::default(),
            arcface_scale: 64.0,
            arcface_margin: 0.5,
            train: OptimizerSchedule::default(),
            batch: 16,
            pretrain: OptimizerSchedule::default(),
            perf_samples: 64,
            perf_center: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Every documented key, in serialization order.
pub const KEYS: &[&str] = &[
    "seed",
    "data.identities",
    "data.samples",
    "data.image",
    "data.flip_prob",
    "data.noise",
    "data.jitter",
    "data.holdout",
    "model.dim",
    "teacher.patch",
    "teacher.depths",
    "teacher.window",
    "teacher.heads",
    "teacher.mlp_ratio",
    "teacher.t",
    "teacher.keep_final_prompts",
    "teacher.frozen",
    "student.channels",
    "urfm.mapping",
    "urfm.L",
    "urfm.heads",
    "urfm.align_heads",
    "pe.mode",
    "pe.alpha",
    "pe.beta",
    "pe.gamma",
    "loss.lambda_cls",
    "loss.lambda_attn",
    "loss.lambda_feat",
    "loss.align",
    "arcface.s",
    "arcface.m",
    "train.lr",
    "train.momentum",
    "train.weight_decay",
    "train.warmup_epochs",
    "train.epochs",
    "train.batch",
    "train.clip_norm",
    "pretrain.lr",
    "pretrain.warmup_epochs",
    "pretrain.epochs",
    "perf.samples",
    "perf.center",
];

impl RunConfig {
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "seed" => self.seed.to_string(),
            "data.identities" => self.data.identities.to_string(),
            "data.samples" => self.data.samples.to_string(),
            "data.image" => self.data.image.to_string(),
            "data.flip_prob" => self.data.flip_prob.to_string(),
            "data.noise" => self.data.noise.to_string(),
            "data.jitter" => self.data.jitter.to_string(),
            "data.holdout" => self.holdout.to_string(),
            "model.dim" => self.dim.to_string(),
            "teacher.patch" => self.teacher.patch.to_string(),
            "teacher.depths" => list(&self.teacher.depths),
            "teacher.window" => self.teacher.window.to_string(),
            "teacher.heads" => self.teacher.heads.to_string(),
            "teacher.mlp_ratio" => self.teacher.mlp_ratio.to_string(),
            "teacher.t" => self.teacher.prompts.to_string(),
            "teacher.keep_final_prompts" => self.teacher.keep_final_prompts.to_string(),
            "teacher.frozen" => self.teacher.frozen_backbone.to_string(),
            "student.channels" => list(&self.student_channels),
            "urfm.mapping" => self.urfm.mapping.to_string(),
            "urfm.L" => self.urfm.centers.to_string(),
            "urfm.heads" => self.urfm.heads.to_string(),
            "urfm.align_heads" => self.urfm.align_heads.to_string(),
            "pe.mode" => self.urfm.pe.mode.to_string(),
            "pe.alpha" => self.urfm.pe.alpha.to_string(),
            "pe.beta" => self.urfm.pe.beta.to_string(),
            "pe.gamma" => self.urfm.pe.gamma.map_or("auto".into(), |g| g.to_string()),
            "loss.lambda_cls" => self.objective.lambda_cls.to_string(),
            "loss.lambda_attn" => self.objective.lambda_attn.to_string(),
            "loss.lambda_feat" => self.objective.lambda_feat.to_string(),
            "loss.align" => self.objective.align.to_string(),
            "arcface.s" => self.arcface_scale.to_string(),
            "arcface.m" => self.arcface_margin.to_string(),
            "train.lr" => self.train.peak_lr.to_string(),
            "train.momentum" => self.train.momentum.to_string(),
            "train.weight_decay" => self.train.weight_decay.to_string(),
            "train.warmup_epochs" => self.train.warmup_epochs.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.batch" => self.batch.to_string(),
            "train.clip_norm" => self.train.clip_norm.to_string(),
            "pretrain.lr" => self.pretrain.peak_lr.to_string(),
            "pretrain.warmup_epochs" => self.pretrain.warmup_epochs.to_string(),
            "pretrain.epochs" => self.pretrain.epochs.to_string(),
            "perf.samples" => self.perf_samples.to_string(),
            "perf.center" => self.perf_center.map_or("anchor".into(), |c| c.to_string()),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.identities" => self.data.identities = parse(key, v)?,
            "data.samples" => self.data.samples = parse(key, v)?,
            "data.image" => self.data.image = parse(key, v)?,
            "data.flip_prob" => self.data.flip_prob = parse(key, v)?,
            "data.noise" => self.data.noise = parse(key, v)?,
            "data.jitter" => self.data.jitter = parse(key, v)?,
            "data.holdout" => self.holdout = parse(key, v)?,
            "model.dim" => self.dim = parse(key, v)?,
            "teacher.patch" => self.teacher.patch = parse(key, v)?,
            "teacher.depths" => self.teacher.depths = parse_list(key, v)?,
            "teacher.window" => self.teacher.window = parse(key, v)?,
            "teacher.heads" => self.teacher.heads = parse(key, v)?,
            "teacher.mlp_ratio" => self.teacher.mlp_ratio = parse(key, v)?,
            "teacher.t" => self.teacher.prompts = parse(key, v)?,
            "teacher.keep_final_prompts" => self.teacher.keep_final_prompts = parse(key, v)?,
            "teacher.frozen" => self.teacher.frozen_backbone = parse(key, v)?,
            "student.channels" => self.student_channels = parse_list(key, v)?,
            "urfm.mapping" => self.urfm.mapping = v.parse()?,
            "urfm.L" => self.urfm.centers = parse(key, v)?,
            "urfm.heads" => self.urfm.heads = parse(key, v)?,
            "urfm.align_heads" => self.urfm.align_heads = parse(key, v)?,
            "pe.mode" => self.urfm.pe.mode = v.parse::<FacialMode>()?,
            "pe.alpha" => self.urfm.pe.alpha = parse(key, v)?,
            "pe.beta" => self.urfm.pe.beta = parse(key, v)?,
            "pe.gamma" => {
                self.urfm.pe.gamma = if v == "auto" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "loss.lambda_cls" => self.objective.lambda_cls = parse(key, v)?,
            "loss.lambda_attn" => self.objective.lambda_attn = parse(key, v)?,
            "loss.lambda_feat" => self.objective.lambda_feat = parse(key, v)?,
            "loss.align" => self.objective.align = v.parse::<AlignMode>()?,
            "arcface.s" => self.arcface_scale = parse(key, v)?,
            "arcface.m" => self.arcface_margin = parse(key, v)?,
            "train.lr" => self.train.peak_lr = parse(key, v)?,
            "train.momentum" => {
                self.train.momentum = parse(key, v)?;
                self.pretrain.momentum = self.train.momentum;
            }
            "train.weight_decay" => {
                self.train.weight_decay = parse(key, v)?;
                self.pretrain.weight_decay = self.train.weight_decay;
            }
            "train.warmup_epochs" => self.train.warmup_epochs = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch" => self.batch = parse(key, v)?,
            "train.clip_norm" => {
                self.train.clip_norm = parse(key, v)?;
                self.pretrain.clip_norm = self.train.clip_norm;
            }
            "pretrain.lr" => self.pretrain.peak_lr = parse(key, v)?,
            "pretrain.warmup_epochs" => self.pretrain.warmup_epochs = parse(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = parse(key, v)?,
            "perf.samples" => self.perf_samples = parse(key, v)?,
            "perf.center" => {
                self.perf_center = if v == "anchor" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for kv in overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Parses a config file; `#` starts a comment. Keys not given keep their
    /// defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{raw}`", n + 1))
            })?;
            cfg.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key).expect("documented key"));
        }
        out
    }

    pub fn data_spec(&self) -> SynthFaceSpec {
        SynthFaceSpec {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            image: self.data.image,
            dim: self.dim,
            ..self.teacher.clone()
        }
    }

    /// The backbone trained before distillation: no prompts, all weights free.
    pub fn pretrain_teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            prompts: 0,
            keep_final_prompts: false,
            frozen_backbone: false,
            ..self.teacher_config()
        }
    }

    pub fn student_config(&self) -> StudentConfig {
        StudentConfig {
            image: self.data.image,
            channels: self.student_channels.clone(),
            ..StudentConfig::default()
        }
    }

    pub fn urfm_config(&self) -> UrfmConfig {
        UrfmConfig {
            dim: self.dim,
            image: self.data.image,
            pe: PeSettings { ..self.urfm.pe },
            ..self.urfm.clone()
        }
    }

    pub fn arcface(&self) -> Result<ArcFaceConfig> {
        ArcFaceConfig::new(
            self.arcface_scale,
            self.arcface_margin,
            self.data.identities,
        )
    }

    pub fn fit_options(&self, pretrain: bool) -> FitOptions {
        FitOptions {
            schedule: if pretrain { self.pretrain } else { self.train },
            batch_size: self.batch,
            seed: self.seed.wrapping_add(if pretrain { 17 } else { 29 }),
        }
    }

    /// Cross-field checks beyond what each value parse enforces.
    pub fn validate(&self) -> Result<()> {
        self.data_spec().validate()?;
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config(format!(
                "data.holdout {} must be in [0, 1)",
                self.holdout
            )));
        }
        if self.student_channels.last() != Some(&self.dim) {
            return Err(Error::Config(format!(
                "student.channels must end with model.dim ({}), got {:?}",
                self.dim, self.student_channels
            )));
        }
        self.teacher_config().validate()?;
        self.student_config().validate()?;
        let (tg, sg) = (
            self.teacher_config().final_grid(),
            self.student_config().final_grid(),
        );
        if tg != sg {
            return Err(Error::Config(format!(
                "teacher grid {tg}x{tg} and student grid {sg}x{sg} differ"
            )));
        }
        self.objective.validate()?;
        if self.teacher.keep_final_prompts && self.objective.uses_teacher() {
            return Err(Error::Config(
                "teacher.keep_final_prompts changes the teacher token count; alignment needs it off".into(),
            ));
        }
        self.arcface()?;
        if self.batch == 0 || self.perf_samples == 0 {
            return Err(Error::Config(
                "train.batch and perf.samples must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Keys whose values differ between two configs.
pub fn diff_keys(a: &RunConfig, b: &RunConfig) -> Vec<&'static str> {
    KEYS.iter()
        .copied()
        .filter(|k| a.get(k).ok() != b.get(k).ok())
        .collect()
}
