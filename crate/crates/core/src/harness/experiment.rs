//! Experiment pipeline: pretraining, distillation, evaluation, PERF analysis,
//! presets and sweeps.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{
    compute_perf, fit, perf_alignment_score, teacher_loss, total_loss, AlignMode, DistillModels,
    DistillRecord, JsonlSink, PerfMap, TeacherModel,
};
use crate::error::{Error, Result};
use crate::facegeom::FacialMode;
use crate::numerics::{ParamRegistry, Tensor};
use crate::urfm::{MappingKind, Side};

use super::checkpoint::{Checkpoint, LoadMode};
use super::config::RunConfig;
use super::eval::{evaluate, EvalReport};
use super::synth::{generate_dataset, FaceSample};

/// A dataset with its per-identity train/held-out split.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub samples: Vec<FaceSample>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Workspace {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        Self::from_samples(generate_dataset(&cfg.data_spec())?, cfg.holdout)
    }

    /// Within each identity, in sample order, the last `holdout` fraction
    /// (at least one sample) is held out.
    pub fn from_samples(samples: Vec<FaceSample>, holdout: f64) -> Result<Self> {
        let mut by_label: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, s) in samples.iter().enumerate() {
            by_label.entry(s.label).or_default().push(i);
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for idx in by_label.values() {
            let held = ((idx.len() as f64 * holdout).round() as usize).clamp(1, idx.len());
            if held == idx.len() {
                return Err(Error::Config(format!(
                    "identity has {} samples, none left to train on",
                    idx.len()
                )));
            }
            train.extend_from_slice(&idx[..idx.len() - held]);
            test.extend_from_slice(&idx[idx.len() - held..]);
        }
        Ok(Self {
            samples,
            train,
            test,
        })
    }

    pub fn train_samples(&self) -> Vec<&FaceSample> {
        self.train.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn test_samples(&self) -> Vec<&FaceSample> {
        self.test.iter().map(|&i| &self.samples[i]).collect()
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let w = *t.shape().last().expect("matrix");
    t.to_vec().chunks(w).map(<[f64]>::to_vec).collect()
}

fn embed_all(
    samples: &[&FaceSample],
    embed: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| embed(&s.image).map(|e| e.to_vec()))
        .collect()
}

fn eval_seed(cfg: &RunConfig) -> u64 {
    cfg.seed ^ 0xE7A1
}

pub fn evaluate_teacher(
    cfg: &RunConfig,
    teacher: &TeacherModel,
    ws: &Workspace,
) -> Result<EvalReport> {
    let test = ws.test_samples();
    let emb = embed_all(&test, |x| teacher.embed(x))?;
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    evaluate(&emb, &labels, &rows(&teacher.classifier), eval_seed(cfg))
}

pub fn evaluate_student(
    cfg: &RunConfig,
    models: &DistillModels,
    ws: &Workspace,
) -> Result<EvalReport> {
    let test = ws.test_samples();
    let emb = embed_all(&test, |x| models.student.embed(x))?;
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    evaluate(
        &emb,
        &labels,
        &rows(&models.student.classifier),
        eval_seed(cfg),
    )
}

/// Outcome of training the teacher backbone alone.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub checkpoint: Checkpoint,
    pub records: Vec<DistillRecord>,
    pub report: EvalReport,
}

/// Trains the prompt-free teacher with ArcFace on the training split and
/// checkpoints every `teacher.*` parameter.
pub fn pretrain_teacher(
    cfg: &RunConfig,
    ws: &Workspace,
    sink: &mut dyn FnMut(&DistillRecord) -> Result<()>,
) -> Result<Pretrained> {
    cfg.validate()?;
    let arc = cfg.arcface()?;
    let mut registry = ParamRegistry::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EAC_4E12);
    let teacher = TeacherModel::new(
        cfg.pretrain_teacher_config(),
        arc.classes,
        &mut registry,
        &mut rng,
    )?;
    let train = ws.train_samples();
    let records = fit(
        &registry,
        &train,
        &cfg.fit_options(true),
        |s| teacher_loss(&s.image, s.label, &teacher, &arc),
        sink,
    )?;
    let report = evaluate_teacher(cfg, &teacher, ws)?;
    log::info!(
        "pretrained teacher: verification {:.4}",
        report.verification
    );
    Ok(Pretrained {
        checkpoint: Checkpoint::from_registry(cfg.to_text(), &registry),
        records,
        report,
    })
}

/// Rebuilds the prompt-free teacher from a pretraining checkpoint.
pub fn load_pretrained_teacher(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<TeacherModel> {
    let mut registry = ParamRegistry::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EAC_4E12);
    let teacher = TeacherModel::new(
        cfg.pretrain_teacher_config(),
        cfg.arcface()?.classes,
        &mut registry,
        &mut rng,
    )?;
    ckpt.apply(&registry, LoadMode::Exact)?;
    Ok(teacher)
}

/// Builds every model of a distillation run, loading pretrained teacher
/// weights when given. Prompts and mapping parameters keep their fresh
/// initialization.
pub fn build_models(cfg: &RunConfig, teacher: Option<&Checkpoint>) -> Result<DistillModels> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD157_1111);
    let models = DistillModels::new(
        cfg.teacher_config(),
        cfg.student_config(),
        cfg.urfm_config(),
        cfg.arcface()?,
        &mut rng,
    )?;
    if let Some(ckpt) = teacher {
        ckpt.apply(&models.registry, LoadMode::Subset)?;
    }
    Ok(models)
}

pub fn distill(
    cfg: &RunConfig,
    models: &DistillModels,
    ws: &Workspace,
    sink: &mut dyn FnMut(&DistillRecord) -> Result<()>,
) -> Result<Vec<DistillRecord>> {
    let train = ws.train_samples();
    fit(
        &models.registry,
        &train,
        &cfg.fit_options(false),
        |s| total_loss(&s.image, s.label, &s.landmarks, models, &cfg.objective),
        sink,
    )
}

/// Mapped-feature row probed by PERF: the requested center, or the anchor
/// center (middle pixel token for the self-attention mapping).
pub fn probe_row(models: &DistillModels, center: Option<usize>) -> Result<usize> {
    let count = match models.urfm.config.mapping {
        MappingKind::Centers => models.urfm.centers.count(),
        MappingKind::SelfAttention => models.student.net.config.final_grid().pow(2),
    };
    let row = center.unwrap_or_else(|| match models.urfm.config.mapping {
        MappingKind::Centers => models.urfm.centers.grid.anchor(),
        MappingKind::SelfAttention => {
            let g = models.student.net.config.final_grid();
            (g / 2) * g + g / 2
        }
    });
    if row >= count {
        return Err(Error::Config(format!(
            "perf.center {row} out of range (0..{count})"
        )));
    }
    Ok(row)
}

/// PERF maps of the probed local feature on the teacher and student branches.
pub fn perf_maps(
    models: &DistillModels,
    samples: &[&FaceSample],
    center: Option<usize>,
) -> Result<(PerfMap, PerfMap)> {
    let row = probe_row(models, center)?;
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let probe = |side: Side| {
        move |x: &Tensor, k: usize| -> Result<Tensor> {
            let features = match side {
                Side::Teacher => models.teacher.net.forward(x)?.features,
                Side::Student => models.student.net.forward(x)?.features,
            };
            let idx = models.urfm.indices(Some(&samples[k].landmarks))?;
            models
                .urfm
                .map(side, &features, &idx)?
                .local
                .select_rows(&[row])
        }
    };
    let t = compute_perf(&images, "teacher", probe(Side::Teacher))?;
    let s = compute_perf(&images, "student", probe(Side::Student))?;
    Ok((t, s))
}

pub fn perf_samples<'a>(cfg: &RunConfig, ws: &'a Workspace) -> Vec<&'a FaceSample> {
    let mut s = ws.test_samples();
    s.truncate(cfg.perf_samples);
    s
}

pub fn perf_score(cfg: &RunConfig, models: &DistillModels, ws: &Workspace) -> Result<f64> {
    let (t, s) = perf_maps(models, &perf_samples(cfg, ws), cfg.perf_center)?;
    perf_alignment_score(&t, &s)
}

/// Named configurations of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Student trained with ArcFace only.
    Scratch,
    /// Pixel-feature MSE against a frozen teacher.
    Baseline,
    /// Self-attention mapping on both branches, frozen teacher.
    Asa,
    /// Self-attention mapping with the whole teacher released.
    AsaMa,
    /// Self-attention mapping, frozen backbone plus prompts.
    Apt,
    /// Local-center mapping with saliency encoding and prompts.
    Full,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Scratch,
        Preset::Baseline,
        Preset::Asa,
        Preset::AsaMa,
        Preset::Apt,
        Preset::Full,
    ];

    /// Applies the preset on top of `cfg`. Prompted presets keep
    /// `teacher.t` from `cfg`.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        let prompts = cfg.teacher.prompts;
        c.objective.align = AlignMode::Mapped;
        c.teacher.frozen_backbone = true;
        c.teacher.keep_final_prompts = false;
        match self {
            Preset::Scratch => {
                c.objective.lambda_attn = 0.0;
                c.objective.lambda_feat = 0.0;
                c.teacher.prompts = 0;
            }
            Preset::Baseline => {
                c.objective.align = AlignMode::PixelMse;
                c.objective.lambda_attn = 0.0;
                c.teacher.prompts = 0;
            }
            Preset::Asa => {
                c.urfm.mapping = MappingKind::SelfAttention;
                c.teacher.prompts = 0;
            }
            Preset::AsaMa => {
                c.urfm.mapping = MappingKind::SelfAttention;
                c.teacher.prompts = 0;
                c.teacher.frozen_backbone = false;
            }
            Preset::Apt => {
                c.urfm.mapping = MappingKind::SelfAttention;
                c.teacher.prompts = prompts;
            }
            Preset::Full => {
                c.urfm.mapping = MappingKind::Centers;
                c.urfm.pe.mode = FacialMode::Saliency;
                c.teacher.prompts = prompts;
                c.teacher.frozen_backbone = false;
            }
        }
        c
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Scratch => "scratch",
            Preset::Baseline => "baseline",
            Preset::Asa => "asa",
            Preset::AsaMa => "asa_ma",
            Preset::Apt => "apt",
            Preset::Full => "full",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset `{s}` (scratch | baseline | asa | asa_ma | apt | full)"
                ))
            })
    }
}

/// Which axis a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    /// Teacher adaptable capacity: frozen, 5, 25, 50 prompts, all-learnable.
    Prompts,
    /// Local center count `L`: 3×3, 5×5, 7×7.
    Centers,
    /// Facial distance: Euclidean only, relative, saliency.
    Mode,
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t" | "prompts" => Ok(Self::Prompts),
            "L" | "centers" => Ok(Self::Centers),
            "mode" | "pe.mode" => Ok(Self::Mode),
            _ => Err(Error::Config(format!("unknown sweep `{s}` (t | L | mode)"))),
        }
    }
}

pub const PROMPT_GRID: [usize; 3] = [5, 25, 50];

/// The labelled configurations of a sweep, derived from `base`.
pub fn sweep_configs(kind: SweepKind, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match kind {
        SweepKind::Prompts => {
            let mut out = vec![(
                "frozen".to_string(),
                with(&|c| {
                    c.teacher.prompts = 0;
                    c.teacher.frozen_backbone = true;
                }),
            )];
            for t in PROMPT_GRID {
                out.push((
                    format!("{t}_prompts"),
                    with(&|c| {
                        c.teacher.prompts = t;
                        c.teacher.frozen_backbone = true;
                    }),
                ));
            }
            out.push((
                "all_learnable".to_string(),
                with(&|c| {
                    c.teacher.prompts = 0;
                    c.teacher.frozen_backbone = false;
                }),
            ));
            out
        }
        SweepKind::Centers => [9, 25, 49]
            .into_iter()
            .map(|l| {
                let side = (l as f64).sqrt() as usize;
                (format!("{side}x{side}"), with(&|c| c.urfm.centers = l))
            })
            .collect(),
        SweepKind::Mode => [FacialMode::None, FacialMode::Relative, FacialMode::Saliency]
            .into_iter()
            .map(|m| {
                let label = match m {
                    FacialMode::None => "euc",
                    FacialMode::Relative => "euc+RD",
                    FacialMode::Saliency => "euc+SD",
                };
                (label.to_string(), with(&|c| c.urfm.pe.mode = m))
            })
            .collect(),
    }
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub seed: u64,
    pub teacher_trainable: usize,
    pub student: EvalReport,
    pub teacher: EvalReport,
}

/// Runs every configuration of `kind` from the same pretrained teacher.
pub fn run_sweep(
    kind: SweepKind,
    base: &RunConfig,
    teacher: &Checkpoint,
    ws: &Workspace,
) -> Result<Vec<SweepRow>> {
    let mut out = Vec::new();
    for (label, cfg) in sweep_configs(kind, base) {
        let models = build_models(&cfg, Some(teacher))?;
        distill(&cfg, &models, ws, &mut |_| Ok(()))?;
        let row = SweepRow {
            label,
            seed: cfg.seed,
            teacher_trainable: models.registry.trainable_count("teacher."),
            student: evaluate_student(&cfg, &models, ws)?,
            teacher: evaluate_teacher(&cfg, &models.teacher, ws)?,
        };
        log::info!(
            "sweep {}: student {:.4}, teacher {:.4}",
            row.label,
            row.student.verification,
            row.teacher.verification
        );
        out.push(row);
    }
    Ok(out)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(
        out,
        "setting,seed,teacher_trainable,student_verification,student_classification,teacher_verification,teacher_classification"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.label,
            r.seed,
            r.teacher_trainable,
            r.student.verification,
            r.student.classification,
            r.teacher.verification,
            r.teacher.classification
        )?;
    }
    Ok(())
}

/// Held-out metrics written at the end of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub pretrained_teacher: EvalReport,
    pub student: EvalReport,
    pub teacher: EvalReport,
    pub perf_score: f64,
    pub final_loss: f64,
}

/// Data generation, pretraining, distillation and evaluation in one go,
/// writing every artifact under `dir`.
pub fn end_to_end(cfg: &RunConfig, dir: &Path) -> Result<RunMetrics> {
    fs::create_dir_all(dir)?;
    let ws = Workspace::generate(cfg)?;
    super::synth::write_dataset(&dir.join("data"), &ws.samples, cfg.data.image)?;
    fs::write(dir.join("run.cfg"), cfg.to_text())?;

    let mut pre_sink = JsonlSink::new(BufWriter::new(fs::File::create(
        dir.join("pretrain.jsonl"),
    )?));
    let pre = pretrain_teacher(cfg, &ws, &mut |r| pre_sink.write(r))?;
    pre_sink.into_inner().flush()?;
    pre.checkpoint.save(&dir.join("teacher.ckpt"))?;

    let models = build_models(cfg, Some(&pre.checkpoint))?;
    let mut sink = JsonlSink::new(BufWriter::new(fs::File::create(dir.join("distill.jsonl"))?));
    let records = distill(cfg, &models, &ws, &mut |r| sink.write(r))?;
    sink.into_inner().flush()?;
    Checkpoint::from_registry(cfg.to_text(), &models.registry).save(&dir.join("distilled.ckpt"))?;

    let metrics = RunMetrics {
        seed: cfg.seed,
        pretrained_teacher: pre.report,
        student: evaluate_student(cfg, &models, &ws)?,
        teacher: evaluate_teacher(cfg, &models.teacher, &ws)?,
        perf_score: perf_score(cfg, &models, &ws)?,
        final_loss: records.last().map_or(f64::NAN, |r| r.loss),
    };
    let json =
        serde_json::to_string_pretty(&metrics).map_err(|e| Error::Contract(e.to_string()))?;
    fs::write(dir.join("metrics.json"), json + "\n")?;
    Ok(metrics)
}
