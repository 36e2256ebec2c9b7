//! Mini-batch training loop with per-step metric records.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::objective::LossBreakdown;
use super::schedule::{OptimizerSchedule, Sgd};
use crate::error::{Error, Result};
use crate::numerics::ParamRegistry;

/// Metrics of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cls: f64,
    pub attn: f64,
    pub feat: f64,
    /// L2 norm of the accumulated gradient per parameter group (the first
    /// dotted component of the name), trainable parameters only.
    pub grad_norm: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort: Option<String>,
}

/// Writes records as one JSON object per line.
pub struct JsonlSink<W: Write> {
    out: W,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, record: &DistillRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Io(e.into()))?;
        writeln!(self.out, "{line}")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

fn group_norms(registry: &ParamRegistry) -> BTreeMap<String, f64> {
    let mut sq: BTreeMap<String, f64> = BTreeMap::new();
    for (name, tensor) in registry.trainable() {
        let group = name.split('.').next().unwrap_or(name).to_string();
        let s: f64 = tensor.grad_or_zeros().iter().map(|g| g * g).sum();
        *sq.entry(group).or_default() += s;
    }
    sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect()
}

/// One step: accumulate the mean loss gradient over `batch`, then apply
/// SGD to the trainable parameters.
pub fn train_step<S, F>(
    registry: &ParamRegistry,
    sgd: &mut Sgd,
    batch: &[&S],
    lr: f64,
    (step, epoch): (usize, usize),
    loss_fn: &F,
) -> Result<DistillRecord>
where
    F: Fn(&S) -> Result<LossBreakdown>,
{
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    registry.zero_grad();
    let w = 1.0 / batch.len() as f64;
    let mut rec = DistillRecord {
        step,
        epoch,
        lr,
        loss: 0.0,
        cls: 0.0,
        attn: 0.0,
        feat: 0.0,
        grad_norm: BTreeMap::new(),
        abort: None,
    };
    for sample in batch {
        let parts = loss_fn(sample)?;
        rec.loss += w * parts.total.item();
        rec.cls += w * parts.cls;
        rec.attn += w * parts.attn;
        rec.feat += w * parts.feat;
        parts.total.scale(w).backward()?;
    }
    rec.grad_norm = group_norms(registry);
    if let Some((g, v)) = rec.grad_norm.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numeric(format!("gradient of group `{g}` is {v}")));
    }
    sgd.step(registry, lr)?;
    Ok(rec)
}

/// Options of a full training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub schedule: OptimizerSchedule,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffling.
    pub seed: u64,
}

/// Trains for `schedule.epochs` epochs over `samples`, reshuffled each
/// epoch. `steps_per_epoch` is derived from the data and batch size.
///
/// Every record goes to `sink`. A numeric failure emits a final record
/// carrying the diagnostic and then aborts the run.
pub fn fit<S, F>(
    registry: &ParamRegistry,
    samples: &[S],
    options: &FitOptions,
    loss_fn: F,
    sink: &mut dyn FnMut(&DistillRecord) -> Result<()>,
) -> Result<Vec<DistillRecord>>
where
    F: Fn(&S) -> Result<LossBreakdown>,
{
    if samples.is_empty() || options.batch_size == 0 {
        return Err(Error::Config(
            "training needs samples and a positive batch size".into(),
        ));
    }
    let mut schedule = options.schedule;
    schedule.steps_per_epoch = samples.len().div_ceil(options.batch_size);
    schedule.validate()?;
    let mut sgd = Sgd::new(schedule.momentum, schedule.weight_decay).with_clip(schedule.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut records = Vec::with_capacity(schedule.total_steps());
    let mut step = 0;
    for epoch in 0..schedule.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(options.batch_size) {
            let lr = schedule.lr_at(step)?;
            let batch: Vec<&S> = chunk.iter().map(|&i| &samples[i]).collect();
            match train_step(registry, &mut sgd, &batch, lr, (step, epoch), &loss_fn) {
                Ok(rec) => {
                    sink(&rec)?;
                    records.push(rec);
                }
                Err(Error::Numeric(msg)) => {
                    let rec = DistillRecord {
                        step,
                        epoch,
                        lr,
                        loss: f64::NAN,
                        cls: f64::NAN,
                        attn: f64::NAN,
                        feat: f64::NAN,
                        grad_norm: BTreeMap::new(),
                        abort: Some(msg.clone()),
                    };
                    sink(&rec)?;
                    log::error!("aborting at step {step}: {msg}");
                    return Err(Error::Numeric(format!("step {step}: {msg}")));
                }
                Err(e) => return Err(e),
            }
            step += 1;
        }
    }
    Ok(records)
}

/// Mean loss of the records belonging to `epoch`.
pub fn epoch_mean(records: &[DistillRecord], epoch: usize) -> Option<f64> {
    let xs: Vec<f64> = records
        .iter()
        .filter(|r| r.epoch == epoch)
        .map(|r| r.loss)
        .collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}
