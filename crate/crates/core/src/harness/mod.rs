//! Synthetic data, run configuration, checkpoints, evaluation and the
//! experiment pipeline.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod experiment;
pub mod synth;

pub use checkpoint::{Checkpoint, LoadMode, ParamBlock};
pub use config::{diff_keys, RunConfig, KEYS};
pub use eval::{evaluate, make_pairs, verification_accuracy, EvalReport, Pair};
pub use experiment::{
    build_models, distill, end_to_end, evaluate_student, evaluate_teacher, load_pretrained_teacher,
    perf_maps, perf_samples, perf_score, pretrain_teacher, run_sweep, sweep_configs,
    write_sweep_csv, Preset, Pretrained, RunMetrics, SweepKind, SweepRow, Workspace,
};
pub use synth::{
    generate_dataset, normalize_pixels, read_dataset, render_sample, write_dataset, FaceSample,
    SynthFaceSpec, DENSE_LANDMARKS,
};

#[cfg(test)]
mod tests;
