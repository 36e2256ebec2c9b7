//! Distillation objective, optimizer schedule, training loop and the
//! receptive-field analyzer.

pub mod objective;
pub mod perf;
pub mod schedule;
pub mod trainer;

pub use objective::{
    alignment_losses, teacher_loss, total_loss, AlignMode, DistillModels, DistillObjective,
    LossBreakdown, StudentModel, TeacherModel, STUDENT_CLASSIFIER, TEACHER_CLASSIFIER,
};
pub use perf::{compute_perf, perf_alignment_score, PerfMap};
pub use schedule::{OptimizerSchedule, Sgd};
pub use trainer::{epoch_mean, fit, train_step, DistillRecord, FitOptions, JsonlSink};
