//! Teacher, student and classification head.

pub mod arcface;
pub mod layers;
pub mod patch;
pub mod student;
pub mod teacher;
pub mod window;

pub use arcface::{arcface_loss, class_cosines, ArcFaceConfig};
pub use layers::{attend, LayerNorm, Linear, Mlp, MultiHeadSelfAttention};
pub use patch::{patch_embed, PatchMerge, PatchSpec};
pub use student::{Student, StudentConfig, StudentOutput, STUDENT_PREFIX};
pub use teacher::{
    PromptBank, Teacher, TeacherConfig, TeacherOutput, PROMPT_PREFIX, TEACHER_PREFIX,
};
pub use window::{WindowAttention, WindowOutput, WindowPlan};
