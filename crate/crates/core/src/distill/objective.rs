//! The networks taking part in distillation and the weighted objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facegeom::LandmarkSet;
use crate::models::{arcface_loss, ArcFaceConfig, Student, StudentConfig, Teacher, TeacherConfig};
use crate::numerics::{ParamBuilder, ParamRegistry, Tensor};
use crate::urfm::{attention_alignment_loss, feature_alignment_loss, Side, Urfm, UrfmConfig};

pub const TEACHER_CLASSIFIER: &str = "teacher.arcface.weight";
pub const STUDENT_CLASSIFIER: &str = "student.arcface.weight";

/// What the alignment terms compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// Attention maps and head outputs of the mapping layer.
    Mapped,
    /// Raw pixel features, FitNet style; the attention term is zero.
    PixelMse,
}

impl std::fmt::Display for AlignMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mapped => "mapped",
            Self::PixelMse => "pixel_mse",
        })
    }
}

impl std::str::FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mapped" => Ok(Self::Mapped),
            "pixel_mse" => Ok(Self::PixelMse),
            _ => Err(Error::Config(format!(
                "unknown alignment `{s}` (mapped | pixel_mse)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillObjective {
    pub lambda_cls: f64,
    pub lambda_attn: f64,
    pub lambda_feat: f64,
    pub align: AlignMode,
}

impl Default for DistillObjective {
    fn default() -> Self {
        Self {
            lambda_cls: 1.0,
            lambda_attn: 1.0,
            lambda_feat: 1.0,
            align: AlignMode::Mapped,
        }
    }
}

impl DistillObjective {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("cls", self.lambda_cls),
            ("attn", self.lambda_attn),
            ("feat", self.lambda_feat),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight lambda_{name}={v} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }

    /// Whether the teacher takes part at all.
    pub fn uses_teacher(&self) -> bool {
        self.lambda_attn > 0.0 || self.lambda_feat > 0.0
    }
}

/// Teacher backbone plus its pretrained class weights.
#[derive(Debug, Clone)]
pub struct TeacherModel {
    pub net: Teacher,
    pub classifier: Tensor,
}

impl TeacherModel {
    pub fn new<R: Rng>(
        config: TeacherConfig,
        classes: usize,
        registry: &mut ParamRegistry,
        rng: &mut R,
    ) -> Result<Self> {
        let dim = config.dim;
        let net = Teacher::new(config, registry, rng)?;
        let classifier = ParamBuilder::new(registry, rng, "teacher.arcface").normal(
            "weight",
            &[classes, dim],
            1.0,
        )?;
        net.apply_freezing(registry);
        Ok(Self { net, classifier })
    }

    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.net.forward(image)?.embedding)
    }
}

#[derive(Debug, Clone)]
pub struct StudentModel {
    pub net: Student,
    pub classifier: Tensor,
}

impl StudentModel {
    pub fn new<R: Rng>(
        config: StudentConfig,
        classes: usize,
        registry: &mut ParamRegistry,
        rng: &mut R,
    ) -> Result<Self> {
        let dim = config.dim();
        let net = Student::new(config, registry, rng)?;
        let classifier = ParamBuilder::new(registry, rng, "student.arcface").normal(
            "weight",
            &[classes, dim],
            1.0,
        )?;
        Ok(Self { net, classifier })
    }

    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.net.forward(image)?.embedding)
    }
}

/// Everything trained or consulted during distillation, sharing one registry.
#[derive(Debug, Clone)]
pub struct DistillModels {
    pub registry: ParamRegistry,
    pub teacher: TeacherModel,
    pub student: StudentModel,
    pub urfm: Urfm,
    pub arcface: ArcFaceConfig,
}

impl DistillModels {
    pub fn new<R: Rng>(
        teacher: TeacherConfig,
        student: StudentConfig,
        urfm: UrfmConfig,
        arcface: ArcFaceConfig,
        rng: &mut R,
    ) -> Result<Self> {
        arcface.validate()?;
        if teacher.dim != student.dim() || urfm.dim != teacher.dim {
            return Err(Error::Config(format!(
                "feature widths differ: teacher {}, student {}, mapping {}",
                teacher.dim,
                student.dim(),
                urfm.dim
            )));
        }
        // Independent streams keep each component's initialization stable
        // when another component's configuration changes.
        let mut streams = [(); 3].map(|_| ChaCha8Rng::seed_from_u64(rng.random()));
        let [t_rng, s_rng, u_rng] = &mut streams;
        let mut registry = ParamRegistry::new();
        let teacher = TeacherModel::new(teacher, arcface.classes, &mut registry, t_rng)?;
        let student = StudentModel::new(student, arcface.classes, &mut registry, s_rng)?;
        let urfm = Urfm::new(urfm, &mut registry, u_rng)?;
        Ok(Self {
            registry,
            teacher,
            student,
            urfm,
            arcface,
        })
    }
}

/// One sample's loss and its parts.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub cls: f64,
    pub attn: f64,
    pub feat: f64,
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("loss component `{name}` is {v}")))
    }
}

/// Attention and feature alignment terms for given pixel features.
pub fn alignment_losses(
    f_t: &Tensor,
    f_s: &Tensor,
    indices: &[usize],
    urfm: &Urfm,
    align: AlignMode,
) -> Result<(Tensor, Tensor)> {
    match align {
        AlignMode::PixelMse => Ok((Tensor::scalar(0.0), f_s.mse(f_t)?)),
        AlignMode::Mapped => {
            let t = urfm.map(Side::Teacher, f_t, indices)?;
            let s = urfm.map(Side::Student, f_s, indices)?;
            Ok((
                attention_alignment_loss(&t.attn, &s.attn)?,
                feature_alignment_loss(&t.local, &s.local, &urfm.head)?,
            ))
        }
    }
}

/// `λ_cls · ArcFace(student) + λ_attn · L_attn + λ_feat · L_feat` for one
/// sample. Terms with zero weight are not evaluated.
pub fn total_loss(
    image: &Tensor,
    label: usize,
    landmarks: &LandmarkSet,
    models: &DistillModels,
    objective: &DistillObjective,
) -> Result<LossBreakdown> {
    let s_out = models.student.net.forward(image)?;
    let cls = arcface_loss(
        &s_out.embedding,
        label,
        &models.arcface,
        &models.student.classifier,
    )?;
    let cls_v = finite("cls", cls.item())?;
    let mut total = cls.scale(objective.lambda_cls);
    let (mut attn_v, mut feat_v) = (0.0, 0.0);
    if objective.uses_teacher() {
        let f_t = models.teacher.net.forward(image)?.features;
        let indices = models.urfm.indices(Some(landmarks))?;
        let (attn, feat) = alignment_losses(
            &f_t,
            &s_out.features,
            &indices,
            &models.urfm,
            objective.align,
        )?;
        attn_v = finite("attn", attn.item())?;
        feat_v = finite("feat", feat.item())?;
        if objective.lambda_attn > 0.0 {
            total = total.add(&attn.scale(objective.lambda_attn))?;
        }
        if objective.lambda_feat > 0.0 {
            total = total.add(&feat.scale(objective.lambda_feat))?;
        }
    }
    finite("total", total.item())?;
    Ok(LossBreakdown {
        total,
        cls: cls_v,
        attn: attn_v,
        feat: feat_v,
    })
}

/// ArcFace loss of the teacher alone, used for pretraining.
pub fn teacher_loss(
    image: &Tensor,
    label: usize,
    teacher: &TeacherModel,
    arcface: &ArcFaceConfig,
) -> Result<LossBreakdown> {
    let loss = arcface_loss(&teacher.embed(image)?, label, arcface, &teacher.classifier)?;
    let cls = finite("cls", loss.item())?;
    Ok(LossBreakdown {
        total: loss,
        cls,
        attn: 0.0,
        feat: 0.0,
    })
}
