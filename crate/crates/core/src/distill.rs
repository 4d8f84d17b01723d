//! Multi-codebook → single-codebook distillation by parameter inheritance.
//!
//! A teacher with grouped residual codebooks is trained first. The student
//! reuses the teacher's encoder and decoder tensors, gets a fresh single
//! codebook (larger, wider, bridged to the latent by its own factorized
//! projections) and is then trained with the same adversarial loop.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::adversary::{dlt_train, BankConfig, DiscriminatorBank, GanState, StepMetrics, TrainConfig, TrainReport};
use crate::codec::{build_codec, build_codec_with, CodecModel, CodecSpec, InitSource, Part};
use crate::dsp::AudioBuffer;
use crate::error::{Error, Result};
use crate::quantizer::Projection;

/// Stand-in path for the in-memory teacher during inheritance.
const TEACHER_SOURCE: &str = "<teacher>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillPlan {
    pub teacher: CodecSpec,
    pub student: CodecSpec,
    pub teacher_train: TrainConfig,
    pub student_train: TrainConfig,
    #[serde(default)]
    pub discriminators: BankConfig,
    /// Keep the inherited encoder and decoder fixed while the student trains.
    #[serde(default)]
    pub freeze_inherited: bool,
}

impl DistillPlan {
    /// Teacher (2, 2, 16, 8) → student (1, 1, 64, 16) on the desk profile.
    pub fn desk() -> Self {
        let mut student = CodecSpec::desk_student();
        student.seed = 1;
        Self {
            teacher: CodecSpec::desk_teacher(),
            student,
            teacher_train: TrainConfig::desk(),
            student_train: TrainConfig {
                seed: 1,
                ..TrainConfig::desk()
            },
            discriminators: BankConfig::desk(),
            freeze_inherited: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("distillation plan: {m}")));
        self.teacher.validate()?;
        self.student.validate()?;
        self.teacher_train.validate()?;
        self.student_train.validate()?;
        self.discriminators.validate()?;
        if self.student.n_residual != 1 || self.student.n_group != 1 {
            return bad("the student must have exactly one codebook (n_residual = n_group = 1)");
        }
        if self.student.encoder != self.teacher.encoder || self.student.decoder != self.teacher.decoder {
            return bad("student encoder and decoder must match the teacher's architecture");
        }
        if self.student.mel != self.teacher.mel {
            return bad("student and teacher must share the mel front end");
        }
        if self.student.seed == self.teacher.seed {
            return bad("student and teacher seeds must differ so the student codebook is freshly drawn");
        }
        if self.student.vq_init != InitSource::Scratch {
            return bad("the student quantizer must start from scratch");
        }
        Ok(())
    }
}

/// Build a student from `student_spec` whose encoder and decoder tensors are
/// copied from `teacher`; the quantizer and its projections are new.
pub fn inherit_params(teacher: &CodecModel, student_spec: &CodecSpec) -> Result<CodecModel> {
    if student_spec.vq_init != InitSource::Scratch {
        return Err(Error::Config("inheritance builds a fresh quantizer; vq_init must be scratch".into()));
    }
    if student_spec.projection == Projection::Identity && student_spec.code_dim != student_spec.encoder.out_dim() {
        return Err(Error::Config(format!(
            "without projections the code dimension must equal the latent dimension ({} vs {})",
            student_spec.code_dim,
            student_spec.encoder.out_dim()
        )));
    }
    let linked = CodecSpec {
        encoder_init: InitSource::From(TEACHER_SOURCE.into()),
        decoder_init: InitSource::From(TEACHER_SOURCE.into()),
        ..student_spec.clone()
    };
    let ck = teacher.to_checkpoint()?;
    let mut student = build_codec_with(&linked, |_| Ok(ck.clone()))?;
    student.replace_spec(student_spec.clone());
    Ok(student)
}

/// Encoder and decoder tensor names that a student inherits.
pub fn inherited_names(model: &CodecModel) -> BTreeSet<String> {
    model
        .part_names(Part::Encoder)
        .into_iter()
        .chain(model.part_names(Part::Decoder))
        .collect()
}

/// Final state of one training phase.
#[derive(Clone, Debug, Serialize)]
pub struct PhaseSummary {
    pub steps: usize,
    pub skipped: usize,
    pub initial_mel: f64,
    /// Mean mel loss over the last [`FINAL_WINDOW`] steps.
    pub final_mel: f64,
    pub last: StepMetrics,
    /// Perplexity and usage per epoch.
    pub epoch_codebook: Vec<(f64, f64)>,
}

/// Steps averaged into a phase's final mel loss.
pub const FINAL_WINDOW: usize = 10;

impl PhaseSummary {
    pub fn from_report(r: &TrainReport) -> Result<Self> {
        let last = r
            .metrics
            .last()
            .cloned()
            .ok_or_else(|| Error::TrainingAborted("phase recorded no steps".into()))?;
        Ok(Self {
            steps: r.metrics.len(),
            skipped: r.skipped,
            initial_mel: r.initial_mel().unwrap_or(f64::NAN),
            final_mel: r.final_mel(FINAL_WINDOW).unwrap_or(f64::NAN),
            last,
            epoch_codebook: r.epoch_codebook.clone(),
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DistillSummary {
    pub teacher: PhaseSummary,
    pub student: PhaseSummary,
}

pub struct DistillOutcome {
    pub teacher: CodecModel,
    pub student: CodecModel,
    pub teacher_report: TrainReport,
    pub student_report: TrainReport,
}

impl DistillOutcome {
    pub fn summary(&self) -> Result<DistillSummary> {
        Ok(DistillSummary {
            teacher: PhaseSummary::from_report(&self.teacher_report)?,
            student: PhaseSummary::from_report(&self.student_report)?,
        })
    }
}

/// Build the teacher from the plan and train it.
pub fn train_teacher(
    plan: &DistillPlan,
    corpus: &[AudioBuffer],
    on_step: impl FnMut(&StepMetrics),
) -> Result<(CodecModel, TrainReport)> {
    plan.validate()?;
    let mut teacher = build_codec(&plan.teacher)?;
    let mut gan = GanState::new(DiscriminatorBank::new(&plan.discriminators)?, plan.teacher_train.seed)?;
    let report = dlt_train(corpus, &mut teacher, &mut gan, &plan.teacher_train, on_step)?;
    Ok((teacher, report))
}

/// Inherit from a trained `teacher` and train the student.
pub fn train_student(
    plan: &DistillPlan,
    teacher: &CodecModel,
    corpus: &[AudioBuffer],
    on_step: impl FnMut(&StepMetrics),
) -> Result<(CodecModel, TrainReport)> {
    plan.validate()?;
    if teacher.trained_steps() == 0 {
        return Err(Error::Config("the teacher has not been trained; train it before distilling".into()));
    }
    let mut student = inherit_params(teacher, &plan.student)?;
    let mut cfg = plan.student_train.clone();
    if plan.freeze_inherited {
        cfg.frozen.extend([Part::Encoder.prefix().to_string(), Part::Decoder.prefix().to_string()]);
    }
    let mut gan = GanState::new(DiscriminatorBank::new(&plan.discriminators)?, cfg.seed)?;
    let report = dlt_train(corpus, &mut student, &mut gan, &cfg, on_step)?;
    Ok((student, report))
}

/// Teacher training, inheritance and student training in sequence.
/// `on_step` receives `("teacher" | "student", metrics)`.
pub fn run_dms(plan: &DistillPlan, corpus: &[AudioBuffer], mut on_step: impl FnMut(&str, &StepMetrics)) -> Result<DistillOutcome> {
    if corpus.is_empty() {
        return Err(Error::Input("distillation corpus is empty".into()));
    }
    let (teacher, teacher_report) = train_teacher(plan, corpus, |m| on_step("teacher", m))?;
    let (student, student_report) = train_student(plan, &teacher, corpus, |m| on_step("student", m))?;
    Ok(DistillOutcome {
        teacher,
        student,
        teacher_report,
        student_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_plan_is_valid() {
        DistillPlan::desk().validate().unwrap();
    }

    #[test]
    fn plan_rules() {
        let mut p = DistillPlan::desk();
        p.student.n_group = 2;
        assert!(p.validate().is_err());
        let mut p = DistillPlan::desk();
        p.student.seed = p.teacher.seed;
        assert!(p.validate().is_err());
        let mut p = DistillPlan::desk();
        p.student.encoder.dims = vec![32, 48];
        assert!(p.validate().is_err());
    }

    #[test]
    fn full_scale_plan_shapes() {
        let t = CodecSpec::teacher();
        let s = CodecSpec::student("teacher.ckpt");
        assert_eq!((t.n_residual, t.n_group, t.n_codes, t.code_dim), (8, 4, 1024, 512));
        assert_eq!((s.n_residual, s.n_group, s.n_codes, s.code_dim), (1, 1, 32768, 3584));
        assert_eq!(s.encoder, t.encoder);
        assert_eq!(s.decoder, t.decoder);
    }

    #[test]
    fn untrained_teacher_rejected() {
        let plan = DistillPlan::desk();
        let teacher = build_codec(&plan.teacher).unwrap();
        let corpus = crate::synth::tone_corpus(2, 8000, 8000, 0).unwrap();
        let err = train_student(&plan, &teacher, &corpus, |_| {}).err().unwrap();
        assert!(err.to_string().contains("not been trained"), "{err}");
    }

    #[test]
    fn identity_projection_needs_matching_dims() {
        let teacher = build_codec(&CodecSpec::desk_teacher()).unwrap();
        let mut s = CodecSpec::desk_student();
        s.projection = Projection::Identity;
        assert!(inherit_params(&teacher, &s).is_err());
        s.code_dim = s.encoder.out_dim();
        inherit_params(&teacher, &s).unwrap();
    }
}
