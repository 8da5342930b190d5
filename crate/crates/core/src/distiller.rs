//! Knowledge distillation: softened teacher targets mixed with hard-label
//! cross-entropy, plus the teacher-to-student training loop.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::netlib::{Mode, Model};
use crate::optim::OptimizerConfig;
use crate::synthdata::LabeledImages;
use crate::tensor::{Element, Tensor};
use crate::training::{fit, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdConfig {
    pub tau: f64,
    pub lambda: f64,
    pub train: TrainConfig,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            tau: 4.0,
            lambda: 0.9,
            train: TrainConfig {
                optimizer: OptimizerConfig::sgd(0.05, 0.9),
                ..TrainConfig::default()
            },
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("kd lambda {} outside [0, 1]", self.lambda)));
        }
        self.train.validate()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be > 0, got {tau}")))
    }
}

/// `softmax(logits / tau)` of a single logit vector.
pub fn softened_probs(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if logits.is_empty() {
        return Err(Error::invalid("softened_probs of an empty vector"));
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / tau).collect();
    Ok(softmax_rows(&scaled, scaled.len()))
}

/// `(1 − λ)·CE(student, labels) + τ²·λ·mean KL(p_τ^T ‖ p_τ^S)` recorded on
/// the tape. The teacher logits enter as constants.
pub fn kd_loss<T: Element>(
    tape: &mut Tape<T>,
    student_logits: Var,
    teacher_logits: &Tensor<T>,
    labels: &[usize],
    tau: f64,
    lambda: f64,
) -> Result<Var> {
    check_tau(tau)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("kd lambda {lambda} outside [0, 1]")));
    }
    let s_shape = tape.value(student_logits).shape().to_vec();
    if s_shape.len() != 2 || teacher_logits.shape() != s_shape.as_slice() {
        return Err(Error::Shape {
            op: "kd_loss",
            detail: format!("student logits {s_shape:?}, teacher logits {:?}", teacher_logits.shape()),
        });
    }
    let inv_tau = T::from_f64(1.0 / tau);
    let scaled_teacher: Vec<T> = teacher_logits.data().iter().map(|v| *v * inv_tau).collect();
    let p_teacher = Tensor::new(s_shape.clone(), softmax_rows(&scaled_teacher, s_shape[1]))?;
    let p = tape.constant(p_teacher)?;
    let ce = tape.cross_entropy_with_softmax(student_logits, labels)?;
    let soft = tape.scale(student_logits, inv_tau)?;
    let log_q = tape.log_softmax(soft)?;
    let kl = tape.kl_divergence(p, log_q)?;
    let hard = tape.scale(ce, T::from_f64(1.0 - lambda))?;
    let distill = tape.scale(kl, T::from_f64(tau * tau * lambda))?;
    tape.add(hard, distill)
}

/// Trains `student` against the frozen `teacher` and returns the best
/// validation-accuracy weights.
pub fn distill(
    teacher: &Model,
    student: Model,
    train: &LabeledImages,
    val: &LabeledImages,
    cfg: &KdConfig,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let (tc, sc) = (teacher.spec().num_classes, student.spec().num_classes);
    if tc != sc {
        return Err(Error::invalid(format!("teacher has {tc} classes, student {sc}")));
    }
    let mut frozen = teacher.clone();
    frozen.set_mode(Mode::Eval);
    fit(student, train, val, &cfg.train, &mut |tape, pass, x, labels| {
        let t = frozen.forward_logits(x, None)?;
        kd_loss(tape, pass.logits, &t, labels, cfg.tau, cfg.lambda)
    })
}
