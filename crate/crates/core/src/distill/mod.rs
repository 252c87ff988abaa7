//! Training objectives and training loops.
//!
//! All distillation terms compare temperature-softened teacher outputs with
//! the student's, as `KL(teacher || student)`, averaged over the batch:
//!
//! ```text
//! CE       = -mean log g(x)_y
//! KD       = (1-λ) CE + T² λ KL(σ_T(f) || σ_T(g))
//! KED      = (1-λ) CE + T² λ (1-μ) KL(σ_T(f) || σ_T(g))
//!                     + τ² λ μ / M · Σ_m KL(σ_τ(f_m) || σ_τ(g_m))
//! KED+h    = KED with the explanation weight scaled by (1-ρ)
//!                     + λ μ ρ / M · Σ_m MSE(h_m^f, A_m h_m^g)
//! ```
//!
//! where `σ_T(p) = softmax(log p / T)` and `A_m` is a learned linear adapter
//! from the student's hidden tap to the teacher's.

mod train;

pub use train::{
    finetune_chimeric, train, ChimericOptions, EpochMetrics, Objective, TrainOptions, TrainOutcome,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::{OptimizerKind, Tape, Tensor, Var, LOG_FLOOR};
use crate::error::{Error, Result};

/// Temperatures and loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Prediction temperature `T`.
    pub temperature: f64,
    /// Explanation temperature `τ`.
    pub tau: f64,
    pub lambda: f64,
    pub mu: f64,
    pub rho: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 10.0,
            tau: 10.0,
            lambda: 0.7,
            mu: 0.7,
            rho: 0.7,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("temperature", self.temperature), ("tau", self.tau)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {t}")));
            }
        }
        for (name, w) in [("lambda", self.lambda), ("mu", self.mu), ("rho", self.rho)] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::invalid(format!(
                    "{name} must lie in [0, 1], got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Epochs, batching and optimizer settings for one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "OptimizerKind::adam")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
}

impl TrainingSchedule {
    pub fn new(epochs: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        TrainingSchedule {
            epochs,
            batch_size,
            learning_rate,
            optimizer: OptimizerKind::adam(),
            seed,
        }
    }

    pub fn validate(&self, samples: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if self.batch_size > samples {
            return Err(Error::invalid(format!(
                "batch size {} exceeds the {samples} training samples",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// `softmax(log p / T)` of a probability row, with `p` floored at 1e-15.
pub fn temperature_softmax(p: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {t}"
        )));
    }
    let logs: Vec<f64> = p.iter().map(|v| v.max(LOG_FLOOR).ln() / t).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

fn soften_rows(p: &Tensor, t: f64) -> Result<Tensor> {
    let c = p.cols();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.rows() {
        out.extend(temperature_softmax(p.row(i), t)?);
    }
    Tensor::matrix(p.rows(), c, out)
}

fn check_rows(tape: &Tape, student: Var, target: &Tensor, what: &'static str) -> Result<()> {
    let s = tape.value(student);
    if s.shape() != target.shape() {
        return Err(Error::shape(
            what,
            format!("student {:?} vs teacher {:?}", s.shape(), target.shape()),
        ));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under row log-probabilities.
pub fn cross_entropy(tape: &mut Tape, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = (tape.value(log_probs).rows(), tape.value(log_probs).cols());
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    let mut onehot = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        onehot[i * c + y] = 1.0;
    }
    let onehot = tape.constant(Tensor::matrix(n, c, onehot)?);
    let picked = tape.mul(onehot, log_probs)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// Batch mean of `KL(σ_t(teacher) || σ_t(student))`; the student enters as
/// row log-probabilities.
pub fn softened_kl(tape: &mut Tape, teacher: &Tensor, student_log: Var, t: f64) -> Result<Var> {
    check_rows(tape, student_log, teacher, "softened_kl")?;
    let n = teacher.rows() as f64;
    let target = soften_rows(teacher, t)?;
    let entropy_part: f64 = target
        .data()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.max(LOG_FLOOR).ln())
        .sum::<f64>()
        / n;
    let scaled = tape.scale(student_log, 1.0 / t);
    let student = tape.log_softmax_rows(scaled);
    let target = tape.constant(target);
    let cross = tape.mul(target, student)?;
    let cross = tape.sum(cross);
    let cross = tape.scale(cross, -1.0 / n);
    let constant = tape.constant(Tensor::scalar(entropy_part));
    tape.add(cross, constant)
}

/// Mean squared error over every entry.
pub fn mean_squared_error(tape: &mut Tape, student: Var, target: &Tensor) -> Result<Var> {
    check_rows(tape, student, target, "mean_squared_error")?;
    let target = tape.constant(target.clone());
    let diff = tape.sub(student, target)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean(sq))
}

/// Weighted sum of terms, skipping exact zero weights so that a term with
/// weight zero contributes neither value nor rounding.
fn weighted_sum(tape: &mut Tape, terms: Vec<(f64, Var)>) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (w, v) in terms {
        if w == 0.0 {
            continue;
        }
        let term = if w == 1.0 { v } else { tape.scale(v, w) };
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// Student-side handles for the KED objectives.
#[derive(Debug, Clone, Copy)]
pub struct StudentTerms<'a> {
    pub log_prediction: Var,
    pub log_explanations: &'a [Var],
    /// Student hidden taps after the linear adapters.
    pub adapted_hidden: &'a [Var],
}

/// Frozen teacher outputs for the same batch.
#[derive(Debug, Clone, Copy)]
pub struct TeacherTerms<'a> {
    pub prediction: &'a Tensor,
    pub explanations: &'a [Tensor],
    pub hidden: &'a [Tensor],
}

pub fn kd_loss(
    tape: &mut Tape,
    labels: &[usize],
    student_log_pred: Var,
    teacher_pred: &Tensor,
    cfg: &DistillConfig,
) -> Result<Var> {
    cfg.validate()?;
    let mut terms = vec![(
        1.0 - cfg.lambda,
        cross_entropy(tape, student_log_pred, labels)?,
    )];
    if cfg.lambda != 0.0 {
        let kl = softened_kl(tape, teacher_pred, student_log_pred, cfg.temperature)?;
        terms.push((cfg.temperature.powi(2) * cfg.lambda, kl));
    }
    weighted_sum(tape, terms)
}

pub fn ked_loss(
    tape: &mut Tape,
    labels: &[usize],
    student: StudentTerms<'_>,
    teacher: TeacherTerms<'_>,
    cfg: &DistillConfig,
) -> Result<Var> {
    let cfg = DistillConfig { rho: 0.0, ..*cfg };
    ked_hidden_loss(tape, labels, student, teacher, &cfg)
}

pub fn ked_hidden_loss(
    tape: &mut Tape,
    labels: &[usize],
    student: StudentTerms<'_>,
    teacher: TeacherTerms<'_>,
    cfg: &DistillConfig,
) -> Result<Var> {
    cfg.validate()?;
    let m = teacher.explanations.len();
    if m == 0 || student.log_explanations.len() != m {
        return Err(Error::shape(
            "ked_loss",
            format!(
                "student has {} explanation blocks, teacher {m}",
                student.log_explanations.len()
            ),
        ));
    }
    let (t2, tau2) = (cfg.temperature.powi(2), cfg.tau.powi(2));
    let pred_w = t2 * cfg.lambda * (1.0 - cfg.mu);
    let expl_w = tau2 * cfg.lambda * cfg.mu * (1.0 - cfg.rho) / m as f64;
    let hidden_w = cfg.lambda * cfg.mu * cfg.rho / m as f64;

    let mut terms = vec![(
        1.0 - cfg.lambda,
        cross_entropy(tape, student.log_prediction, labels)?,
    )];
    if pred_w != 0.0 {
        let kl = softened_kl(
            tape,
            teacher.prediction,
            student.log_prediction,
            cfg.temperature,
        )?;
        terms.push((pred_w, kl));
    }
    if expl_w != 0.0 {
        for (f, &g) in teacher.explanations.iter().zip(student.log_explanations) {
            terms.push((expl_w, softened_kl(tape, f, g, cfg.tau)?));
        }
    }
    if hidden_w != 0.0 {
        if teacher.hidden.len() != m || student.adapted_hidden.len() != m {
            return Err(Error::shape(
                "ked_hidden_loss",
                format!(
                    "{} teacher and {} student hidden blocks for M = {m}",
                    teacher.hidden.len(),
                    student.adapted_hidden.len()
                ),
            ));
        }
        for (f, &g) in teacher.hidden.iter().zip(student.adapted_hidden) {
            terms.push((hidden_w, mean_squared_error(tape, g, f)?));
        }
    }
    weighted_sum(tape, terms)
}
