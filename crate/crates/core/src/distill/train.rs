use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    cross_entropy, kd_loss, ked_hidden_loss, ked_loss, DistillConfig, StudentTerms, TeacherTerms,
    TrainingSchedule,
};
use crate::autodiff::{Optimizer, OptimizerKind, Param, Tape, Tensor};
use crate::data::{ChimericSampler, Dataset};
use crate::error::{Error, Result};
use crate::models::{Dense, Model, TypeMModel};

/// Which loss a training run minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Hard-label cross-entropy only.
    CrossEntropy,
    Kd,
    Ked,
    KedHidden,
}

impl Objective {
    pub fn needs_teacher(self) -> bool {
        self != Objective::CrossEntropy
    }
}

/// One line of the per-epoch metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub run_id: String,
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOptions<'a> {
    pub objective: Objective,
    pub teacher: Option<&'a Model>,
    pub schedule: TrainingSchedule,
    pub config: DistillConfig,
    /// Share of the training rows held out for the per-epoch validation
    /// accuracy. Held-out rows are not trained on.
    pub validation_fraction: f64,
    pub run_id: String,
    /// Append one JSON line per epoch here when set.
    pub metrics_path: Option<PathBuf>,
}

impl<'a> TrainOptions<'a> {
    pub fn new(objective: Objective, schedule: TrainingSchedule) -> Self {
        TrainOptions {
            objective,
            teacher: None,
            schedule,
            config: DistillConfig::default(),
            validation_fraction: 0.1,
            run_id: "run".to_string(),
            metrics_path: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The model after the last epoch.
    pub model: Model,
    /// Hidden-tap adapters, trained alongside the model for `KedHidden`.
    pub adapters: Vec<Dense>,
    pub metrics: Vec<EpochMetrics>,
}

/// Frozen teacher outputs for one batch.
struct Batch {
    x: Tensor,
    labels: Vec<usize>,
    prediction: Option<Tensor>,
    explanations: Vec<Tensor>,
    hidden: Vec<Tensor>,
}

trait BatchSource {
    fn start_epoch(&mut self) -> usize;
    fn batch(&mut self, b: usize) -> Result<Batch>;
}

struct DatasetSource<'a> {
    data: &'a Dataset,
    teacher: Option<&'a Model>,
    prediction: Option<Tensor>,
    explanations: Vec<Tensor>,
    want_hidden: bool,
    order: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSource for DatasetSource<'_> {
    fn start_epoch(&mut self) -> usize {
        self.order.shuffle(&mut self.rng);
        self.order.len().div_ceil(self.batch_size)
    }

    fn batch(&mut self, b: usize) -> Result<Batch> {
        let end = ((b + 1) * self.batch_size).min(self.order.len());
        let idx = &self.order[b * self.batch_size..end];
        let x = self.data.features().select_rows(idx)?;
        let hidden = match (self.want_hidden, self.teacher) {
            (true, Some(t)) => t.predict(&x)?.hidden,
            _ => Vec::new(),
        };
        Ok(Batch {
            labels: idx.iter().map(|&i| self.data.labels()[i]).collect(),
            prediction: self
                .prediction
                .as_ref()
                .map(|p| p.select_rows(idx))
                .transpose()?,
            explanations: self
                .explanations
                .iter()
                .map(|e| e.select_rows(idx))
                .collect::<Result<_>>()?,
            hidden,
            x,
        })
    }
}

struct ChimericSource {
    sampler: ChimericSampler,
    samples: usize,
    batch_size: usize,
}

impl BatchSource for ChimericSource {
    fn start_epoch(&mut self) -> usize {
        self.samples.div_ceil(self.batch_size)
    }

    fn batch(&mut self, b: usize) -> Result<Batch> {
        let n = self.batch_size.min(self.samples - b * self.batch_size);
        let s = self.sampler.sample(n)?;
        Ok(Batch {
            x: s.features,
            labels: s.labels,
            prediction: Some(s.prediction),
            explanations: s.explanations,
            hidden: Vec::new(),
        })
    }
}

fn check_teacher(objective: Objective, student: &Model, teacher: Option<&Model>) -> Result<()> {
    match (objective.needs_teacher(), teacher) {
        (true, None) => return Err(Error::invalid(format!("{objective:?} needs a teacher"))),
        (false, Some(_)) => return Err(Error::invalid("cross-entropy training takes no teacher")),
        _ => {}
    }
    let Some(t) = teacher else { return Ok(()) };
    if t.input_dim() != student.input_dim() || t.num_classes() != student.num_classes() {
        return Err(Error::shape(
            "train",
            format!(
                "teacher maps {} -> {}, student {} -> {}",
                t.input_dim(),
                t.num_classes(),
                student.input_dim(),
                student.num_classes()
            ),
        ));
    }
    if matches!(objective, Objective::Ked | Objective::KedHidden) {
        if t.superfeature_count() != student.superfeature_count() {
            return Err(Error::invalid(format!(
                "teacher explains {} superfeatures, student {}",
                t.superfeature_count(),
                student.superfeature_count()
            )));
        }
        if let (Model::TypeM(a), Model::TypeM(b)) = (t, student) {
            if a.partition() != b.partition() {
                return Err(Error::invalid("teacher and student partitions differ"));
            }
        }
    }
    Ok(())
}

fn new_adapters(student: &Model, teacher: &Model, rng: &mut ChaCha8Rng) -> Result<Vec<Dense>> {
    student
        .hidden_tap_widths()
        .into_iter()
        .zip(teacher.hidden_tap_widths())
        .map(|(s, t)| {
            let limit = (3.0 / s as f64).sqrt();
            let w = (0..s * t).map(|_| rng.gen_range(-limit..limit)).collect();
            Ok(Dense {
                weight: Param::new(Tensor::matrix(s, t, w)?),
                bias: Param::new(Tensor::zeros(&[1, t])),
            })
        })
        .collect()
}

fn step(
    model: &mut Model,
    adapters: &mut [Dense],
    optimizer: &mut Optimizer,
    objective: Objective,
    cfg: &DistillConfig,
    batch: &Batch,
) -> Result<f64> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let adapter_params: Vec<&Param> = adapters.iter().flat_map(|a| [&a.weight, &a.bias]).collect();
    let adapter_vars = tape.bind(&adapter_params, true);
    let x = tape.constant(batch.x.clone());
    let out = model.forward(&mut tape, &params, x)?;

    let teacher_pred = || {
        batch
            .prediction
            .as_ref()
            .ok_or_else(|| Error::invalid("batch carries no teacher prediction"))
    };
    let loss = match objective {
        Objective::CrossEntropy => cross_entropy(&mut tape, out.log_prediction, &batch.labels)?,
        Objective::Kd => kd_loss(
            &mut tape,
            &batch.labels,
            out.log_prediction,
            teacher_pred()?,
            cfg,
        )?,
        Objective::Ked | Objective::KedHidden => {
            let mut adapted = Vec::new();
            if !adapters.is_empty() {
                for (h, p) in out.hidden.iter().zip(adapter_vars.chunks(2)) {
                    let z = tape.matmul(*h, p[0])?;
                    adapted.push(tape.add(z, p[1])?);
                }
            }
            let student = StudentTerms {
                log_prediction: out.log_prediction,
                log_explanations: &out.log_explanations,
                adapted_hidden: &adapted,
            };
            let teacher = TeacherTerms {
                prediction: teacher_pred()?,
                explanations: &batch.explanations,
                hidden: &batch.hidden,
            };
            if objective == Objective::Ked {
                ked_loss(&mut tape, &batch.labels, student, teacher, cfg)?
            } else {
                ked_hidden_loss(&mut tape, &batch.labels, student, teacher, cfg)?
            }
        }
    };
    let value = tape.scalar(loss)?;
    if !value.is_finite() {
        return Err(Error::invalid(format!("training loss became {value}")));
    }
    tape.backward(loss)?;
    let mut all: Vec<&mut Param> = model.params_mut();
    all.extend(
        adapters
            .iter_mut()
            .flat_map(|a| [&mut a.weight, &mut a.bias]),
    );
    let vars: Vec<_> = params.into_iter().chain(adapter_vars).collect();
    tape.accumulate_grads(&vars, &mut all)?;
    optimizer.step(&mut all)?;
    Ok(value)
}

fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    let pred = model.classify(data.features())?;
    let hits = pred
        .iter()
        .zip(data.labels())
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

fn append_metrics(path: &PathBuf, m: &EpochMetrics) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(m).expect("metrics serialize");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    mut model: Model,
    mut adapters: Vec<Dense>,
    source: &mut dyn BatchSource,
    objective: Objective,
    cfg: &DistillConfig,
    epochs: usize,
    optimizer: (OptimizerKind, f64),
    validation: Option<&Dataset>,
    run_id: &str,
    metrics_path: Option<&PathBuf>,
) -> Result<TrainOutcome> {
    let mut opt = Optimizer::new(optimizer.0, optimizer.1)?;
    let start = Instant::now();
    let mut metrics = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let batches = source.start_epoch();
        let (mut total, mut count) = (0.0, 0usize);
        for b in 0..batches {
            let batch = source.batch(b)?;
            let n = batch.labels.len();
            total += n as f64 * step(&mut model, &mut adapters, &mut opt, objective, cfg, &batch)?;
            count += n;
        }
        let m = EpochMetrics {
            run_id: run_id.to_string(),
            epoch,
            loss: total / count as f64,
            val_accuracy: validation.map(|v| accuracy(&model, v)).transpose()?,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{run_id} epoch {epoch}/{epochs}: loss {:.5}, val acc {}, {:.1}s",
            m.loss,
            m.val_accuracy.map_or("-".into(), |a| format!("{:.4}", a)),
            m.wall_seconds
        );
        if let Some(p) = metrics_path {
            append_metrics(p, &m)?;
        }
        metrics.push(m);
    }
    Ok(TrainOutcome {
        model,
        adapters,
        metrics,
    })
}

/// Mini-batch training of `model` on `data`, returning the last-epoch model.
///
/// One RNG seeded from the schedule drives, in order, the validation split,
/// the adapter initialization and the per-epoch shuffles.
pub fn train(model: Model, data: &Dataset, opts: &TrainOptions<'_>) -> Result<TrainOutcome> {
    opts.config.validate()?;
    if data.input_dim() != model.input_dim() || data.num_classes() != model.num_classes() {
        return Err(Error::shape(
            "train",
            format!(
                "data has {} features and {} classes, model expects {} and {}",
                data.input_dim(),
                data.num_classes(),
                model.input_dim(),
                model.num_classes()
            ),
        ));
    }
    check_teacher(opts.objective, &model, opts.teacher)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.schedule.seed);
    let (train_set, val_set) = if opts.validation_fraction > 0.0 {
        let (t, v) = data.split(opts.validation_fraction, rng.gen())?;
        (t, (!v.is_empty()).then_some(v))
    } else {
        (data.clone(), None)
    };
    opts.schedule.validate(train_set.len())?;

    // With a zero hidden weight the adapters would never receive a gradient.
    let cfg = &opts.config;
    let hidden_active =
        opts.objective == Objective::KedHidden && cfg.lambda * cfg.mu * cfg.rho != 0.0;
    let adapters = match opts.teacher {
        Some(t) if hidden_active => new_adapters(&model, t, &mut rng)?,
        _ => Vec::new(),
    };
    let (prediction, explanations) = match opts.teacher {
        Some(t) => {
            let out = t.predict_outputs(train_set.features(), false)?;
            (Some(out.prediction), out.explanations)
        }
        None => (None, Vec::new()),
    };
    let mut source = DatasetSource {
        data: &train_set,
        teacher: opts.teacher,
        prediction,
        explanations,
        want_hidden: hidden_active,
        order: (0..train_set.len()).collect(),
        batch_size: opts.schedule.batch_size,
        rng,
    };
    run_epochs(
        model,
        adapters,
        &mut source,
        opts.objective,
        &opts.config,
        opts.schedule.epochs,
        (opts.schedule.optimizer, opts.schedule.learning_rate),
        val_set.as_ref(),
        &opts.run_id,
        opts.metrics_path.as_ref(),
    )
}

/// Settings for continued training on chimeric composites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChimericOptions {
    /// Fresh composites drawn per epoch.
    pub samples_per_epoch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ChimericOptions {
    fn default() -> Self {
        ChimericOptions {
            samples_per_epoch: 1_000_000,
            epochs: 5,
            batch_size: 100,
            learning_rate: 0.001,
            seed: 0,
        }
    }
}

/// Continue training `student` on composites of `base` rows labelled by the
/// teacher's argmax. A type-M student with the teacher's partition gets the
/// KED loss; any other student gets the KD loss.
pub fn finetune_chimeric(
    student: Model,
    teacher: &TypeMModel,
    base: &Dataset,
    opts: &ChimericOptions,
    cfg: &DistillConfig,
    validation: Option<&Dataset>,
    run_id: &str,
    metrics_path: Option<&PathBuf>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if opts.samples_per_epoch == 0 || opts.epochs == 0 || opts.batch_size == 0 {
        return Err(Error::invalid(format!("chimeric options {opts:?}")));
    }
    let objective = match &student {
        Model::TypeM(s) if s.partition() == teacher.partition() => Objective::Ked,
        _ => Objective::Kd,
    };
    check_teacher(objective, &student, Some(&Model::TypeM(teacher.clone())))?;
    let mut source = ChimericSource {
        sampler: ChimericSampler::new(base.features(), teacher, opts.seed)?,
        samples: opts.samples_per_epoch,
        batch_size: opts.batch_size,
    };
    run_epochs(
        student,
        Vec::new(),
        &mut source,
        objective,
        cfg,
        opts.epochs,
        (OptimizerKind::adam(), opts.learning_rate),
        validation,
        run_id,
        metrics_path,
    )
}
