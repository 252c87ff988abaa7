//! Black-box MLPs and type-M superfeature-explaining models.
//!
//! A type-M model splits the input columns into `M` disjoint groups and runs
//! one small MLP per group. Each subnet ends in its own softmax and reads as
//! `p(y | x_m)`. Assuming the groups are conditionally independent given the
//! class, the joint posterior is
//!
//! ```text
//! p(y | x) ∝ p(y)^(1-M) · Π_m p(y | x_m)
//! ```
//!
//! which is computed in log space as a total logit
//! `z = Σ_m log p(y | x_m) − (M−1) log p(y)` followed by a softmax.

mod budget;
mod mlp;
mod persist;
mod shapley;

pub use budget::{dense_param_count, solve_width, type_m_param_count};
pub use mlp::{Dense, Mlp, MlpOutput, MlpSpec};
pub use persist::{decode_model, encode_model, load_model, save_model, Architecture};
pub use shapley::{shapley_values_bruteforce, value_function, MAX_SHAPLEY_PLAYERS};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, Tape, Tensor, Var, LOG_FLOOR};
use crate::community::Partition;
use crate::error::{Error, Result};

/// Rows per chunk when evaluating a frozen model on a large batch.
const PREDICT_CHUNK: usize = 2048;

/// `M` disjoint, nonempty groups of input columns that together cover `0..d`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PartitionRepr", into = "PartitionRepr")]
pub struct SuperfeaturePartition {
    input_dim: usize,
    groups: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct PartitionRepr {
    input_dim: usize,
    groups: Vec<Vec<usize>>,
}

impl TryFrom<PartitionRepr> for SuperfeaturePartition {
    type Error = Error;

    fn try_from(r: PartitionRepr) -> Result<Self> {
        SuperfeaturePartition::new(r.input_dim, r.groups)
    }
}

impl From<SuperfeaturePartition> for PartitionRepr {
    fn from(p: SuperfeaturePartition) -> Self {
        PartitionRepr {
            input_dim: p.input_dim,
            groups: p.groups,
        }
    }
}

impl SuperfeaturePartition {
    /// Validates the cover. Indices inside each group are sorted; group order
    /// is kept as given since it fixes which subnet reads which group.
    pub fn new(input_dim: usize, mut groups: Vec<Vec<usize>>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("partition over zero features"));
        }
        if groups.is_empty() || groups.len() > input_dim {
            return Err(Error::invalid(format!(
                "{} groups for {input_dim} features",
                groups.len()
            )));
        }
        let mut seen = vec![false; input_dim];
        for (g, group) in groups.iter_mut().enumerate() {
            if group.is_empty() {
                return Err(Error::invalid(format!("group {g} is empty")));
            }
            group.sort_unstable();
            for &i in group.iter() {
                if i >= input_dim {
                    return Err(Error::invalid(format!(
                        "feature {i} in group {g} is out of range for d = {input_dim}"
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid(format!("feature {i} appears twice")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("feature {i} is not covered")));
        }
        Ok(SuperfeaturePartition { input_dim, groups })
    }

    /// Single group holding every feature.
    pub fn trivial(input_dim: usize) -> Result<Self> {
        SuperfeaturePartition::new(input_dim, vec![(0..input_dim).collect()])
    }

    /// Consecutive column ranges of the given sizes.
    pub fn contiguous(sizes: &[usize]) -> Result<Self> {
        let mut start = 0;
        let groups = sizes
            .iter()
            .map(|&s| {
                let g = (start..start + s).collect();
                start += s;
                g
            })
            .collect();
        SuperfeaturePartition::new(start, groups)
    }

    /// Groups from a per-feature label vector, ordered by first appearance.
    pub fn from_assignment(labels: &[usize]) -> Result<Self> {
        let p = Partition::from_labels(labels);
        SuperfeaturePartition::new(labels.len(), p.groups())
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// Group index of every feature.
    pub fn assignment(&self) -> Vec<usize> {
        let mut out = vec![0; self.input_dim];
        for (g, group) in self.groups.iter().enumerate() {
            for &i in group {
                out[i] = g;
            }
        }
        out
    }

    fn is_identity_group(&self, g: usize) -> bool {
        self.groups[g].len() == self.input_dim
    }
}

/// Architecture of a type-M model before weights are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeMSpec {
    pub partition: SuperfeaturePartition,
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
}

impl TypeMSpec {
    pub fn subnet_specs(&self) -> Vec<MlpSpec> {
        self.partition
            .groups()
            .iter()
            .map(|g| MlpSpec {
                input_dim: g.len(),
                hidden_widths: self.hidden_widths.clone(),
                num_classes: self.num_classes,
            })
            .collect()
    }

    /// Exact weight and bias count, summed over subnets.
    pub fn param_count(&self) -> u64 {
        self.subnet_specs().iter().map(MlpSpec::param_count).sum()
    }
}

/// Uniform distribution over `classes` outcomes.
pub fn uniform_prior(classes: usize) -> Vec<f64> {
    vec![1.0 / classes as f64; classes]
}

fn validate_prior(prior: &[f64], classes: usize) -> Result<()> {
    if prior.len() != classes {
        return Err(Error::invalid(format!(
            "prior has {} entries for {classes} classes",
            prior.len()
        )));
    }
    if prior.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
        return Err(Error::invalid("prior entries must be positive"));
    }
    let total: f64 = prior.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("prior sums to {total}")));
    }
    Ok(())
}

/// Superfeature-explaining model: one subnet per partition group plus a prior.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeMModel {
    partition: SuperfeaturePartition,
    subnets: Vec<Mlp>,
    prior: Vec<f64>,
}

impl TypeMModel {
    pub fn new<R: Rng + ?Sized>(spec: &TypeMSpec, prior: Vec<f64>, rng: &mut R) -> Result<Self> {
        let subnets = spec
            .subnet_specs()
            .into_iter()
            .map(|s| Mlp::new(s, rng))
            .collect::<Result<Vec<_>>>()?;
        TypeMModel::from_subnets(spec.partition.clone(), subnets, prior)
    }

    pub fn from_subnets(
        partition: SuperfeaturePartition,
        subnets: Vec<Mlp>,
        prior: Vec<f64>,
    ) -> Result<Self> {
        if subnets.len() != partition.len() {
            return Err(Error::invalid(format!(
                "{} subnets for {} groups",
                subnets.len(),
                partition.len()
            )));
        }
        let classes = subnets[0].spec().num_classes;
        for (m, (net, group)) in subnets.iter().zip(partition.groups()).enumerate() {
            if net.spec().input_dim != group.len() {
                return Err(Error::shape(
                    "type_m",
                    format!(
                        "subnet {m} reads {} inputs but its group has {}",
                        net.spec().input_dim,
                        group.len()
                    ),
                ));
            }
            if net.spec().num_classes != classes {
                return Err(Error::shape("type_m", "subnets disagree on class count"));
            }
        }
        validate_prior(&prior, classes)?;
        Ok(TypeMModel {
            partition,
            subnets,
            prior,
        })
    }

    pub fn partition(&self) -> &SuperfeaturePartition {
        &self.partition
    }

    pub fn subnets(&self) -> &[Mlp] {
        &self.subnets
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn set_prior(&mut self, prior: Vec<f64>) -> Result<()> {
        validate_prior(&prior, self.num_classes())?;
        self.prior = prior;
        Ok(())
    }

    /// `−(M−1) log p(y)` per class, the part of the total logit that does not
    /// depend on the input.
    pub fn prior_term(&self) -> Vec<f64> {
        let factor = (self.partition.len() - 1) as f64;
        self.prior
            .iter()
            .map(|p| -factor * p.max(LOG_FLOOR).ln())
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.subnets[0].spec().num_classes
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.subnets[0].spec().hidden_widths
    }

    pub fn param_count(&self) -> u64 {
        self.subnets.iter().map(|s| s.spec().param_count()).sum()
    }
}

/// Either a plain MLP or a type-M model.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    BlackBox(Mlp),
    TypeM(TypeMModel),
}

/// Tape handles produced by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub prediction: Var,
    /// `log p(y | x)` per row.
    pub log_prediction: Var,
    pub total_logit: Var,
    /// `p(y | x_m)` per group. A black box has the prediction as its only entry.
    pub explanations: Vec<Var>,
    /// `log p(y | x_m)` per group, from a log-softmax of the subnet logits.
    pub log_explanations: Vec<Var>,
    /// Last hidden layer of each subnet (post-activation).
    pub hidden: Vec<Var>,
}

/// Concrete outputs of a frozen forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub prediction: Tensor,
    pub total_logit: Tensor,
    pub explanations: Vec<Tensor>,
    pub log_explanations: Vec<Tensor>,
    pub hidden: Vec<Tensor>,
}

impl Model {
    pub fn input_dim(&self) -> usize {
        match self {
            Model::BlackBox(m) => m.spec().input_dim,
            Model::TypeM(t) => t.partition.input_dim(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Model::BlackBox(m) => m.spec().num_classes,
            Model::TypeM(t) => t.num_classes(),
        }
    }

    /// Number of explanation blocks (1 for a black box).
    pub fn superfeature_count(&self) -> usize {
        match self {
            Model::BlackBox(_) => 1,
            Model::TypeM(t) => t.partition.len(),
        }
    }

    pub fn hidden_widths(&self) -> &[usize] {
        match self {
            Model::BlackBox(m) => &m.spec().hidden_widths,
            Model::TypeM(t) => t.hidden_widths(),
        }
    }

    /// Width of each hidden tap.
    pub fn hidden_tap_widths(&self) -> Vec<usize> {
        let w = *self
            .hidden_widths()
            .last()
            .expect("hidden widths are nonempty");
        vec![w; self.superfeature_count()]
    }

    pub fn param_count(&self) -> u64 {
        match self {
            Model::BlackBox(m) => m.spec().param_count(),
            Model::TypeM(t) => t.param_count(),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Model::BlackBox(m) => m.params(),
            Model::TypeM(t) => t.subnets.iter().flat_map(Mlp::params).collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Model::BlackBox(m) => m.params_mut(),
            Model::TypeM(t) => t.subnets.iter_mut().flat_map(Mlp::params_mut).collect(),
        }
    }

    /// Record every parameter on `tape`, as variables when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        tape.bind(&self.params(), trainable)
    }

    /// Forward pass on `tape` using parameter handles from [`Model::bind`].
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<ForwardVars> {
        let cols = tape.value(x).cols();
        if !tape.value(x).is_matrix() || cols != self.input_dim() {
            return Err(Error::shape(
                "model_forward",
                format!(
                    "input has shape {:?}, model expects {} columns",
                    tape.value(x).shape(),
                    self.input_dim()
                ),
            ));
        }
        match self {
            Model::BlackBox(net) => {
                let out = net.forward(tape, params, x)?;
                let prediction = tape.softmax_rows(out.logits);
                let log_pred = tape.log_softmax_rows(out.logits);
                Ok(ForwardVars {
                    prediction,
                    log_prediction: log_pred,
                    total_logit: out.logits,
                    explanations: vec![prediction],
                    log_explanations: vec![log_pred],
                    hidden: vec![out.last_hidden],
                })
            }
            Model::TypeM(t) => {
                let m = t.partition.len();
                let mut explanations = Vec::with_capacity(m);
                let mut log_explanations = Vec::with_capacity(m);
                let mut hidden = Vec::with_capacity(m);
                let mut offset = 0;
                for (g, net) in t.subnets.iter().enumerate() {
                    let n = net.param_len();
                    let xm = if t.partition.is_identity_group(g) {
                        x
                    } else {
                        tape.select_columns(x, &t.partition.groups()[g])?
                    };
                    let out = net.forward(tape, &params[offset..offset + n], xm)?;
                    offset += n;
                    explanations.push(tape.softmax_rows(out.logits));
                    log_explanations.push(tape.log_softmax_rows(out.logits));
                    hidden.push(out.last_hidden);
                }
                if m == 1 {
                    // One factor and a zero prior exponent: the prediction is
                    // the single explanation itself.
                    return Ok(ForwardVars {
                        prediction: explanations[0],
                        log_prediction: log_explanations[0],
                        total_logit: log_explanations[0],
                        explanations,
                        log_explanations,
                        hidden,
                    });
                }
                let mut total = log_explanations[0];
                for &l in &log_explanations[1..] {
                    total = tape.add(total, l)?;
                }
                let prior_term = t.prior_term();
                let prior_term = tape.constant(Tensor::matrix(1, prior_term.len(), prior_term)?);
                let total_logit = tape.add(total, prior_term)?;
                let prediction = tape.softmax_rows(total_logit);
                let log_prediction = tape.log_softmax_rows(total_logit);
                Ok(ForwardVars {
                    prediction,
                    log_prediction,
                    total_logit,
                    explanations,
                    log_explanations,
                    hidden,
                })
            }
        }
    }

    /// `log p(y | x)` per row, for a tape on which parameters are constants.
    pub fn log_prediction(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        Ok(self.forward(tape, params, x)?.log_prediction)
    }

    /// Frozen forward pass over `x`, evaluated in row chunks.
    pub fn predict(&self, x: &Tensor) -> Result<ForwardOutput> {
        self.predict_outputs(x, true)
    }

    /// As [`Model::predict`]; hidden activations are only collected when
    /// `with_hidden` is set, otherwise `hidden` is empty.
    pub fn predict_outputs(&self, x: &Tensor, with_hidden: bool) -> Result<ForwardOutput> {
        if !x.is_matrix() || x.cols() != self.input_dim() {
            return Err(Error::shape(
                "predict",
                format!(
                    "input has shape {:?}, model expects {} columns",
                    x.shape(),
                    self.input_dim()
                ),
            ));
        }
        let rows = x.rows();
        let m = self.superfeature_count();
        let taps = self.hidden_tap_widths();
        let c = self.num_classes();
        let mut prediction = Vec::with_capacity(rows * c);
        let mut total = Vec::with_capacity(rows * c);
        let mut expl: Vec<Vec<f64>> = vec![Vec::with_capacity(rows * c); m];
        let mut log_expl = expl.clone();
        let mut hidden: Vec<Vec<f64>> = taps
            .iter()
            .map(|w| Vec::with_capacity(if with_hidden { rows * w } else { 0 }))
            .collect();
        let mut start = 0;
        while start < rows {
            let end = (start + PREDICT_CHUNK).min(rows);
            let idx: Vec<usize> = (start..end).collect();
            let chunk = x.select_rows(&idx)?;
            let mut tape = Tape::new();
            let params = self.bind(&mut tape, false);
            let input = tape.constant(chunk);
            let out = self.forward(&mut tape, &params, input)?;
            prediction.extend_from_slice(tape.value(out.prediction).data());
            total.extend_from_slice(tape.value(out.total_logit).data());
            for g in 0..m {
                expl[g].extend_from_slice(tape.value(out.explanations[g]).data());
                log_expl[g].extend_from_slice(tape.value(out.log_explanations[g]).data());
                if with_hidden {
                    hidden[g].extend_from_slice(tape.value(out.hidden[g]).data());
                }
            }
            start = end;
        }
        Ok(ForwardOutput {
            prediction: Tensor::matrix(rows, c, prediction)?,
            total_logit: Tensor::matrix(rows, c, total)?,
            explanations: expl
                .into_iter()
                .map(|e| Tensor::matrix(rows, c, e))
                .collect::<Result<_>>()?,
            log_explanations: log_expl
                .into_iter()
                .map(|e| Tensor::matrix(rows, c, e))
                .collect::<Result<_>>()?,
            hidden: if with_hidden {
                hidden
                    .into_iter()
                    .zip(&taps)
                    .map(|(h, &w)| Tensor::matrix(rows, w, h))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            },
        })
    }

    /// Predicted class per row.
    pub fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.predict(x)?.prediction.argmax_rows())
    }
}

/// Literal normalized product `Π_m p_m / p0^(M−1)`, the reference the
/// log-space combination is checked against.
pub fn bayes_combine(explanations: &[&[f64]], prior: &[f64]) -> Result<Vec<f64>> {
    let Some(first) = explanations.first() else {
        return Err(Error::invalid("no explanations to combine"));
    };
    let c = first.len();
    if explanations.iter().any(|e| e.len() != c) || prior.len() != c {
        return Err(Error::shape("bayes_combine", "class counts differ"));
    }
    let exponent = explanations.len() as i32 - 1;
    let mut out: Vec<f64> = (0..c)
        .map(|y| explanations.iter().map(|e| e[y]).product::<f64>() / prior[y].powi(exponent))
        .collect();
    let total: f64 = out.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::invalid("explanations have no common support"));
    }
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Mean of the teacher's prediction rows, floored at 1e-15 and renormalized.
pub fn estimate_prior(teacher: &Model, x: &Tensor) -> Result<Vec<f64>> {
    if !x.is_matrix() || x.rows() == 0 {
        return Err(Error::invalid("cannot estimate a prior from no samples"));
    }
    let pred = teacher.predict(x)?.prediction;
    let mut prior = vec![0.0; pred.cols()];
    for i in 0..pred.rows() {
        prior.iter_mut().zip(pred.row(i)).for_each(|(a, b)| *a += b);
    }
    let n = pred.rows() as f64;
    prior.iter_mut().for_each(|p| *p = (*p / n).max(LOG_FLOOR));
    let total: f64 = prior.iter().sum();
    prior.iter_mut().for_each(|p| *p /= total);
    Ok(prior)
}
