use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A trainable array together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param { value, grad: None }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

impl Tape {
    /// Record `params` as leaves. Frozen parameters become constants.
    pub fn bind(&mut self, params: &[&Param], trainable: bool) -> Vec<Var> {
        params
            .iter()
            .map(|p| self.leaf(p.value.clone(), trainable))
            .collect()
    }

    /// Add the tape's leaf gradients for `vars` into the matching parameters.
    pub fn accumulate_grads(&self, vars: &[Var], params: &mut [&mut Param]) -> Result<()> {
        if vars.len() != params.len() {
            return Err(Error::invalid(format!(
                "{} bound variables for {} parameters",
                vars.len(),
                params.len()
            )));
        }
        for (&v, p) in vars.iter().zip(params.iter_mut()) {
            let Some(g) = self.grad(v) else { continue };
            if g.len() != p.value.len() {
                return Err(Error::shape(
                    "accumulate_grads",
                    format!(
                        "gradient of {} values for parameter of {}",
                        g.len(),
                        p.value.len()
                    ),
                ));
            }
            match &mut p.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(Tensor::new(p.value.shape().to_vec(), g.to_vec())?),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::Sgd { momentum }
    }
}

/// SGD with momentum or Adam, with per-parameter accumulators.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {learning_rate}")));
        }
        let in_unit = |x: f64| (0.0..1.0).contains(&x);
        let ok = match kind {
            OptimizerKind::Sgd { momentum } => in_unit(momentum),
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => in_unit(beta1) && in_unit(beta2) && epsilon > 0.0,
        };
        if !ok {
            return Err(Error::invalid(format!("optimizer parameters {kind:?}")));
        }
        Ok(Optimizer {
            kind,
            learning_rate,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update to `params` and clear their gradients.
    ///
    /// The parameter list must be passed in the same order on every call.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
            return Err(Error::invalid(format!("parameter {i} has no gradient")));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        if self.first.len() != params.len()
            || self
                .first
                .iter()
                .zip(params.iter())
                .any(|(a, p)| a.len() != p.len())
        {
            return Err(Error::shape(
                "optimizer_step",
                "parameters are not congruent with optimizer state",
            ));
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for (p, vel) in params.iter_mut().zip(&mut self.first) {
                    let grad = p.grad.take().expect("checked above");
                    for ((w, v), g) in p.value.data_mut().iter_mut().zip(vel).zip(grad.data()) {
                        *v = momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    let grad = p.grad.take().expect("checked above");
                    for (((w, mi), vi), &g) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                        .zip(grad.data())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}
