use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Fully connected ReLU network shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, num_classes: usize) -> Result<Self> {
        let spec = MlpSpec {
            input_dim,
            hidden_widths,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_widths.is_empty() {
            return Err(Error::invalid("an MLP needs at least one hidden layer"));
        }
        if self.input_dim == 0 || self.num_classes == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::invalid(format!("zero extent in {self:?}")));
        }
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_widths.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_widths);
        w.push(self.num_classes);
        w
    }

    pub fn param_count(&self) -> u64 {
        super::dense_param_count(&self.widths())
    }
}

/// Affine layer `x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpOutput {
    pub logits: Var,
    pub last_hidden: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Dense>,
}

impl Mlp {
    /// He-uniform weights for the ReLU layers, LeCun-uniform for the output
    /// layer, zero biases.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let gain = if l == last { 3.0 } else { 6.0 };
                let limit = (gain / w[0] as f64).sqrt();
                let weight: Vec<f64> = (0..w[0] * w[1])
                    .map(|_| rng.gen_range(-limit..limit))
                    .collect();
                Ok(Dense {
                    weight: Param::new(Tensor::matrix(w[0], w[1], weight)?),
                    bias: Param::new(Tensor::zeros(&[1, w[1]])),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Mlp { spec, layers })
    }

    /// Rebuild from flat arrays ordered weight, bias per layer.
    pub fn from_arrays(spec: MlpSpec, arrays: Vec<Vec<f64>>) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        if arrays.len() != 2 * (widths.len() - 1) {
            return Err(Error::shape(
                "mlp_from_arrays",
                format!("{} arrays for {} layers", arrays.len(), widths.len() - 1),
            ));
        }
        let mut it = arrays.into_iter();
        let layers = widths
            .windows(2)
            .map(|w| {
                let weight = Tensor::matrix(w[0], w[1], it.next().expect("counted"))?;
                let bias = Tensor::matrix(1, w[1], it.next().expect("counted"))?;
                Ok(Dense {
                    weight: Param::new(weight),
                    bias: Param::new(bias),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Mlp { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Number of parameter arrays (two per layer).
    pub fn param_len(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Logits and last hidden activation; `params` come from binding
    /// [`Mlp::params`] in order.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<MlpOutput> {
        if params.len() != self.param_len() {
            return Err(Error::shape(
                "mlp_forward",
                format!(
                    "{} handles for {} parameters",
                    params.len(),
                    self.param_len()
                ),
            ));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        let mut last_hidden = x;
        for (l, p) in params.chunks(2).enumerate() {
            let z = tape.matmul(h, p[0])?;
            let z = tape.add(z, p[1])?;
            if l == last {
                return Ok(MlpOutput {
                    logits: z,
                    last_hidden,
                });
            }
            h = tape.relu(z);
            last_hidden = h;
        }
        unreachable!("an MLP has at least one layer")
    }
}
