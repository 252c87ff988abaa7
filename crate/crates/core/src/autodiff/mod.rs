//! Dense tensors, a reverse-mode tape and first-order optimizers.
//!
//! Everything runs in `f64`. A [`Tape`] records operations as they are
//! evaluated; [`Tape::backward`] then pushes gradients from a scalar loss
//! back to the leaves that were created with `requires_grad`.
//!
//! Model parameters live outside the tape as [`Param`]s. A training step
//! binds them onto a fresh tape, runs the forward pass and the loss, calls
//! `backward`, copies the leaf gradients back with
//! [`Tape::accumulate_grads`] and hands the parameters to an [`Optimizer`].

mod optim;
mod tape;
mod tensor;

pub use optim::{Optimizer, OptimizerKind, Param};
pub use tape::{softmax_rows, Tape, Var, LOG_FLOOR};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Which output column(s) an input gradient is taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputSelection {
    /// A single class column.
    Class(usize),
    /// The sum over all class columns.
    AllClasses,
}

/// Gradient of one output column of `forward` with respect to the input row.
///
/// `forward` maps an `n x d` input to `n x C` log-outputs. Any parameters it
/// touches must be recorded as constants so nothing but the input collects
/// gradient.
pub fn input_gradient<F>(forward: F, x: &[f64], class: usize) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let x = Tensor::matrix(1, x.len(), x.to_vec())?;
    let g = input_gradients(forward, &x, OutputSelection::Class(class))?;
    Ok(g.into_data())
}

/// Row-wise input gradients for a batch.
///
/// Rows do not interact in a per-sample model, so the gradient of the summed
/// selected outputs with respect to the batch holds each row's own gradient.
pub fn input_gradients<F>(forward: F, x: &Tensor, select: OutputSelection) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !x.is_matrix() {
        return Err(Error::shape("input_gradients", format!("{:?}", x.shape())));
    }
    let mut tape = Tape::new();
    let input = tape.variable(x.clone());
    let out = forward(&mut tape, input)?;
    let (rows, classes) = (tape.value(out).rows(), tape.value(out).cols());
    if rows != x.rows() {
        return Err(Error::shape(
            "input_gradients",
            format!("model returned {rows} rows for {} inputs", x.rows()),
        ));
    }
    let picked = match select {
        OutputSelection::AllClasses => out,
        OutputSelection::Class(c) => {
            if c >= classes {
                return Err(Error::invalid(format!(
                    "output index {c} out of range for {classes} outputs"
                )));
            }
            tape.select_columns(out, &[c])?
        }
    };
    let total = tape.sum(picked);
    tape.backward(total)?;
    Ok(tape
        .grad_tensor(input)
        .unwrap_or_else(|| Tensor::zeros(x.shape())))
}

#[cfg(test)]
mod tests;
