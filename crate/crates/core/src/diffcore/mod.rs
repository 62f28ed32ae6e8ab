//! Reverse-mode differentiation core, optimizers and gradient checking.

mod gradcheck;
mod optim;
mod params;
mod tape;

pub use gradcheck::{finite_difference_check, finite_difference_check_where, GradCheckReport, ERROR_FLOOR};
pub use optim::{adam_step, gd_step, Algorithm, OptimizerState};
pub use params::{BoundParams, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Evaluates a scalar loss without recording gradients.
pub fn evaluate<F>(params: &ParamSet, build: F) -> Result<f64>
where
    F: FnOnce(&Tape, &BoundParams) -> Result<Var>,
{
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let out = build(&tape, &bound)?;
    let value = scalar_output(&tape, out)?;
    Ok(value)
}

/// Evaluates a scalar loss and its gradient with respect to every parameter.
///
/// Parameters the loss does not depend on receive a zero gradient.
pub fn evaluate_with_gradients<F>(params: &ParamSet, build: F) -> Result<(f64, ParamSet)>
where
    F: FnOnce(&Tape, &BoundParams) -> Result<Var>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = build(&tape, &bound)?;
    let value = scalar_output(&tape, out)?;
    let mut grads = tape.backward(out)?;
    let mut result = params.zeros_like();
    let slots: Vec<(usize, usize)> = grads.param_nodes().to_vec();
    for (slot, node) in slots {
        if let Some(g) = grads.take(node) {
            result.get_mut(ParamId(slot)).add_assign(&g);
        }
    }
    if let Some(name) = result.first_non_finite() {
        return Err(Error::NonFiniteGradient {
            param: name.to_string(),
        });
    }
    Ok((value, result))
}

fn scalar_output(tape: &Tape, out: Var) -> Result<f64> {
    let shape = tape.value(out).shape();
    if shape != (1, 1) {
        return Err(Error::Shape {
            op: "loss output",
            lhs: (1, 1),
            rhs: shape,
        });
    }
    let value = tape.item(out);
    if !value.is_finite() {
        let primitive = tape.first_non_finite().unwrap_or("loss");
        return Err(Error::NonFinite { primitive });
    }
    Ok(value)
}

/// Glorot-uniform weights: `U(±sqrt(6 / (fan_in + fan_out)))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data)
}
