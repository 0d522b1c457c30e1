//! Training objectives: the pose-sequence MSE and its mirror-constrained
//! counterpart.
//!
//! Both losses are minimized. Predictions and targets are `M x N x 6`
//! tensors (M clips, N pairs per clip); the first three components are
//! translation, the last three Euler angles.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Orientation weight of the single-direction loss.
    pub beta: f64,
    /// Orientation weight of the forward branch in the mirror loss.
    pub beta1: f64,
    /// Orientation weight of the reversed branch in the mirror loss.
    pub beta2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.9,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_batch<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<(usize, usize)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "loss: prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    let &[m, n, 6] = pred.shape() else {
        return Err(Error::shape(format!(
            "loss: expected an M x N x 6 tensor, got {:?}",
            pred.shape()
        )));
    };
    for (i, (p, t)) in pred.data().iter().zip(target.data()).enumerate() {
        let d = (p.as_f64() - t.as_f64()).abs();
        if i % 6 >= 3 && (d.is_nan() || d >= FRAC_PI_2) {
            return Err(Error::InvalidArgument(format!(
                "orientation residual {d} at entry {i} is not below pi/2; raw Euler differences are only meaningful for small rotations"
            )));
        }
    }
    Ok((m, n))
}

fn weights<S: Scalar>(beta: f64) -> [S; 6] {
    let (one, b) = (S::one(), S::from_f64(beta));
    [one, one, one, b, b, b]
}

/// `1/(M N) * sum ||P - P^||^2 + beta * ||Phi - Phi^||^2`.
pub fn pair_loss<S: Scalar>(tape: &mut Tape<'_, S>, pred: Var, target: &Tensor<S>, beta: f64) -> Result<Var> {
    let (m, n) = check_batch(tape.value(pred), target)?;
    let scale = S::from_f64(1.0 / (m * n) as f64);
    tape.weighted_squared_error(pred, target, &weights::<S>(beta), scale)
}

/// Forward and reversed branches summed under one `1/(M N)` normalizer,
/// with orientation weights `beta1` (forward) and `beta2` (reversed).
pub fn mirror_loss<S: Scalar>(
    tape: &mut Tape<'_, S>,
    pred_fwd: Var,
    target_fwd: &Tensor<S>,
    pred_bwd: Var,
    target_bwd: &Tensor<S>,
    beta1: f64,
    beta2: f64,
) -> Result<Var> {
    let (m, n) = check_batch(tape.value(pred_fwd), target_fwd)?;
    let (mb, nb) = check_batch(tape.value(pred_bwd), target_bwd)?;
    if (m, n) != (mb, nb) {
        return Err(Error::shape(format!(
            "mirror_loss: forward batch {m}x{n} and reversed batch {mb}x{nb} differ"
        )));
    }
    let scale = S::from_f64(1.0 / (m * n) as f64);
    let fwd = tape.weighted_squared_error(pred_fwd, target_fwd, &weights::<S>(beta1), scale)?;
    let bwd = tape.weighted_squared_error(pred_bwd, target_bwd, &weights::<S>(beta2), scale)?;
    tape.add(fwd, bwd)
}
