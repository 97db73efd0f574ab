//! Training objectives: imbalance-weighted binary cross-entropy, the
//! global-local similarity loss, and their weighted combination.
//!
//! Both cross-entropy losses normalize by the sample count only (no 1/N
//! over attributes) and clamp probabilities at 1e-7 before the logarithms.

use std::rc::Rc;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::graph::{Tape, TensorId};

/// Probability clamp applied before logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

/// Imbalance weights `w_j = exp(-r_j)` from training-split prevalence.
pub fn attribute_weights(prevalence: &[f64]) -> Result<Array1<f64>> {
    for (j, r) in prevalence.iter().enumerate() {
        if !(0.0..=1.0).contains(r) {
            return Err(Error::Contract(format!(
                "prevalence {r} of attribute {j} outside [0,1]"
            )));
        }
    }
    Ok(prevalence.iter().map(|r| (-r).exp()).collect())
}

fn check_shapes(tape: &Tape, p: TensorId, targets: &Array2<f64>) -> Result<()> {
    let pd = tape.value(p).dim();
    if pd != targets.dim() {
        return Err(Error::Contract(format!(
            "probability shape {:?} does not match target shape {:?}",
            pd,
            targets.dim()
        )));
    }
    Ok(())
}

/// Weighted classification loss:
/// `L = -(1/M) sum_ij w_j (y log p + (1-y) log(1-p))`.
pub fn weighted_bce(
    tape: &mut Tape,
    p: TensorId,
    targets: Rc<Array2<f64>>,
    weights: Rc<Array1<f64>>,
) -> Result<TensorId> {
    check_shapes(tape, p, &targets)?;
    if weights.len() != targets.ncols() {
        return Err(Error::Contract(format!(
            "{} weights for {} attributes",
            weights.len(),
            targets.ncols()
        )));
    }
    Ok(tape.bce(p, targets, Some(weights), PROB_CLAMP))
}

/// Global-local loss: the same cross-entropy with unit weights.
pub fn gl_loss(tape: &mut Tape, p_gl: TensorId, targets: Rc<Array2<f64>>) -> Result<TensorId> {
    check_shapes(tape, p_gl, &targets)?;
    Ok(tape.bce(p_gl, targets, None, PROB_CLAMP))
}

/// `L = L_CLS + alpha * L_GL`. With no GL term the classification loss is
/// returned untouched.
pub fn total_loss(
    tape: &mut Tape,
    l_cls: TensorId,
    l_gl: Option<TensorId>,
    alpha: f64,
) -> Result<TensorId> {
    if alpha < 0.0 {
        return Err(Error::Contract(format!("alpha must be >= 0, got {alpha}")));
    }
    match l_gl {
        None => Ok(l_cls),
        Some(gl) => {
            let scaled = tape.scale(gl, alpha);
            Ok(tape.add(l_cls, scaled))
        }
    }
}
