//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;

/// A differentiable scalar objective: returns the loss value and one
/// gradient tensor per parameter (same shapes, same order).
pub type LossWithGrads<'a> = dyn Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)> + 'a;

/// Compares analytic gradients against central finite differences.
///
/// Returns the maximum over sampled coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
///
/// The objective is called twice with identical inputs first; any
/// difference in the returned loss is a contract violation (the check is
/// meaningless for non-deterministic objectives). At most
/// `max_coords_per_param` coordinates are sampled per parameter (all of
/// them when the parameter is small enough).
pub fn gradient_check(
    loss_fn: &LossWithGrads,
    params: &[Tensor],
    eps: f64,
    max_coords_per_param: usize,
    seed: u64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("gradient_check: eps {eps} outside [1e-7, 1e-3]")));
    }
    let (loss_a, grads) = loss_fn(params)?;
    let (loss_b, _) = loss_fn(params)?;
    if loss_a.to_bits() != loss_b.to_bits() {
        return Err(Error::Contract(format!(
            "gradient_check: objective is non-deterministic ({loss_a} vs {loss_b})"
        )));
    }
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "gradient_check: {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }

    let mut rng = Rng::new(seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0_f64;

    for (pi, grad) in grads.iter().enumerate() {
        if grad.shape != params[pi].shape {
            return Err(Error::Contract(format!(
                "gradient_check: gradient {pi} shape {:?} vs parameter {:?}",
                grad.shape, params[pi].shape
            )));
        }
        let n = params[pi].numel();
        let coords: Vec<usize> = if n <= max_coords_per_param {
            (0..n).collect()
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            idx.truncate(max_coords_per_param);
            idx.sort_unstable();
            idx
        };
        for c in coords {
            let orig = work[pi].data[c];
            work[pi].data[c] = orig + eps;
            let (fp, _) = loss_fn(&work)?;
            work[pi].data[c] = orig - eps;
            let (fm, _) = loss_fn(&work)?;
            work[pi].data[c] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let rel = (grad.data[c] - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
