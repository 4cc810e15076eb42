//! Minimal dense-tensor arithmetic with reverse-mode autodiff.
//!
//! Everything is 64-bit floating point, row-major, CPU-only. The op set is
//! deliberately narrow: just enough for a toy decoder-only transformer and
//! the distillation loss stack built on top of it.

pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::gradient_check;
pub use rng::Rng;
pub use tape::{log_softmax_row, Gradients, SoftmaxMask, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Softmax over the last axis, stabilized by max-subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    logits.check_finite("softmax input")?;
    let d = logits.last_dim();
    if d == 0 {
        return Err(Error::Contract("softmax: empty last axis".into()));
    }
    let mut out = logits.data.clone();
    for row in out.chunks_mut(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(logits.shape.clone(), out)
}

/// Log-softmax over the last axis.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    logits.check_finite("log_softmax input")?;
    let d = logits.last_dim();
    if d == 0 {
        return Err(Error::Contract("log_softmax: empty last axis".into()));
    }
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data.chunks(d) {
        out.extend(log_softmax_row(row));
    }
    Tensor::new(logits.shape.clone(), out)
}

/// Forward KL divergence KL(softmax(p) || softmax(q)) of two logit vectors,
/// computed in log space so zero probabilities never reach a logarithm.
pub fn kl_divergence(p_logits: &Tensor, q_logits: &Tensor) -> Result<f64> {
    if p_logits.shape != q_logits.shape {
        return Err(Error::Contract(format!(
            "kl_divergence: shapes {:?} vs {:?}",
            p_logits.shape, q_logits.shape
        )));
    }
    if p_logits.shape.len() != 1 {
        return Err(Error::Contract(format!(
            "kl_divergence: expected a rank-1 logit vector, got {:?}",
            p_logits.shape
        )));
    }
    p_logits.check_finite("kl_divergence p")?;
    q_logits.check_finite("kl_divergence q")?;
    Ok(kl_from_log_probs(
        &log_softmax_row(&p_logits.data),
        &log_softmax_row(&q_logits.data),
    ))
}

/// Row-wise forward KL for [R, V] logit matrices.
pub fn kl_divergence_rows(p_logits: &Tensor, q_logits: &Tensor) -> Result<Vec<f64>> {
    if p_logits.shape != q_logits.shape {
        return Err(Error::Contract(format!(
            "kl_divergence_rows: shapes {:?} vs {:?}",
            p_logits.shape, q_logits.shape
        )));
    }
    p_logits.check_finite("kl_divergence_rows p")?;
    q_logits.check_finite("kl_divergence_rows q")?;
    let v = p_logits.last_dim();
    let rows = p_logits.numel() / v;
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        out.push(kl_from_log_probs(
            &log_softmax_row(&p_logits.data[r * v..(r + 1) * v]),
            &log_softmax_row(&q_logits.data[r * v..(r + 1) * v]),
        ));
    }
    Ok(out)
}

/// KL from two log-probability vectors: sum of exp(lp) * (lp - lq).
/// Entries with zero probability contribute zero (0 * log 0 convention).
pub fn kl_from_log_probs(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter()
        .zip(lq)
        .map(|(&a, &b)| if a == f64::NEG_INFINITY { 0.0 } else { a.exp() * (a - b) })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct, unstabilized evaluation; valid for small inputs and used as
    /// the independent oracle for the stabilized implementation.
    fn softmax_direct(row: &[f64]) -> Vec<f64> {
        let sum: f64 = row.iter().map(|x| x.exp()).sum();
        row.iter().map(|x| x.exp() / sum).collect()
    }

    fn kl_direct(p: &[f64], q: &[f64]) -> f64 {
        p.iter().zip(q).map(|(&a, &b)| a * (a.ln() - b.ln())).sum()
    }

    #[test]
    fn softmax_uniform_case() {
        let t = Tensor::from_vec(vec![0.0, 0.0, 0.0]);
        let s = softmax(&t).unwrap();
        for v in s.data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        for c in [-100.0, -3.5, 0.0, 7.25, 500.0] {
            let base = softmax(&Tensor::from_vec(vec![0.0, 0.0, 0.0])).unwrap();
            let shifted = softmax(&Tensor::from_vec(vec![c, c, c])).unwrap();
            assert_eq!(base.data, shifted.data, "shift by {c} must not change output");
        }
    }

    #[test]
    fn softmax_one_two_three() {
        let s = softmax(&Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let expected = [0.090_030_57, 0.244_728_47, 0.665_240_96];
        for (got, want) in s.data.iter().zip(expected) {
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
        // Cross-check against the direct oracle.
        let oracle = softmax_direct(&[1.0, 2.0, 3.0]);
        for (got, want) in s.data.iter().zip(oracle) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(1);
        for _ in 0..100 {
            let t = Tensor::randn(vec![5, 8], 10.0, &mut rng);
            let s = softmax(&t).unwrap();
            for row in s.data.chunks(8) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let t = Tensor { shape: vec![2], data: vec![f64::NAN, 0.0], requires_grad: false, grad: None };
        assert!(matches!(softmax(&t), Err(Error::Numeric(_))));
        let t = Tensor { shape: vec![2], data: vec![f64::INFINITY, 0.0], requires_grad: false, grad: None };
        assert!(matches!(softmax(&t), Err(Error::Numeric(_))));
    }

    #[test]
    fn kl_identity_is_zero() {
        let mut rng = Rng::new(2);
        for _ in 0..1000 {
            let t = Tensor::randn(vec![9], 3.0, &mut rng);
            let kl = kl_divergence(&t, &t).unwrap();
            assert!(kl.abs() <= 1e-12, "KL(p,p) = {kl}");
        }
    }

    #[test]
    fn kl_known_value_and_asymmetry() {
        // p = [0.7, 0.3], q = [0.5, 0.5] expressed as logits log p, log q.
        let p = Tensor::from_vec(vec![0.7_f64.ln(), 0.3_f64.ln()]);
        let q = Tensor::from_vec(vec![0.5_f64.ln(), 0.5_f64.ln()]);
        let fwd = kl_divergence(&p, &q).unwrap();
        assert!((fwd - 0.082_282_9).abs() < 1e-6, "forward {fwd}");
        assert!((fwd - kl_direct(&[0.7, 0.3], &[0.5, 0.5])).abs() < 1e-12);

        let rev = kl_divergence(&q, &p).unwrap();
        assert!((rev - kl_direct(&[0.5, 0.5], &[0.7, 0.3])).abs() < 1e-12);
        assert!((fwd - rev).abs() > 1e-3, "KL must be asymmetric: {fwd} vs {rev}");
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = Rng::new(3);
        for _ in 0..1000 {
            let p = Tensor::randn(vec![6], 2.0, &mut rng);
            let q = Tensor::randn(vec![6], 2.0, &mut rng);
            let kl = kl_divergence(&p, &q).unwrap();
            assert!(kl >= -1e-12, "KL must be nonnegative, got {kl}");
        }
    }

    #[test]
    fn kl_rejects_shape_mismatch() {
        let p = Tensor::from_vec(vec![0.0, 1.0]);
        let q = Tensor::from_vec(vec![0.0, 1.0, 2.0]);
        assert!(matches!(kl_divergence(&p, &q), Err(Error::Contract(_))));
    }
}
