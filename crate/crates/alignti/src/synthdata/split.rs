//! Dataset splitting with a long-response bias-evaluation holdout.

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::synthdata::DatasetRecord;

/// Splits records into (train, val, bias-eval) by the given fractions.
///
/// The bias-eval split draws only from records whose response length meets
/// `min_response_len_for_bias_eval`, and those records are removed from the
/// other splits, so bias measurements run on sequences long enough for the
/// full divergence curves while remaining distributionally matched to
/// training data. The split is a pure function of `seed`.
pub fn split_dataset(
    records: &[DatasetRecord],
    fractions: (f64, f64, f64),
    min_response_len_for_bias_eval: usize,
    seed: u64,
) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    let (f_train, f_val, f_bias) = fractions;
    let sum = f_train + f_val + f_bias;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {sum}, expected 1")));
    }
    if !(0.0..=1.0).contains(&f_train) || !(0.0..=1.0).contains(&f_val) || !(0.0..=1.0).contains(&f_bias)
    {
        return Err(Error::Config("split fractions must lie in [0, 1]".into()));
    }
    let n = records.len();
    let n_bias = (f_bias * n as f64).round() as usize;
    let n_val = (f_val * n as f64).round() as usize;

    let mut rng = Rng::new(seed).stream("split");
    let mut eligible: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.response_len() >= min_response_len_for_bias_eval)
        .map(|(i, _)| i)
        .collect();
    if eligible.len() < n_bias {
        return Err(Error::Config(format!(
            "bias-eval split needs {n_bias} records with response length >= \
             {min_response_len_for_bias_eval}, but only {} qualify (shortfall {})",
            eligible.len(),
            n_bias - eligible.len()
        )));
    }
    rng.shuffle(&mut eligible);
    let mut bias_idx: Vec<usize> = eligible[..n_bias].to_vec();
    bias_idx.sort_unstable();

    let in_bias: std::collections::BTreeSet<usize> = bias_idx.iter().copied().collect();
    let mut rest: Vec<usize> = (0..n).filter(|i| !in_bias.contains(i)).collect();
    rng.shuffle(&mut rest);
    let n_val = n_val.min(rest.len());
    let mut val_idx: Vec<usize> = rest[..n_val].to_vec();
    let mut train_idx: Vec<usize> = rest[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();

    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok((pick(&train_idx), pick(&val_idx), pick(&bias_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, TaskSpec};

    fn records() -> Vec<DatasetRecord> {
        generate_dataset(&TaskSpec { seed: 5, ..TaskSpec::default() }, 200).unwrap()
    }

    #[test]
    fn all_train_when_fraction_one() {
        let recs = records();
        let (train, val, bias) = split_dataset(&recs, (1.0, 0.0, 0.0), 32, 1).unwrap();
        assert_eq!(train.len(), recs.len());
        assert!(val.is_empty());
        assert!(bias.is_empty());
    }

    #[test]
    fn impossible_threshold_is_a_config_error() {
        let recs = records();
        let err = split_dataset(&recs, (0.8, 0.1, 0.1), 10_000, 1);
        match err {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("shortfall"), "message should name the shortfall: {msg}")
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn splits_partition_the_input() {
        let recs = records();
        for seed in 0..10 {
            let (train, val, bias) = split_dataset(&recs, (0.7, 0.15, 0.15), 32, seed).unwrap();
            assert_eq!(train.len() + val.len() + bias.len(), recs.len());
            let mut ids: Vec<&str> = train
                .iter()
                .chain(&val)
                .chain(&bias)
                .map(|r| r.record_id.as_str())
                .collect();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), recs.len(), "splits overlap for seed {seed}");
            assert!(bias.iter().all(|r| r.response_len() >= 32));
        }
    }

    #[test]
    fn split_is_deterministic_in_seed() {
        let recs = records();
        let a = split_dataset(&recs, (0.7, 0.2, 0.1), 32, 9).unwrap();
        let b = split_dataset(&recs, (0.7, 0.2, 0.1), 32, 9).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.2, b.2);
        let c = split_dataset(&recs, (0.7, 0.2, 0.1), 32, 10).unwrap();
        assert_ne!(a.0, c.0, "different seeds should shuffle differently");
    }

    #[test]
    fn bad_fractions_rejected() {
        let recs = records();
        assert!(split_dataset(&recs, (0.5, 0.2, 0.2), 32, 1).is_err());
    }
}
