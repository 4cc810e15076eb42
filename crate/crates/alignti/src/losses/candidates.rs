//! Per-step candidate-token sampling from the student distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SequenceBatch;
use crate::numerics::{softmax, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingStrategy {
    /// The d highest-probability tokens, ties broken toward lower ids.
    Greedy,
    /// d draws with replacement from the renormalized top-p mass.
    Nucleus,
}

impl SamplingStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(SamplingStrategy::Greedy),
            "nucleus" => Ok(SamplingStrategy::Nucleus),
            other => Err(Error::Config(format!("unknown sampling strategy '{other}'"))),
        }
    }
}

/// Candidates for one response step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCandidates {
    pub tokens: Vec<u32>,
    /// Probability of each candidate under the full student distribution
    /// it was drawn from.
    pub probs: Vec<f64>,
}

/// Candidate tokens for every supervised step of every batch row.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    /// `per_row[b][k-1]` holds the candidates for step k of row b.
    pub per_row: Vec<Vec<StepCandidates>>,
    pub strategy: SamplingStrategy,
    pub d: usize,
    pub seed: u64,
    pub nucleus_p: f64,
}

impl CandidateSet {
    /// Empty candidate blocks (d = 0); used for degenerate ribbon layouts
    /// that reduce to the plain causal arrangement.
    pub fn empty(batch: &SequenceBatch) -> CandidateSet {
        let per_row = (0..batch.batch)
            .map(|b| {
                (0..batch.supervised_positions(b).len())
                    .map(|_| StepCandidates { tokens: Vec::new(), probs: Vec::new() })
                    .collect()
            })
            .collect();
        CandidateSet {
            per_row,
            strategy: SamplingStrategy::Greedy,
            d: 0,
            seed: 0,
            nucleus_p: 1.0,
        }
    }
}

/// Samples d candidate tokens per supervised step from the student's
/// next-token distributions (teacher-forced logits over the plain batch).
///
/// Step k of row b reads the distribution at the position whose output
/// predicts the k-th response token, i.e. the k-th supervised position.
pub fn sample_candidates(
    student_logits: &Tensor,
    batch: &SequenceBatch,
    strategy: SamplingStrategy,
    d: usize,
    nucleus_p: f64,
    seed: u64,
) -> Result<CandidateSet> {
    let v = student_logits.last_dim();
    if student_logits.numel() != batch.batch * batch.seq * v {
        return Err(Error::Contract(format!(
            "logits shape {:?} does not cover batch ({}, {})",
            student_logits.shape, batch.batch, batch.seq
        )));
    }
    if d == 0 || d > v {
        return Err(Error::Contract(format!("d = {d} outside [1, {v}]")));
    }
    if !(0.0..=1.0).contains(&nucleus_p) || nucleus_p == 0.0 {
        return Err(Error::Config(format!("nucleus_p {nucleus_p} outside (0, 1]")));
    }
    let root = Rng::new(seed).stream("candidates");
    let mut per_row = Vec::with_capacity(batch.batch);
    for b in 0..batch.batch {
        let positions = batch.supervised_positions(b);
        let mut steps = Vec::with_capacity(positions.len());
        for (k, &p) in positions.iter().enumerate() {
            let flat = batch.idx(b, p);
            let row = &student_logits.data[flat * v..(flat + 1) * v];
            let probs = softmax(&Tensor::new(vec![v], row.to_vec())?)?;
            let mut rng = root.substream(((b as u64) << 32) | k as u64);
            steps.push(sample_step(&probs.data, strategy, d, nucleus_p, &mut rng));
        }
        per_row.push(steps);
    }
    Ok(CandidateSet { per_row, strategy, d, seed, nucleus_p })
}

fn sample_step(
    probs: &[f64],
    strategy: SamplingStrategy,
    d: usize,
    nucleus_p: f64,
    rng: &mut Rng,
) -> StepCandidates {
    // Descending probability, ascending id on ties.
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b].partial_cmp(&probs[a]).unwrap().then_with(|| a.cmp(&b))
    });
    match strategy {
        SamplingStrategy::Greedy => {
            let tokens: Vec<u32> = order[..d].iter().map(|&i| i as u32).collect();
            let ps = tokens.iter().map(|&t| probs[t as usize]).collect();
            StepCandidates { tokens, probs: ps }
        }
        SamplingStrategy::Nucleus => {
            // Smallest prefix of the sorted distribution whose mass
            // reaches nucleus_p, always at least one token.
            let mut cutoff = order.len();
            let mut cum = 0.0;
            for (rank, &i) in order.iter().enumerate() {
                cum += probs[i];
                if cum >= nucleus_p {
                    cutoff = rank + 1;
                    break;
                }
            }
            let kept = &order[..cutoff];
            let weights: Vec<f64> = kept.iter().map(|&i| probs[i]).collect();
            let mut tokens = Vec::with_capacity(d);
            let mut ps = Vec::with_capacity(d);
            for _ in 0..d {
                let pick = rng.weighted_index(&weights);
                tokens.push(kept[pick] as u32);
                ps.push(probs[kept[pick]]);
            }
            StepCandidates { tokens, probs: ps }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RowSpec;

    fn batch_one_row(resp: usize) -> SequenceBatch {
        SequenceBatch::from_rows(&[RowSpec {
            visual: vec![3, 4],
            instruction: vec![5],
            response: (6..6 + resp as u32).collect(),
        }])
        .unwrap()
    }

    fn logits_for(batch: &SequenceBatch, v: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        let mut data = vec![0.0; batch.batch * batch.seq * v];
        for s in 0..batch.seq {
            for c in 0..v {
                data[s * v + c] = f(s, c);
            }
        }
        Tensor::new(vec![batch.batch, batch.seq, v], data).unwrap()
    }

    #[test]
    fn greedy_d1_is_argmax() {
        let batch = batch_one_row(2);
        let v = 12;
        let logits = logits_for(&batch, v, |s, c| if c == s + 3 { 5.0 } else { 0.0 });
        let set = sample_candidates(&logits, &batch, SamplingStrategy::Greedy, 1, 0.9, 0).unwrap();
        let positions = batch.supervised_positions(0);
        for (k, &p) in positions.iter().enumerate() {
            assert_eq!(set.per_row[0][k].tokens, vec![(p + 3) as u32]);
        }
    }

    #[test]
    fn greedy_top_d_matches_full_sort_oracle() {
        let batch = batch_one_row(3);
        let v = 17;
        let mut rng = Rng::new(99);
        let logits = Tensor::randn(vec![1, batch.seq, v], 2.0, &mut rng);
        let d = 5;
        let set = sample_candidates(&logits, &batch, SamplingStrategy::Greedy, d, 0.9, 0).unwrap();
        for (k, &p) in batch.supervised_positions(0).iter().enumerate() {
            let row = &logits.data[p * v..(p + 1) * v];
            // Brute-force sort of the full distribution.
            let mut idx: Vec<usize> = (0..v).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then_with(|| a.cmp(&b)));
            let expected: Vec<u32> = idx[..d].iter().map(|&i| i as u32).collect();
            assert_eq!(set.per_row[0][k].tokens, expected, "step {k}");
            // Greedy candidates are distinct.
            let mut uniq = set.per_row[0][k].tokens.clone();
            uniq.sort_unstable();
            uniq.dedup();
            assert_eq!(uniq.len(), d);
        }
    }

    #[test]
    fn greedy_breaks_ties_toward_lower_id() {
        let batch = batch_one_row(1);
        let v = 6;
        let logits = logits_for(&batch, v, |_, _| 1.25);
        let set = sample_candidates(&logits, &batch, SamplingStrategy::Greedy, 3, 0.9, 0).unwrap();
        assert_eq!(set.per_row[0][0].tokens, vec![0, 1, 2]);
    }

    #[test]
    fn nucleus_on_peaked_distribution_repeats_the_support_token() {
        let batch = batch_one_row(2);
        let v = 9;
        // Effectively one-hot: token 4 carries all the mass.
        let logits = logits_for(&batch, v, |_, c| if c == 4 { 50.0 } else { 0.0 });
        let set =
            sample_candidates(&logits, &batch, SamplingStrategy::Nucleus, 4, 1.0, 7).unwrap();
        for step in &set.per_row[0] {
            assert_eq!(step.tokens, vec![4, 4, 4, 4]);
            assert!(step.probs.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn nucleus_is_seed_deterministic() {
        let batch = batch_one_row(4);
        let v = 20;
        let mut rng = Rng::new(5);
        let logits = Tensor::randn(vec![1, batch.seq, v], 1.5, &mut rng);
        let a = sample_candidates(&logits, &batch, SamplingStrategy::Nucleus, 4, 0.9, 11).unwrap();
        let b = sample_candidates(&logits, &batch, SamplingStrategy::Nucleus, 4, 0.9, 11).unwrap();
        for (x, y) in a.per_row[0].iter().zip(&b.per_row[0]) {
            assert_eq!(x.tokens, y.tokens);
        }
        let c = sample_candidates(&logits, &batch, SamplingStrategy::Nucleus, 4, 0.9, 12).unwrap();
        assert_ne!(
            a.per_row[0].iter().map(|s| s.tokens.clone()).collect::<Vec<_>>(),
            c.per_row[0].iter().map(|s| s.tokens.clone()).collect::<Vec<_>>(),
        );
    }

    #[test]
    fn nucleus_draws_only_from_top_p_mass() {
        let batch = batch_one_row(1);
        let v = 4;
        // probs ~ [0.6, 0.3, 0.06, 0.04]; top-0.8 nucleus = {0, 1}.
        let logits = logits_for(&batch, v, |_, c| match c {
            0 => 0.6_f64.ln(),
            1 => 0.3_f64.ln(),
            2 => 0.06_f64.ln(),
            _ => 0.04_f64.ln(),
        });
        for seed in 0..50 {
            let set =
                sample_candidates(&logits, &batch, SamplingStrategy::Nucleus, 4, 0.8, seed)
                    .unwrap();
            for &t in &set.per_row[0][0].tokens {
                assert!(t <= 1, "token {t} outside the nucleus");
            }
        }
    }

    #[test]
    fn d_larger_than_vocab_is_rejected() {
        let batch = batch_one_row(1);
        let logits = logits_for(&batch, 4, |_, _| 0.0);
        assert!(
            sample_candidates(&logits, &batch, SamplingStrategy::Greedy, 5, 0.9, 0).is_err()
        );
    }
}
