//! Transition probability alignment: the parallel ribbon-mask estimate and
//! its naive sequential oracle.
//!
//! The Monte-Carlo objective averages, over response steps, the mean
//! forward KL between teacher and student next-token distributions
//! conditioned on each sampled candidate: (1/d) sum_u KL at the candidate
//! output positions, pooled over all (row, step) pairs of the batch. The
//! parallel path computes every conditional in one augmented forward per
//! model; the oracle runs one truncated plain-causal forward per (step,
//! candidate) and must agree to float tolerance.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::losses::candidates::CandidateSet;
use crate::losses::ribbon::{assemble_augmented_batch, AugmentedBatch};
use crate::model::{AttentionTrace, Model, RowSpec, Segment, SequenceBatch};
use crate::numerics::{kl_from_log_probs, log_softmax_row, Tape, Var};

/// All artifacts of the augmented transition-alignment passes.
pub struct TpaComputation {
    /// Scalar transition-alignment loss on the tape.
    pub tpa: Var,
    pub aug: AugmentedBatch,
    /// Student logits [batch * seq', vocab] on the tape (gradients flow).
    pub student_logits: Var,
    /// Teacher logits as a tape constant.
    pub teacher_logits: Var,
    pub teacher_trace: AttentionTrace,
    pub student_trace: AttentionTrace,
    /// Student parameter handles (trainable pass).
    pub param_vars: Vec<Var>,
}

/// One augmented forward per model under the ribbon mask; KL at candidate
/// output positions, weighted (1/d) within a step and pooled over steps.
/// The same passes' backbone outputs serve the supervised and
/// distillation terms, so callers reuse [`TpaComputation::student_logits`]
/// rather than running extra passes.
pub fn compute_tpa_loss(
    teacher: &Model,
    student: &Model,
    tape: &Tape,
    batch: &SequenceBatch,
    candidates: &CandidateSet,
    teacher_capture: &BTreeSet<usize>,
    student_capture: &BTreeSet<usize>,
) -> Result<TpaComputation> {
    if candidates.d == 0 {
        return Err(Error::Contract("transition alignment needs d >= 1".into()));
    }
    let aug = assemble_augmented_batch(batch, candidates)?;
    let v = teacher.config.vocab_size;

    let teacher_out = teacher.forward(&aug.batch, Some(&aug.mask), teacher_capture)?;
    let student_fwd =
        student.forward_on_tape(tape, &aug.batch, Some(&aug.mask), student_capture, true)?;
    let teacher_logits = tape.constant(
        teacher_out
            .logits
            .clone()
            .reshaped(vec![aug.batch.batch * aug.batch.seq, v])?,
    )?;

    // Candidate rows in (row, step, slot) order with pooled weights.
    let seq = aug.batch.seq;
    let total_steps: usize = aug.tpa_eval.iter().map(|steps| steps.len()).sum();
    if total_steps == 0 {
        return Err(Error::Contract("no transition-alignment steps in batch".into()));
    }
    let mut rows = Vec::new();
    let mut coeffs = Vec::new();
    let w = 1.0 / (candidates.d as f64 * total_steps as f64);
    for (b, steps) in aug.tpa_eval.iter().enumerate() {
        for slots in steps {
            for &p in slots {
                rows.push(b * seq + p);
                coeffs.push(w);
            }
        }
    }
    let t_sel = tape.gather_rows(teacher_logits, rows.clone())?;
    let s_sel = tape.gather_rows(student_fwd.logits, rows)?;
    let kl = tape.kl_rows(t_sel, s_sel)?;
    let tpa = tape.dot_const(kl, coeffs)?;

    Ok(TpaComputation {
        tpa,
        aug,
        student_logits: student_fwd.logits,
        teacher_logits,
        teacher_trace: teacher_out.trace,
        student_trace: student_fwd.trace,
        param_vars: student_fwd.param_vars,
    })
}

/// Naive sequential estimate: for every (row, step k, candidate u),
/// truncate the row to the ground-truth prefix, append the candidate, run
/// a fresh plain-causal forward through each model, and take the KL of the
/// final position's distributions. Shares nothing with the ribbon path
/// beyond the models themselves.
pub fn naive_tpa_loss(
    teacher: &Model,
    student: &Model,
    batch: &SequenceBatch,
    candidates: &CandidateSet,
) -> Result<f64> {
    if candidates.per_row.len() != batch.batch {
        return Err(Error::Contract("candidate set does not cover the batch".into()));
    }
    let d = candidates.d;
    if d == 0 {
        return Err(Error::Contract("transition alignment needs d >= 1".into()));
    }
    let empty = BTreeSet::new();
    let mut sum = 0.0;
    let mut steps = 0usize;
    for b in 0..batch.batch {
        let visual: Vec<u32> = batch
            .segment_positions(b, Segment::Visual)
            .iter()
            .map(|&p| batch.tokens[batch.idx(b, p)])
            .collect();
        let instruction: Vec<u32> = batch
            .segment_positions(b, Segment::Instruction)
            .iter()
            .map(|&p| batch.tokens[batch.idx(b, p)])
            .collect();
        let response: Vec<u32> = batch
            .segment_positions(b, Segment::Response)
            .iter()
            .map(|&p| batch.tokens[batch.idx(b, p)])
            .collect();
        let l = response.len();
        if candidates.per_row[b].len() != l {
            return Err(Error::Contract(format!(
                "row {b}: candidates cover {} steps, response has {l}",
                candidates.per_row[b].len()
            )));
        }
        for k in 1..=l {
            let mut step_sum = 0.0;
            for u in 0..d {
                let cand = candidates.per_row[b][k - 1].tokens[u];
                let mut resp_prefix: Vec<u32> = response[..k - 1].to_vec();
                resp_prefix.push(cand);
                let row = RowSpec {
                    visual: visual.clone(),
                    instruction: instruction.clone(),
                    response: resp_prefix,
                };
                let one = SequenceBatch::from_rows(&[row])?;
                let last = one.seq - 1;
                let t_out = teacher.forward(&one, None, &empty)?;
                let s_out = student.forward(&one, None, &empty)?;
                let v = teacher.config.vocab_size;
                let t_row = &t_out.logits.data[last * v..(last + 1) * v];
                let s_row = &s_out.logits.data[last * v..(last + 1) * v];
                step_sum += kl_from_log_probs(&log_softmax_row(t_row), &log_softmax_row(s_row));
            }
            sum += step_sum / d as f64;
            steps += 1;
        }
    }
    Ok(sum / steps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::candidates::{sample_candidates, SamplingStrategy};
    use crate::model::{HeadAgg, ModelConfig};
    use crate::numerics::Rng;

    fn small_model(seed: u64, layers: usize, hidden: usize) -> Model {
        Model::new(ModelConfig {
            vocab_size: 24,
            n_layers: layers,
            n_heads: 2,
            hidden_dim: hidden,
            max_seq_len: 96,
            seed,
            head_agg: HeadAgg::Mean,
        })
        .unwrap()
    }

    fn random_batch(rng: &mut Rng, rows: usize, max_resp: usize) -> SequenceBatch {
        let specs: Vec<RowSpec> = (0..rows)
            .map(|_| {
                let n_v = 2 + rng.below(3);
                let n_i = 1 + rng.below(3);
                let n_r = 1 + rng.below(max_resp);
                RowSpec {
                    visual: (0..n_v).map(|_| 3 + rng.below(8) as u32).collect(),
                    instruction: (0..n_i).map(|_| 11 + rng.below(6) as u32).collect(),
                    response: (0..n_r).map(|_| 17 + rng.below(6) as u32).collect(),
                }
            })
            .collect();
        SequenceBatch::from_rows(&specs).unwrap()
    }

    #[test]
    fn parallel_matches_naive_oracle() {
        let mut rng = Rng::new(31);
        let teacher = small_model(1, 2, 16);
        let student = small_model(2, 1, 8);
        let empty = BTreeSet::new();
        for trial in 0..6 {
            let batch = random_batch(&mut rng, 1 + trial % 2, 5);
            let sampling = student.forward(&batch, None, &empty).unwrap();
            let d = 1 + trial % 3;
            let cands = sample_candidates(
                &sampling.logits,
                &batch,
                SamplingStrategy::Greedy,
                d,
                0.9,
                trial as u64,
            )
            .unwrap();
            let tape = Tape::new();
            let comp =
                compute_tpa_loss(&teacher, &student, &tape, &batch, &cands, &empty, &empty)
                    .unwrap();
            let parallel = tape.value(comp.tpa).item();
            let naive = naive_tpa_loss(&teacher, &student, &batch, &cands).unwrap();
            let rel = (parallel - naive).abs() / naive.abs().max(1e-12);
            assert!(
                rel <= 1e-6,
                "trial {trial}: parallel {parallel} vs naive {naive} (rel {rel})"
            );
        }
    }

    #[test]
    fn identical_models_give_zero_tpa() {
        let model = small_model(5, 2, 16);
        let mut rng = Rng::new(7);
        let batch = random_batch(&mut rng, 2, 4);
        let empty = BTreeSet::new();
        let sampling = model.forward(&batch, None, &empty).unwrap();
        let cands =
            sample_candidates(&sampling.logits, &batch, SamplingStrategy::Nucleus, 3, 0.9, 0)
                .unwrap();
        let tape = Tape::new();
        let comp = compute_tpa_loss(&model, &model, &tape, &batch, &cands, &empty, &empty).unwrap();
        let tpa = tape.value(comp.tpa).item();
        assert!(tpa.abs() <= 1e-9, "teacher == student should give 0, got {tpa}");
    }

    #[test]
    fn backbone_outputs_equal_plain_pass() {
        // Ribbon isolation: augmented backbone logits match the plain
        // causal forward bit for bit.
        let model = small_model(9, 2, 16);
        let mut rng = Rng::new(13);
        let batch = random_batch(&mut rng, 2, 4);
        let empty = BTreeSet::new();
        let sampling = model.forward(&batch, None, &empty).unwrap();
        let cands =
            sample_candidates(&sampling.logits, &batch, SamplingStrategy::Greedy, 2, 0.9, 1)
                .unwrap();
        let tape = Tape::new();
        let comp = compute_tpa_loss(&model, &model, &tape, &batch, &cands, &empty, &empty).unwrap();
        let plain = model.forward(&batch, None, &empty).unwrap();
        let aug_logits = tape.value(comp.student_logits);
        let v = model.config.vocab_size;
        for b in 0..batch.batch {
            let sup = batch.supervised_positions(b);
            for (k, &(aug_p, _)) in comp.aug.kd_eval[b].iter().enumerate() {
                let plain_p = sup[k];
                let plain_row =
                    &plain.logits.data[(b * batch.seq + plain_p) * v..(b * batch.seq + plain_p + 1) * v];
                let aug_row = &aug_logits.data
                    [(b * comp.aug.batch.seq + aug_p) * v..(b * comp.aug.batch.seq + aug_p + 1) * v];
                let max_diff = plain_row
                    .iter()
                    .zip(aug_row)
                    .map(|(a, c)| (a - c).abs())
                    .fold(0.0, f64::max);
                assert!(
                    max_diff <= 1e-12,
                    "row {b} step {k}: backbone differs from plain pass by {max_diff}"
                );
            }
        }
    }

    #[test]
    fn candidate_perturbation_isolated() {
        // Changing one candidate token leaves every other output position
        // bitwise unchanged.
        let model = small_model(11, 2, 16);
        let mut rng = Rng::new(17);
        let batch = random_batch(&mut rng, 1, 4);
        let empty = BTreeSet::new();
        let sampling = model.forward(&batch, None, &empty).unwrap();
        let cands =
            sample_candidates(&sampling.logits, &batch, SamplingStrategy::Greedy, 3, 0.9, 1)
                .unwrap();
        let aug_a = assemble_augmented_batch(&batch, &cands).unwrap();
        let mut cands_b = cands.clone();
        // Perturb candidate (k=1, u=1).
        let old = cands_b.per_row[0][0].tokens[1];
        cands_b.per_row[0][0].tokens[1] = if old == 4 { 5 } else { 4 };
        let aug_b = assemble_augmented_batch(&batch, &cands_b).unwrap();
        let out_a = model.forward(&aug_a.batch, Some(&aug_a.mask), &empty).unwrap();
        let out_b = model.forward(&aug_b.batch, Some(&aug_b.mask), &empty).unwrap();
        let v = model.config.vocab_size;
        let changed_pos = aug_a.ribbon_start[0] + 2; // block 1, slot 1
        for p in 0..aug_a.batch.seq {
            if p == changed_pos {
                continue;
            }
            for c in 0..v {
                let a = out_a.logits.data[p * v + c];
                let b = out_b.logits.data[p * v + c];
                assert!(
                    (a - b).abs() <= 1e-12,
                    "position {p} affected by a candidate perturbation at {changed_pos}"
                );
            }
        }
    }
}
