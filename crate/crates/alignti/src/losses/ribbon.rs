//! Ribbon layout: the augmented response sequence and block-structured
//! attention mask that evaluate all per-step candidate continuations in a
//! single forward pass.
//!
//! For a response of length L with d candidates per step, block k holds
//! `[y_{k-1}, c_k^1 .. c_k^d]`: the ground-truth predecessor followed by
//! the step-k candidates. Backbone positions attend causally to backbone
//! positions only, so their outputs are exactly those of a plain causal
//! pass; candidate (k, u) attends to the common backbone prefix and to
//! itself, never to a sibling candidate. Backbone outputs provide the
//! per-step teacher-forcing distributions, candidate outputs provide the
//! one-step transition distributions out of each sampled token.

use crate::error::{Error, Result};
use crate::losses::candidates::CandidateSet;
use crate::model::{Segment, SequenceBatch};
use crate::numerics::SoftmaxMask;

/// Provenance of one augmented position. Steps are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// Holds y_{step-1} (y_0 is the final instruction token).
    Backbone { step: usize },
    /// Holds candidate `slot` (0-based) for y_step.
    Candidate { step: usize, slot: usize },
}

/// Augmented arrangement of one row's response segment.
#[derive(Debug, Clone)]
pub struct RibbonLayout {
    pub response_len: usize,
    pub d: usize,
    /// Tokens of the augmented segment, length `response_len * (1 + d)`.
    pub augmented_tokens: Vec<u32>,
    pub origin: Vec<Origin>,
    /// Original-sequence position id per augmented position.
    pub position_ids: Vec<u32>,
    /// Row-major [len, len] attendability within the augmented segment.
    pub mask: Vec<bool>,
    /// Augmented indices of backbone positions (outputs give the step-k
    /// teacher-forcing distributions).
    pub kd_eval_positions: Vec<usize>,
    /// Augmented indices of candidate positions (outputs give the
    /// transition distributions out of each candidate).
    pub tpa_eval_positions: Vec<usize>,
}

impl RibbonLayout {
    pub fn len(&self) -> usize {
        self.augmented_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.augmented_tokens.is_empty()
    }

    #[inline]
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.mask[q * self.len() + k]
    }

    /// Checks every structural invariant; used by tests and assertions.
    pub fn check_invariants(&self) -> Result<()> {
        let (l, d) = (self.response_len, self.d);
        let width = 1 + d;
        if self.len() != l * width {
            return Err(Error::Contract("ribbon length != L * (1 + d)".into()));
        }
        for k in 1..=l {
            let base = (k - 1) * width;
            if self.origin[base] != (Origin::Backbone { step: k }) {
                return Err(Error::Contract(format!("block {k} does not start with backbone")));
            }
            for u in 0..d {
                if self.origin[base + 1 + u] != (Origin::Candidate { step: k, slot: u }) {
                    return Err(Error::Contract(format!("bad candidate origin in block {k}")));
                }
            }
        }
        for q in 0..self.len() {
            for key in 0..self.len() {
                let allowed = self.allowed(q, key);
                if allowed && key > q {
                    return Err(Error::Contract(format!(
                        "forward attention {q} -> {key}: mask not lower-triangular"
                    )));
                }
                let expected = match (self.origin[q], self.origin[key]) {
                    (Origin::Backbone { step: a }, Origin::Backbone { step: b }) => b <= a,
                    (Origin::Candidate { step: a, .. }, Origin::Backbone { step: b }) => b <= a,
                    (Origin::Candidate { .. }, Origin::Candidate { .. }) => q == key,
                    (Origin::Backbone { .. }, Origin::Candidate { .. }) => false,
                };
                if allowed != expected {
                    return Err(Error::Contract(format!(
                        "mask at ({q}, {key}) is {allowed}, expected {expected}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Builds the ribbon layout for one row. `y0` is the final instruction
/// token (the position whose output predicts the first response token),
/// `y0_pos` its original sequence index, and `response` the ground-truth
/// response tokens y_1..y_L.
pub fn build_ribbon_layout(
    y0: u32,
    y0_pos: u32,
    response: &[u32],
    candidates: &[crate::losses::candidates::StepCandidates],
) -> Result<RibbonLayout> {
    let l = response.len();
    if l == 0 {
        return Err(Error::Contract("ribbon layout needs response length >= 1".into()));
    }
    if candidates.len() != l {
        return Err(Error::Contract(format!(
            "candidate set covers {} steps, response has {l}",
            candidates.len()
        )));
    }
    let d = candidates.first().map_or(0, |c| c.tokens.len());
    if candidates.iter().any(|c| c.tokens.len() != d) {
        return Err(Error::Contract("uneven candidate counts across steps".into()));
    }
    let width = 1 + d;
    let len = l * width;
    let mut tokens = Vec::with_capacity(len);
    let mut origin = Vec::with_capacity(len);
    let mut position_ids = Vec::with_capacity(len);
    let mut kd_eval = Vec::with_capacity(l);
    let mut tpa_eval = Vec::with_capacity(l * d);
    for k in 1..=l {
        let backbone_tok = if k == 1 { y0 } else { response[k - 2] };
        kd_eval.push(tokens.len());
        tokens.push(backbone_tok);
        origin.push(Origin::Backbone { step: k });
        position_ids.push(y0_pos + (k as u32 - 1));
        for (u, &cand) in candidates[k - 1].tokens.iter().enumerate() {
            tpa_eval.push(tokens.len());
            tokens.push(cand);
            origin.push(Origin::Candidate { step: k, slot: u });
            position_ids.push(y0_pos + k as u32);
        }
    }

    let mut mask = vec![false; len * len];
    for q in 0..len {
        let q_step = match origin[q] {
            Origin::Backbone { step } | Origin::Candidate { step, .. } => step,
        };
        for j in 1..=q_step {
            mask[q * len + (j - 1) * width] = true; // backbone of block j
        }
        if matches!(origin[q], Origin::Candidate { .. }) {
            mask[q * len + q] = true; // self
        }
    }

    let layout = RibbonLayout {
        response_len: l,
        d,
        augmented_tokens: tokens,
        origin,
        position_ids,
        mask,
        kd_eval_positions: kd_eval,
        tpa_eval_positions: tpa_eval,
    };
    debug_assert!(layout.check_invariants().is_ok());
    Ok(layout)
}

/// A whole batch rearranged for the parallel transition-alignment pass:
/// per-row prefix (visual + instruction minus its final token) followed by
/// that row's ribbon segment, padded to a common length, with the combined
/// attention mask.
#[derive(Debug, Clone)]
pub struct AugmentedBatch {
    pub batch: SequenceBatch,
    pub mask: SoftmaxMask,
    pub layouts: Vec<RibbonLayout>,
    /// Per row: sequence index where the ribbon segment starts (= original
    /// index of the final instruction token).
    pub ribbon_start: Vec<usize>,
    /// Per row: (sequence index, target token) for each teacher-forcing
    /// evaluation position, step order. Targets are y_1..y_L.
    pub kd_eval: Vec<Vec<(usize, u32)>>,
    /// Per row, per step: sequence indices of the candidate positions.
    pub tpa_eval: Vec<Vec<Vec<usize>>>,
}

/// Assembles the augmented batch for `batch` under `candidates`.
pub fn assemble_augmented_batch(
    batch: &SequenceBatch,
    candidates: &CandidateSet,
) -> Result<AugmentedBatch> {
    if candidates.per_row.len() != batch.batch {
        return Err(Error::Contract(format!(
            "candidate set covers {} rows, batch has {}",
            candidates.per_row.len(),
            batch.batch
        )));
    }
    let mut layouts = Vec::with_capacity(batch.batch);
    let mut ribbon_start = Vec::with_capacity(batch.batch);
    let mut row_lens = Vec::with_capacity(batch.batch);
    for b in 0..batch.batch {
        let ipos = batch.segment_positions(b, Segment::Instruction);
        let p0 = *ipos.last().ok_or_else(|| {
            Error::Contract(format!("row {b} has no instruction segment"))
        })?;
        let rpos = batch.segment_positions(b, Segment::Response);
        if rpos.is_empty() {
            return Err(Error::Contract(format!("row {b} has no response segment")));
        }
        let response: Vec<u32> = rpos.iter().map(|&p| batch.tokens[batch.idx(b, p)]).collect();
        if candidates.per_row[b].len() != response.len() {
            return Err(Error::Contract(format!(
                "row {b}: {} candidate steps for response length {}",
                candidates.per_row[b].len(),
                response.len()
            )));
        }
        let layout = build_ribbon_layout(
            batch.tokens[batch.idx(b, p0)],
            batch.position_ids[batch.idx(b, p0)],
            &response,
            &candidates.per_row[b],
        )?;
        row_lens.push(p0 + layout.len());
        ribbon_start.push(p0);
        layouts.push(layout);
    }
    let seq = *row_lens.iter().max().unwrap();

    let mut tokens = vec![0u32; batch.batch * seq];
    let mut segments = vec![Segment::Pad; batch.batch * seq];
    let mut position_ids = vec![0u32; batch.batch * seq];
    let loss_mask = vec![false; batch.batch * seq];
    let mut mask = SoftmaxMask {
        batch: batch.batch,
        seq_q: seq,
        seq_k: seq,
        allowed: vec![false; batch.batch * seq * seq],
    };
    let mut kd_eval = Vec::with_capacity(batch.batch);
    let mut tpa_eval = Vec::with_capacity(batch.batch);

    for b in 0..batch.batch {
        let p0 = ribbon_start[b];
        let layout = &layouts[b];
        // Prefix: everything before the final instruction token.
        for p in 0..p0 {
            tokens[b * seq + p] = batch.tokens[batch.idx(b, p)];
            segments[b * seq + p] = batch.segment(b, p);
            position_ids[b * seq + p] = batch.position_ids[batch.idx(b, p)];
        }
        // Ribbon segment. The first backbone position is the final
        // instruction token and keeps its segment; everything else acts as
        // response context.
        for (i, &tok) in layout.augmented_tokens.iter().enumerate() {
            let p = p0 + i;
            tokens[b * seq + p] = tok;
            segments[b * seq + p] = if i == 0 { Segment::Instruction } else { Segment::Response };
            position_ids[b * seq + p] = layout.position_ids[i];
        }
        // Mask: prefix is causal; ribbon rows see the whole prefix plus
        // their in-ribbon allowance.
        for q in 0..p0 {
            for k in 0..=q {
                mask.set(b, q, k, true);
            }
        }
        for qi in 0..layout.len() {
            let q = p0 + qi;
            for k in 0..p0 {
                mask.set(b, q, k, true);
            }
            for ki in 0..layout.len() {
                if layout.allowed(qi, ki) {
                    mask.set(b, q, p0 + ki, true);
                }
            }
        }

        let rpos = batch.segment_positions(b, Segment::Response);
        let targets: Vec<u32> = rpos.iter().map(|&p| batch.tokens[batch.idx(b, p)]).collect();
        kd_eval.push(
            layout
                .kd_eval_positions
                .iter()
                .enumerate()
                .map(|(k, &i)| (p0 + i, targets[k]))
                .collect::<Vec<_>>(),
        );
        let mut per_step = vec![Vec::with_capacity(layout.d); layout.response_len];
        for (slot_idx, &i) in layout.tpa_eval_positions.iter().enumerate() {
            let step = slot_idx / layout.d.max(1);
            per_step[step].push(p0 + i);
        }
        tpa_eval.push(per_step);
    }

    let aug = SequenceBatch {
        batch: batch.batch,
        seq,
        tokens,
        segments,
        position_ids,
        loss_mask,
        positions_overridden: true,
    };
    aug.validate()?;
    aug.validate_mask(&mask)?;
    Ok(AugmentedBatch { batch: aug, mask, layouts, ribbon_start, kd_eval, tpa_eval })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::candidates::StepCandidates;
    use crate::model::RowSpec;

    fn cands(steps: &[&[u32]]) -> Vec<StepCandidates> {
        steps
            .iter()
            .map(|s| StepCandidates { tokens: s.to_vec(), probs: vec![0.5; s.len()] })
            .collect()
    }

    #[test]
    fn spec_example_l2_d2() {
        // L = 2, d = 2: layout [y0, c11, c12, y1, c21, c22].
        let layout =
            build_ribbon_layout(7, 4, &[8, 9], &cands(&[&[20, 21], &[22, 23]])).unwrap();
        assert_eq!(layout.augmented_tokens, vec![7, 20, 21, 8, 22, 23]);
        assert_eq!(layout.kd_eval_positions, vec![0, 3]);
        assert_eq!(layout.tpa_eval_positions, vec![1, 2, 4, 5]);
        assert_eq!(layout.position_ids, vec![4, 5, 5, 5, 6, 6]);
        layout.check_invariants().unwrap();

        // Enumerated allowed-attention sets from the naive definition.
        let expect: [&[usize]; 6] = [
            &[0],          // y0 -> {y0}
            &[0, 1],       // c1^1 -> {y0, self}
            &[0, 2],       // c1^2 -> {y0, self}
            &[0, 3],       // y1 -> {y0, y1}
            &[0, 3, 4],    // c2^1 -> {y0, y1, self}
            &[0, 3, 5],    // c2^2 -> {y0, y1, self}
        ];
        for q in 0..6 {
            let got: Vec<usize> = (0..6).filter(|&k| layout.allowed(q, k)).collect();
            assert_eq!(got, expect[q], "row {q}");
        }
    }

    #[test]
    fn d0_degenerates_to_plain_causal() {
        let layout = build_ribbon_layout(7, 4, &[8, 9, 10], &cands(&[&[], &[], &[]])).unwrap();
        assert_eq!(layout.d, 0);
        assert_eq!(layout.augmented_tokens, vec![7, 8, 9]);
        for q in 0..3 {
            for k in 0..3 {
                assert_eq!(layout.allowed(q, k), k <= q);
            }
        }
    }

    #[test]
    fn backbone_submask_is_strict_causal() {
        for (l, d) in [(1usize, 1usize), (3, 2), (5, 4)] {
            let resp: Vec<u32> = (8..8 + l as u32).collect();
            let steps: Vec<Vec<u32>> = (0..l).map(|_| (30..30 + d as u32).collect()).collect();
            let step_refs: Vec<&[u32]> = steps.iter().map(|s| s.as_slice()).collect();
            let layout = build_ribbon_layout(7, 2, &resp, &cands(&step_refs)).unwrap();
            layout.check_invariants().unwrap();
            let bb = &layout.kd_eval_positions;
            for (i, &qi) in bb.iter().enumerate() {
                for (j, &kj) in bb.iter().enumerate() {
                    assert_eq!(layout.allowed(qi, kj), j <= i, "L={l} d={d} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn zero_length_response_rejected() {
        assert!(build_ribbon_layout(7, 4, &[], &[]).is_err());
    }

    #[test]
    fn assembled_batch_respects_prefix_and_mask() {
        let base = SequenceBatch::from_rows(&[RowSpec {
            visual: vec![3, 4],
            instruction: vec![5, 6],
            response: vec![8, 9, 2],
        }])
        .unwrap();
        let mut set = CandidateSet::empty(&base);
        set.d = 1;
        for step in set.per_row[0].iter_mut() {
            step.tokens = vec![10];
            step.probs = vec![1.0];
        }
        let aug = assemble_augmented_batch(&base, &set).unwrap();
        // Prefix is [3, 4, 5]; ribbon starts at index 3 with y0 = 6.
        assert_eq!(aug.ribbon_start[0], 3);
        assert_eq!(aug.batch.seq, 3 + 3 * 2);
        assert_eq!(aug.batch.tokens[3], 6);
        assert_eq!(aug.batch.segment(0, 3), Segment::Instruction);
        // Every ribbon row attends the full prefix.
        for q in 3..aug.batch.seq {
            for k in 0..3 {
                assert!(aug.mask.is_allowed(0, q, k));
            }
        }
        // kd targets are the ground-truth response tokens.
        let targets: Vec<u32> = aug.kd_eval[0].iter().map(|&(_, t)| t).collect();
        assert_eq!(targets, vec![8, 9, 2]);
    }
}
