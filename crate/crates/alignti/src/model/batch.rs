//! Segment-annotated token batches and attention-mask construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SoftmaxMask;

/// Role of a sequence position. Within a row, segments always appear in the
/// order `Visual* Instruction* Response* Pad*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Segment {
    Visual,
    Instruction,
    Response,
    Pad,
}

/// One row of a [`SequenceBatch`] before padding.
#[derive(Debug, Clone)]
pub struct RowSpec {
    pub visual: Vec<u32>,
    pub instruction: Vec<u32>,
    pub response: Vec<u32>,
}

/// A padded batch of segment-annotated token sequences.
///
/// `loss_mask` marks the supervised positions: position `p` is supervised
/// when its output predicts a response token, i.e. when `p + 1` exists in
/// the row and carries the `Response` segment. Under this shifted-target
/// convention the final instruction position is supervised (it predicts the
/// first response token) and the last response token is not (nothing
/// follows it).
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub batch: usize,
    pub seq: usize,
    pub tokens: Vec<u32>,
    pub segments: Vec<Segment>,
    pub position_ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
    /// Set when position ids deliberately repeat (ribbon layouts).
    pub positions_overridden: bool,
}

impl SequenceBatch {
    pub fn from_rows(rows: &[RowSpec]) -> Result<SequenceBatch> {
        if rows.is_empty() {
            return Err(Error::Contract("from_rows: empty batch".into()));
        }
        let seq = rows
            .iter()
            .map(|r| r.visual.len() + r.instruction.len() + r.response.len())
            .max()
            .unwrap();
        let batch = rows.len();
        let mut tokens = vec![0u32; batch * seq];
        let mut segments = vec![Segment::Pad; batch * seq];
        let mut position_ids = vec![0u32; batch * seq];
        let mut loss_mask = vec![false; batch * seq];
        for (b, row) in rows.iter().enumerate() {
            let mut s = 0;
            let parts: [(&[u32], Segment); 3] = [
                (&row.visual, Segment::Visual),
                (&row.instruction, Segment::Instruction),
                (&row.response, Segment::Response),
            ];
            for (part, seg) in parts {
                for &tok in part {
                    tokens[b * seq + s] = tok;
                    segments[b * seq + s] = seg;
                    s += 1;
                }
            }
            for p in 0..seq {
                position_ids[b * seq + p] = p as u32;
            }
            let len = s;
            for p in 0..len.saturating_sub(1) {
                if segments[b * seq + p + 1] == Segment::Response {
                    loss_mask[b * seq + p] = true;
                }
            }
        }
        let out = SequenceBatch {
            batch,
            seq,
            tokens,
            segments,
            position_ids,
            loss_mask,
            positions_overridden: false,
        };
        out.validate()?;
        Ok(out)
    }

    #[inline]
    pub fn idx(&self, b: usize, s: usize) -> usize {
        b * self.seq + s
    }

    pub fn token(&self, b: usize, s: usize) -> u32 {
        self.tokens[self.idx(b, s)]
    }

    pub fn segment(&self, b: usize, s: usize) -> Segment {
        self.segments[self.idx(b, s)]
    }

    /// Number of non-pad positions in row `b`.
    pub fn row_len(&self, b: usize) -> usize {
        (0..self.seq)
            .rev()
            .find(|&s| self.segment(b, s) != Segment::Pad)
            .map_or(0, |s| s + 1)
    }

    fn segment_count(&self, b: usize, seg: Segment) -> usize {
        (0..self.seq).filter(|&s| self.segment(b, s) == seg).count()
    }

    pub fn n_visual(&self, b: usize) -> usize {
        self.segment_count(b, Segment::Visual)
    }

    pub fn n_instruction(&self, b: usize) -> usize {
        self.segment_count(b, Segment::Instruction)
    }

    pub fn n_response(&self, b: usize) -> usize {
        self.segment_count(b, Segment::Response)
    }

    /// Sequence indices of row `b` carrying segment `seg`, in order.
    pub fn segment_positions(&self, b: usize, seg: Segment) -> Vec<usize> {
        (0..self.seq).filter(|&s| self.segment(b, s) == seg).collect()
    }

    /// Supervised positions of row `b` (see type-level docs).
    pub fn supervised_positions(&self, b: usize) -> Vec<usize> {
        (0..self.seq).filter(|&s| self.loss_mask[self.idx(b, s)]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.batch * self.seq
            || self.segments.len() != self.batch * self.seq
            || self.position_ids.len() != self.batch * self.seq
            || self.loss_mask.len() != self.batch * self.seq
        {
            return Err(Error::Contract("batch buffers disagree with batch x seq".into()));
        }
        for b in 0..self.batch {
            // Segment order: Visual* Instruction* Response* Pad*.
            let mut last = Segment::Visual;
            for s in 0..self.seq {
                let seg = self.segment(b, s);
                if seg < last {
                    return Err(Error::Contract(format!(
                        "row {b}: segment {seg:?} at {s} after {last:?}"
                    )));
                }
                last = seg;
            }
            // Supervised positions have a defined successor token.
            for s in 0..self.seq {
                if self.loss_mask[self.idx(b, s)] {
                    if s + 1 >= self.seq || self.segment(b, s + 1) == Segment::Pad {
                        return Err(Error::Contract(format!(
                            "row {b}: supervised position {s} lacks a successor token"
                        )));
                    }
                }
            }
            if !self.positions_overridden {
                for s in 1..self.seq {
                    if self.position_ids[self.idx(b, s)] <= self.position_ids[self.idx(b, s - 1)] {
                        return Err(Error::Contract(format!(
                            "row {b}: position_ids not strictly increasing at {s}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Strict causal mask restricted to non-pad queries and keys.
    pub fn causal_mask(&self) -> SoftmaxMask {
        let mut mask = SoftmaxMask {
            batch: self.batch,
            seq_q: self.seq,
            seq_k: self.seq,
            allowed: vec![false; self.batch * self.seq * self.seq],
        };
        for b in 0..self.batch {
            for q in 0..self.seq {
                if self.segment(b, q) == Segment::Pad {
                    continue;
                }
                for k in 0..=q {
                    if self.segment(b, k) != Segment::Pad {
                        mask.set(b, q, k, true);
                    }
                }
            }
        }
        mask
    }

    /// Checks a caller-supplied mask: shape agreement and, critically, that
    /// no query may attend a pad position.
    pub fn validate_mask(&self, mask: &SoftmaxMask) -> Result<()> {
        if mask.batch != self.batch || mask.seq_q != self.seq || mask.seq_k != self.seq {
            return Err(Error::Contract(format!(
                "mask shape ({}, {}, {}) does not match batch ({}, {}, {})",
                mask.batch, mask.seq_q, mask.seq_k, self.batch, self.seq, self.seq
            )));
        }
        for b in 0..self.batch {
            for k in 0..self.seq {
                if self.segment(b, k) == Segment::Pad {
                    for q in 0..self.seq {
                        if mask.is_allowed(b, q, k) {
                            return Err(Error::Contract(format!(
                                "mask permits attention to pad position (row {b}, query {q}, key {k})"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Expands a shared [seq, seq] boolean mask to every batch row.
    pub fn tile_shared_mask(&self, shared: &[bool]) -> Result<SoftmaxMask> {
        if shared.len() != self.seq * self.seq {
            return Err(Error::Contract(format!(
                "shared mask has {} entries, expected {}",
                shared.len(),
                self.seq * self.seq
            )));
        }
        let mut allowed = Vec::with_capacity(self.batch * self.seq * self.seq);
        for _ in 0..self.batch {
            allowed.extend_from_slice(shared);
        }
        Ok(SoftmaxMask { batch: self.batch, seq_q: self.seq, seq_k: self.seq, allowed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: usize, i: usize, r: usize) -> RowSpec {
        RowSpec {
            visual: (0..v as u32).collect(),
            instruction: (10..10 + i as u32).collect(),
            response: (20..20 + r as u32).collect(),
        }
    }

    #[test]
    fn builder_sets_segments_and_loss_mask() {
        let b = SequenceBatch::from_rows(&[row(2, 2, 3)]).unwrap();
        assert_eq!(b.seq, 7);
        assert_eq!(b.n_visual(0), 2);
        assert_eq!(b.n_instruction(0), 2);
        assert_eq!(b.n_response(0), 3);
        // Supervised: last instruction position (3) and response positions 4, 5.
        assert_eq!(b.supervised_positions(0), vec![3, 4, 5]);
    }

    #[test]
    fn padding_rows_to_common_length() {
        let b = SequenceBatch::from_rows(&[row(2, 1, 1), row(2, 2, 3)]).unwrap();
        assert_eq!(b.seq, 7);
        assert_eq!(b.row_len(0), 4);
        assert_eq!(b.row_len(1), 7);
        assert_eq!(b.segment(0, 5), Segment::Pad);
    }

    #[test]
    fn segment_order_violation_is_rejected() {
        let mut b = SequenceBatch::from_rows(&[row(2, 2, 2)]).unwrap();
        b.segments[0] = Segment::Response; // response before visual
        assert!(b.validate().is_err());
    }

    #[test]
    fn causal_mask_excludes_pads_and_future() {
        let b = SequenceBatch::from_rows(&[row(1, 1, 1), row(1, 1, 3)]).unwrap();
        let m = b.causal_mask();
        assert!(m.is_allowed(0, 2, 0));
        assert!(!m.is_allowed(0, 0, 2), "future key must be masked");
        // Pad keys of the short row are unattendable even causally.
        assert!(!m.is_allowed(0, 4, 3));
        b.validate_mask(&m).unwrap();
    }

    #[test]
    fn mask_allowing_pad_attention_fails_validation() {
        let b = SequenceBatch::from_rows(&[row(1, 1, 1), row(1, 1, 2)]).unwrap();
        let mut m = b.causal_mask();
        m.set(0, 3, 3, true); // position 3 of row 0 is pad
        assert!(b.validate_mask(&m).is_err());
    }
}
