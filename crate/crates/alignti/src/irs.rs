//! Instruction-relevance scoring and alignment-layer selection.
//!
//! A layer's score is one minus the expected cosine similarity between the
//! instruction-to-vision attention signatures of independently drawn input
//! pairs: layers whose visual focus varies with the input (rather than
//! being instruction-agnostic) score high, and the highest-scoring layer is
//! selected as the alignment source.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{extract_instruction_to_vision_attention, HeadAgg, Model};
use crate::numerics::Rng;
use crate::synthdata::{to_batch, DatasetRecord};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IrsReport {
    pub per_layer_score: Vec<f64>,
    pub n_pairs_used: usize,
    pub selected_layer: usize,
    pub aggregation_mode: String,
    pub seed: u64,
}

/// Attention signature of one record at one layer: for each visual token k,
/// the head-aggregated attention it receives, averaged over instruction
/// positions. Length equals the record's visual-token count.
pub fn attention_signature(model: &Model, record: &DatasetRecord, layer: usize) -> Result<Vec<f64>> {
    let batch = to_batch(&[record])?;
    let capture: BTreeSet<usize> = [layer].into_iter().collect();
    let out = model.forward(&batch, None, &capture)?;
    let a = extract_instruction_to_vision_attention(&out.trace, &batch, layer, model.config.head_agg)?;
    signature_from_submatrix(&a.data, batch.n_instruction(0), batch.n_visual(0))
}

/// Averages an [n_i, n_v] sub-matrix over instruction positions.
pub fn signature_from_submatrix(a: &[f64], n_i: usize, n_v: usize) -> Result<Vec<f64>> {
    let mut alpha = vec![0.0; n_v];
    for u in 0..n_i {
        for k in 0..n_v {
            alpha[k] += a[u * n_v + k];
        }
    }
    for v in alpha.iter_mut() {
        *v /= n_i as f64;
    }
    if alpha.iter().all(|&x| x == 0.0) {
        return Err(Error::Degenerate(
            "attention signature is identically zero (mask excluded every visual key?)".into(),
        ));
    }
    Ok(alpha)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Index pairs used by the estimator. When `n_pairs` covers every distinct
/// pair the enumeration is exhaustive (each pair exactly once per cycle);
/// otherwise pairs are drawn independently with replacement.
pub fn sample_pairs(n_records: usize, n_pairs: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if n_records < 2 {
        return Err(Error::Contract(format!("need at least 2 records, got {n_records}")));
    }
    if n_pairs == 0 {
        return Err(Error::Contract("n_pairs must be positive".into()));
    }
    let total = n_records * (n_records - 1) / 2;
    let mut out = Vec::with_capacity(n_pairs);
    if n_pairs >= total {
        'outer: loop {
            for i in 0..n_records {
                for j in (i + 1)..n_records {
                    out.push((i, j));
                    if out.len() == n_pairs {
                        break 'outer;
                    }
                }
            }
        }
    } else {
        let mut rng = Rng::new(seed).stream("irs-pairs");
        while out.len() < n_pairs {
            let i = rng.below(n_records);
            let j = rng.below(n_records);
            if i != j {
                out.push((i.min(j), i.max(j)));
            }
        }
    }
    Ok(out)
}

/// Core estimator: 1 - mean cosine similarity over sampled signature pairs.
pub fn compute_irs_from_signatures(
    signatures: &[Vec<f64>],
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if signatures.len() < 2 {
        return Err(Error::Contract("need at least 2 signatures".into()));
    }
    let len = signatures[0].len();
    for (i, s) in signatures.iter().enumerate() {
        if s.len() != len {
            return Err(Error::Contract(format!(
                "signature {i} has length {} (expected {len}); records must share grid size",
                s.len()
            )));
        }
    }
    let pairs = sample_pairs(signatures.len(), n_pairs, seed)?;
    let mut sum = 0.0;
    for &(i, j) in &pairs {
        sum += cosine(&signatures[i], &signatures[j])?;
    }
    Ok(1.0 - sum / pairs.len() as f64)
}

/// Instruction-relevance score of one layer over a record set.
pub fn compute_irs(
    model: &Model,
    records: &[DatasetRecord],
    layer: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    ensure_distinct_inputs(records)?;
    let signatures: Vec<Vec<f64>> = records
        .iter()
        .map(|r| attention_signature(model, r, layer))
        .collect::<Result<_>>()?;
    compute_irs_from_signatures(&signatures, n_pairs, seed)
}

/// Scores every layer (one captured forward per record) and selects the
/// alignment layer.
pub fn compute_irs_report(
    model: &Model,
    records: &[DatasetRecord],
    n_pairs: usize,
    seed: u64,
) -> Result<IrsReport> {
    ensure_distinct_inputs(records)?;
    let n_layers = model.config.n_layers;
    let capture: BTreeSet<usize> = (0..n_layers).collect();
    // signatures[layer][record]
    let mut signatures: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(records.len()); n_layers];
    for r in records {
        let batch = to_batch(&[r])?;
        let out = model.forward(&batch, None, &capture)?;
        for layer in 0..n_layers {
            let a = extract_instruction_to_vision_attention(
                &out.trace,
                &batch,
                layer,
                model.config.head_agg,
            )?;
            signatures[layer].push(signature_from_submatrix(
                &a.data,
                batch.n_instruction(0),
                batch.n_visual(0),
            )?);
        }
    }
    let per_layer_score: Vec<f64> = signatures
        .iter()
        .map(|sigs| compute_irs_from_signatures(sigs, n_pairs, seed))
        .collect::<Result<_>>()?;
    let report = IrsReport {
        selected_layer: argmax_deeper(&per_layer_score)?,
        per_layer_score,
        n_pairs_used: n_pairs,
        aggregation_mode: match model.config.head_agg {
            HeadAgg::Mean => "mean-over-heads-and-instruction".to_string(),
            HeadAgg::Max => "max-over-heads-mean-over-instruction".to_string(),
        },
        seed,
    };
    Ok(report)
}

/// Alignment layer choice: argmax score, ties broken toward the deeper layer.
pub fn select_layer(report: &IrsReport) -> usize {
    report.selected_layer
}

fn argmax_deeper(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Contract("empty score vector".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite layer score".into()));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s >= scores[best] {
            best = i;
        }
    }
    Ok(best)
}

fn ensure_distinct_inputs(records: &[DatasetRecord]) -> Result<()> {
    if records.len() < 2 {
        return Err(Error::Contract(format!(
            "IRS needs at least 2 records, got {}",
            records.len()
        )));
    }
    let first = (&records[0].visual_tokens, &records[0].instruction_tokens);
    if records
        .iter()
        .all(|r| (&r.visual_tokens, &r.instruction_tokens) == first)
    {
        return Err(Error::Contract("IRS needs at least 2 distinct inputs".into()));
    }
    Ok(())
}
