//! Toy decoder-only transformer with per-layer attention capture and
//! pluggable attention masks.
//!
//! One shared transformer consumes visual, instruction, and response
//! segments over a common vocabulary; visual tokens come from a reserved
//! sub-range and go through the same embedding table as text tokens.
//! Positional encoding is a learned absolute embedding indexed by explicit
//! position ids, so augmented layouts can override positions.

pub mod batch;
pub mod checkpoint;

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, SoftmaxMask, Tape, Tensor, Var};

pub use batch::{RowSpec, Segment, SequenceBatch};

/// How per-head attention maps are combined when extracting the
/// instruction-to-vision sub-matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadAgg {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden_dim: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub head_agg: HeadAgg,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size {} < 4 (needs pad, bos, eos and content)",
                self.vocab_size
            )));
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.hidden_dim == 0 || self.max_seq_len == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Named parameter tensor.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Post-softmax attention weights captured during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub enabled_layers: BTreeSet<usize>,
    /// Per captured layer: [batch, heads, seq, seq].
    pub weights: BTreeMap<usize, Tensor>,
}

/// Result of a gradient-free forward pass.
pub struct ForwardOutput {
    /// [batch, seq, vocab].
    pub logits: Tensor,
    pub trace: AttentionTrace,
}

/// Result of a tape-recorded forward pass.
pub struct TracedForward {
    /// [batch * seq, vocab] on the tape.
    pub logits: Var,
    pub trace: AttentionTrace,
    /// Tape handles for every parameter, aligned with [`Model::params`]
    /// order. Populated only when the pass was trainable.
    pub param_vars: Vec<Var>,
}

pub struct Model {
    pub config: ModelConfig,
    params: Vec<Parameter>,
    forward_passes: AtomicU64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
            forward_passes: AtomicU64::new(self.forward_passes.load(Ordering::Relaxed)),
        }
    }
}

impl Model {
    /// Initializes parameters from the config seed: scaled normal
    /// (std 0.02) for weights and embeddings, zeros for biases, ones for
    /// layer-norm gains.
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = Rng::new(config.seed).stream("init");
        let d = config.hidden_dim;
        let v = config.vocab_size;
        let mut params = Vec::new();
        let weight = |name: &str, shape: Vec<usize>, rng: &mut Rng, params: &mut Vec<Parameter>| {
            params.push(Parameter { name: name.to_string(), tensor: Tensor::randn(shape, 0.02, rng) });
        };
        let zeros = |name: &str, shape: Vec<usize>, params: &mut Vec<Parameter>| {
            params.push(Parameter { name: name.to_string(), tensor: Tensor::zeros(shape) });
        };
        let ones = |name: &str, shape: Vec<usize>, params: &mut Vec<Parameter>| {
            params.push(Parameter { name: name.to_string(), tensor: Tensor::full(shape, 1.0) });
        };

        weight("tok_emb", vec![v, d], &mut rng, &mut params);
        weight("pos_emb", vec![config.max_seq_len, d], &mut rng, &mut params);
        for l in 0..config.n_layers {
            ones(&format!("layer{l}.ln1.gain"), vec![d], &mut params);
            zeros(&format!("layer{l}.ln1.bias"), vec![d], &mut params);
            for proj in ["wq", "wk", "wv", "wo"] {
                weight(&format!("layer{l}.attn.{proj}"), vec![d, d], &mut rng, &mut params);
                zeros(&format!("layer{l}.attn.{}", proj.replace('w', "b")), vec![d], &mut params);
            }
            ones(&format!("layer{l}.ln2.gain"), vec![d], &mut params);
            zeros(&format!("layer{l}.ln2.bias"), vec![d], &mut params);
            weight(&format!("layer{l}.mlp.w1"), vec![d, 4 * d], &mut rng, &mut params);
            zeros(&format!("layer{l}.mlp.b1"), vec![4 * d], &mut params);
            weight(&format!("layer{l}.mlp.w2"), vec![4 * d, d], &mut rng, &mut params);
            zeros(&format!("layer{l}.mlp.b2"), vec![d], &mut params);
        }
        ones("final.ln.gain", vec![d], &mut params);
        zeros("final.ln.bias", vec![d], &mut params);
        weight("unembed.w", vec![d, v], &mut rng, &mut params);
        zeros("unembed.b", vec![v], &mut params);

        Ok(Model { config, params, forward_passes: AtomicU64::new(0) })
    }

    pub fn from_parts(config: ModelConfig, params: Vec<Parameter>) -> Result<Model> {
        config.validate()?;
        Ok(Model { config, params, forward_passes: AtomicU64::new(0) })
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Total forward passes executed by this instance (training and
    /// evaluation alike). Harness code snapshots deltas around training
    /// steps to enforce the per-strategy accounting contract.
    pub fn forward_pass_count(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn reset_forward_pass_count(&self) {
        self.forward_passes.store(0, Ordering::Relaxed);
    }

    /// Gradient-free forward pass on a private tape.
    pub fn forward(
        &self,
        batch: &SequenceBatch,
        mask: Option<&SoftmaxMask>,
        capture: &BTreeSet<usize>,
    ) -> Result<ForwardOutput> {
        let tape = Tape::new();
        let traced = self.forward_on_tape(&tape, batch, mask, capture, false)?;
        let logits = tape
            .value(traced.logits)
            .reshaped(vec![batch.batch, batch.seq, self.config.vocab_size])?;
        Ok(ForwardOutput { logits, trace: traced.trace })
    }

    /// Forward pass recorded on `tape`. When `trainable`, parameters are
    /// registered as gradient leaves and reported in `param_vars`.
    pub fn forward_on_tape(
        &self,
        tape: &Tape,
        batch: &SequenceBatch,
        mask: Option<&SoftmaxMask>,
        capture: &BTreeSet<usize>,
        trainable: bool,
    ) -> Result<TracedForward> {
        batch.validate()?;
        let cfg = &self.config;
        if batch.seq > cfg.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq, cfg.max_seq_len
            )));
        }
        for &t in &batch.tokens {
            if t as usize >= cfg.vocab_size {
                return Err(Error::Contract(format!(
                    "token {t} outside vocabulary of size {}",
                    cfg.vocab_size
                )));
            }
        }
        for &p in &batch.position_ids {
            if p as usize >= cfg.max_seq_len {
                return Err(Error::Contract(format!(
                    "position id {p} outside max_seq_len {}",
                    cfg.max_seq_len
                )));
            }
        }
        for &l in capture {
            if l >= cfg.n_layers {
                return Err(Error::Contract(format!(
                    "capture layer {l} out of {} layers",
                    cfg.n_layers
                )));
            }
        }
        let mask = match mask {
            Some(m) => {
                batch.validate_mask(m)?;
                Rc::new(m.clone())
            }
            None => Rc::new(batch.causal_mask()),
        };

        self.forward_passes.fetch_add(1, Ordering::Relaxed);

        // Bind parameters and index them by name.
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let t = p.tensor.clone().requires_grad(trainable);
            vars.push(tape.leaf(t)?);
        }
        let by_name: BTreeMap<&str, Var> = self
            .params
            .iter()
            .zip(&vars)
            .map(|(p, v)| (p.name.as_str(), *v))
            .collect();
        let pv = |name: &str| -> Var { by_name[name] };

        let (b, s, d, h) = (batch.batch, batch.seq, cfg.hidden_dim, cfg.n_heads);
        let dh = d / h;

        let tok_rows: Vec<usize> = batch.tokens.iter().map(|&t| t as usize).collect();
        let pos_rows: Vec<usize> = batch.position_ids.iter().map(|&p| p as usize).collect();
        let tok = tape.gather_rows(pv("tok_emb"), tok_rows)?;
        let pos = tape.gather_rows(pv("pos_emb"), pos_rows)?;
        let mut x = tape.add(tok, pos)?; // [B*S, D]

        let mut trace = AttentionTrace::default();
        let scale = 1.0 / (dh as f64).sqrt();

        for l in 0..cfg.n_layers {
            let ln1 = tape.layer_norm(
                x,
                pv(&format!("layer{l}.ln1.gain")),
                pv(&format!("layer{l}.ln1.bias")),
            )?;
            let q = tape.add_bias(
                tape.linear(ln1, pv(&format!("layer{l}.attn.wq")))?,
                pv(&format!("layer{l}.attn.bq")),
            )?;
            let k = tape.add_bias(
                tape.linear(ln1, pv(&format!("layer{l}.attn.wk")))?,
                pv(&format!("layer{l}.attn.bk")),
            )?;
            let v = tape.add_bias(
                tape.linear(ln1, pv(&format!("layer{l}.attn.wv")))?,
                pv(&format!("layer{l}.attn.bv")),
            )?;
            let qh = tape.split_heads(q, b, s, h, dh)?;
            let kh = tape.split_heads(k, b, s, h, dh)?;
            let vh = tape.split_heads(v, b, s, h, dh)?;
            let scores = tape.scale(tape.bmm_nt(qh, kh)?, scale)?;
            let attn = tape.masked_softmax(scores, Rc::clone(&mask))?;
            if capture.contains(&l) {
                let captured = tape.value(attn);
                validate_captured_rows(&captured, &mask)?;
                trace.weights.insert(l, captured);
                trace.enabled_layers.insert(l);
            }
            let mixed = tape.bmm_nn(attn, vh)?;
            let merged = tape.merge_heads(mixed, b, s, h, dh)?;
            let out = tape.add_bias(
                tape.linear(merged, pv(&format!("layer{l}.attn.wo")))?,
                pv(&format!("layer{l}.attn.bo")),
            )?;
            x = tape.add(x, out)?;

            let ln2 = tape.layer_norm(
                x,
                pv(&format!("layer{l}.ln2.gain")),
                pv(&format!("layer{l}.ln2.bias")),
            )?;
            let m1 = tape.add_bias(
                tape.linear(ln2, pv(&format!("layer{l}.mlp.w1")))?,
                pv(&format!("layer{l}.mlp.b1")),
            )?;
            let act = tape.gelu(m1)?;
            let m2 = tape.add_bias(
                tape.linear(act, pv(&format!("layer{l}.mlp.w2")))?,
                pv(&format!("layer{l}.mlp.b2")),
            )?;
            x = tape.add(x, m2)?;
        }

        let xf = tape.layer_norm(x, pv("final.ln.gain"), pv("final.ln.bias"))?;
        let logits = tape.add_bias(tape.linear(xf, pv("unembed.w"))?, pv("unembed.b"))?;

        Ok(TracedForward {
            logits,
            trace,
            param_vars: if trainable { vars } else { Vec::new() },
        })
    }

    /// Instruction-to-vision attention sub-matrix using the configured
    /// head aggregation.
    pub fn extract_instruction_to_vision_attention(
        &self,
        trace: &AttentionTrace,
        batch: &SequenceBatch,
        layer: usize,
    ) -> Result<Tensor> {
        extract_instruction_to_vision_attention(trace, batch, layer, self.config.head_agg)
    }
}

/// Captured attention rows must be valid distributions over allowed keys
/// and exactly zero elsewhere.
fn validate_captured_rows(weights: &Tensor, mask: &SoftmaxMask) -> Result<()> {
    let (b, h, sq, sk) = (weights.shape[0], weights.shape[1], weights.shape[2], weights.shape[3]);
    for bi in 0..b {
        for hi in 0..h {
            for q in 0..sq {
                let base = ((bi * h + hi) * sq + q) * sk;
                let mut sum = 0.0;
                let mut any = false;
                for k in 0..sk {
                    let w = weights.data[base + k];
                    if mask.is_allowed(bi, q, k) {
                        any = true;
                        sum += w;
                    } else if w != 0.0 {
                        return Err(Error::Numeric(format!(
                            "attention weight {w} at masked position (b={bi}, h={hi}, q={q}, k={k})"
                        )));
                    }
                }
                if any && (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::Numeric(format!(
                        "attention row sums to {sum} (b={bi}, h={hi}, q={q})"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Extracts the head-aggregated instruction-to-vision attention sub-matrix
/// `[batch, n_instruction, n_visual]` from a captured layer. Entry (u, k)
/// is the attention from the u-th instruction position to the k-th visual
/// position. Batched extraction requires uniform segment sizes across rows.
pub fn extract_instruction_to_vision_attention(
    trace: &AttentionTrace,
    batch: &SequenceBatch,
    layer: usize,
    head_agg: HeadAgg,
) -> Result<Tensor> {
    let n_i = batch.n_instruction(0);
    let n_v = batch.n_visual(0);
    for b in 0..batch.batch {
        if batch.n_instruction(b) != n_i || batch.n_visual(b) != n_v {
            return Err(Error::Contract(
                "batched extraction requires uniform segment sizes across rows".into(),
            ));
        }
    }
    let mut out = vec![0.0; batch.batch * n_i * n_v];
    for b in 0..batch.batch {
        let row = extract_instruction_to_vision_attention_row(trace, batch, b, layer, head_agg)?;
        out[b * n_i * n_v..(b + 1) * n_i * n_v].copy_from_slice(&row.data);
    }
    Tensor::new(vec![batch.batch, n_i, n_v], out)
}

/// Single-row variant of the extraction; rows of a mixed batch may differ
/// in instruction length.
pub fn extract_instruction_to_vision_attention_row(
    trace: &AttentionTrace,
    batch: &SequenceBatch,
    b: usize,
    layer: usize,
    head_agg: HeadAgg,
) -> Result<Tensor> {
    if !trace.enabled_layers.contains(&layer) {
        return Err(Error::Contract(format!("layer {layer} was not captured")));
    }
    let weights = &trace.weights[&layer];
    let ipos = batch.segment_positions(b, Segment::Instruction);
    let vpos = batch.segment_positions(b, Segment::Visual);
    let (n_i, n_v) = (ipos.len(), vpos.len());
    if n_i == 0 || n_v == 0 {
        return Err(Error::Degenerate(format!(
            "need at least one visual and one instruction position (got {n_v}, {n_i})"
        )));
    }
    let h = weights.shape[1];
    let sq = weights.shape[2];
    let sk = weights.shape[3];
    let mut out = vec![0.0; n_i * n_v];
    for (u, &qp) in ipos.iter().enumerate() {
        for (k, &kp) in vpos.iter().enumerate() {
            let mut agg = match head_agg {
                HeadAgg::Mean => 0.0,
                HeadAgg::Max => f64::NEG_INFINITY,
            };
            for hi in 0..h {
                let w = weights.data[((b * h + hi) * sq + qp) * sk + kp];
                match head_agg {
                    HeadAgg::Mean => agg += w,
                    HeadAgg::Max => agg = agg.max(w),
                }
            }
            if head_agg == HeadAgg::Mean {
                agg /= h as f64;
            }
            out[u * n_v + k] = agg;
        }
    }
    Tensor::new(vec![n_i, n_v], out)
}
