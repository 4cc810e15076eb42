//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records primitive operations in topological order; every
//! node's parents precede it, so one reverse sweep propagates gradients and
//! visits each node exactly once. Backward order is fixed by construction
//! order, which makes gradients bitwise reproducible across runs.
//!
//! The op set is exactly what a small decoder-only transformer and the
//! distillation losses need; there is no general broadcasting.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Boolean attention mask shared by every head: entry `(b, q, k)` says
/// whether query position `q` of batch row `b` may attend key position `k`.
#[derive(Debug, Clone)]
pub struct SoftmaxMask {
    pub batch: usize,
    pub seq_q: usize,
    pub seq_k: usize,
    pub allowed: Vec<bool>,
}

impl SoftmaxMask {
    pub fn all_allowed(batch: usize, seq: usize) -> Self {
        SoftmaxMask { batch, seq_q: seq, seq_k: seq, allowed: vec![true; batch * seq * seq] }
    }

    #[inline]
    pub fn is_allowed(&self, b: usize, q: usize, k: usize) -> bool {
        self.allowed[(b * self.seq_q + q) * self.seq_k + k]
    }

    pub fn set(&mut self, b: usize, q: usize, k: usize, value: bool) {
        self.allowed[(b * self.seq_q + q) * self.seq_k + k] = value;
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var },
    /// x viewed as [M, K] times w [K, N].
    Linear { x: Var, w: Var },
    /// Per-slice a[g] @ b[g]^T for a [G,S1,K], b [G,S2,K] -> [G,S1,S2].
    BmmNt { a: Var, b: Var },
    /// Per-slice a[g] @ b[g] for a [G,S1,S2], b [G,S2,K] -> [G,S1,K].
    BmmNn { a: Var, b: Var },
    /// Row gather: out[r] = src[rows[r]] with src viewed as [*, width].
    GatherRows { src: Var, rows: Rc<Vec<usize>> },
    /// [B*S, D] -> [B, H, S, Dh] index permutation.
    SplitHeads { x: Var, b: usize, s: usize, h: usize, dh: usize },
    /// [B, H, S, Dh] -> [B*S, D] inverse permutation.
    MergeHeads { x: Var, b: usize, s: usize, h: usize, dh: usize },
    LayerNorm { x: Var, gain: Var, bias: Var },
    Gelu(Var),
    /// Softmax over the key axis restricted to mask-allowed entries; rows
    /// with no allowed key produce all zeros.
    MaskedSoftmax { scores: Var, mask: Rc<SoftmaxMask> },
    /// Row-wise KL(softmax(p) || softmax(q)) from logits: [R,V] x [R,V] -> [R].
    KlRows { p: Var, q: Var },
    /// Row-wise negative log-likelihood from logits: [R,V] -> [R].
    NllRows { logits: Var, targets: Rc<Vec<usize>> },
    /// Weighted sum with constant weights: [R] -> scalar.
    DotConst { x: Var, weights: Rc<Vec<f64>> },
    /// Sum of scalars.
    SumVars(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Op-specific cache (layernorm keeps per-row mean and 1/std).
    aux: Vec<f64>,
}

/// Records primitive operations for one backward pass. Confined to a single
/// worker; create one tape per forward/backward step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Per-node gradient buffers produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `shape`, zeros if absent.
    pub fn tensor(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => Tensor { shape: shape.to_vec(), data: g.to_vec(), requires_grad: false, grad: None },
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an input tensor. Gradients flow into it iff
    /// `tensor.requires_grad` is set.
    pub fn leaf(&self, tensor: Tensor) -> Result<Var> {
        tensor.check_finite("leaf")?;
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs, Vec::new())
    }

    pub fn constant(&self, tensor: Tensor) -> Result<Var> {
        tensor.check_finite("constant")?;
        self.push(tensor, Op::Leaf, false, Vec::new())
    }

    pub fn scalar_const(&self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Reads a node's value without cloning.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool, aux: Vec<f64>) -> Result<Var> {
        value.check_finite("op output")?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad, aux });
        Ok(Var(nodes.len() - 1))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape != tb.shape {
                return Err(Error::Contract(format!("add: shapes {:?} vs {:?}", ta.shape, tb.shape)));
            }
            let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
            (
                Tensor { shape: ta.shape.clone(), data, requires_grad: false, grad: None },
                nodes[a.0].needs_grad || nodes[b.0].needs_grad,
            )
        };
        self.push(value, Op::Add(a, b), needs, Vec::new())
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape != tb.shape {
                return Err(Error::Contract(format!("sub: shapes {:?} vs {:?}", ta.shape, tb.shape)));
            }
            let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
            (
                Tensor { shape: ta.shape.clone(), data, requires_grad: false, grad: None },
                nodes[a.0].needs_grad || nodes[b.0].needs_grad,
            )
        };
        self.push(value, Op::Sub(a, b), needs, Vec::new())
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape != tb.shape {
                return Err(Error::Contract(format!("mul: shapes {:?} vs {:?}", ta.shape, tb.shape)));
            }
            let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
            (
                Tensor { shape: ta.shape.clone(), data, requires_grad: false, grad: None },
                nodes[a.0].needs_grad || nodes[b.0].needs_grad,
            )
        };
        self.push(value, Op::Mul(a, b), needs, Vec::new())
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let data = ta.data.iter().map(|x| x * c).collect();
            (
                Tensor { shape: ta.shape.clone(), data, requires_grad: false, grad: None },
                nodes[a.0].needs_grad,
            )
        };
        self.push(value, Op::Scale(a, c), needs, Vec::new())
    }

    /// Adds a [D] bias to every trailing-axis row of `x`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let (tx, tb) = (&nodes[x.0].value, &nodes[bias.0].value);
            let d = tb.numel();
            if tx.last_dim() != d || tb.shape.len() != 1 {
                return Err(Error::Contract(format!(
                    "add_bias: x {:?} bias {:?}",
                    tx.shape, tb.shape
                )));
            }
            let mut data = tx.data.clone();
            for (i, v) in data.iter_mut().enumerate() {
                *v += tb.data[i % d];
            }
            (
                Tensor { shape: tx.shape.clone(), data, requires_grad: false, grad: None },
                nodes[x.0].needs_grad || nodes[bias.0].needs_grad,
            )
        };
        self.push(value, Op::AddBias { x, bias }, needs, Vec::new())
    }

    /// Matrix product of `x` (viewed as [M, K]) with `w` [K, N]. The output
    /// keeps `x`'s leading shape with the trailing axis replaced by N.
    pub fn linear(&self, x: Var, w: Var) -> Result<Var> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let k = tx.last_dim();
            if tw.shape.len() != 2 || tw.shape[0] != k {
                return Err(Error::Contract(format!(
                    "linear: x {:?} w {:?}",
                    tx.shape, tw.shape
                )));
            }
            let n = tw.shape[1];
            let m = tx.numel() / k;
            let mut out = vec![0.0; m * n];
            matmul_into(&tx.data, &tw.data, &mut out, m, k, n, false, false);
            let mut shape = tx.shape.clone();
            *shape.last_mut().unwrap() = n;
            (
                Tensor { shape, data: out, requires_grad: false, grad: None },
                nodes[x.0].needs_grad || nodes[w.0].needs_grad,
            )
        };
        self.push(value, Op::Linear { x, w }, needs, Vec::new())
    }

    /// Per-slice `a[g] @ b[g]^T` with shapes [G,S1,K] x [G,S2,K] -> [G,S1,S2].
    pub fn bmm_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (g, s1, k) = flat3(&ta.shape)?;
            let (gb, s2, kb) = flat3(&tb.shape)?;
            if g != gb || k != kb {
                return Err(Error::Contract(format!(
                    "bmm_nt: a {:?} b {:?}",
                    ta.shape, tb.shape
                )));
            }
            let mut out = vec![0.0; g * s1 * s2];
            for gi in 0..g {
                matmul_into(
                    &ta.data[gi * s1 * k..(gi + 1) * s1 * k],
                    &tb.data[gi * s2 * k..(gi + 1) * s2 * k],
                    &mut out[gi * s1 * s2..(gi + 1) * s1 * s2],
                    s1,
                    k,
                    s2,
                    false,
                    true,
                );
            }
            let mut shape = ta.shape.clone();
            let last = shape.len() - 1;
            shape[last] = s2;
            (
                Tensor { shape, data: out, requires_grad: false, grad: None },
                nodes[a.0].needs_grad || nodes[b.0].needs_grad,
            )
        };
        self.push(value, Op::BmmNt { a, b }, needs, Vec::new())
    }

    /// Per-slice `a[g] @ b[g]` with shapes [G,S1,S2] x [G,S2,K] -> [G,S1,K].
    pub fn bmm_nn(&self, a: Var, b: Var) -> Result<Var> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (g, s1, s2) = flat3(&ta.shape)?;
            let (gb, s2b, k) = flat3(&tb.shape)?;
            if g != gb || s2 != s2b {
                return Err(Error::Contract(format!(
                    "bmm_nn: a {:?} b {:?}",
                    ta.shape, tb.shape
                )));
            }
            let mut out = vec![0.0; g * s1 * k];
            for gi in 0..g {
                matmul_into(
                    &ta.data[gi * s1 * s2..(gi + 1) * s1 * s2],
                    &tb.data[gi * s2 * k..(gi + 1) * s2 * k],
                    &mut out[gi * s1 * k..(gi + 1) * s1 * k],
                    s1,
                    s2,
                    k,
                    false,
                    false,
                );
            }
            let mut shape = ta.shape.clone();
            let last = shape.len() - 1;
            shape[last] = k;
            (
                Tensor { shape, data: out, requires_grad: false, grad: None },
                nodes[a.0].needs_grad || nodes[b.0].needs_grad,
            )
        };
        self.push(value, Op::BmmNn { a, b }, needs, Vec::new())
    }

    /// Gathers rows of `src` (viewed as [*, width]): out[r] = src[rows[r]].
    pub fn gather_rows(&self, src: Var, rows: Vec<usize>) -> Result<Var> {
        let rows = Rc::new(rows);
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let ts = &nodes[src.0].value;
            let width = ts.last_dim();
            let n_rows = ts.numel() / width;
            let mut data = Vec::with_capacity(rows.len() * width);
            for &r in rows.iter() {
                if r >= n_rows {
                    return Err(Error::Contract(format!(
                        "gather_rows: row {r} out of {n_rows}"
                    )));
                }
                data.extend_from_slice(&ts.data[r * width..(r + 1) * width]);
            }
            (
                Tensor { shape: vec![rows.len(), width], data, requires_grad: false, grad: None },
                nodes[src.0].needs_grad,
            )
        };
        self.push(value, Op::GatherRows { src, rows }, needs, Vec::new())
    }

    /// Rearranges [B*S, H*Dh] into head-major [B, H, S, Dh].
    pub fn split_heads(&self, x: Var, b: usize, s: usize, h: usize, dh: usize) -> Result<Var> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            if tx.numel() != b * s * h * dh {
                return Err(Error::Contract(format!(
                    "split_heads: {:?} vs ({b},{s},{h},{dh})",
                    tx.shape
                )));
            }
            let d = h * dh;
            let mut data = vec![0.0; tx.numel()];
            for bi in 0..b {
                for hi in 0..h {
                    for si in 0..s {
                        let src = (bi * s + si) * d + hi * dh;
                        let dst = ((bi * h + hi) * s + si) * dh;
                        data[dst..dst + dh].copy_from_slice(&tx.data[src..src + dh]);
                    }
                }
            }
            (
                Tensor { shape: vec![b, h, s, dh], data, requires_grad: false, grad: None },
                nodes[x.0].needs_grad,
            )
        };
        self.push(value, Op::SplitHeads { x, b, s, h, dh }, needs, Vec::new())
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&self, x: Var, b: usize, s: usize, h: usize, dh: usize) -> Result<Var> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            if tx.numel() != b * s * h * dh {
                return Err(Error::Contract(format!(
                    "merge_heads: {:?} vs ({b},{s},{h},{dh})",
                    tx.shape
                )));
            }
            let d = h * dh;
            let mut data = vec![0.0; tx.numel()];
            for bi in 0..b {
                for hi in 0..h {
                    for si in 0..s {
                        let src = ((bi * h + hi) * s + si) * dh;
                        let dst = (bi * s + si) * d + hi * dh;
                        data[dst..dst + dh].copy_from_slice(&tx.data[src..src + dh]);
                    }
                }
            }
            (
                Tensor { shape: vec![b * s, d], data, requires_grad: false, grad: None },
                nodes[x.0].needs_grad,
            )
        };
        self.push(value, Op::MergeHeads { x, b, s, h, dh }, needs, Vec::new())
    }

    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (value, needs, aux) = {
            let nodes = self.nodes.borrow();
            let (tx, tg, tb) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            let d = tx.last_dim();
            if tg.numel() != d || tb.numel() != d {
                return Err(Error::Contract(format!(
                    "layer_norm: x {:?} gain {:?} bias {:?}",
                    tx.shape, tg.shape, tb.shape
                )));
            }
            let rows = tx.numel() / d;
            let mut data = vec![0.0; tx.numel()];
            let mut aux = Vec::with_capacity(rows * 2);
            for r in 0..rows {
                let row = &tx.data[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + EPS).sqrt();
                for i in 0..d {
                    let xhat = (row[i] - mean) * rstd;
                    data[r * d + i] = tg.data[i] * xhat + tb.data[i];
                }
                aux.push(mean);
                aux.push(rstd);
            }
            (
                Tensor { shape: tx.shape.clone(), data, requires_grad: false, grad: None },
                nodes[x.0].needs_grad || nodes[gain.0].needs_grad || nodes[bias.0].needs_grad,
                aux,
            )
        };
        self.push(value, Op::LayerNorm { x, gain, bias }, needs, aux)
    }

    pub fn gelu(&self, x: Var) -> Result<Var> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let data = tx.data.iter().map(|&v| gelu_fwd(v)).collect();
            (
                Tensor { shape: tx.shape.clone(), data, requires_grad: false, grad: None },
                nodes[x.0].needs_grad,
            )
        };
        self.push(value, Op::Gelu(x), needs, Vec::new())
    }

    /// Softmax over the last axis of [B, H, Sq, Sk] scores, restricted to
    /// mask-allowed keys. Disallowed entries are exactly zero; a query row
    /// with no allowed key yields an all-zero row.
    pub fn masked_softmax(&self, scores: Var, mask: Rc<SoftmaxMask>) -> Result<Var> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let ts = &nodes[scores.0].value;
            if ts.shape.len() != 4 {
                return Err(Error::Contract(format!("masked_softmax: scores {:?}", ts.shape)));
            }
            let (b, h, sq, sk) = (ts.shape[0], ts.shape[1], ts.shape[2], ts.shape[3]);
            if mask.batch != b || mask.seq_q != sq || mask.seq_k != sk {
                return Err(Error::Contract(format!(
                    "masked_softmax: mask ({},{},{}) vs scores ({b},{sq},{sk})",
                    mask.batch, mask.seq_q, mask.seq_k
                )));
            }
            let mut data = vec![0.0; ts.numel()];
            for bi in 0..b {
                for hi in 0..h {
                    for q in 0..sq {
                        let base = ((bi * h + hi) * sq + q) * sk;
                        let mut max = f64::NEG_INFINITY;
                        for k in 0..sk {
                            if mask.is_allowed(bi, q, k) {
                                max = max.max(ts.data[base + k]);
                            }
                        }
                        if max == f64::NEG_INFINITY {
                            continue; // no allowed key: leave the row zero
                        }
                        let mut sum = 0.0;
                        for k in 0..sk {
                            if mask.is_allowed(bi, q, k) {
                                let e = (ts.data[base + k] - max).exp();
                                data[base + k] = e;
                                sum += e;
                            }
                        }
                        for k in 0..sk {
                            data[base + k] /= sum;
                        }
                    }
                }
            }
            (
                Tensor { shape: ts.shape.clone(), data, requires_grad: false, grad: None },
                nodes[scores.0].needs_grad,
            )
        };
        self.push(value, Op::MaskedSoftmax { scores, mask }, needs, Vec::new())
    }

    /// Per-row forward KL divergence from logits: KL(softmax(p) || softmax(q)).
    /// Differentiable with respect to both argument sets.
    pub fn kl_rows(&self, p: Var, q: Var) -> Result<Var> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let (tp, tq) = (&nodes[p.0].value, &nodes[q.0].value);
            if tp.shape != tq.shape {
                return Err(Error::Contract(format!(
                    "kl_rows: shapes {:?} vs {:?}",
                    tp.shape, tq.shape
                )));
            }
            let v = tp.last_dim();
            if v == 0 {
                return Err(Error::Contract("kl_rows: empty vocabulary axis".into()));
            }
            let rows = tp.numel() / v;
            let mut data = Vec::with_capacity(rows);
            for r in 0..rows {
                let lp = log_softmax_row(&tp.data[r * v..(r + 1) * v]);
                let lq = log_softmax_row(&tq.data[r * v..(r + 1) * v]);
                let kl: f64 = lp
                    .iter()
                    .zip(&lq)
                    .map(|(&a, &b)| a.exp() * (a - b))
                    .sum();
                data.push(kl);
            }
            (
                Tensor { shape: vec![rows], data, requires_grad: false, grad: None },
                nodes[p.0].needs_grad || nodes[q.0].needs_grad,
            )
        };
        self.push(value, Op::KlRows { p, q }, needs, Vec::new())
    }

    /// Per-row negative log-likelihood of `targets` under softmax(logits).
    pub fn nll_rows(&self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let targets = Rc::new(targets);
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let tl = &nodes[logits.0].value;
            let v = tl.last_dim();
            let rows = tl.numel() / v;
            if targets.len() != rows {
                return Err(Error::Contract(format!(
                    "nll_rows: {} targets for {} rows",
                    targets.len(),
                    rows
                )));
            }
            let mut data = Vec::with_capacity(rows);
            for r in 0..rows {
                let t = targets[r];
                if t >= v {
                    return Err(Error::Contract(format!("nll_rows: target {t} out of {v}")));
                }
                let lp = log_softmax_row(&tl.data[r * v..(r + 1) * v]);
                data.push(-lp[t]);
            }
            (
                Tensor { shape: vec![rows], data, requires_grad: false, grad: None },
                nodes[logits.0].needs_grad,
            )
        };
        self.push(value, Op::NllRows { logits, targets }, needs, Vec::new())
    }

    /// Scalar-valued weighted sum of a vector with constant weights.
    pub fn dot_const(&self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let weights = Rc::new(weights);
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            if tx.numel() != weights.len() {
                return Err(Error::Contract(format!(
                    "dot_const: {} elements vs {} weights",
                    tx.numel(),
                    weights.len()
                )));
            }
            let s: f64 = tx.data.iter().zip(weights.iter()).map(|(a, b)| a * b).sum();
            (Tensor::scalar(s), nodes[x.0].needs_grad)
        };
        self.push(value, Op::DotConst { x, weights }, needs, Vec::new())
    }

    /// Arithmetic mean of a vector as a scalar.
    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = {
            let nodes = self.nodes.borrow();
            nodes[x.0].value.numel()
        };
        if n == 0 {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        self.dot_const(x, vec![1.0 / n as f64; n])
    }

    /// Sum of scalar vars.
    pub fn sum_scalars(&self, terms: Vec<Var>) -> Result<Var> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let mut s = 0.0;
            let mut needs = false;
            for t in &terms {
                let tv = &nodes[t.0].value;
                if tv.numel() != 1 {
                    return Err(Error::Contract("sum_scalars: non-scalar term".into()));
                }
                s += tv.data[0];
                needs |= nodes[t.0].needs_grad;
            }
            (Tensor::scalar(s), needs)
        };
        self.push(value, Op::SumVars(terms), needs, Vec::new())
    }

    /// Reverse sweep from a scalar loss. Returns one gradient buffer per
    /// node that participates in the differentiable subgraph.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract("backward: loss must be scalar".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !nodes[i].needs_grad || grads[i].is_none() {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.propagate(&nodes, i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        nodes: &[Node],
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let ensure = |grads: &mut [Option<Vec<f64>>], v: Var, len: usize| {
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; len]);
            }
        };
        let numel = |v: Var| nodes[v.0].value.numel();
        let needs = |v: Var| nodes[v.0].needs_grad;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if needs(v) {
                        ensure(grads, v, numel(v));
                        let gv = grads[v.0].as_mut().unwrap();
                        for (dst, src) in gv.iter_mut().zip(g) {
                            *dst += sign * src;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if needs(v) {
                        ensure(grads, v, numel(v));
                        let gv = grads[v.0].as_mut().unwrap();
                        for (dst, src) in gv.iter_mut().zip(g) {
                            *dst += sign * src;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    ensure(grads, *a, numel(*a));
                    let bv = &nodes[b.0].value.data;
                    let ga = grads[a.0].as_mut().unwrap();
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                }
                if needs(*b) {
                    ensure(grads, *b, numel(*b));
                    let av = &nodes[a.0].value.data;
                    let gb = grads[b.0].as_mut().unwrap();
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    ensure(grads, *a, numel(*a));
                    let ga = grads[a.0].as_mut().unwrap();
                    for k in 0..g.len() {
                        ga[k] += g[k] * c;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if needs(*x) {
                    ensure(grads, *x, numel(*x));
                    let gx = grads[x.0].as_mut().unwrap();
                    for k in 0..g.len() {
                        gx[k] += g[k];
                    }
                }
                if needs(*bias) {
                    let d = numel(*bias);
                    ensure(grads, *bias, d);
                    let gb = grads[bias.0].as_mut().unwrap();
                    for (k, val) in g.iter().enumerate() {
                        gb[k % d] += val;
                    }
                }
            }
            Op::Linear { x, w } => {
                let tx = &nodes[x.0].value;
                let tw = &nodes[w.0].value;
                let k = tx.last_dim();
                let m = tx.numel() / k;
                let n = tw.shape[1];
                if needs(*x) {
                    ensure(grads, *x, numel(*x));
                    let gx = grads[x.0].as_mut().unwrap();
                    // dX += G @ W^T
                    matmul_into(g, &tw.data, gx, m, n, k, false, true);
                }
                if needs(*w) {
                    ensure(grads, *w, numel(*w));
                    let gw = grads[w.0].as_mut().unwrap();
                    // dW += X^T @ G
                    matmul_into(&tx.data, g, gw, k, m, n, true, false);
                }
            }
            Op::BmmNt { a, b } => {
                let ta = &nodes[a.0].value;
                let tb = &nodes[b.0].value;
                let (gn, s1, k) = flat3(&ta.shape)?;
                let (_, s2, _) = flat3(&tb.shape)?;
                if needs(*a) {
                    ensure(grads, *a, numel(*a));
                    let ga = grads[a.0].as_mut().unwrap();
                    for gi in 0..gn {
                        // dA[g] += G[g] @ B[g]
                        matmul_into(
                            &g[gi * s1 * s2..(gi + 1) * s1 * s2],
                            &tb.data[gi * s2 * k..(gi + 1) * s2 * k],
                            &mut ga[gi * s1 * k..(gi + 1) * s1 * k],
                            s1,
                            s2,
                            k,
                            false,
                            false,
                        );
                    }
                }
                if needs(*b) {
                    ensure(grads, *b, numel(*b));
                    let gb = grads[b.0].as_mut().unwrap();
                    for gi in 0..gn {
                        // dB[g] += G[g]^T @ A[g]
                        matmul_into(
                            &g[gi * s1 * s2..(gi + 1) * s1 * s2],
                            &ta.data[gi * s1 * k..(gi + 1) * s1 * k],
                            &mut gb[gi * s2 * k..(gi + 1) * s2 * k],
                            s2,
                            s1,
                            k,
                            true,
                            false,
                        );
                    }
                }
            }
            Op::BmmNn { a, b } => {
                let ta = &nodes[a.0].value;
                let tb = &nodes[b.0].value;
                let (gn, s1, s2) = flat3(&ta.shape)?;
                let (_, _, k) = flat3(&tb.shape)?;
                if needs(*a) {
                    ensure(grads, *a, numel(*a));
                    let ga = grads[a.0].as_mut().unwrap();
                    for gi in 0..gn {
                        // dA[g] += G[g] @ B[g]^T
                        matmul_into(
                            &g[gi * s1 * k..(gi + 1) * s1 * k],
                            &tb.data[gi * s2 * k..(gi + 1) * s2 * k],
                            &mut ga[gi * s1 * s2..(gi + 1) * s1 * s2],
                            s1,
                            k,
                            s2,
                            false,
                            true,
                        );
                    }
                }
                if needs(*b) {
                    ensure(grads, *b, numel(*b));
                    let gb = grads[b.0].as_mut().unwrap();
                    for gi in 0..gn {
                        // dB[g] += A[g]^T @ G[g]
                        matmul_into(
                            &ta.data[gi * s1 * s2..(gi + 1) * s1 * s2],
                            &g[gi * s1 * k..(gi + 1) * s1 * k],
                            &mut gb[gi * s2 * k..(gi + 1) * s2 * k],
                            s2,
                            s1,
                            k,
                            true,
                            false,
                        );
                    }
                }
            }
            Op::GatherRows { src, rows } => {
                if needs(*src) {
                    let ts = &nodes[src.0].value;
                    let width = ts.last_dim();
                    ensure(grads, *src, ts.numel());
                    let gs = grads[src.0].as_mut().unwrap();
                    for (r, &row) in rows.iter().enumerate() {
                        for c in 0..width {
                            gs[row * width + c] += g[r * width + c];
                        }
                    }
                }
            }
            Op::SplitHeads { x, b, s, h, dh } => {
                if needs(*x) {
                    ensure(grads, *x, numel(*x));
                    let gx = grads[x.0].as_mut().unwrap();
                    let d = h * dh;
                    for bi in 0..*b {
                        for hi in 0..*h {
                            for si in 0..*s {
                                let dst = (bi * s + si) * d + hi * dh;
                                let src = ((bi * h + hi) * s + si) * dh;
                                for c in 0..*dh {
                                    gx[dst + c] += g[src + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, b, s, h, dh } => {
                if needs(*x) {
                    ensure(grads, *x, numel(*x));
                    let gx = grads[x.0].as_mut().unwrap();
                    let d = h * dh;
                    for bi in 0..*b {
                        for hi in 0..*h {
                            for si in 0..*s {
                                let src = (bi * s + si) * d + hi * dh;
                                let dst = ((bi * h + hi) * s + si) * dh;
                                for c in 0..*dh {
                                    gx[dst + c] += g[src + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let tx = &nodes[x.0].value;
                let tg = &nodes[gain.0].value;
                let d = tx.last_dim();
                let rows = tx.numel() / d;
                let aux = &nodes[i].aux;
                if needs(*gain) {
                    ensure(grads, *gain, d);
                }
                if needs(*bias) {
                    ensure(grads, *bias, d);
                }
                if needs(*x) {
                    ensure(grads, *x, tx.numel());
                }
                for r in 0..rows {
                    let mean = aux[2 * r];
                    let rstd = aux[2 * r + 1];
                    let row = &tx.data[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    if needs(*gain) {
                        let gg = grads[gain.0].as_mut().unwrap();
                        for c in 0..d {
                            gg[c] += grow[c] * (row[c] - mean) * rstd;
                        }
                    }
                    if needs(*bias) {
                        let gb = grads[bias.0].as_mut().unwrap();
                        for c in 0..d {
                            gb[c] += grow[c];
                        }
                    }
                    if needs(*x) {
                        // dxhat = g * gain; dx via the standard two-reduction form.
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in 0..d {
                            let xhat = (row[c] - mean) * rstd;
                            let dxhat = grow[c] * tg.data[c];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let gx = grads[x.0].as_mut().unwrap();
                        let inv_d = 1.0 / d as f64;
                        for c in 0..d {
                            let xhat = (row[c] - mean) * rstd;
                            let dxhat = grow[c] * tg.data[c];
                            gx[r * d + c] +=
                                rstd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if needs(*x) {
                    ensure(grads, *x, numel(*x));
                    let tx = &nodes[x.0].value;
                    let gx = grads[x.0].as_mut().unwrap();
                    for k in 0..g.len() {
                        gx[k] += g[k] * gelu_bwd(tx.data[k]);
                    }
                }
            }
            Op::MaskedSoftmax { scores, mask } => {
                if needs(*scores) {
                    ensure(grads, *scores, numel(*scores));
                    let ty = &nodes[i].value; // softmax output
                    let shape = &ty.shape;
                    let (b, h, sq, sk) = (shape[0], shape[1], shape[2], shape[3]);
                    let gs = grads[scores.0].as_mut().unwrap();
                    for bi in 0..b {
                        for hi in 0..h {
                            for q in 0..sq {
                                let base = ((bi * h + hi) * sq + q) * sk;
                                let mut dot = 0.0;
                                for k in 0..sk {
                                    dot += ty.data[base + k] * g[base + k];
                                }
                                for k in 0..sk {
                                    if mask.is_allowed(bi, q, k) {
                                        gs[base + k] += ty.data[base + k] * (g[base + k] - dot);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::KlRows { p, q } => {
                let tp = &nodes[p.0].value;
                let tq = &nodes[q.0].value;
                let v = tp.last_dim();
                let rows = tp.numel() / v;
                if needs(*q) {
                    ensure(grads, *q, tq.numel());
                }
                if needs(*p) {
                    ensure(grads, *p, tp.numel());
                }
                for r in 0..rows {
                    let lp = log_softmax_row(&tp.data[r * v..(r + 1) * v]);
                    let lq = log_softmax_row(&tq.data[r * v..(r + 1) * v]);
                    let kl: f64 = lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum();
                    if needs(*q) {
                        let gq = grads[q.0].as_mut().unwrap();
                        for c in 0..v {
                            gq[r * v + c] += g[r] * (lq[c].exp() - lp[c].exp());
                        }
                    }
                    if needs(*p) {
                        let gp = grads[p.0].as_mut().unwrap();
                        for c in 0..v {
                            let pc = lp[c].exp();
                            gp[r * v + c] += g[r] * pc * ((lp[c] - lq[c]) - kl);
                        }
                    }
                }
            }
            Op::NllRows { logits, targets } => {
                if needs(*logits) {
                    let tl = &nodes[logits.0].value;
                    let v = tl.last_dim();
                    let rows = tl.numel() / v;
                    ensure(grads, *logits, tl.numel());
                    let gl = grads[logits.0].as_mut().unwrap();
                    for r in 0..rows {
                        let lp = log_softmax_row(&tl.data[r * v..(r + 1) * v]);
                        for c in 0..v {
                            let indicator = if c == targets[r] { 1.0 } else { 0.0 };
                            gl[r * v + c] += g[r] * (lp[c].exp() - indicator);
                        }
                    }
                }
            }
            Op::DotConst { x, weights } => {
                if needs(*x) {
                    ensure(grads, *x, numel(*x));
                    let gx = grads[x.0].as_mut().unwrap();
                    for (k, w) in weights.iter().enumerate() {
                        gx[k] += g[0] * w;
                    }
                }
            }
            Op::SumVars(terms) => {
                for t in terms {
                    if needs(*t) {
                        ensure(grads, *t, 1);
                        grads[t.0].as_mut().unwrap()[0] += g[0];
                    }
                }
            }
        }
        Ok(())
    }
}

fn flat3(shape: &[usize]) -> Result<(usize, usize, usize)> {
    // Views [.., S, K] as [G, S, K] by collapsing leading axes.
    if shape.len() < 2 {
        return Err(Error::Contract(format!("expected rank >= 2, got {shape:?}")));
    }
    let k = shape[shape.len() - 1];
    let s = shape[shape.len() - 2];
    let g: usize = shape[..shape.len() - 2].iter().product();
    Ok((g.max(1), s, k))
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stabilized log-softmax of one row.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - max - log_sum).collect()
}
