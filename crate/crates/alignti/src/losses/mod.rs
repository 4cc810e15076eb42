//! The alignment objective stack: supervised fine-tuning, forward-KL
//! distillation, instruction-aware vision alignment, and transition
//! probability alignment, summed with unit coefficients.
//!
//! All loss terms reduce by pooled token mean (every supervised position
//! across the batch weighted equally); vision alignment sums over visual
//! positions within a record and averages over the batch, matching its
//! per-token weighting. Teacher distributions are constants everywhere —
//! only student gradients flow.

pub mod candidates;
pub mod ribbon;
pub mod scope;
pub mod tpa;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::irs::signature_from_submatrix;
use crate::model::{
    extract_instruction_to_vision_attention_row, AttentionTrace, Model, Segment, SequenceBatch,
};
use crate::numerics::{Tape, Var};

pub use candidates::{sample_candidates, CandidateSet, SamplingStrategy, StepCandidates};
pub use ribbon::{assemble_augmented_batch, build_ribbon_layout, AugmentedBatch, Origin, RibbonLayout};
pub use scope::{aligned_node_count, AlignmentScope};
pub use tpa::{compute_tpa_loss, naive_tpa_loss, TpaComputation};

/// Training strategy: which loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Sft,
    VanillaKd,
    IvaOnly,
    TpaOnly,
    AlignTi,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Strategy> {
        match s {
            "sft" => Ok(Strategy::Sft),
            "vanilla-kd" => Ok(Strategy::VanillaKd),
            "iva-only" => Ok(Strategy::IvaOnly),
            "tpa-only" => Ok(Strategy::TpaOnly),
            "align-ti" => Ok(Strategy::AlignTi),
            other => Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Sft => "sft",
            Strategy::VanillaKd => "vanilla-kd",
            Strategy::IvaOnly => "iva-only",
            Strategy::TpaOnly => "tpa-only",
            Strategy::AlignTi => "align-ti",
        }
    }

    pub fn uses_kd(&self) -> bool {
        matches!(self, Strategy::VanillaKd | Strategy::TpaOnly | Strategy::AlignTi)
    }

    pub fn uses_iva(&self) -> bool {
        matches!(self, Strategy::IvaOnly | Strategy::AlignTi)
    }

    pub fn uses_tpa(&self) -> bool {
        matches!(self, Strategy::TpaOnly | Strategy::AlignTi)
    }

    pub fn needs_teacher(&self) -> bool {
        !matches!(self, Strategy::Sft)
    }
}

/// Where vision-alignment importance weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSource {
    Teacher,
    Student,
}

/// Instruction-aware importance weight per visual token of one record.
#[derive(Debug, Clone)]
pub struct ImportanceWeights {
    pub weights: Vec<f64>,
    pub source: WeightSource,
    pub layer: usize,
}

impl ImportanceWeights {
    /// The uniform-weight baseline: 1/N_v per visual token.
    pub fn uniform(n_visual: usize, layer: usize, source: WeightSource) -> ImportanceWeights {
        ImportanceWeights { weights: vec![1.0 / n_visual as f64; n_visual], source, layer }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Contract("negative importance weight".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if sum > 1.0 + 1e-9 {
            return Err(Error::Contract(format!("importance weights sum to {sum} > 1")));
        }
        Ok(())
    }
}

/// Per-term loss values of one step.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sft: f64,
    pub kd: f64,
    pub iva: f64,
    pub tpa: f64,
    pub total: f64,
    /// Optional per-step mean divergences (step index = response step k).
    pub per_step_kd: Option<Vec<f64>>,
    pub per_step_tpa: Option<Vec<f64>>,
}

/// Unweighted sum of the enabled components; disabled components
/// contribute exactly zero and are reported as zero.
pub fn total_loss(
    sft: f64,
    kd: Option<f64>,
    iva: Option<f64>,
    tpa: Option<f64>,
) -> LossBreakdown {
    let kd = kd.unwrap_or(0.0);
    let iva = iva.unwrap_or(0.0);
    let tpa = tpa.unwrap_or(0.0);
    LossBreakdown {
        sft,
        kd,
        iva,
        tpa,
        total: sft + kd + iva + tpa,
        per_step_kd: None,
        per_step_tpa: None,
    }
}

/// Flat logit-row indices and next-token targets of every supervised
/// position, batch-major.
pub fn supervised_rows(batch: &SequenceBatch) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for b in 0..batch.batch {
        for p in batch.supervised_positions(b) {
            rows.push(batch.idx(b, p));
            targets.push(batch.tokens[batch.idx(b, p + 1)] as usize);
        }
    }
    if rows.is_empty() {
        return Err(Error::Contract("batch has no supervised positions".into()));
    }
    Ok((rows, targets))
}

/// Mean next-token cross-entropy at explicit (row, target) pairs.
pub fn sft_loss_at(
    tape: &Tape,
    student_logits: Var,
    rows: Vec<usize>,
    targets: Vec<usize>,
) -> Result<Var> {
    let sel = tape.gather_rows(student_logits, rows)?;
    let nll = tape.nll_rows(sel, targets)?;
    tape.mean(nll)
}

/// Supervised next-token cross-entropy over the batch's loss mask,
/// mean-reduced per token.
pub fn compute_sft_loss(tape: &Tape, student_logits: Var, batch: &SequenceBatch) -> Result<Var> {
    let (rows, targets) = supervised_rows(batch)?;
    sft_loss_at(tape, student_logits, rows, targets)
}

/// Mean forward KL(teacher || student) at explicit logit rows.
pub fn kd_loss_at(
    tape: &Tape,
    teacher_logits: Var,
    student_logits: Var,
    rows: Vec<usize>,
) -> Result<Var> {
    check_vocab_match(tape, teacher_logits, student_logits)?;
    let t_sel = tape.gather_rows(teacher_logits, rows.clone())?;
    let s_sel = tape.gather_rows(student_logits, rows)?;
    let kl = tape.kl_rows(t_sel, s_sel)?;
    tape.mean(kl)
}

/// Next-token distribution matching under ground-truth prefixes: mean over
/// supervised positions of KL(teacher || student). The teacher enters as a
/// constant; only student gradients flow.
pub fn compute_kd_loss(
    tape: &Tape,
    teacher_logits: Var,
    student_logits: Var,
    batch: &SequenceBatch,
) -> Result<Var> {
    let (rows, _) = supervised_rows(batch)?;
    kd_loss_at(tape, teacher_logits, student_logits, rows)
}

fn check_vocab_match(tape: &Tape, a: Var, b: Var) -> Result<()> {
    let va = tape.shape(a).last().copied().unwrap_or(0);
    let vb = tape.shape(b).last().copied().unwrap_or(0);
    if va != vb {
        return Err(Error::Contract(format!(
            "vocabulary mismatch: teacher {va} vs student {vb}"
        )));
    }
    Ok(())
}

/// Column mean of the instruction-to-vision attention sub-matrix of row
/// `b`: the instruction-aware importance weight of each visual token.
pub fn compute_importance_weights(
    trace: &AttentionTrace,
    batch: &SequenceBatch,
    b: usize,
    layer: usize,
    head_agg: crate::model::HeadAgg,
    source: WeightSource,
) -> Result<ImportanceWeights> {
    let a = extract_instruction_to_vision_attention_row(trace, batch, b, layer, head_agg)?;
    let n_i = batch.n_instruction(b);
    let n_v = batch.n_visual(b);
    let weights = signature_from_submatrix(&a.data, n_i, n_v)?;
    let out = ImportanceWeights { weights, source, layer };
    out.validate()?;
    Ok(out)
}

/// Importance-weighted KL at visual-token output positions, summed over
/// visual positions within a record and averaged over the batch. The k-th
/// weight applies to the output distribution at the k-th visual position
/// (the model's natural causal context there).
pub fn compute_iva_loss(
    tape: &Tape,
    teacher_logits: Var,
    student_logits: Var,
    weights: &[ImportanceWeights],
    batch: &SequenceBatch,
) -> Result<Var> {
    check_vocab_match(tape, teacher_logits, student_logits)?;
    if weights.len() != batch.batch {
        return Err(Error::Contract(format!(
            "{} weight vectors for {} rows",
            weights.len(),
            batch.batch
        )));
    }
    let mut rows = Vec::new();
    let mut coeffs = Vec::new();
    for (b, w) in weights.iter().enumerate() {
        let vpos = batch.segment_positions(b, Segment::Visual);
        if w.weights.len() != vpos.len() {
            return Err(Error::Contract(format!(
                "row {b}: {} weights for {} visual positions",
                w.weights.len(),
                vpos.len()
            )));
        }
        for (k, &p) in vpos.iter().enumerate() {
            rows.push(batch.idx(b, p));
            coeffs.push(w.weights[k] / batch.batch as f64);
        }
    }
    let t_sel = tape.gather_rows(teacher_logits, rows.clone())?;
    let s_sel = tape.gather_rows(student_logits, rows)?;
    let kl = tape.kl_rows(t_sel, s_sel)?;
    tape.dot_const(kl, coeffs)
}

/// Full configuration of the per-step loss stack.
#[derive(Debug, Clone)]
pub struct LossStackConfig {
    pub strategy: Strategy,
    pub d: usize,
    pub sampling: SamplingStrategy,
    pub nucleus_p: f64,
    /// Resolved alignment layer (teacher index).
    pub iva_layer: usize,
    pub iva_source: WeightSource,
    /// Override importance weights with the uniform 1/N_v baseline.
    pub iva_uniform: bool,
}

impl Default for LossStackConfig {
    fn default() -> Self {
        LossStackConfig {
            strategy: Strategy::AlignTi,
            d: 4,
            sampling: SamplingStrategy::Nucleus,
            nucleus_p: 0.9,
            iva_layer: 0,
            iva_source: WeightSource::Teacher,
            iva_uniform: false,
        }
    }
}

/// One training step's differentiable objective.
pub struct StepComputation {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Student parameter tape handles, aligned with `student.params()`.
    pub param_vars: Vec<Var>,
    /// The candidate set actually used (transition-alignment strategies).
    pub candidates: Option<CandidateSet>,
}

/// Runs the strategy's forward passes and assembles its loss terms on
/// `tape`.
///
/// Pass accounting per call: plain strategies run one student pass (plus
/// one teacher pass when a teacher is involved); transition-alignment
/// strategies run one extra gradient-free student pass to sample
/// candidates, then one augmented pass per model. `frozen_candidates`
/// skips the sampling pass and reuses the given set (gradient checking
/// needs the objective to be a deterministic function of the parameters).
pub fn compute_strategy_losses(
    teacher: Option<&Model>,
    student: &Model,
    tape: &Tape,
    batch: &SequenceBatch,
    cfg: &LossStackConfig,
    candidate_seed: u64,
    frozen_candidates: Option<&CandidateSet>,
) -> Result<StepComputation> {
    let strategy = cfg.strategy;
    if strategy.needs_teacher() && teacher.is_none() {
        return Err(Error::Contract(format!(
            "strategy {} requires a teacher model",
            strategy.name()
        )));
    }
    if let Some(t) = teacher {
        if t.config.vocab_size != student.config.vocab_size {
            return Err(Error::Contract(format!(
                "teacher vocab {} != student vocab {}",
                t.config.vocab_size, student.config.vocab_size
            )));
        }
    }

    if strategy.uses_tpa() {
        return transition_alignment_step(
            teacher.unwrap(),
            student,
            tape,
            batch,
            cfg,
            candidate_seed,
            frozen_candidates,
        );
    }

    // Plain teacher-forced pass over the ground-truth batch.
    let teacher_capture: BTreeSet<usize> =
        if strategy.uses_iva() && cfg.iva_source == WeightSource::Teacher && !cfg.iva_uniform {
            [cfg.iva_layer].into_iter().collect()
        } else {
            BTreeSet::new()
        };
    let student_capture: BTreeSet<usize> =
        if strategy.uses_iva() && cfg.iva_source == WeightSource::Student && !cfg.iva_uniform {
            [cfg.iva_layer].into_iter().collect()
        } else {
            BTreeSet::new()
        };

    let teacher_out = match teacher {
        Some(t) if strategy.needs_teacher() => Some(t.forward(batch, None, &teacher_capture)?),
        _ => None,
    };
    let student_fwd = student.forward_on_tape(tape, batch, None, &student_capture, true)?;

    let sft = compute_sft_loss(tape, student_fwd.logits, batch)?;
    let mut terms = vec![sft];
    let mut kd_val = None;
    let mut iva_val = None;

    if let Some(t_out) = &teacher_out {
        let t_logits = tape.constant(
            t_out
                .logits
                .clone()
                .reshaped(vec![batch.batch * batch.seq, student.config.vocab_size])?,
        )?;
        if strategy.uses_kd() {
            let kd = compute_kd_loss(tape, t_logits, student_fwd.logits, batch)?;
            kd_val = Some(tape.value(kd).item());
            terms.push(kd);
        }
        if strategy.uses_iva() {
            let weights = resolve_iva_weights(
                cfg,
                batch,
                &t_out.trace,
                &student_fwd.trace,
                teacher.unwrap(),
                student,
            )?;
            let iva = compute_iva_loss(tape, t_logits, student_fwd.logits, &weights, batch)?;
            iva_val = Some(tape.value(iva).item());
            terms.push(iva);
        }
    }

    let sft_val = tape.value(terms[0]).item();
    let total = tape.sum_scalars(terms)?;
    Ok(StepComputation {
        total,
        breakdown: total_loss(sft_val, kd_val, iva_val, None),
        param_vars: student_fwd.param_vars,
        candidates: None,
    })
}

fn resolve_iva_weights(
    cfg: &LossStackConfig,
    batch: &SequenceBatch,
    teacher_trace: &AttentionTrace,
    student_trace: &AttentionTrace,
    teacher: &Model,
    student: &Model,
) -> Result<Vec<ImportanceWeights>> {
    (0..batch.batch)
        .map(|b| {
            if cfg.iva_uniform {
                Ok(ImportanceWeights::uniform(
                    batch.n_visual(b),
                    cfg.iva_layer,
                    cfg.iva_source,
                ))
            } else {
                match cfg.iva_source {
                    WeightSource::Teacher => compute_importance_weights(
                        teacher_trace,
                        batch,
                        b,
                        cfg.iva_layer,
                        teacher.config.head_agg,
                        WeightSource::Teacher,
                    ),
                    WeightSource::Student => compute_importance_weights(
                        student_trace,
                        batch,
                        b,
                        cfg.iva_layer,
                        student.config.head_agg,
                        WeightSource::Student,
                    ),
                }
            }
        })
        .collect()
}

/// Strategies with transition alignment: sample candidates from the
/// student, run one augmented ribbon pass per model, and read every loss
/// term from those two passes.
fn transition_alignment_step(
    teacher: &Model,
    student: &Model,
    tape: &Tape,
    batch: &SequenceBatch,
    cfg: &LossStackConfig,
    candidate_seed: u64,
    frozen_candidates: Option<&CandidateSet>,
) -> Result<StepComputation> {
    let candidates = match frozen_candidates {
        Some(c) => c.clone(),
        None => {
            let sampling_pass = student.forward(batch, None, &BTreeSet::new())?;
            sample_candidates(
                &sampling_pass.logits,
                batch,
                cfg.sampling,
                cfg.d,
                cfg.nucleus_p,
                candidate_seed,
            )?
        }
    };

    let teacher_capture: BTreeSet<usize> =
        if cfg.strategy.uses_iva() && cfg.iva_source == WeightSource::Teacher && !cfg.iva_uniform {
            [cfg.iva_layer].into_iter().collect()
        } else {
            BTreeSet::new()
        };
    let student_capture: BTreeSet<usize> =
        if cfg.strategy.uses_iva() && cfg.iva_source == WeightSource::Student && !cfg.iva_uniform {
            [cfg.iva_layer].into_iter().collect()
        } else {
            BTreeSet::new()
        };

    let comp = compute_tpa_loss(
        teacher,
        student,
        tape,
        batch,
        &candidates,
        &teacher_capture,
        &student_capture,
    )?;

    // Backbone outputs of the same augmented passes give the supervised
    // and distillation terms; the ribbon mask keeps them identical to a
    // plain causal pass.
    let seq = comp.aug.batch.seq;
    let mut flat_rows = Vec::new();
    let mut targets = Vec::new();
    for (b, per_row) in comp.aug.kd_eval.iter().enumerate() {
        for &(p, t) in per_row {
            flat_rows.push(b * seq + p);
            targets.push(t as usize);
        }
    }

    let sft = sft_loss_at(tape, comp.student_logits, flat_rows.clone(), targets)?;
    let mut terms = vec![sft];
    let mut kd_val = None;
    let mut iva_val = None;

    if cfg.strategy.uses_kd() {
        let kd = kd_loss_at(tape, comp.teacher_logits, comp.student_logits, flat_rows)?;
        kd_val = Some(tape.value(kd).item());
        terms.push(kd);
    }
    if cfg.strategy.uses_iva() {
        let weights = resolve_iva_weights(
            cfg,
            &comp.aug.batch,
            &comp.teacher_trace,
            &comp.student_trace,
            teacher,
            student,
        )?;
        let iva = compute_iva_loss(
            tape,
            comp.teacher_logits,
            comp.student_logits,
            &weights,
            &comp.aug.batch,
        )?;
        iva_val = Some(tape.value(iva).item());
        terms.push(iva);
    }
    let tpa_val = tape.value(comp.tpa).item();
    terms.push(comp.tpa);

    let sft_val = tape.value(terms[0]).item();
    let total = tape.sum_scalars(terms)?;
    Ok(StepComputation {
        total,
        breakdown: total_loss(sft_val, kd_val, iva_val, Some(tpa_val)),
        param_vars: comp.param_vars,
        candidates: Some(candidates),
    })
}
