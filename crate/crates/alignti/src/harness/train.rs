//! Teacher pretraining and student distillation loops.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::harness::metrics::{fmt_f64, CsvWriter};
use crate::harness::optim::Adam;
use crate::harness::{evaluate, RunConfig};
use crate::irs::compute_irs_report;
use crate::losses::{
    compute_strategy_losses, LossBreakdown, LossStackConfig, Strategy, WeightSource,
};
use crate::model::{checkpoint, Model, ModelConfig, SequenceBatch};
use crate::numerics::{Rng, Tape, Tensor};
use crate::synthdata::{self, split_dataset, DatasetRecord};

/// One optimizer step's metric row.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Forward passes consumed by this training step.
    pub student_passes: u64,
    pub teacher_passes: u64,
    pub wall_ms: f64,
}

/// Training-run metrics. Pass counters cover training-step forwards only;
/// evaluation passes are excluded so the per-strategy accounting contract
/// is observable.
#[derive(Debug, Clone, Default)]
pub struct RunMetrics {
    pub steps: Vec<StepRecord>,
    pub student_passes_total: u64,
    pub teacher_passes_total: u64,
    /// (step, held-out KL, exact-match accuracy) snapshots.
    pub eval_snapshots: Vec<(usize, f64, f64)>,
}

impl RunMetrics {
    fn push(&mut self, rec: StepRecord) {
        self.student_passes_total += rec.student_passes;
        self.teacher_passes_total += rec.teacher_passes;
        self.steps.push(rec);
    }

    /// Deterministic per-step metrics (no wall-clock columns).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = CsvWriter::new(&[
            "step",
            "lr",
            "sft",
            "kd",
            "iva",
            "tpa",
            "total",
            "student_passes_cum",
            "teacher_passes_cum",
        ]);
        let mut s_cum = 0u64;
        let mut t_cum = 0u64;
        for r in &self.steps {
            s_cum += r.student_passes;
            t_cum += r.teacher_passes;
            w.row(vec![
                r.step.to_string(),
                fmt_f64(r.lr),
                fmt_f64(r.loss.sft),
                fmt_f64(r.loss.kd),
                fmt_f64(r.loss.iva),
                fmt_f64(r.loss.tpa),
                fmt_f64(r.loss.total),
                s_cum.to_string(),
                t_cum.to_string(),
            ])?;
        }
        w.write(path)
    }

    /// Wall-clock per step; excluded from determinism comparisons.
    pub fn write_timings(&self, path: &Path) -> Result<()> {
        let mut w = CsvWriter::new(&["step", "wall_ms"]);
        for r in &self.steps {
            w.row(vec![r.step.to_string(), fmt_f64(r.wall_ms)])?;
        }
        w.write(path)
    }

    pub fn write_eval_csv(&self, path: &Path) -> Result<()> {
        let mut w = CsvWriter::new(&["step", "val_kl", "val_exact_match"]);
        for &(step, kl, acc) in &self.eval_snapshots {
            w.row(vec![step.to_string(), fmt_f64(kl), fmt_f64(acc)])?;
        }
        w.write(path)
    }
}

/// Deterministic epoch-shuffled batch order (partial trailing batches are
/// dropped at epoch boundaries).
struct BatchCycle {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchCycle {
    fn new(n: usize, seed: u64) -> BatchCycle {
        let mut rng = Rng::new(seed).stream("batch-order");
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        BatchCycle { order, pos: 0, rng }
    }

    fn next(&mut self, batch_size: usize) -> Vec<usize> {
        if self.pos + batch_size > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let out = self.order[self.pos..(self.pos + batch_size).min(self.order.len())].to_vec();
        self.pos += batch_size;
        out
    }
}

fn batch_from(records: &[DatasetRecord], idxs: &[usize]) -> Result<SequenceBatch> {
    let refs: Vec<&DatasetRecord> = idxs.iter().map(|&i| &records[i]).collect();
    synthdata::to_batch(&refs)
}

/// Loads the dataset named by the config and splits it.
pub fn load_splits(
    cfg: &RunConfig,
) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    let (spec, records) = synthdata::io::load_dataset(&cfg.data_path)?;
    let needed = spec.vocab_layout().vocab_size();
    if cfg.teacher.vocab_size < needed {
        return Err(Error::Config(format!(
            "model vocab {} smaller than dataset vocabulary {needed}",
            cfg.teacher.vocab_size
        )));
    }
    split_dataset(
        &records,
        (cfg.split.train_fraction, cfg.split.val_fraction, cfg.split.bias_fraction),
        cfg.split.bias_min_response_len,
        cfg.seeds.data,
    )
}

fn run_training_loop(
    cfg: &RunConfig,
    teacher: Option<&Model>,
    student: &mut Model,
    stack: &LossStackConfig,
    train: &[DatasetRecord],
    val: &[DatasetRecord],
) -> Result<RunMetrics> {
    let mut adam = Adam::new(student.params());
    let mut cycle = BatchCycle::new(train.len(), cfg.seeds.train);
    let cand_root = Rng::new(cfg.seeds.train).stream("candidates");
    let mut metrics = RunMetrics::default();

    for step in 0..cfg.optimizer.steps {
        let t0 = Instant::now();
        let idxs = cycle.next(cfg.optimizer.batch_size);
        let batch = batch_from(train, &idxs)?;
        let candidate_seed = cand_root.substream(step as u64).next_u64();

        let s_before = student.forward_pass_count();
        let t_before = teacher.map_or(0, |t| t.forward_pass_count());

        let tape = Tape::new();
        let comp =
            compute_strategy_losses(teacher, student, &tape, &batch, stack, candidate_seed, None)?;
        if !comp.breakdown.total.is_finite() {
            return Err(Error::Numeric(format!(
                "loss diverged at step {step}: {:?}",
                comp.breakdown
            )));
        }
        let grads = tape.backward(comp.total)?;
        let grad_tensors: Vec<Tensor> = comp
            .param_vars
            .iter()
            .zip(student.params())
            .map(|(v, p)| grads.tensor(*v, &p.tensor.shape))
            .collect();
        let lr = cfg.optimizer.lr_at(step);
        adam.step(student.params_mut(), &grad_tensors, lr).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
            other => other,
        })?;

        let rec = StepRecord {
            step,
            lr,
            loss: comp.breakdown,
            student_passes: student.forward_pass_count() - s_before,
            teacher_passes: teacher.map_or(0, |t| t.forward_pass_count()) - t_before,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        metrics.push(rec);

        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && !val.is_empty() {
            if let Some(t) = teacher {
                let report = evaluate::evaluate(t, student, val, 16)?;
                metrics.eval_snapshots.push((
                    step,
                    report.mean_teacher_forced_kl,
                    report.exact_match_accuracy,
                ));
            }
        }
    }
    Ok(metrics)
}

/// Supervised pretraining of the toy teacher. Returns the checkpoint base
/// path (`<output_dir>/teacher`).
pub fn train_teacher(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let (train, val, _) = load_splits(cfg)?;
    if train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let mut teacher = Model::new(ModelConfig { seed: cfg.teacher_seed(), ..cfg.teacher.clone() })?;
    let stack = LossStackConfig { strategy: Strategy::Sft, ..LossStackConfig::default() };
    let metrics = run_training_loop(cfg, None, &mut teacher, &stack, &train, &val)?;

    std::fs::create_dir_all(&cfg.output_dir)?;
    let base = cfg.output_dir.join("teacher");
    checkpoint::save(&teacher, &base)?;
    metrics.write_csv(&cfg.output_dir.join("teacher_metrics.csv"))?;
    metrics.write_timings(&cfg.output_dir.join("teacher_timings.csv"))?;
    if !metrics.eval_snapshots.is_empty() {
        metrics.write_eval_csv(&cfg.output_dir.join("teacher_eval.csv"))?;
    }
    Ok(base)
}

/// Result of one distillation run.
pub struct DistillOutcome {
    pub student_ckpt: PathBuf,
    pub metrics: RunMetrics,
    /// Alignment layer actually used (when the strategy aligns vision).
    pub iva_layer: Option<usize>,
}

/// Distills a student against a frozen teacher checkpoint with the
/// configured strategy.
pub fn distill(cfg: &RunConfig, teacher_ckpt: &Path) -> Result<DistillOutcome> {
    cfg.validate()?;
    let teacher = checkpoint::load(teacher_ckpt)?;
    if teacher.config.vocab_size != cfg.student.vocab_size {
        return Err(Error::Config(format!(
            "teacher checkpoint vocab {} != student vocab {}",
            teacher.config.vocab_size, cfg.student.vocab_size
        )));
    }
    let (train, val, _) = load_splits(cfg)?;
    if train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let mut student = Model::new(ModelConfig { seed: cfg.student_seed(), ..cfg.student.clone() })?;

    let iva_layer = if cfg.strategy.uses_iva() {
        Some(resolve_iva_layer(cfg, &teacher, &student, &train)?)
    } else {
        None
    };
    let stack = LossStackConfig {
        strategy: cfg.strategy,
        d: cfg.d,
        sampling: cfg.sampling,
        nucleus_p: cfg.nucleus_p,
        iva_layer: iva_layer.unwrap_or(0),
        iva_source: cfg.iva_source,
        iva_uniform: cfg.iva_uniform,
    };

    teacher.reset_forward_pass_count();
    let metrics = run_training_loop(cfg, Some(&teacher), &mut student, &stack, &train, &val)?;

    std::fs::create_dir_all(&cfg.output_dir)?;
    let base = cfg.output_dir.join(format!("student_{}", cfg.strategy.name()));
    checkpoint::save(&student, &base)?;
    metrics.write_csv(&cfg.output_dir.join(format!("{}_metrics.csv", cfg.strategy.name())))?;
    metrics
        .write_timings(&cfg.output_dir.join(format!("{}_timings.csv", cfg.strategy.name())))?;
    if !metrics.eval_snapshots.is_empty() {
        metrics.write_eval_csv(&cfg.output_dir.join(format!("{}_eval.csv", cfg.strategy.name())))?;
    }
    Ok(DistillOutcome { student_ckpt: base, metrics, iva_layer })
}

/// Alignment-layer resolution: explicit index, or the layer with the
/// highest instruction-relevance score on a train-set sample. Weights
/// sourced from the student select over student layers.
fn resolve_iva_layer(
    cfg: &RunConfig,
    teacher: &Model,
    student: &Model,
    train: &[DatasetRecord],
) -> Result<usize> {
    let source_model: &Model = match cfg.iva_source {
        WeightSource::Teacher => teacher,
        WeightSource::Student => student,
    };
    if let Some(layer) = cfg.iva_layer {
        if layer >= source_model.config.n_layers {
            return Err(Error::Config(format!(
                "iva_layer {layer} out of {} layers",
                source_model.config.n_layers
            )));
        }
        return Ok(layer);
    }
    let mut idxs: Vec<usize> = (0..train.len()).collect();
    let mut rng = Rng::new(cfg.seeds.eval).stream("irs-sample");
    rng.shuffle(&mut idxs);
    idxs.truncate(cfg.irs_records.max(2).min(train.len()));
    let sample: Vec<DatasetRecord> = idxs.iter().map(|&i| train[i].clone()).collect();
    let report = compute_irs_report(source_model, &sample, cfg.irs_pairs, cfg.seeds.eval)?;
    Ok(report.selected_layer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, io::save_dataset, TaskSpec};

    fn mini_cfg(dir: &Path, steps: usize) -> RunConfig {
        let spec = TaskSpec {
            grid_side: 2,
            n_colors: 2,
            n_shapes: 2,
            response_len_range: (5, 12),
            seed: 7,
            ..TaskSpec::default()
        };
        let records = generate_dataset(&spec, 60).unwrap();
        let data_path = dir.join("data.jsonl");
        save_dataset(&data_path, &spec, &records).unwrap();
        let mut cfg = RunConfig::default_desk(spec.vocab_layout().vocab_size());
        cfg.teacher.n_layers = 2;
        cfg.teacher.hidden_dim = 32;
        cfg.teacher.n_heads = 2;
        cfg.teacher.max_seq_len = 96;
        cfg.student.hidden_dim = 16;
        cfg.student.max_seq_len = 96;
        cfg.data_path = data_path;
        cfg.split = crate::harness::SplitConfig {
            train_fraction: 0.8,
            val_fraction: 0.1,
            bias_fraction: 0.1,
            bias_min_response_len: 8,
        };
        cfg.optimizer.steps = steps;
        cfg.optimizer.batch_size = 4;
        cfg.d = 2;
        cfg.irs_pairs = 8;
        cfg.irs_records = 6;
        cfg.output_dir = dir.join("out");
        cfg
    }

    #[test]
    fn zero_steps_checkpoint_equals_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = mini_cfg(dir.path(), 0);
        let base = train_teacher(&cfg).unwrap();
        let loaded = checkpoint::load(&base).unwrap();
        let fresh =
            Model::new(ModelConfig { seed: cfg.teacher_seed(), ..cfg.teacher.clone() }).unwrap();
        for (a, b) in loaded.params().iter().zip(fresh.params()) {
            assert_eq!(a.tensor.data, b.tensor.data, "{} differs", a.name);
        }
    }

    #[test]
    fn teacher_training_is_bitwise_deterministic() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let cfg1 = mini_cfg(dir1.path(), 5);
        let cfg2 = mini_cfg(dir2.path(), 5);
        let b1 = train_teacher(&cfg1).unwrap();
        let b2 = train_teacher(&cfg2).unwrap();
        let x = std::fs::read(b1.with_extension("bin")).unwrap();
        let y = std::fs::read(b2.with_extension("bin")).unwrap();
        assert_eq!(x, y, "replayed training must produce identical checkpoints");
        let mx = std::fs::read(dir1.path().join("out/teacher_metrics.csv")).unwrap();
        let my = std::fs::read(dir2.path().join("out/teacher_metrics.csv")).unwrap();
        assert_eq!(mx, my, "metric csvs must replay identically");
    }

    #[test]
    fn counter_contract_across_strategies() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = mini_cfg(dir.path(), 2);
        let teacher_base = train_teacher(&cfg).unwrap();
        cfg.optimizer.steps = 3;
        let n = 3u64;
        for (strategy, s_exp, t_exp) in [
            (Strategy::Sft, n, 0),
            (Strategy::VanillaKd, n, n),
            (Strategy::IvaOnly, n, n),
            (Strategy::TpaOnly, 2 * n, n),
            (Strategy::AlignTi, 2 * n, n),
        ] {
            cfg.strategy = strategy;
            cfg.output_dir = dir.path().join(format!("out_{}", strategy.name()));
            let out = distill(&cfg, &teacher_base).unwrap();
            assert_eq!(
                (out.metrics.student_passes_total, out.metrics.teacher_passes_total),
                (s_exp, t_exp),
                "counters for {}",
                strategy.name()
            );
        }
    }

    #[test]
    fn distill_loss_decreases_from_start() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = mini_cfg(dir.path(), 30);
        let teacher_base = train_teacher(&cfg).unwrap();
        cfg.strategy = Strategy::VanillaKd;
        cfg.optimizer.steps = 40;
        let out = distill(&cfg, &teacher_base).unwrap();
        let first = out.metrics.steps[0].loss.total;
        let last = out.metrics.steps.last().unwrap().loss.total;
        assert!(last < first, "loss should decrease: {first} -> {last}");
    }
}
