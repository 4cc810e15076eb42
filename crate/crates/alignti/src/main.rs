//! Command-line interface: data generation, training, distillation,
//! evaluation, attention-relevance reports, exposure-bias reports, plots,
//! and a quick self-test of the numeric core.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use alignti::biasmetrics::{bias_study, PrefixSampling, TransformerEval};
use alignti::error::{Error, Result};
use alignti::harness::metrics::{fmt_f64, read_csv, CsvWriter};
use alignti::harness::plot::{write_line_plot, Series};
use alignti::harness::{distill, evaluate, train_teacher, RunConfig};
use alignti::irs::compute_irs_report;
use alignti::losses::{SamplingStrategy, Strategy, WeightSource};
use alignti::model::checkpoint;
use alignti::numerics::Rng;
use alignti::synthdata::{self, generate_dataset, DatasetRecord, TaskSpec};

#[derive(Parser)]
#[command(
    name = "alignti",
    version,
    about = "Desk-scale distillation of multimodal autoregressive transformers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic grid-QA dataset file.
    GenerateData(GenerateArgs),
    /// Pretrain the toy teacher with supervised fine-tuning.
    TrainTeacher(TrainArgs),
    /// Distill a student from a frozen teacher checkpoint.
    Distill(DistillArgs),
    /// Held-out teacher-forced KL and greedy exact-match accuracy.
    Evaluate(EvaluateArgs),
    /// Per-layer instruction-relevance scores and layer selection.
    IrsReport(IrsArgs),
    /// Accumulated-divergence curves and excess accumulated error.
    BiasReport(BiasArgs),
    /// Render a CSV's columns as an SVG line plot.
    Plot(PlotArgs),
    /// Run the oracle and gradient self-checks.
    Selftest,
}

#[derive(Args)]
struct GenerateArgs {
    /// Task spec JSON file; omit to use the built-in desk-scale task.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Records to generate.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// Seed for the built-in task (ignored with --spec).
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also write a default run config wired to this dataset.
    #[arg(long)]
    config_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    config: PathBuf,
    /// Teacher checkpoint base path (without .json/.bin).
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// sft | vanilla-kd | iva-only | tpa-only | align-ti
    #[arg(long)]
    strategy: Option<String>,
    /// Candidate tokens per step.
    #[arg(long)]
    d: Option<usize>,
    /// greedy | nucleus
    #[arg(long)]
    sampling: Option<String>,
    #[arg(long)]
    nucleus_p: Option<f64>,
    /// teacher | student
    #[arg(long)]
    iva_source: Option<String>,
    /// "auto" or a layer index.
    #[arg(long)]
    iva_layer: Option<String>,
    /// Replace attention-derived weights with the uniform baseline.
    #[arg(long, default_value_t = false)]
    iva_uniform: bool,
    #[arg(long)]
    seed_init: Option<u64>,
    #[arg(long)]
    seed_train: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    student: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Run config; enables split selection.
    #[arg(long)]
    config: Option<PathBuf>,
    /// all | train | val | bias (anything but "all" needs --config).
    #[arg(long, default_value = "all")]
    split: String,
    /// Write the JSON report here as well as stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IrsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 256)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Override the selected layer in the report.
    #[arg(long)]
    layer: Option<usize>,
    /// Records sampled from the dataset.
    #[arg(long, default_value_t = 48)]
    records: usize,
}

#[derive(Args)]
struct BiasArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    student: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Run config; restricts records to its bias-eval split.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_len: usize,
    /// Number of prefix-sampling seeds.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed_base: u64,
    /// nucleus | greedy
    #[arg(long, default_value = "nucleus")]
    sampling: String,
    #[arg(long, default_value_t = 0.9)]
    nucleus_p: f64,
    /// Cap on evaluation records.
    #[arg(long, default_value_t = 64)]
    records: usize,
    #[arg(long)]
    out: PathBuf,
    /// Optional SVG of the excess-accumulated-error curve.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Column used for the x axis.
    #[arg(long)]
    x: String,
    /// Comma-separated y columns.
    #[arg(long)]
    y: String,
    #[arg(long, default_value = "")]
    title: String,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenerateData(a) => generate_data(a),
        Cmd::TrainTeacher(a) => cmd_train_teacher(a),
        Cmd::Distill(a) => cmd_distill(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::IrsReport(a) => cmd_irs(a),
        Cmd::BiasReport(a) => cmd_bias(a),
        Cmd::Plot(a) => cmd_plot(a),
        Cmd::Selftest => selftest(),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("reading {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("parsing {what}: {e}")))
}

fn generate_data(a: GenerateArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(path) => read_json::<TaskSpec>(path, "task spec")?,
        None => TaskSpec { seed: a.seed, ..TaskSpec::default() },
    };
    spec.validate()?;
    let records = generate_dataset(&spec, a.n)?;
    synthdata::io::save_dataset(&a.out, &spec, &records)?;
    println!(
        "wrote {} records (vocab {}) to {}",
        records.len(),
        spec.vocab_layout().vocab_size(),
        a.out.display()
    );
    if let Some(cfg_path) = a.config_out {
        let mut cfg = RunConfig::default_desk(spec.vocab_layout().vocab_size());
        cfg.data_path = a.out.clone();
        let mut text = serde_json::to_string_pretty(&cfg)
            .map_err(|e| Error::Config(format!("serializing config: {e}")))?;
        text.push('\n');
        std::fs::write(&cfg_path, text)?;
        println!("wrote default run config to {}", cfg_path.display());
    }
    Ok(())
}

fn cmd_train_teacher(a: TrainArgs) -> Result<()> {
    let mut cfg: RunConfig = read_json(&a.config, "run config")?;
    if let Some(d) = a.data {
        cfg.data_path = d;
    }
    if let Some(o) = a.out_dir {
        cfg.output_dir = o;
    }
    if let Some(s) = a.steps {
        cfg.optimizer.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.optimizer.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.optimizer.batch_size = b;
    }
    let base = train_teacher(&cfg)?;
    println!("teacher checkpoint: {}", base.display());
    Ok(())
}

fn cmd_distill(a: DistillArgs) -> Result<()> {
    let mut cfg: RunConfig = read_json(&a.config, "run config")?;
    if let Some(d) = a.data {
        cfg.data_path = d;
    }
    if let Some(o) = a.out_dir {
        cfg.output_dir = o;
    }
    if let Some(s) = a.steps {
        cfg.optimizer.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.optimizer.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.optimizer.batch_size = b;
    }
    if let Some(s) = a.strategy {
        cfg.strategy = Strategy::parse(&s)?;
    }
    if let Some(d) = a.d {
        cfg.d = d;
    }
    if let Some(s) = a.sampling {
        cfg.sampling = SamplingStrategy::parse(&s)?;
    }
    if let Some(p) = a.nucleus_p {
        cfg.nucleus_p = p;
    }
    if let Some(s) = a.iva_source {
        cfg.iva_source = match s.as_str() {
            "teacher" => WeightSource::Teacher,
            "student" => WeightSource::Student,
            other => return Err(Error::Config(format!("unknown iva source '{other}'"))),
        };
    }
    if let Some(layer) = a.iva_layer {
        cfg.iva_layer = if layer == "auto" {
            None
        } else {
            Some(layer.parse::<usize>().map_err(|e| {
                Error::Config(format!("--iva-layer expects 'auto' or an index: {e}"))
            })?)
        };
    }
    if a.iva_uniform {
        cfg.iva_uniform = true;
    }
    if let Some(s) = a.seed_init {
        cfg.seeds.init = s;
    }
    if let Some(s) = a.seed_train {
        cfg.seeds.train = s;
    }
    let out = distill(&cfg, &a.teacher)?;
    println!("student checkpoint: {}", out.student_ckpt.display());
    if let Some(layer) = out.iva_layer {
        println!("alignment layer: {layer}");
    }
    println!(
        "forward passes: student {} teacher {}",
        out.metrics.student_passes_total, out.metrics.teacher_passes_total
    );
    if let Some(last) = out.metrics.steps.last() {
        println!("final loss: {}", fmt_f64(last.loss.total));
    }
    Ok(())
}

/// Loads records, optionally restricted to one split of a run config.
fn records_for(data: &Path, config: Option<&Path>, split: &str) -> Result<Vec<DatasetRecord>> {
    let (_, records) = synthdata::io::load_dataset(data)?;
    match (config, split) {
        (_, "all") => Ok(records),
        (Some(cfg_path), part) => {
            let cfg: RunConfig = read_json(cfg_path, "run config")?;
            let (train, val, bias) = synthdata::split_dataset(
                &records,
                (cfg.split.train_fraction, cfg.split.val_fraction, cfg.split.bias_fraction),
                cfg.split.bias_min_response_len,
                cfg.seeds.data,
            )?;
            match part {
                "train" => Ok(train),
                "val" => Ok(val),
                "bias" => Ok(bias),
                other => Err(Error::Config(format!("unknown split '{other}'"))),
            }
        }
        (None, other) => Err(Error::Config(format!(
            "split '{other}' requires --config for the split definition"
        ))),
    }
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let teacher = checkpoint::load(&a.teacher)?;
    let student = checkpoint::load(&a.student)?;
    let records = records_for(&a.data, a.config.as_deref(), &a.split)?;
    let report = evaluate(&teacher, &student, &records, 16)?;
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("serializing report: {e}")))?;
    text.push('\n');
    print!("{text}");
    if let Some(out) = a.out {
        std::fs::write(out, text)?;
    }
    Ok(())
}

fn cmd_irs(a: IrsArgs) -> Result<()> {
    let model = checkpoint::load(&a.model)?;
    let (_, records) = synthdata::io::load_dataset(&a.data)?;
    let mut idxs: Vec<usize> = (0..records.len()).collect();
    let mut rng = Rng::new(a.seed).stream("irs-sample");
    rng.shuffle(&mut idxs);
    idxs.truncate(a.records.max(2).min(records.len()));
    let sample: Vec<DatasetRecord> = idxs.iter().map(|&i| records[i].clone()).collect();
    let mut report = compute_irs_report(&model, &sample, a.pairs, a.seed)?;
    if let Some(layer) = a.layer {
        if layer >= model.config.n_layers {
            return Err(Error::Config(format!(
                "--layer {layer} out of {} layers",
                model.config.n_layers
            )));
        }
        report.selected_layer = layer;
    }
    let mut w = CsvWriter::new(&["layer", "irs", "selected"]);
    for (l, &score) in report.per_layer_score.iter().enumerate() {
        w.row(vec![
            l.to_string(),
            fmt_f64(score),
            (l == report.selected_layer).to_string(),
        ])?;
    }
    w.write(&a.out)?;
    println!("selected layer: {}", report.selected_layer);
    for (l, &score) in report.per_layer_score.iter().enumerate() {
        println!("layer {l}: irs {score:.6}");
    }
    Ok(())
}

fn cmd_bias(a: BiasArgs) -> Result<()> {
    let teacher = checkpoint::load(&a.teacher)?;
    let student = checkpoint::load(&a.student)?;
    let split = if a.config.is_some() { "bias" } else { "all" };
    let mut records = records_for(&a.data, a.config.as_deref(), split)?;
    records.retain(|r| r.response_tokens.len() >= a.max_len);
    if records.is_empty() {
        return Err(Error::Config(format!(
            "no records with response length >= {}",
            a.max_len
        )));
    }
    records.truncate(a.records);
    let sampling = match a.sampling.as_str() {
        "nucleus" => PrefixSampling::Nucleus,
        "greedy" => PrefixSampling::Greedy,
        other => return Err(Error::Config(format!("unknown sampling '{other}'"))),
    };
    let responses: Vec<Vec<u32>> = records.iter().map(|r| r.response_tokens.clone()).collect();
    let t_eval = TransformerEval::new(&teacher, &records);
    let s_eval = TransformerEval::new(&student, &records);
    let seeds: Vec<u64> = (0..a.seeds).map(|i| a.seed_base + i).collect();
    let study = bias_study(
        &t_eval,
        &s_eval,
        &responses,
        a.max_len,
        sampling,
        a.nucleus_p,
        &seeds,
    )?;

    // Mean curves across seeds (e_train is seed-independent).
    let n_seeds = study.per_seed.len() as f64;
    let mean_of = |f: &dyn Fn(&alignti::biasmetrics::BiasCurve) -> &Vec<f64>, l: usize| {
        study.per_seed.iter().map(|c| f(c)[l]).sum::<f64>() / n_seeds
    };
    let mut w = CsvWriter::new(&[
        "l",
        "e_train",
        "e_test",
        "regret_r",
        "baseline_e",
        "ex_acc_err",
        "defined",
        "ex_acc_err_std",
    ]);
    for l in 0..a.max_len {
        w.row(vec![
            (l + 1).to_string(),
            fmt_f64(study.per_seed[0].e_train[l]),
            fmt_f64(mean_of(&|c| &c.e_test, l)),
            fmt_f64(mean_of(&|c| &c.regret_r, l)),
            fmt_f64(mean_of(&|c| &c.baseline_e, l)),
            fmt_f64(study.ex_acc_err_mean[l]),
            study.defined[l].to_string(),
            fmt_f64(study.ex_acc_err_std[l]),
        ])?;
    }
    w.write(&a.out)?;
    println!(
        "bias report over {} records, {} seeds -> {}",
        records.len(),
        seeds.len(),
        a.out.display()
    );
    if let Some(plot_path) = a.plot {
        let pts: Vec<(f64, f64)> = (0..a.max_len)
            .filter(|&l| study.defined[l])
            .map(|l| ((l + 1) as f64, study.ex_acc_err_mean[l]))
            .collect();
        write_line_plot(
            &plot_path,
            "excess accumulated error",
            "generation step l",
            "%ExAccErr",
            &[Series { label: "mean over seeds".into(), points: pts }],
        )?;
        println!("plot -> {}", plot_path.display());
    }
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let (header, rows) = read_csv(&a.input)?;
    let x_idx = header
        .iter()
        .position(|h| h == &a.x)
        .ok_or_else(|| Error::Config(format!("column '{}' not in {header:?}", a.x)))?;
    let mut series = Vec::new();
    for name in a.y.split(',') {
        let name = name.trim();
        let y_idx = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column '{name}' not in {header:?}")))?;
        series.push(Series {
            label: name.to_string(),
            points: rows.iter().map(|r| (r[x_idx], r[y_idx])).collect(),
        });
    }
    let title = if a.title.is_empty() {
        a.input.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    } else {
        a.title
    };
    write_line_plot(&a.out, &title, &a.x, &a.y, &series)?;
    println!("plot -> {}", a.out.display());
    Ok(())
}

fn selftest() -> Result<()> {
    use alignti::losses::{
        compute_strategy_losses, compute_tpa_loss, naive_tpa_loss, sample_candidates,
        LossStackConfig,
    };
    use alignti::model::{HeadAgg, Model, ModelConfig, RowSpec, SequenceBatch};
    use alignti::numerics::{gradient_check, kl_divergence, softmax, Tape, Tensor};

    let mut failures = 0;
    let mut check = |name: &str, ok: bool| {
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    let s = softmax(&Tensor::from_vec(vec![1.0, 2.0, 3.0]))?;
    check(
        "softmax(1,2,3) reference values",
        (s.data[0] - 0.090_030_57).abs() < 1e-8 && (s.data[2] - 0.665_240_96).abs() < 1e-8,
    );
    let p = Tensor::from_vec(vec![0.7_f64.ln(), 0.3_f64.ln()]);
    let q = Tensor::from_vec(vec![0.5_f64.ln(), 0.5_f64.ln()]);
    check(
        "kl divergence reference value",
        (kl_divergence(&p, &q)? - 0.082_282_9).abs() < 1e-6,
    );

    let mk = |seed, layers, hidden| {
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
    };
    let teacher = mk(1, 2, 16);
    let student = mk(2, 1, 8);
    let batch = SequenceBatch::from_rows(&[RowSpec {
        visual: vec![3, 4, 5],
        instruction: vec![11, 12],
        response: vec![17, 18, 19, 2],
    }])?;

    let sampling = student.forward(&batch, None, &BTreeSet::new())?;
    let cands =
        sample_candidates(&sampling.logits, &batch, SamplingStrategy::Greedy, 2, 0.9, 0)?;
    let tape = Tape::new();
    let comp = compute_tpa_loss(
        &teacher,
        &student,
        &tape,
        &batch,
        &cands,
        &BTreeSet::new(),
        &BTreeSet::new(),
    )?;
    let parallel = tape.value(comp.tpa).item();
    let naive = naive_tpa_loss(&teacher, &student, &batch, &cands)?;
    check(
        "ribbon-parallel vs naive transition alignment",
        (parallel - naive).abs() / naive.abs().max(1e-12) <= 1e-6,
    );

    let stack = LossStackConfig { iva_layer: 1, ..LossStackConfig::default() };
    let frozen = cands.clone();
    let teacher_ref = &teacher;
    let batch_ref = &batch;
    let stack_ref = &stack;
    let frozen_ref = &frozen;
    let loss_fn = move |params: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
        let mut probe = mk(2, 1, 8);
        for (p, t) in probe.params_mut().iter_mut().zip(params) {
            p.tensor = t.clone();
        }
        let tape = Tape::new();
        let comp = compute_strategy_losses(
            Some(teacher_ref),
            &probe,
            &tape,
            batch_ref,
            stack_ref,
            0,
            Some(frozen_ref),
        )?;
        let grads = tape.backward(comp.total)?;
        let gs = comp
            .param_vars
            .iter()
            .zip(probe.params())
            .map(|(v, p)| grads.tensor(*v, &p.tensor.shape))
            .collect();
        Ok((tape.value(comp.total).item(), gs))
    };
    let params: Vec<Tensor> = student.params().iter().map(|p| p.tensor.clone()).collect();
    let err = gradient_check(&loss_fn, &params, 1e-5, 3, 12)?;
    check("full-objective gradient check (sampled coords)", err <= 1e-4);

    println!(
        "{}",
        if failures == 0 { "selftest: all checks passed" } else { "selftest: FAILURES" }
    );
    if failures > 0 {
        return Err(Error::Numeric(format!("{failures} selftest checks failed")));
    }
    Ok(())
}
