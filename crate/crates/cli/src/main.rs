use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use kgs3d::compile::Schedule;
use kgs3d::exec::{compile_network, random_input, time_repeats, ExecMode, Network, PreparedNetwork, DEFAULT_WARMUP};
use kgs3d::experiment::{log_lines, run_cells, CellOutput, CellResult, DenseCache, ExperimentConfig, ExperimentReport};
use kgs3d::io;
use kgs3d::pruning::{prune, Algorithm, MaskPolicy, PruneConfig, UpdateRule};
use kgs3d::sparsity::{NormKind, Scheme};
use kgs3d::tensor::FeatureDims;
use kgs3d::train::{evaluate, ArchSpec, EpochLog, ToyTask};
use kgs3d::tuner::{tune, TuneSpace};

/// Structured pruning of 3D CNNs and a sparse 3D-convolution engine.
#[derive(Parser)]
#[command(name = "kgs3d", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a dense toy model on the synthetic video task.
    Train(TrainArgs),
    /// Prune a trained model and retrain the kept weights.
    Prune(PruneArgs),
    /// Reorder and encode a model's conv layers into a `.cws` network.
    Compile(CompileArgs),
    /// Search per-layer execution schedules by measured latency.
    Tune(TuneArgs),
    /// Execute a compiled network on an input tensor.
    Run(RunArgs),
    /// Measure the latency of a compiled network.
    Bench(BenchArgs),
    /// Run the seed x algorithm x scheme matrix and write reports.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Seed of the initialization, the data and the shuffle.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Architecture: tiny3d or c3d-lite.
    #[arg(long, default_value = "tiny3d")]
    arch: String,
    /// Output model container.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines training log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    /// Dense model container.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_parser = parse_algo, default_value = "reweighted")]
    algo: Algorithm,
    #[arg(long, value_parser = parse_scheme, default_value = "kgs")]
    scheme: Scheme,
    /// Filters per kernel group.
    #[arg(long, default_value_t = 4)]
    gm: usize,
    /// Input channels per kernel group.
    #[arg(long, default_value_t = 4)]
    gn: usize,
    /// Penalty coefficient.
    #[arg(long, default_value_t = 5e-4)]
    lambda: f64,
    /// Model-wide FLOPs pruning rate to reach.
    #[arg(long, default_value_t = 2.0)]
    target_rate: f64,
    /// Prune by an absolute norm threshold instead of a target rate.
    #[arg(long, conflicts_with = "target_rate")]
    threshold: Option<f64>,
    /// Seed of the pruning run; the data seed defaults to it.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Seed of the synthetic data (use the training seed).
    #[arg(long)]
    data_seed: Option<u64>,
    /// Retrain epochs after masking.
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Regularized epochs per reweighting round.
    #[arg(long, default_value_t = 5)]
    prune_epochs: usize,
    #[arg(long, default_value_t = 3)]
    reweight_iterations: usize,
    /// Weight of the l1 norm in the l1/l2 mix.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Multiply each layer's regularizer term by its dense FLOPs.
    #[arg(long)]
    flops_weighted: bool,
    /// Use plain subgradient steps instead of proximal updates.
    #[arg(long)]
    subgradient: bool,
    /// Allow masks that remove an entire layer.
    #[arg(long)]
    allow_dead_layers: bool,
    /// Pruned model container.
    #[arg(long)]
    out_model: PathBuf,
    /// Mask file.
    #[arg(long)]
    out_mask: PathBuf,
    /// JSON-lines training log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct CompileArgs {
    /// Model container.
    #[arg(long)]
    model: PathBuf,
    /// Mask file (one mask per conv layer).
    #[arg(long)]
    mask: PathBuf,
    /// Output `.cws` network.
    #[arg(long)]
    out: PathBuf,
    /// Keep the natural filter order.
    #[arg(long)]
    no_reorder: bool,
}

#[derive(Args)]
struct TuneArgs {
    /// Compiled `.cws` network.
    #[arg(long)]
    model: PathBuf,
    /// Network input `batch,channels,depth,height,width`; defaults to batch 1
    /// of the stored input shape.
    #[arg(long, value_parser = parse_dims)]
    input_dims: Option<FeatureDims>,
    /// Maximum candidates per layer.
    #[arg(long, default_value_t = 200)]
    budget: usize,
    /// Timed repeats per candidate (after 3 warm-ups).
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Subsampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output schedule list (one per layer).
    #[arg(long)]
    out: PathBuf,
    /// Per-candidate report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Compiled `.cws` network.
    #[arg(long)]
    model: PathBuf,
    /// Input tensor; random input of the stored shape when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Overrides the thread count of every schedule.
    #[arg(long)]
    threads: Option<usize>,
    /// Schedule list from `tune`; default schedules when omitted.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Print per-layer execution counters.
    #[arg(long)]
    stats: bool,
    /// Output tensor.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Compiled `.cws` network.
    #[arg(long)]
    model: PathBuf,
    /// Schedule list from `tune`; default schedules when omitted.
    #[arg(long)]
    schedule: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    repeats: usize,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    warmup: usize,
    /// Overrides the thread count of every schedule.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value_t = 1)]
    batch: usize,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated algorithms.
    #[arg(long, value_delimiter = ',', value_parser = parse_algo)]
    algos: Option<Vec<Algorithm>>,
    /// Comma-separated schemes.
    #[arg(long, value_delimiter = ',', value_parser = parse_scheme)]
    schemes: Option<Vec<Scheme>>,
    /// Comma-separated target FLOPs rates.
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    dense_epochs: Option<usize>,
    #[arg(long)]
    prune_epochs: Option<usize>,
    #[arg(long)]
    retrain_epochs: Option<usize>,
    /// Tuning budget per layer (0 keeps default schedules).
    #[arg(long)]
    tune_budget: Option<usize>,
    #[arg(long)]
    bench_repeats: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Run cells in this many worker processes.
    #[arg(long, default_value_t = 1)]
    parallel_cells: usize,
    /// Worker mode: comma-separated cell indices to run.
    #[arg(long, value_delimiter = ',', hide = true)]
    cells: Option<Vec<usize>>,
    /// Worker mode: where to write the cell results.
    #[arg(long, hide = true, requires = "cells")]
    cells_out: Option<PathBuf>,
}

fn parse_algo(s: &str) -> Result<Algorithm, String> {
    s.parse().map_err(|e: kgs3d::Error| e.to_string())
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse().map_err(|e: kgs3d::Error| e.to_string())
}

fn parse_dims(s: &str) -> Result<FeatureDims, String> {
    let v: Vec<usize> = s.split(',').map(|x| x.trim().parse().map_err(|_| format!("bad dimension `{x}`"))).collect::<Result<_, _>>()?;
    match v[..] {
        [b, c, d, h, w] => Ok(FeatureDims::new(b, c, d, h, w)),
        _ => Err("expected batch,channels,depth,height,width".into()),
    }
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut s = String::new();
    for e in log {
        s.push_str(&serde_json::to_string(e)?);
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn load_schedules(path: Option<&Path>, net: &Network, batch: usize, threads: Option<usize>) -> Result<Vec<Schedule>> {
    let mut s: Vec<Schedule> = match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => net.default_schedules(batch, 1)?,
    };
    if s.len() != net.layers.len() {
        bail!("{} schedules for {} layers", s.len(), net.layers.len());
    }
    if let Some(t) = threads {
        s.iter_mut().for_each(|x| x.threads = t);
    }
    Ok(s)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let arch = ArchSpec::by_name(&a.arch)?;
    let task = ToyTask::for_arch(&arch, a.seed)?;
    let (model, log) = kgs3d::experiment::train_dense(&arch, &task, a.epochs, a.seed)?;
    io::save_model(&a.out, &model)?;
    if let Some(p) = &a.log {
        write_log(p, &log)?;
    }
    println!("test accuracy {:.4}", evaluate(&model, &task.test)?);
    Ok(())
}

fn cmd_prune(a: PruneArgs) -> Result<()> {
    let model = io::load_model(&a.model)?;
    let task = ToyTask::for_arch(model.arch(), a.data_seed.unwrap_or(a.seed))?;
    let cfg = PruneConfig {
        lambda: a.lambda,
        scheme: a.scheme,
        g_m: a.gm,
        g_n: a.gn,
        norm: NormKind::from_alpha(a.alpha),
        reweight_iterations: a.reweight_iterations,
        flops_weighted: a.flops_weighted,
        policy: a.threshold.map_or(MaskPolicy::TargetRate(a.target_rate), MaskPolicy::Absolute),
        prune_epochs: a.prune_epochs,
        retrain_epochs: a.epochs,
        seed: a.seed,
        update: if a.subgradient { UpdateRule::Subgradient } else { UpdateRule::Proximal },
        allow_dead_layers: a.allow_dead_layers,
        ..PruneConfig::default()
    };
    let out = prune(a.algo, &model, &task, &cfg)?;
    io::save_model(&a.out_model, &out.model)?;
    io::save_masks(&a.out_mask, &out.masks)?;
    if let Some(p) = &a.log {
        write_log(p, &out.log)?;
    }
    println!(
        "flops rate {:.4} param rate {:.4} test accuracy {:.4}",
        out.stats.flops_rate,
        out.stats.param_rate,
        evaluate(&out.model, &task.test)?
    );
    Ok(())
}

fn cmd_compile(a: CompileArgs) -> Result<()> {
    let model = io::load_model(&a.model)?;
    let masks = io::load_masks(&a.mask)?;
    let net = compile_network(&model, &masks, !a.no_reorder)?;
    io::save_network(&a.out, &net)?;
    for (i, l) in net.layers.iter().enumerate() {
        println!(
            "layer {i}: {} entries, {} weights, {} bytes (csr-style {})",
            l.store.kept_entries(),
            l.store.kept_weights(),
            l.store.byte_len(),
            l.store.csr_style_bytes()
        );
    }
    Ok(())
}

fn cmd_tune(a: TuneArgs) -> Result<()> {
    let net = io::load_network(&a.model)?;
    let mut d = a.input_dims.unwrap_or(net.input_dims(1));
    let mut schedules = Vec::new();
    let mut report = String::new();
    for (i, l) in net.layers.iter().enumerate() {
        let out = l.spec.output_dims(&d, &l.store.dims)?;
        let space = TuneSpace::for_layer(&l.store, &out, a.threads, a.budget, a.seed);
        let (best, rep) = tune(&l.store, &l.spec, d, &space, a.repeats)?;
        println!(
            "layer {i}: best {:.4} ms, default {:.4} ms, {} ties within 3%",
            rep.best().median * 1e3,
            rep.default_median().unwrap_or(f64::NAN) * 1e3,
            rep.ties.len() - 1
        );
        report.push_str(&format!("## layer {i}\n{}", rep.render()));
        schedules.push(best);
        d = out;
    }
    fs::write(&a.out, serde_json::to_string_pretty(&schedules)?)?;
    if let Some(p) = &a.report {
        fs::write(p, report)?;
    }
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let net = io::load_network(&a.model)?;
    let x = match &a.input {
        Some(p) => io::read_tensor(p)?,
        None => random_input(net.input_dims(1), 0)?,
    };
    let schedules = load_schedules(a.schedule.as_deref(), &net, x.dims().batch, a.threads)?;
    let prepared = PreparedNetwork::<f32>::new(&net.layers)?;
    let mode = if a.stats { ExecMode::Instrumented } else { ExecMode::Fast };
    let (y, stats) = prepared.run(&x, &schedules, mode)?;
    if a.stats {
        for (i, s) in stats.iter().enumerate() {
            println!("layer {i}: {}", serde_json::to_string(s)?);
        }
    }
    let d = y.dims();
    println!("output {}x{}x{}x{}x{}", d.batch, d.channels, d.depth, d.height, d.width);
    if let Some(p) = &a.out {
        io::write_tensor(p, &y)?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let net = io::load_network(&a.model)?;
    let schedules = load_schedules(a.schedule.as_deref(), &net, a.batch, a.threads)?;
    let prepared = PreparedNetwork::<f32>::new(&net.layers)?;
    let x = random_input(net.input_dims(a.batch), 0)?;
    let lat = time_repeats(a.warmup, a.repeats, || prepared.run(&x, &schedules, ExecMode::Fast).map(|_| ()))?;
    println!("{}", serde_json::to_string_pretty(&lat)?);
    Ok(())
}

fn experiment_config(a: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut c: ExperimentConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = &a.seeds {
        c.seeds = v.clone();
    }
    if let Some(v) = &a.algos {
        c.algorithms = v.clone();
    }
    if let Some(v) = &a.schemes {
        c.schemes = v.clone();
    }
    if let Some(v) = &a.rates {
        c.target_rates = v.clone();
    }
    if let Some(v) = a.lambda {
        c.prune.lambda = v;
    }
    if let Some(v) = a.dense_epochs {
        c.dense_epochs = v;
    }
    if let Some(v) = a.prune_epochs {
        c.prune.prune_epochs = v;
    }
    if let Some(v) = a.retrain_epochs {
        c.prune.retrain_epochs = v;
    }
    if let Some(v) = a.tune_budget {
        c.tune_budget = v;
    }
    if let Some(v) = a.bench_repeats {
        c.bench_repeats = v;
    }
    if let Some(v) = &a.out_dir {
        c.out_dir = v.clone();
    }
    c.validate()?;
    Ok(c)
}

/// Exit status: success only when no cell failed.
fn cmd_experiment(a: ExperimentArgs) -> Result<bool> {
    let cfg = experiment_config(&a)?;
    let all = cfg.cells();
    let mut cache = DenseCache::new(Some(cfg.out_dir.join("cache")));
    if let (Some(idx), Some(out)) = (&a.cells, &a.cells_out) {
        let keys = idx.iter().map(|&i| all.get(i).copied().with_context(|| format!("no cell {i}"))).collect::<Result<Vec<_>>>()?;
        let res = run_cells(&cfg, &keys, &mut cache)?;
        let rows: Vec<&CellResult> = res.iter().map(|c| &c.result).collect();
        fs::write(out, serde_json::to_string(&rows)?)?;
        fs::write(out.with_extension("jsonl"), log_lines(&res)?)?;
        return Ok(true);
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let (rows, logs) = if a.parallel_cells <= 1 {
        let res: Vec<CellOutput> = run_cells(&cfg, &all, &mut cache)?;
        let logs = log_lines(&res)?;
        (res.into_iter().map(|c| c.result).collect::<Vec<_>>(), logs)
    } else {
        run_parallel(&cfg, all.len(), a.parallel_cells)?
    };
    fs::write(cfg.out_dir.join("logs.jsonl"), logs)?;
    let report = ExperimentReport::new(&cfg, rows)?;
    report.write(&cfg.out_dir)?;
    print!("{}", report.to_markdown());
    Ok(report.failed_cells() == 0)
}

/// Splits the cells round-robin over worker processes and merges their rows
/// back into run order.
fn run_parallel(cfg: &ExperimentConfig, cells: usize, workers: usize) -> Result<(Vec<CellResult>, String)> {
    let dir = cfg.out_dir.join("workers");
    fs::create_dir_all(&dir)?;
    let cfg_path = dir.join("config.json");
    fs::write(&cfg_path, serde_json::to_string(cfg)?)?;
    let exe = std::env::current_exe()?;
    let mut children = Vec::new();
    for w in 0..workers.min(cells) {
        let idx: Vec<String> = (w..cells).step_by(workers).map(|i| i.to_string()).collect();
        let out = dir.join(format!("cells-{w}.json"));
        let child = Command::new(&exe)
            .arg("experiment")
            .arg("--config")
            .arg(&cfg_path)
            .arg("--cells")
            .arg(idx.join(","))
            .arg("--cells-out")
            .arg(&out)
            .spawn()?;
        children.push((w, out, child));
    }
    let mut slots: Vec<Option<CellResult>> = vec![None; cells];
    let mut logs = String::new();
    for (w, out, mut child) in children {
        if !child.wait()?.success() {
            bail!("worker {w} failed");
        }
        let rows: Vec<CellResult> = serde_json::from_str(&fs::read_to_string(&out)?)?;
        for (i, r) in (w..cells).step_by(workers).zip(rows) {
            slots[i] = Some(r);
        }
        logs.push_str(&fs::read_to_string(out.with_extension("jsonl"))?);
    }
    Ok((slots.into_iter().map(|r| r.expect("every cell ran")).collect(), logs))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Train(a) => cmd_train(a).map(|_| true),
        Cmd::Prune(a) => cmd_prune(a).map(|_| true),
        Cmd::Compile(a) => cmd_compile(a).map(|_| true),
        Cmd::Tune(a) => cmd_tune(a).map(|_| true),
        Cmd::Run(a) => cmd_run(a).map(|_| true),
        Cmd::Bench(a) => cmd_bench(a).map(|_| true),
        Cmd::Experiment(a) => cmd_experiment(a),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
