//! Experiment harness: dense training, pruning, compilation, tuning and
//! benchmarking over a seed x algorithm x scheme x rate matrix, with
//! Markdown, CSV and JSON-lines reports.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::exec::{compile_network, random_input, time_repeats, ExecMode, LatencyStats, Network, PreparedNetwork, DEFAULT_WARMUP};
use crate::io::{load_model, save_model};
use crate::pruning::{prune, Algorithm, MaskPolicy, PruneConfig};
use crate::sparsity::{GroupMask, Scheme};
use crate::tensor::partition;
use crate::train::{evaluate, train_epochs, ArchSpec, EpochLog, ToyModel, ToyTask, TrainOptions};
use crate::tuner::{tune, TuneSpace};
use crate::compile::Schedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub algorithms: Vec<Algorithm>,
    pub schemes: Vec<Scheme>,
    pub target_rates: Vec<f64>,
    pub arch: String,
    pub dense_epochs: usize,
    /// Base pruning configuration; scheme, seed and target are set per cell.
    pub prune: PruneConfig,
    /// Tuning budget per layer; 0 uses the default schedules.
    pub tune_budget: usize,
    pub tune_repeats: usize,
    pub bench_repeats: usize,
    pub threads: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            algorithms: Algorithm::ALL.to_vec(),
            schemes: Scheme::ALL.to_vec(),
            target_rates: vec![2.0],
            arch: "tiny3d".into(),
            dense_epochs: 30,
            prune: PruneConfig::default(),
            tune_budget: 16,
            tune_repeats: 5,
            bench_repeats: 10,
            threads: 1,
            out_dir: PathBuf::from("experiment-out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.algorithms.is_empty() || self.schemes.is_empty() || self.target_rates.is_empty() {
            return Err(invalid("experiment matrix is empty"));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(invalid("seeds must be distinct"));
        }
        if let Some(r) = self.target_rates.iter().find(|&&r| !(r >= 1.0)) {
            return Err(invalid(format!("target rate {r} must be >= 1")));
        }
        if self.bench_repeats == 0 || self.threads == 0 {
            return Err(invalid("bench repeats and threads must be >= 1"));
        }
        ArchSpec::by_name(&self.arch)?;
        self.prune.validate()
    }

    /// SHA-256 over the canonical JSON of everything but the output directory.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&c)?)))
    }

    /// Cells in run order: seed, rate, algorithm, scheme.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut v = Vec::new();
        for &seed in &self.seeds {
            for &target_rate in &self.target_rates {
                for &algorithm in &self.algorithms {
                    for &scheme in &self.schemes {
                        v.push(CellKey { seed, target_rate, algorithm, scheme });
                    }
                }
            }
        }
        v
    }

    fn cell_config(&self, k: &CellKey) -> PruneConfig {
        PruneConfig {
            scheme: k.scheme,
            seed: k.seed,
            policy: MaskPolicy::TargetRate(k.target_rate),
            ..self.prune.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub seed: u64,
    pub target_rate: f64,
    pub algorithm: Algorithm,
    pub scheme: Scheme,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    pub dense_accuracy: f64,
    pub accuracy: f64,
    pub flops_rate: f64,
    pub param_rate: f64,
    pub dense_macs: u64,
    pub sparse_macs: u64,
    pub speedup: Option<SpeedupRow>,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub dense_median: f64,
    pub sparse_median: f64,
    pub flops_rate: f64,
    pub speedup: f64,
    pub efficiency: f64,
    /// Efficiency below 0.5 or above 1.05.
    pub flagged: bool,
}

/// Speedup is dense median over sparse median; efficiency is speedup over
/// the FLOPs rate.
pub fn report_speedup(dense: &LatencyStats, sparse: &LatencyStats, flops_rate: f64) -> SpeedupRow {
    let speedup = dense.median / sparse.median;
    let efficiency = speedup / flops_rate;
    SpeedupRow {
        dense_median: dense.median,
        sparse_median: sparse.median,
        flops_rate,
        speedup,
        efficiency,
        flagged: !(0.5..=1.05).contains(&efficiency),
    }
}

/// Trains the dense baseline of `arch` for `seed`.
pub fn train_dense(arch: &ArchSpec, task: &ToyTask, epochs: usize, seed: u64) -> Result<(ToyModel, Vec<EpochLog>)> {
    let mut model = ToyModel::new(arch, seed)?;
    let opts = TrainOptions { epochs, seed, ..Default::default() };
    let log = train_epochs(&mut model, &task.train, &opts, None, None, Some(&task.test), "dense")?;
    Ok((model, log))
}

/// Dense baselines keyed by (seed, arch, epochs), mirrored on disk when a
/// directory is given.
#[derive(Default)]
pub struct DenseCache {
    dir: Option<PathBuf>,
    models: HashMap<(u64, String, usize), ToyModel>,
}

impl DenseCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self { dir, models: HashMap::new() }
    }

    fn path(&self, seed: u64, arch: &str, epochs: usize) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("dense-{arch}-s{seed}-e{epochs}.bin")))
    }

    pub fn get(&mut self, arch: &ArchSpec, task: &ToyTask, epochs: usize, seed: u64) -> Result<ToyModel> {
        let key = (seed, arch.name.clone(), epochs);
        if let Some(m) = self.models.get(&key) {
            return Ok(m.clone());
        }
        let path = self.path(seed, &arch.name, epochs);
        let model = match path.as_deref().filter(|p| p.exists()).map(load_model) {
            Some(Ok(m)) if m.arch() == arch => m,
            _ => {
                let (m, _) = train_dense(arch, task, epochs, seed)?;
                if let Some(p) = &path {
                    fs::create_dir_all(p.parent().expect("cache file has a parent"))?;
                    let tmp = p.with_extension(format!("tmp{}", std::process::id()));
                    save_model(&tmp, &m)?;
                    fs::rename(&tmp, p)?;
                }
                m
            }
        };
        self.models.insert(key, model.clone());
        Ok(model)
    }
}

/// Tuned per-layer schedules for batch-1 inputs.
pub fn tune_network(net: &Network, budget: usize, repeats: usize, threads: usize, seed: u64) -> Result<Vec<Schedule>> {
    if budget == 0 {
        return net.default_schedules(1, threads);
    }
    let inputs = net.layer_inputs(1)?;
    net.layers
        .iter()
        .zip(inputs)
        .map(|(l, d)| {
            let out = l.spec.output_dims(&d, &l.store.dims)?;
            let space = TuneSpace::for_layer(&l.store, &out, threads, budget, seed);
            Ok(tune(&l.store, &l.spec, d, &space, repeats)?.0)
        })
        .collect()
}

/// Median-based latency of the whole conv stack on a fixed batch-1 input,
/// plus the total MAC count.
pub fn bench_network(net: &Network, schedules: &[Schedule], repeats: usize) -> Result<(LatencyStats, u64)> {
    let prepared = PreparedNetwork::<f32>::new(&net.layers)?;
    let x = random_input(net.input_dims(1), 0xbe7c)?;
    let (_, stats) = prepared.run(&x, schedules, ExecMode::Instrumented)?;
    let macs = stats.iter().map(|s| s.multiply_accumulates).sum();
    let lat = time_repeats(DEFAULT_WARMUP, repeats, || prepared.run(&x, schedules, ExecMode::Fast).map(|_| ()))?;
    Ok((lat, macs))
}

/// All-kept KGS masks of a model (the dense baseline in the sparse engine).
pub fn dense_masks(model: &ToyModel, g_m: usize, g_n: usize) -> Result<Vec<GroupMask>> {
    model
        .convs()
        .iter()
        .map(|c| Ok(GroupMask::all(Scheme::Kgs, partition(c.weights.dims(), g_m, g_n)?, true)))
        .collect()
}

/// Per-cell output: the result row and the training log.
pub struct CellOutput {
    pub result: CellResult,
    pub log: Vec<EpochLog>,
}

/// Runs the given cells; stage failures are recorded in the row.
pub fn run_cells(cfg: &ExperimentConfig, cells: &[CellKey], cache: &mut DenseCache) -> Result<Vec<CellOutput>> {
    cfg.validate()?;
    let arch = ArchSpec::by_name(&cfg.arch)?;
    let mut dense_lat: HashMap<u64, (LatencyStats, u64)> = HashMap::new();
    let mut out = Vec::with_capacity(cells.len());
    for k in cells {
        let start = Instant::now();
        let mut row = CellResult {
            key: *k,
            dense_accuracy: f64::NAN,
            accuracy: f64::NAN,
            flops_rate: f64::NAN,
            param_rate: f64::NAN,
            dense_macs: 0,
            sparse_macs: 0,
            speedup: None,
            seconds: 0.0,
            error: None,
        };
        let mut log = Vec::new();
        let res = (|| -> Result<()> {
            let task = ToyTask::for_arch(&arch, k.seed)?;
            let dense = cache.get(&arch, &task, cfg.dense_epochs, k.seed)?;
            row.dense_accuracy = evaluate(&dense, &task.test)?;
            let pc = cfg.cell_config(k);
            let o = prune(k.algorithm, &dense, &task, &pc)?;
            log = o.log;
            row.accuracy = evaluate(&o.model, &task.test)?;
            row.flops_rate = o.stats.flops_rate;
            row.param_rate = o.stats.param_rate;
            if !dense_lat.contains_key(&k.seed) {
                let net = compile_network(&dense, &dense_masks(&dense, pc.g_m, pc.g_n)?, true)?;
                let s = tune_network(&net, cfg.tune_budget, cfg.tune_repeats, cfg.threads, k.seed)?;
                dense_lat.insert(k.seed, bench_network(&net, &s, cfg.bench_repeats)?);
            }
            let (dl, dm) = dense_lat[&k.seed].clone();
            let net = compile_network(&o.model, &o.masks, true)?;
            let s = tune_network(&net, cfg.tune_budget, cfg.tune_repeats, cfg.threads, k.seed)?;
            let (sl, sm) = bench_network(&net, &s, cfg.bench_repeats)?;
            row.dense_macs = dm;
            row.sparse_macs = sm;
            row.speedup = Some(report_speedup(&dl, &sl, row.flops_rate));
            Ok(())
        })();
        if let Err(e) = res {
            log::warn!("cell {k:?} failed: {e}");
            row.error = Some(e.to_string());
        }
        row.seconds = start.elapsed().as_secs_f64();
        log::info!(
            "seed {} {} {} @{}: acc {:.4} rate {:.3} ({:.1}s)",
            k.seed,
            k.algorithm,
            k.scheme,
            k.target_rate,
            row.accuracy,
            row.flops_rate,
            row.seconds
        );
        out.push(CellOutput { result: row, log });
    }
    Ok(out)
}

/// One pairwise ordering claim `better >= worse` over paired seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub target_rate: f64,
    /// The fixed factor (an algorithm or a scheme name).
    pub within: String,
    pub better: String,
    pub worse: String,
    pub mean_better: f64,
    pub mean_worse: f64,
    /// Seeds where `better` reached at least the accuracy of `worse`.
    pub wins: usize,
    pub seeds: usize,
    pub holds: bool,
}

/// Wins needed out of `n` paired seeds (3 of 5).
pub fn required_wins(n: usize) -> usize {
    (3 * n).div_ceil(5)
}

fn pair_check(rows: &[CellResult], rate: f64, within: String, better: (Algorithm, Scheme), worse: (Algorithm, Scheme), names: (String, String)) -> Option<OrderingCheck> {
    let acc = |a: Algorithm, s: Scheme| -> HashMap<u64, f64> {
        rows.iter()
            .filter(|r| r.key.target_rate == rate && r.key.algorithm == a && r.key.scheme == s && r.error.is_none())
            .map(|r| (r.key.seed, r.accuracy))
            .collect()
    };
    let (b, w) = (acc(better.0, better.1), acc(worse.0, worse.1));
    let mut seeds: Vec<u64> = b.keys().filter(|s| w.contains_key(s)).copied().collect();
    if seeds.is_empty() {
        return None;
    }
    seeds.sort_unstable();
    let n = seeds.len();
    let mean_better = seeds.iter().map(|s| b[s]).sum::<f64>() / n as f64;
    let mean_worse = seeds.iter().map(|s| w[s]).sum::<f64>() / n as f64;
    let wins = seeds.iter().filter(|s| b[s] >= w[s]).count();
    Some(OrderingCheck {
        target_rate: rate,
        within,
        better: names.0,
        worse: names.1,
        mean_better,
        mean_worse,
        wins,
        seeds: n,
        holds: mean_better >= mean_worse && wins >= required_wins(n),
    })
}

/// KGS >= Vanilla >= Filter within each algorithm and
/// reweighted >= reg >= heuristic within each scheme.
pub fn ordering_checks(rows: &[CellResult]) -> Vec<OrderingCheck> {
    let mut rates: Vec<f64> = rows.iter().map(|r| r.key.target_rate).collect();
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    let schemes = [Scheme::Kgs, Scheme::Vanilla, Scheme::Filter];
    let algos = [Algorithm::Reweighted, Algorithm::Regularization, Algorithm::Heuristic];
    let mut v = Vec::new();
    for &rate in &rates {
        for a in algos {
            for pair in schemes.windows(2) {
                v.extend(pair_check(rows, rate, a.to_string(), (a, pair[0]), (a, pair[1]), (pair[0].to_string(), pair[1].to_string())));
            }
        }
        for s in schemes {
            for pair in algos.windows(2) {
                v.extend(pair_check(rows, rate, s.to_string(), (pair[0], s), (pair[1], s), (pair[0].to_string(), pair[1].to_string())));
            }
        }
    }
    v
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub rows: Vec<CellResult>,
    pub orderings: Vec<OrderingCheck>,
}

impl ExperimentReport {
    pub fn new(config: &ExperimentConfig, rows: Vec<CellResult>) -> Result<Self> {
        Ok(Self {
            config_hash: config.hash()?,
            orderings: ordering_checks(&rows),
            config: config.clone(),
            rows,
        })
    }

    pub fn failed_cells(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    pub const COLUMNS: [&'static str; 12] = [
        "seed",
        "algo",
        "scheme",
        "target_rate",
        "flops_rate",
        "accuracy",
        "dense_accuracy",
        "dense_ms",
        "sparse_ms",
        "speedup",
        "efficiency",
        "status",
    ];

    /// The formatted cells shared by the CSV and Markdown renderings.
    fn cells(r: &CellResult) -> [String; 12] {
        let sp = r.speedup.as_ref();
        let f = |v: Option<f64>, p: usize| v.filter(|x| x.is_finite()).map_or("-".to_string(), |x| format!("{x:.p$}"));
        [
            r.key.seed.to_string(),
            r.key.algorithm.to_string(),
            r.key.scheme.to_string(),
            format!("{:.3}", r.key.target_rate),
            f(Some(r.flops_rate), 3),
            f(Some(r.accuracy), 4),
            f(Some(r.dense_accuracy), 4),
            f(sp.map(|s| s.dense_median * 1e3), 4),
            f(sp.map(|s| s.sparse_median * 1e3), 4),
            f(sp.map(|s| s.speedup), 3),
            f(sp.map(|s| s.efficiency), 3),
            match (&r.error, sp) {
                (Some(e), _) => format!("failed: {}", e.replace([',', '|', '\n'], ";")),
                (None, Some(s)) if s.flagged => "ok (efficiency flagged)".into(),
                _ => "ok".into(),
            },
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut s = Self::COLUMNS.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&Self::cells(r).join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Pruning experiment\n\nconfig hash `{}`\n", self.config_hash);
        let _ = writeln!(s, "| {} |", Self::COLUMNS.join(" | "));
        let _ = writeln!(s, "|{}", "---|".repeat(Self::COLUMNS.len()));
        for r in &self.rows {
            let _ = writeln!(s, "| {} |", Self::cells(r).join(" | "));
        }
        if !self.orderings.is_empty() {
            let _ = writeln!(s, "\n## Orderings (ties count as wins)\n");
            let _ = writeln!(s, "| rate | within | claim | mean | wins | holds |");
            let _ = writeln!(s, "|---|---|---|---|---|---|");
            for o in &self.orderings {
                let _ = writeln!(
                    s,
                    "| {:.3} | {} | {} >= {} | {:.4} vs {:.4} | {}/{} | {} |",
                    o.target_rate,
                    o.within,
                    o.better,
                    o.worse,
                    o.mean_better,
                    o.mean_worse,
                    o.wins,
                    o.seeds,
                    if o.holds { "yes" } else { "VIOLATED" }
                );
            }
        }
        s
    }

    /// Writes `report.md`, `report.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.md"), self.to_markdown())?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct LogLine<'a> {
    seed: u64,
    algo: Algorithm,
    scheme: Scheme,
    target_rate: f64,
    #[serde(flatten)]
    entry: &'a EpochLog,
}

/// Appends the training logs of `cells` to `logs.jsonl`-style text.
pub fn log_lines(cells: &[CellOutput]) -> Result<String> {
    let mut s = String::new();
    for c in cells {
        for e in &c.log {
            let k = c.result.key;
            s.push_str(&serde_json::to_string(&LogLine {
                seed: k.seed,
                algo: k.algorithm,
                scheme: k.scheme,
                target_rate: k.target_rate,
                entry: e,
            })?);
            s.push('\n');
        }
    }
    Ok(s)
}

/// Runs the full matrix sequentially and writes all report files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut cache = DenseCache::new(Some(cfg.out_dir.join("cache")));
    let outputs = run_cells(cfg, &cfg.cells(), &mut cache)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("logs.jsonl"), log_lines(&outputs)?)?;
    let report = ExperimentReport::new(cfg, outputs.into_iter().map(|c| c.result).collect())?;
    report.write(&cfg.out_dir)?;
    Ok(report)
}
