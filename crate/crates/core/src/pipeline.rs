//! Experiment orchestration behind the CLI subcommands.
//!
//! A run directory holds `report.csv` and `timing.csv` plus one `seed_<s>/`
//! directory per seed with `checkpoint.bin`, `coefficients.bin` and `steps.csv`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::blo::{
    finetune_phase, joint_phase, k_replicate_search, FinetuneConfig, JointConfig, ReplicateSearch, StepRecord,
    STEPS_CSV_HEADER,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint, NamedTensors};
use crate::config::{Method, RunConfig, TaskSource};
use crate::data::{split_indices, subsample, Dataset, SplitPair};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Metric, Predictions};
use crate::model::{AlphaInit, Coefficients, Network, TaskKind};
use crate::seed;
use crate::synthetic::make_synthetic_transfer;
use crate::tensor::Tensor;

pub const REPORT_CSV_HEADER: &str = "method,task,metric,seed,value";
pub const TIMING_CSV_HEADER: &str = "seed,phase,seconds";

#[derive(Clone, Debug)]
pub struct TaskData {
    pub name: String,
    pub source: Option<Dataset>,
    pub target: Dataset,
    pub test: Dataset,
}

pub fn load_task(cfg: &RunConfig) -> Result<TaskData> {
    match cfg.task.source {
        TaskSource::Synthetic => {
            let t = make_synthetic_transfer(&cfg.synthetic)?;
            Ok(TaskData {
                name: cfg.task.name.clone(),
                source: Some(t.source),
                target: t.target,
                test: t.test,
            })
        }
        TaskSource::Csv => {
            let kind = cfg.task.task_kind()?;
            let need = |p: &Option<PathBuf>, key: &str| -> Result<PathBuf> {
                p.clone().ok_or_else(|| Error::Config(format!("task.{key} is required for CSV tasks")))
            };
            let source = match &cfg.task.source_csv {
                Some(p) => Some(Dataset::load_csv(p, kind)?),
                None => None,
            };
            Ok(TaskData {
                name: cfg.task.name.clone(),
                source,
                target: Dataset::load_csv(need(&cfg.task.target_csv, "target_csv")?, kind)?,
                test: Dataset::load_csv(need(&cfg.task.test_csv, "test_csv")?, kind)?,
            })
        }
    }
}

/// Trains a fresh plain network on the source task.
pub fn pretrain(cfg: &RunConfig, source: &Dataset) -> Result<Network> {
    let p = &cfg.pretrain;
    let net = Network::plain(source.dim(), &cfg.model.hidden, cfg.model.activation, source.task, p.seed)?;
    let ft = FinetuneConfig {
        epochs: p.epochs,
        lr: p.lr,
        warmup_ratio: p.warmup_ratio,
        weight_decay: p.weight_decay,
        batch_size: p.batch_size,
        seed: seed::derive(p.seed, "pretrain", 0),
    };
    Ok(finetune_phase(net, source, None, &ft)?.network)
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PathBuf> {
    let data = load_task(cfg)?;
    let source = data
        .source
        .as_ref()
        .ok_or_else(|| Error::Config("pretraining needs a source dataset (task.source_csv)".into()))?;
    let net = pretrain(cfg, source)?;
    let path = cfg.model.pretrained.clone();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_checkpoint(&net.named_tensors(), &path)?;
    Ok(path)
}

pub fn load_pretrained(cfg: &RunConfig) -> Result<Network> {
    let path = &cfg.model.pretrained;
    if !path.exists() {
        return Err(Error::Config(format!(
            "pretrained checkpoint {} not found; run `pretrain` first",
            path.display()
        )));
    }
    let tensors = load_checkpoint(path)?;
    Network::from_named_tensors(&tensors, cfg.model.activation, cfg.task_kind()?)
}

pub fn metrics_for(task: TaskKind) -> &'static [Metric] {
    match task {
        TaskKind::Classification { .. } => &[Metric::Accuracy, Metric::F1, Metric::Mcc],
        TaskKind::Regression => &[Metric::Pearson, Metric::Spearman],
    }
}

pub fn predictions(net: &Network, x: &Tensor) -> Result<Predictions> {
    let out = net.predict(x)?;
    Ok(match net.task {
        TaskKind::Classification { classes } => Predictions::Classes(
            out.data()
                .chunks(classes)
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                        .0
                })
                .collect(),
        ),
        TaskKind::Regression => Predictions::Reals(out.into_data()),
    })
}

pub fn evaluate_network(net: &Network, ds: &Dataset, metric: Metric) -> Result<f64> {
    evaluate(metric, &predictions(net, &ds.features)?, &ds.targets)
}

/// Element-wise mean of networks with identical tensor names and shapes.
pub fn average_networks(nets: &[Network]) -> Result<Network> {
    let first = nets.first().ok_or_else(|| Error::Input("no networks to average".into()))?;
    let mut acc: NamedTensors = first.named_tensors();
    for n in &nets[1..] {
        let other = n.named_tensors();
        if other.len() != acc.len() {
            return Err(Error::Input("cannot average networks with different layouts".into()));
        }
        for ((name, a), (oname, b)) in acc.iter_mut().zip(&other) {
            if name != oname || a.shape() != b.shape() {
                return Err(Error::Input(format!(
                    "cannot average `{name}` {:?} with `{oname}` {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            *a = a.zip_with(b, |x, y| x + y)?;
        }
    }
    let k = nets.len() as f64;
    let averaged: NamedTensors = acc.into_iter().map(|(n, t)| (n, t.map(|x| x / k))).collect();
    Network::from_named_tensors(&averaged, first.activation, first.task)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimes {
    pub search: f64,
    pub finetune: f64,
}

impl PhaseTimes {
    pub fn total(&self) -> f64 {
        self.search + self.finetune
    }
}

/// Everything one seed of one method produces.
#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub metrics: Vec<(Metric, f64)>,
    pub times: PhaseTimes,
    pub network: Network,
    pub coefficients: Option<Vec<Coefficients>>,
    pub steps: Vec<StepRecord>,
    /// State at the end of the search phase, for a later separate finetune.
    pub search_network: Option<Network>,
}

/// Low-resource training set for `seed`.
pub fn train_set(cfg: &RunConfig, target: &Dataset, seed_value: u64) -> Result<Dataset> {
    let n = cfg.data.train_size.unwrap_or(target.len());
    subsample(target, n, seed::derive(seed_value, "subsample", 0))
}

fn head_seed(seed_value: u64) -> u64 {
    seed::derive(seed_value, "head", 0)
}

fn alpha_init(cfg: &RunConfig, std: f64, seed_value: u64) -> AlphaInit {
    AlphaInit {
        rank: cfg.search.rank,
        mean: cfg.search.alpha_init_mean,
        std,
        seed: seed::derive(seed_value, "alpha", 0),
    }
}

fn finetune_config(cfg: &RunConfig, epochs: usize, lr: f64, seed_value: u64) -> FinetuneConfig {
    FinetuneConfig {
        epochs,
        lr,
        warmup_ratio: cfg.finetune.warmup_ratio,
        weight_decay: cfg.finetune.weight_decay,
        batch_size: cfg.finetune.batch_size,
        seed: seed::derive(seed_value, "finetune", 0),
    }
}

/// Split used to pick a finetune grid point when the grid has several.
fn selection_split(cfg: &RunConfig, train: &Dataset, seed_value: u64) -> Result<SplitPair> {
    split_indices(train.len(), cfg.search.split_ratio, seed::derive(seed_value, "split", 0))
}

/// Picks `(epochs, lr)` from the configured grid by training on `selection.train`
/// and scoring on `selection.val`, then trains on all of `train` with it.
/// A one-point grid skips the selection runs.
fn select_and_train(
    cfg: &RunConfig,
    train: &Dataset,
    selection: &SplitPair,
    seed_value: u64,
    fit: impl Fn(&Dataset, &FinetuneConfig) -> Result<Network>,
) -> Result<Network> {
    let grid = cfg.finetune.grid();
    let (epochs, lr) = if grid.len() == 1 {
        grid[0]
    } else {
        let inner = train.select(&selection.train, "grid-train")?;
        let held = train.select(&selection.val, "grid-val")?;
        let mut best = (grid[0], f64::NEG_INFINITY);
        for &(e, lr) in &grid {
            let net = fit(&inner, &finetune_config(cfg, e, lr, seed_value))?;
            let score = evaluate_network(&net, &held, cfg.run.metric)?;
            if score > best.1 {
                best = ((e, lr), score);
            }
        }
        best.0
    };
    fit(train, &finetune_config(cfg, epochs, lr, seed_value))
}

fn select_and_finetune(
    cfg: &RunConfig,
    start: Network,
    coefficients: Option<&[Coefficients]>,
    train: &Dataset,
    selection: &SplitPair,
    seed_value: u64,
) -> Result<Network> {
    select_and_train(cfg, train, selection, seed_value, |data, ft| {
        Ok(finetune_phase(start.clone(), data, coefficients, ft)?.network)
    })
}

/// Search phase for one seed: K replicates from fresh mixup networks.
pub fn search_for_seed(cfg: &RunConfig, pretrained: &Network, train: &Dataset, seed_value: u64) -> Result<ReplicateSearch> {
    let task = cfg.task_kind()?;
    let search = crate::blo::SearchConfig {
        seed: seed_value,
        ..cfg.search.clone()
    };
    k_replicate_search(train, &search, |rep_seed| {
        Network::from_pretrained(pretrained, task, Some(alpha_init(cfg, cfg.search.alpha_init_std, rep_seed)), head_seed(rep_seed))
    })
}

fn offset_steps(search: &ReplicateSearch, total_steps: usize) -> Vec<StepRecord> {
    search
        .replicates
        .iter()
        .enumerate()
        .flat_map(|(k, r)| {
            r.steps.iter().cloned().map(move |mut s| {
                s.step += k * total_steps;
                s
            })
        })
        .collect()
}

fn score(net: &Network, test: &Dataset) -> Result<Vec<(Metric, f64)>> {
    metrics_for(net.task)
        .iter()
        .map(|&m| Ok((m, evaluate_network(net, test, m)?)))
        .collect()
}

/// Finetune half of the method for one seed, given searched coefficients.
pub fn finetune_searched(
    cfg: &RunConfig,
    pretrained: &Network,
    data: &TaskData,
    seed_value: u64,
    coefficients: &[Coefficients],
    search_network: Option<Network>,
) -> Result<(Network, f64)> {
    let train = train_set(cfg, &data.target, seed_value)?;
    let start = match search_network {
        Some(net) if !cfg.run.reset_w => net,
        _ => Network::from_pretrained(
            pretrained,
            cfg.task_kind()?,
            Some(alpha_init(cfg, cfg.search.alpha_init_std, seed_value)),
            head_seed(seed_value),
        )?,
    };
    let selection = split_indices(train.len(), cfg.search.split_ratio, seed::derive(seed_value, "split", 0))?;
    let t = Instant::now();
    let net = select_and_finetune(cfg, start, Some(coefficients), &train, &selection, seed_value)?;
    Ok((net, t.elapsed().as_secs_f64()))
}

/// Runs one method end to end for one seed.
pub fn run_method(cfg: &RunConfig, method: Method, pretrained: &Network, data: &TaskData, seed_value: u64) -> Result<SeedOutcome> {
    let task = cfg.task_kind()?;
    let train = train_set(cfg, &data.target, seed_value)?;
    let mut times = PhaseTimes::default();
    let mut coefficients = None;
    let mut steps = Vec::new();
    let mut search_network = None;

    let network = match method {
        Method::Ours => {
            let t = Instant::now();
            let search = search_for_seed(cfg, pretrained, &train, seed_value)?;
            times.search = t.elapsed().as_secs_f64();
            steps = offset_steps(&search, cfg.search.total_steps);
            let searched = search.replicates[0].network.clone();
            let (net, ft) = finetune_searched(cfg, pretrained, data, seed_value, &search.coefficients, Some(searched.clone()))?;
            times.finetune = ft;
            coefficients = Some(search.coefficients);
            search_network = Some(searched);
            net
        }
        Method::Vanilla => {
            let t = Instant::now();
            let start = Network::from_pretrained(pretrained, task, None, head_seed(seed_value))?;
            let net = select_and_finetune(cfg, start, None, &train, &selection_split(cfg, &train, seed_value)?, seed_value)?;
            times.finetune = t.elapsed().as_secs_f64();
            net
        }
        Method::RandomAlpha => {
            let t = Instant::now();
            let start = Network::from_pretrained(
                pretrained,
                task,
                Some(alpha_init(cfg, cfg.run.random_alpha_std, seed_value)),
                head_seed(seed_value),
            )?;
            let coefs = start.coefficients()?;
            let net = select_and_finetune(cfg, start, Some(&coefs), &train, &selection_split(cfg, &train, seed_value)?, seed_value)?;
            times.finetune = t.elapsed().as_secs_f64();
            coefficients = Some(coefs);
            net
        }
        Method::Joint => {
            let t = Instant::now();
            let start = Network::from_pretrained(
                pretrained,
                task,
                Some(alpha_init(cfg, cfg.search.alpha_init_std, seed_value)),
                head_seed(seed_value),
            )?;
            let net = select_and_train(cfg, &train, &selection_split(cfg, &train, seed_value)?, seed_value, |data, ft| {
                let jc = JointConfig {
                    finetune: ft.clone(),
                    lr_alpha: cfg.search.eta_alpha,
                    warmup_ratio_alpha: cfg.search.warmup_ratio_alpha,
                    weight_decay_alpha: cfg.search.lambda2,
                };
                Ok(joint_phase(start.clone(), data, &jc)?.network)
            })?;
            times.finetune = t.elapsed().as_secs_f64();
            coefficients = Some(net.coefficients()?);
            net
        }
        Method::ModelSoup => {
            let t = Instant::now();
            let mut members = Vec::with_capacity(cfg.run.soup_size);
            for i in 0..cfg.run.soup_size as u64 {
                let member_seed = seed::derive(seed_value, "soup", i);
                let start = Network::from_pretrained(pretrained, task, None, head_seed(member_seed))?;
                let split = selection_split(cfg, &train, member_seed)?;
                members.push(select_and_finetune(cfg, start, None, &train, &split, member_seed)?);
            }
            times.finetune = t.elapsed().as_secs_f64();
            average_networks(&members)?
        }
    };
    Ok(SeedOutcome {
        seed: seed_value,
        metrics: score(&network, &data.test)?,
        times,
        network,
        coefficients,
        steps,
        search_network,
    })
}

/// Maps `f` over the configured seeds on up to `run.workers` threads; results keep seed order.
pub fn for_each_seed<T: Send>(cfg: &RunConfig, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    if cfg.run.workers <= 1 {
        return cfg.run.seeds.iter().map(|&s| f(s)).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| cfg.run.seeds.par_iter().map(|&s| f(s)).collect())
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub metric: String,
    pub values: Vec<(u64, f64)>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub method: String,
    pub task: String,
    pub metrics: Vec<MetricSummary>,
    pub times: Vec<(u64, PhaseTimes)>,
}

impl ExperimentReport {
    pub fn from_outcomes(method: Method, task: &str, outcomes: &[SeedOutcome]) -> Self {
        let names: Vec<Metric> = outcomes
            .first()
            .map(|o| o.metrics.iter().map(|(m, _)| *m).collect())
            .unwrap_or_default();
        let metrics = names
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let values: Vec<(u64, f64)> = outcomes.iter().map(|o| (o.seed, o.metrics[i].1)).collect();
                let raw: Vec<f64> = values.iter().map(|v| v.1).collect();
                let (mean, std) = mean_std(&raw);
                MetricSummary {
                    metric: m.name().to_string(),
                    values,
                    mean,
                    std,
                }
            })
            .collect();
        ExperimentReport {
            method: method.name().to_string(),
            task: task.to_string(),
            metrics,
            times: outcomes.iter().map(|o| (o.seed, o.times)).collect(),
        }
    }

    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.metric == name)
    }

    pub fn mean_total_seconds(&self) -> f64 {
        if self.times.is_empty() {
            return 0.0;
        }
        self.times.iter().map(|t| t.1.total()).sum::<f64>() / self.times.len() as f64
    }

    /// Per-seed values followed by `mean` and `std` rows. Floats use the
    /// shortest representation that parses back to the same bits.
    pub fn report_csv(&self) -> String {
        let mut s = format!("{REPORT_CSV_HEADER}\n");
        for m in &self.metrics {
            for (seed_value, v) in &m.values {
                let _ = writeln!(s, "{},{},{},{seed_value},{v}", self.method, self.task, m.metric);
            }
            let _ = writeln!(s, "{},{},{},mean,{}", self.method, self.task, m.metric, m.mean);
            let _ = writeln!(s, "{},{},{},std,{}", self.method, self.task, m.metric, m.std);
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = format!("{TIMING_CSV_HEADER}\n");
        for (seed_value, t) in &self.times {
            let _ = writeln!(s, "{seed_value},search,{:.6}", t.search);
            let _ = writeln!(s, "{seed_value},finetune,{:.6}", t.finetune);
        }
        s
    }

    /// Parses `report.csv` (and optionally `timing.csv`) back. Mean and std are
    /// taken from the file as written.
    pub fn parse(report: &str, timing: Option<&str>) -> Result<Self> {
        let mut lines = report.lines();
        if lines.next() != Some(REPORT_CSV_HEADER) {
            return Err(Error::Input("report.csv: unexpected header".into()));
        }
        let mut rep = ExperimentReport {
            method: String::new(),
            task: String::new(),
            metrics: Vec::new(),
            times: Vec::new(),
        };
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Input(format!("report.csv line {}: expected 5 fields", i + 2)));
            }
            rep.method = f[0].to_string();
            rep.task = f[1].to_string();
            let value: f64 = f[4]
                .parse()
                .map_err(|_| Error::Input(format!("report.csv line {}: bad value `{}`", i + 2, f[4])))?;
            if rep.metrics.last().map(|m| m.metric.as_str()) != Some(f[2]) {
                rep.metrics.push(MetricSummary {
                    metric: f[2].to_string(),
                    values: Vec::new(),
                    mean: f64::NAN,
                    std: f64::NAN,
                });
            }
            let m = rep.metrics.last_mut().expect("pushed above");
            match f[3] {
                "mean" => m.mean = value,
                "std" => m.std = value,
                s => m.values.push((
                    s.parse()
                        .map_err(|_| Error::Input(format!("report.csv line {}: bad seed `{s}`", i + 2)))?,
                    value,
                )),
            }
        }
        if let Some(timing) = timing {
            let mut lines = timing.lines();
            if lines.next() != Some(TIMING_CSV_HEADER) {
                return Err(Error::Input("timing.csv: unexpected header".into()));
            }
            for line in lines {
                let f: Vec<&str> = line.split(',').collect();
                let (Some(s), Some(phase), Some(secs)) = (f.first(), f.get(1), f.get(2)) else {
                    return Err(Error::Input(format!("timing.csv: bad line `{line}`")));
                };
                let s: u64 = s.parse().map_err(|_| Error::Input(format!("timing.csv: bad seed `{s}`")))?;
                let secs: f64 = secs.parse().map_err(|_| Error::Input(format!("timing.csv: bad seconds `{secs}`")))?;
                let idx = match rep.times.iter().position(|t| t.0 == s) {
                    Some(i) => i,
                    None => {
                        rep.times.push((s, PhaseTimes::default()));
                        rep.times.len() - 1
                    }
                };
                match *phase {
                    "search" => rep.times[idx].1.search = secs,
                    "finetune" => rep.times[idx].1.finetune = secs,
                    other => return Err(Error::Input(format!("timing.csv: unknown phase `{other}`"))),
                }
            }
        }
        Ok(rep)
    }
}

fn seed_dir(out: &Path, seed_value: u64) -> PathBuf {
    out.join(format!("seed_{seed_value}"))
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

pub fn coefficients_tensors(coefs: &[Coefficients]) -> NamedTensors {
    coefs
        .iter()
        .enumerate()
        .flat_map(|(i, c)| {
            [
                (format!("layer{i}.coef_task"), c.task.clone()),
                (format!("layer{i}.coef_pretrained"), c.pretrained.clone()),
            ]
        })
        .collect()
}

pub fn coefficients_from_tensors(tensors: &NamedTensors) -> Result<Vec<Coefficients>> {
    let get = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Input(format!("coefficients file has no `{name}`")))
    };
    let mut out = Vec::new();
    let mut i = 0;
    while tensors.iter().any(|(n, _)| *n == format!("layer{i}.coef_task")) {
        out.push(Coefficients {
            task: get(&format!("layer{i}.coef_task"))?,
            pretrained: get(&format!("layer{i}.coef_pretrained"))?,
        });
        i += 1;
    }
    Ok(out)
}

fn steps_csv(steps: &[StepRecord]) -> String {
    let mut s = format!("{STEPS_CSV_HEADER}\n");
    for r in steps {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

fn persist_seed(out: &Path, o: &SeedOutcome) -> Result<()> {
    let dir = seed_dir(out, o.seed);
    mkdir(&dir)?;
    save_checkpoint(&o.network.named_tensors(), dir.join("checkpoint.bin"))?;
    if let Some(c) = &o.coefficients {
        save_checkpoint(&coefficients_tensors(c), dir.join("coefficients.bin"))?;
    }
    if !o.steps.is_empty() {
        write(&dir.join("steps.csv"), &steps_csv(&o.steps))?;
    }
    Ok(())
}

fn persist_report(out: &Path, report: &ExperimentReport) -> Result<()> {
    mkdir(out)?;
    write(&out.join("report.csv"), &report.report_csv())?;
    write(&out.join("timing.csv"), &report.timing_csv())
}

/// Runs `method` for every configured seed and writes the run directory.
pub fn run_experiment(cfg: &RunConfig, method: Method, out: &Path) -> Result<ExperimentReport> {
    let pretrained = load_pretrained(cfg)?;
    let data = load_task(cfg)?;
    let outcomes = for_each_seed(cfg, |s| run_method(cfg, method, &pretrained, &data, s))?;
    mkdir(out)?;
    for o in &outcomes {
        persist_seed(out, o)?;
    }
    let report = ExperimentReport::from_outcomes(method, &data.name, &outcomes);
    persist_report(out, &report)?;
    Ok(report)
}

/// Search and finetune (the full method).
pub fn cmd_run(cfg: &RunConfig, out: &Path) -> Result<ExperimentReport> {
    run_experiment(cfg, Method::Ours, out)
}

pub fn cmd_baseline(cfg: &RunConfig, out: &Path) -> Result<ExperimentReport> {
    if cfg.run.method == Method::Ours {
        return Err(Error::Config("`baseline` needs run.method to name a baseline; use `run` for the full method".into()));
    }
    run_experiment(cfg, cfg.run.method, out)
}

/// Search phase only: writes `coefficients.bin`, `search_state.bin` and `steps.csv` per seed.
pub fn cmd_search(cfg: &RunConfig, out: &Path) -> Result<()> {
    let pretrained = load_pretrained(cfg)?;
    let data = load_task(cfg)?;
    let results = for_each_seed(cfg, |s| {
        let train = train_set(cfg, &data.target, s)?;
        let t = Instant::now();
        let search = search_for_seed(cfg, &pretrained, &train, s)?;
        Ok((s, search, t.elapsed().as_secs_f64()))
    })?;
    for (s, search, secs) in &results {
        let dir = seed_dir(out, *s);
        mkdir(&dir)?;
        save_checkpoint(&coefficients_tensors(&search.coefficients), dir.join("coefficients.bin"))?;
        save_checkpoint(&search.replicates[0].network.named_tensors(), dir.join("search_state.bin"))?;
        write(&dir.join("steps.csv"), &steps_csv(&offset_steps(search, cfg.search.total_steps)))?;
        write(&dir.join("search_seconds.txt"), &format!("{secs:.6}\n"))?;
    }
    Ok(())
}

/// Finetune phase from a prior `search` into the same directory.
pub fn cmd_finetune(cfg: &RunConfig, out: &Path) -> Result<ExperimentReport> {
    let pretrained = load_pretrained(cfg)?;
    let data = load_task(cfg)?;
    let task = cfg.task_kind()?;
    let outcomes = for_each_seed(cfg, |s| {
        let dir = seed_dir(out, s);
        let coef_path = dir.join("coefficients.bin");
        if !coef_path.exists() {
            return Err(Error::Config(format!("{} not found; run `search` first", coef_path.display())));
        }
        let coefs = coefficients_from_tensors(&load_checkpoint(&coef_path)?)?;
        let state_path = dir.join("search_state.bin");
        let searched = if state_path.exists() {
            Some(Network::from_named_tensors(&load_checkpoint(&state_path)?, cfg.model.activation, task)?)
        } else {
            None
        };
        let search_secs = fs::read_to_string(dir.join("search_seconds.txt"))
            .ok()
            .and_then(|t| t.trim().parse().ok())
            .unwrap_or(0.0);
        let (network, ft) = finetune_searched(cfg, &pretrained, &data, s, &coefs, searched)?;
        Ok(SeedOutcome {
            seed: s,
            metrics: score(&network, &data.test)?,
            times: PhaseTimes {
                search: search_secs,
                finetune: ft,
            },
            network,
            coefficients: Some(coefs),
            steps: Vec::new(),
            search_network: None,
        })
    })?;
    for o in &outcomes {
        persist_seed(out, o)?;
    }
    let report = ExperimentReport::from_outcomes(Method::Ours, &data.name, &outcomes);
    persist_report(out, &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub task: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
    /// Mean wall-clock relative to the vanilla run of the same task, when present.
    pub time_ratio: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub skipped: Vec<(PathBuf, String)>,
}

impl Summary {
    pub fn csv(&self) -> String {
        let mut s = String::from("method,task,metric,mean,std,seeds,time_ratio\n");
        for r in &self.rows {
            let ratio = r.time_ratio.map(|x| format!("{x:.4}")).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{},{},{ratio}", r.method, r.task, r.metric, r.mean, r.std, r.seeds);
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<14} {:<14} {:<10} {:>18} {:>6} {:>10}\n",
            "method", "task", "metric", "mean ± std", "seeds", "time×"
        );
        for r in &self.rows {
            let ratio = r.time_ratio.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
            let ms = format!("{:.4} ± {:.4}", r.mean, r.std);
            let _ = writeln!(
                s,
                "{:<14} {:<14} {:<10} {:>18} {:>6} {:>10}",
                r.method, r.task, r.metric, ms, r.seeds, ratio
            );
        }
        for (p, why) in &self.skipped {
            let _ = writeln!(s, "skipped {}: {why}", p.display());
        }
        s
    }
}

/// Summarizes run directories; directories without a readable `report.csv` are listed and skipped.
pub fn cmd_report(dirs: &[PathBuf]) -> Result<Summary> {
    let mut reports = Vec::new();
    let mut summary = Summary::default();
    for d in dirs {
        let report_path = d.join("report.csv");
        let text = match fs::read_to_string(&report_path) {
            Ok(t) => t,
            Err(e) => {
                summary.skipped.push((d.clone(), format!("missing report.csv ({e})")));
                continue;
            }
        };
        let timing = fs::read_to_string(d.join("timing.csv")).ok();
        match ExperimentReport::parse(&text, timing.as_deref()) {
            Ok(r) => reports.push(r),
            Err(e) => summary.skipped.push((d.clone(), e.to_string())),
        }
    }
    if reports.is_empty() {
        return Err(Error::Input("no completed runs to report".into()));
    }
    for r in &reports {
        let vanilla = reports
            .iter()
            .find(|v| v.method == Method::Vanilla.name() && v.task == r.task && !v.times.is_empty());
        let ratio = vanilla.and_then(|v| {
            let base = v.mean_total_seconds();
            (base > 0.0 && !r.times.is_empty()).then(|| r.mean_total_seconds() / base)
        });
        for m in &r.metrics {
            summary.rows.push(SummaryRow {
                method: r.method.clone(),
                task: r.task.clone(),
                metric: m.metric.clone(),
                mean: m.mean,
                std: m.std,
                seeds: m.values.len(),
                time_ratio: ratio,
            });
        }
    }
    Ok(summary)
}
