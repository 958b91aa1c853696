mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use attmix::checkpoint::load_checkpoint;
use attmix::config::{Method, RunConfig};
use attmix::pipeline::{self, mean_std, ExperimentReport};

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"
task.name = "tiny"
synthetic.input_dim = 6
synthetic.source_n = 1500
synthetic.target_n = 200
synthetic.test_n = 300
data.train_size = 60
model.hidden = [8, 8]
model.pretrained = "{pre}"
pretrain.epochs = 2
search.eta_w = 1e-2
search.eta_alpha = 2e-2
search.total_steps = 8
search.batch_size = 8
search.replicates = 2
finetune.epochs = [2]
finetune.lr = [5e-3]
finetune.batch_size = 8
run.seeds = [0, 1, 2]
run.soup_size = 2
"#,
        pre = dir.join("pretrained.bin").display()
    );
    // Overrides replace the base line with the same key.
    let key = |l: &str| l.split('=').next().unwrap_or("").trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).filter(|k| !k.is_empty()).collect();
    let mut text: String = text
        .lines()
        .filter(|l| !overridden.contains(&key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    text.push_str(extra);
    text.push('\n');
    let path = dir.join(format!("config-{}.toml", text.len()));
    fs::write(&path, text).unwrap();
    path
}

fn attmix(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_attmix")).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) {
    let out = attmix(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn cli_end_to_end_is_deterministic_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    run_ok(&["pretrain", "--config", cfg]);
    let first = fs::read(dir.path().join("pretrained.bin")).unwrap();
    run_ok(&["pretrain", "--config", cfg]);
    assert_eq!(first, fs::read(dir.path().join("pretrained.bin")).unwrap());

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["run", "--config", cfg, "--out", a.to_str().unwrap()]);
    run_ok(&["run", "--config", cfg, "--out", b.to_str().unwrap()]);
    let report = fs::read(a.join("report.csv")).unwrap();
    assert_eq!(report, fs::read(b.join("report.csv")).unwrap());
    for s in 0..3 {
        let seed_dir = a.join(format!("seed_{s}"));
        for f in ["checkpoint.bin", "coefficients.bin", "steps.csv"] {
            assert!(seed_dir.join(f).exists(), "missing {f}");
        }
        assert_eq!(fs::read(seed_dir.join("checkpoint.bin")).unwrap(), fs::read(b.join(format!("seed_{s}/checkpoint.bin"))).unwrap());
        let steps = fs::read_to_string(seed_dir.join("steps.csv")).unwrap();
        assert_eq!(steps.lines().next(), Some("step,stage,loss,epsilon,alpha_mean,alpha_min,alpha_max"));
        assert_eq!(steps.lines().count(), 1 + 2 * 8 * 2);
    }

    // Report integrity: persisted per-seed values reproduce mean and std exactly.
    let parsed = ExperimentReport::parse(&String::from_utf8(report).unwrap(), None).unwrap();
    assert_eq!(parsed.metrics.len(), 3);
    for m in &parsed.metrics {
        let values: Vec<f64> = m.values.iter().map(|v| v.1).collect();
        assert_eq!(mean_std(&values), (m.mean, m.std));
    }

    let v = dir.path().join("v");
    let vcfg = small_config(dir.path(), "run.method = \"vanilla\"");
    run_ok(&["baseline", "--config", vcfg.to_str().unwrap(), "--out", v.to_str().unwrap()]);
    for s in 0..3 {
        let seed_dir = v.join(format!("seed_{s}"));
        let names: Vec<String> = load_checkpoint(seed_dir.join("checkpoint.bin")).unwrap().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().all(|n| !n.contains("alpha") && !n.contains("coef")), "{names:?}");
        assert!(!seed_dir.join("coefficients.bin").exists());
    }

    let summary_dir = dir.path().join("summary");
    let out = attmix(&["report", a.to_str().unwrap(), v.to_str().unwrap(), dir.path().join("nope").to_str().unwrap(), "--out", summary_dir.to_str().unwrap()]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("ours") && table.contains("vanilla") && table.contains("skipped"));
    let csv = fs::read_to_string(summary_dir.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
}

#[test]
fn search_then_finetune_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "run.seeds = [4]");
    let cfg = cfg.to_str().unwrap();
    run_ok(&["pretrain", "--config", cfg]);
    let (split, whole) = (dir.path().join("split"), dir.path().join("whole"));
    run_ok(&["search", "--config", cfg, "--out", split.to_str().unwrap()]);
    run_ok(&["finetune", "--config", cfg, "--out", split.to_str().unwrap()]);
    run_ok(&["run", "--config", cfg, "--out", whole.to_str().unwrap()]);
    assert_eq!(fs::read(split.join("report.csv")).unwrap(), fs::read(whole.join("report.csv")).unwrap());
    assert_eq!(fs::read(split.join("seed_4/checkpoint.bin")).unwrap(), fs::read(whole.join("seed_4/checkpoint.bin")).unwrap());
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    // No pretrained checkpoint yet: configuration error.
    let out = attmix(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "search.no_such_key = 1\n").unwrap();
    assert_eq!(attmix(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(1));

    let diverging = small_config(dir.path(), "pretrain.lr = inf");
    let out = attmix(&["pretrain", "--config", diverging.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let finetune_first = attmix(&["finetune", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("y").to_str().unwrap()]);
    assert_eq!(finetune_first.status.code(), Some(1));
}

fn in_memory(extra: &str) -> (RunConfig, attmix::Network, pipeline::TaskData) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(small_config(dir.path(), extra)).unwrap();
    let data = pipeline::load_task(&cfg).unwrap();
    let pre = pipeline::pretrain(&cfg, data.source.as_ref().unwrap()).unwrap();
    (cfg, pre, data)
}

#[test]
fn random_alpha_without_spread_equals_vanilla() {
    let (cfg, pre, data) = in_memory("run.random_alpha_std = 0.0");
    for s in 0..3 {
        let v = pipeline::run_method(&cfg, Method::Vanilla, &pre, &data, s).unwrap();
        let r = pipeline::run_method(&cfg, Method::RandomAlpha, &pre, &data, s).unwrap();
        assert_eq!(v.metrics, r.metrics);
        assert_eq!(common::all_weights(&v.network), common::all_weights(&r.network));
    }
}

#[test]
fn zero_step_search_tracks_vanilla() {
    // With no search steps the frozen coefficients are the near-identity
    // initialization, so ours should track vanilla seed by seed.
    let (mut cfg, pre, data) = in_memory("search.total_steps = 0\nsearch.replicates = 1");
    cfg.run.seeds = (0..10).collect();
    let mut gaps = Vec::new();
    for s in 0..10 {
        let v = pipeline::run_method(&cfg, Method::Vanilla, &pre, &data, s).unwrap();
        let o = pipeline::run_method(&cfg, Method::Ours, &pre, &data, s).unwrap();
        gaps.push(o.metrics[0].1 - v.metrics[0].1);
    }
    let (mean, std) = mean_std(&gaps);
    assert!(mean.abs() <= 0.02 && std <= 0.03, "paired gap {mean} ± {std}");
}

#[test]
fn soup_averages_members_and_worker_count_does_not_change_results() {
    let (cfg, pre, data) = in_memory("run.seeds = [0, 1]");
    let soup = pipeline::run_method(&cfg, Method::ModelSoup, &pre, &data, 1).unwrap();
    assert!(soup.network.named_tensors().iter().all(|(n, _)| !n.contains("alpha")));
    let serial = pipeline::for_each_seed(&cfg, |s| pipeline::run_method(&cfg, Method::Joint, &pre, &data, s)).unwrap();
    let mut parallel_cfg = cfg.clone();
    parallel_cfg.run.workers = 2;
    let parallel = pipeline::for_each_seed(&parallel_cfg, |s| pipeline::run_method(&cfg, Method::Joint, &pre, &data, s)).unwrap();
    for (a, b) in serial.iter().zip(&parallel) {
        assert_eq!(a.seed, b.seed);
        assert_eq!(a.metrics, b.metrics);
    }
}
