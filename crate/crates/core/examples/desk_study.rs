//! Directional study on the synthetic transfer task.
//!
//! Usage: `cargo run --release --example desk_study -- [config.toml] [seeds] [sizes]`
//! where `seeds` is a count (default 10) and `sizes` a comma list (default 100,300).

use std::time::Instant;

use attmix::config::{Method, RunConfig};
use attmix::pipeline::{self, mean_std};

fn main() -> attmix::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = match args.first() {
        Some(p) if p != "-" => RunConfig::load(p)?,
        _ => RunConfig::default(),
    };
    let seeds: u64 = args.get(1).map_or(10, |s| s.parse().expect("seed count"));
    let sizes: Vec<usize> = args
        .get(2)
        .map_or("100,300", String::as_str)
        .split(',')
        .map(|s| s.parse().expect("size"))
        .collect();
    let offset: u64 = std::env::var("STUDY_SEED_OFFSET").ok().map_or(0, |s| s.parse().unwrap());
    cfg.run.seeds = (offset..offset + seeds).collect();

    let t = Instant::now();
    let data = pipeline::load_task(&cfg)?;
    let pretrained = pipeline::pretrain(&cfg, data.source.as_ref().expect("synthetic source"))?;
    println!("pretrain {:.1}s", t.elapsed().as_secs_f64());

    let methods = [Method::Vanilla, Method::Ours, Method::RandomAlpha, Method::Joint];
    for &n in &sizes {
        cfg.data.train_size = Some(n);
        for &m in &methods {
            let t = Instant::now();
            let outs = pipeline::for_each_seed(&cfg, |s| pipeline::run_method(&cfg, m, &pretrained, &data, s))?;
            let acc: Vec<f64> = outs.iter().map(|o| o.metrics[0].1 * 100.0).collect();
            let (mean, std) = mean_std(&acc);
            if let Some(c) = outs[0].coefficients.as_ref() {
                for (i, c) in c.iter().enumerate() {
                    let (a, b) = (c.task.mean(), c.pretrained.mean());
                    println!("    layer{i} coef_task mean {a:.4} min {:.4} coef_pretrained mean {b:.4}", c.task.min());
                }
            }
            let secs: f64 = outs.iter().map(|o| o.times.total()).sum();
            println!(
                "n={n:<4} {:<13} acc {mean:6.2} ± {std:5.2}  time {secs:7.2}s (wall {:.1}s)  {:?}",
                m.name(),
                t.elapsed().as_secs_f64(),
                acc.iter().map(|a| (a * 10.0).round() / 10.0).collect::<Vec<_>>()
            );
        }
    }
    Ok(())
}
