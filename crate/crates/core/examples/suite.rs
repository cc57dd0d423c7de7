//! Runs the headline comparison: for each seed, pretrain once, then train
//! TAGRPO, plain GRPO and the two ablations from the same checkpoint.
//!
//! Usage: `cargo run --release -p tagrpo-core --example suite -- [config.toml] [seeds]`

use std::time::Instant;

use tagrpo::config::Config;
use tagrpo::trainer::{pretrain_model, train_rl, Algo, RunOptions};

fn main() -> tagrpo::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let base = match args.first() {
        Some(p) => Config::load(p)?,
        None => Config::with_seeds(0, 0),
    };
    let seeds: u64 = args.get(1).map_or(5, |s| s.parse().expect("seed count"));
    let variants = [
        ("tagrpo", RunOptions::new(Algo::Tagrpo)),
        ("grpo", RunOptions::new(Algo::Grpo)),
        (
            "no-bank",
            RunOptions {
                no_memory_bank: true,
                ..RunOptions::new(Algo::Tagrpo)
            },
        ),
        (
            "no-align",
            RunOptions {
                no_align: true,
                ..RunOptions::new(Algo::Tagrpo)
            },
        ),
    ];
    let start = Instant::now();
    println!(
        "seed  pretrained  {}",
        variants.map(|v| format!("{:>9}", v.0)).join(" ")
    );
    for s in 0..seeds {
        let mut cfg = base.clone();
        cfg.seed = base.seed + s;
        cfg.task.dataset_seed = base.task.dataset_seed + s;
        let (init, _, _) = pretrain_model(&cfg)?;
        let mut line = String::new();
        let mut baseline = 0.0;
        for (_, opts) in variants {
            let out = train_rl(&cfg, opts, &init)?;
            baseline = out.metrics.baseline_eval.total;
            line.push_str(&format!(" {:>9.4}", out.metrics.final_eval.total));
        }
        println!(
            "{:>4}  {:>10.4} {line}   ({:.0}s)",
            cfg.seed,
            baseline,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
