use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tagrpo::config::Config;
use tagrpo::export::{export_curves, NamedLog};
use tagrpo::task::EvalBench;
use tagrpo::trainer::{eval_bench, load_model, run_eval, run_pretrain, run_rl, Algo, RunOptions};

#[derive(Parser)]
#[command(
    name = "tagrpo",
    version,
    about = "Flow-matching pretraining and GRPO/TAGRPO post-training on a toy sequence task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config, or a run manifest (JSON) whose echoed config is reused.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs/default")]
    out_dir: PathBuf,
}

impl Common {
    fn load(&self) -> Result<Config> {
        let mut cfg = Config::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Flow-matching pretraining; writes pretrained.ckpt, pretrain_loss.csv and a manifest.
    Pretrain(Common),
    /// RL post-training from a pretrained checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "tagrpo")]
        algo: String,
        #[arg(long)]
        no_memory_bank: bool,
        #[arg(long)]
        no_align: bool,
        /// Starting checkpoint; defaults to <out-dir>/pretrained.ckpt.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Deterministic ODE evaluation of a checkpoint on the bench.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bench file; defaults to the bench generated from the config.
        #[arg(long)]
        bench: Option<PathBuf>,
    },
    /// Merge training logs and draw their reward curves.
    Export {
        /// train_log.csv files; each run is labelled by its directory name.
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long, default_value = "runs/export")]
        out_dir: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Pretrain(common) => {
            let cfg = common.load()?;
            let m = run_pretrain(&cfg, &common.out_dir)?;
            println!(
                "pretrained: loss {:.4} -> {:.4}, checkpoint {}",
                m.initial_loss,
                m.final_loss,
                m.checkpoint.display()
            );
        }
        Command::Train {
            common,
            algo,
            no_memory_bank,
            no_align,
            init,
        } => {
            let cfg = common.load()?;
            let opts = RunOptions {
                algo: algo.parse::<Algo>()?,
                no_memory_bank,
                no_align,
            };
            let init = init.unwrap_or_else(|| common.out_dir.join("pretrained.ckpt"));
            if !init.exists() {
                bail!(
                    "no checkpoint at {} (run `tagrpo pretrain` first or pass --init)",
                    init.display()
                );
            }
            let m = run_rl(&cfg, opts, &init, &common.out_dir)?;
            println!(
                "trained {} steps: eval reward {:.4} -> {:.4}",
                m.metrics.steps, m.metrics.baseline_eval.total, m.metrics.final_eval.total
            );
        }
        Command::Eval {
            common,
            checkpoint,
            bench,
        } => {
            let cfg = common.load()?;
            let model = load_model(&cfg, &checkpoint)?;
            let bench = match bench {
                Some(p) => EvalBench::load(&p)?,
                None => eval_bench(&cfg)?,
            };
            let report = run_eval(&model, &bench, &cfg)?;
            std::fs::create_dir_all(&common.out_dir)?;
            let path = common.out_dir.join("eval.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            let m = report.mean;
            println!(
                "eval over {} pairs: total {:.4} (smooth {:.4}, endpoint {:.4}, consistency {:.4}); per-pair rewards in {}",
                report.per_pair.len(),
                m.total,
                m.smooth,
                m.endpoint,
                m.consistency,
                path.display()
            );
        }
        Command::Export { logs, out_dir } => {
            let logs = logs
                .iter()
                .map(|p| NamedLog::load(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            export_curves(&logs, &out_dir)?;
            println!(
                "wrote {} and {}",
                out_dir.join("curves.svg").display(),
                out_dir.join("merged.csv").display()
            );
        }
    }
    Ok(())
}
