//! Pretraining, RL post-training and evaluation runs, with their on-disk
//! outputs.
//!
//! Output directory layout:
//!
//! ```text
//! pretrained.ckpt  pretrain_loss.csv  pretrain_manifest.json
//! policy.ckpt      train_log.csv      train_manifest.json   bank/
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamState};
use crate::align::total_objective;
use crate::bank::{BankKey, MemoryBank};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::flow_match::pretrain;
use crate::graph::{evaluate_and_backward, Graph};
use crate::grpo::{Group, Rollout, RolloutSource, Snapshots};
use crate::io::write_atomic;
use crate::params::ParamStore;
use crate::sampler::{initial_noise, ode_sample_batch, sde_sample_batch, RolloutRequest};
use crate::task::{
    gen_dataset, make_eval_bench, make_pair_pool, reward_composite, EvalBench, RewardBreakdown,
    ToySequence,
};
use crate::velocity::VelocityField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Grpo,
    Tagrpo,
}

impl std::str::FromStr for Algo {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grpo" => Ok(Algo::Grpo),
            "tagrpo" => Ok(Algo::Tagrpo),
            _ => Err(Error::Config(format!(
                "unknown algorithm {s:?} (expected grpo or tagrpo)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    pub algo: Algo,
    pub no_memory_bank: bool,
    pub no_align: bool,
}

impl RunOptions {
    pub fn new(algo: Algo) -> Self {
        Self {
            algo,
            no_memory_bank: false,
            no_align: false,
        }
    }

    /// Plain GRPO means fresh-only groups without alignment.
    pub fn uses_bank(&self) -> bool {
        self.algo == Algo::Tagrpo && !self.no_memory_bank
    }

    pub fn uses_align(&self) -> bool {
        self.algo == Algo::Tagrpo && !self.no_align
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn to_sequence(cfg: &Config, latent: &[f64]) -> Result<ToySequence> {
    ToySequence::new(cfg.task.frames, cfg.task.dim, latent.to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainManifest {
    pub config: Config,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub checkpoint: PathBuf,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub null_fraction: f64,
}

/// Flow-matching pretraining on the generated toy dataset.
pub fn pretrain_model(cfg: &Config) -> Result<(VelocityField, Vec<f64>, f64)> {
    cfg.validate()?;
    let data = gen_dataset(&cfg.task, cfg.task.dataset_size, cfg.task.dataset_seed)?;
    let items: Vec<(Vec<f64>, _)> = data.into_iter().map(|(s, c)| (s.data, c)).collect();
    let mut model = VelocityField::new(cfg.arch(), cfg.seed)?;
    let out = pretrain(&mut model, &items, &cfg.pretrain, cfg.seed)?;
    let null_fraction = out.null_rows as f64 / out.total_rows.max(1) as f64;
    Ok((model, out.losses, null_fraction))
}

pub fn run_pretrain(cfg: &Config, out_dir: &Path) -> Result<PretrainManifest> {
    let started_unix = unix_now();
    let (model, losses, null_fraction) = pretrain_model(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let checkpoint = out_dir.join("pretrained.ckpt");
    model.params.save(&checkpoint)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l:?}");
    }
    write_atomic(&out_dir.join("pretrain_loss.csv"), csv.as_bytes())?;
    let manifest = PretrainManifest {
        config: cfg.clone(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        started_unix,
        finished_unix: unix_now(),
        checkpoint,
        initial_loss: losses.first().copied().unwrap_or(f64::NAN),
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        null_fraction,
    };
    write_atomic(
        &out_dir.join("pretrain_manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

pub fn load_model(cfg: &Config, checkpoint: &Path) -> Result<VelocityField> {
    VelocityField::from_params(cfg.arch(), ParamStore::load(checkpoint)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_pair: Vec<RewardBreakdown>,
    pub mean: RewardBreakdown,
}

/// Deterministic ODE samples at the configured guidance scale, one per
/// bench pair, scored with the composite reward.
pub fn run_eval(model: &VelocityField, bench: &EvalBench, cfg: &Config) -> Result<EvalReport> {
    if bench.is_empty() {
        return Err(Error::InvalidArgument("evaluation bench is empty".into()));
    }
    let n = model.arch.latent_dim;
    let reqs: Vec<RolloutRequest> = bench
        .pairs()
        .iter()
        .map(|p| RolloutRequest {
            condition: p.condition.clone(),
            x1: initial_noise(p.noise_seed, n),
            init_seed: p.noise_seed,
            noise_seed: p.noise_seed,
        })
        .collect();
    let trajs = ode_sample_batch(
        model,
        &reqs,
        &cfg.rl.grid()?,
        cfg.rl.cfg_scale,
        model.version(),
    )?;
    let per_pair = trajs
        .iter()
        .map(|t| {
            reward_composite(
                &to_sequence(cfg, t.final_latent())?,
                &t.condition,
                &cfg.reward,
                &cfg.task,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let k = per_pair.len() as f64;
    let mut mean = RewardBreakdown::default();
    for r in &per_pair {
        mean.smooth += r.smooth / k;
        mean.endpoint += r.endpoint / k;
        mean.consistency += r.consistency / k;
        mean.total += r.total / k;
    }
    Ok(EvalReport { per_pair, mean })
}

pub fn eval_bench(cfg: &Config) -> Result<EvalBench> {
    make_eval_bench(&cfg.task, cfg.eval.bench_size, cfg.eval.bench_seed)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    /// Mean reward of this step's fresh rollouts.
    pub mean_group_reward: f64,
    /// Bench reward when evaluated at this step.
    pub eval_reward: Option<f64>,
    pub surrogate: f64,
    pub align: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub bank_fill: usize,
    pub degenerate_groups: usize,
    pub wall_time: f64,
}

pub const LOG_HEADER: &str =
    "step,mean_group_reward,eval_reward,surrogate,align,kl,clip_fraction,bank_fill,degenerate_groups,wall_time";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let eval = self
            .eval_reward
            .map(|v| format!("{v:?}"))
            .unwrap_or_default();
        format!(
            "{},{:?},{},{:?},{:?},{:?},{:?},{},{},{:.3}",
            self.step,
            self.mean_group_reward,
            eval,
            self.surrogate,
            self.align,
            self.kl,
            self.clip_fraction,
            self.bank_fill,
            self.degenerate_groups,
            self.wall_time
        )
    }

    /// Everything except wall time, for determinism comparisons.
    pub fn same_trace(&self, other: &Self) -> bool {
        Self {
            wall_time: 0.0,
            ..*self
        } == Self {
            wall_time: 0.0,
            ..*other
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }

    pub fn same_trace(&self, other: &Self) -> bool {
        self.rows.len() == other.rows.len()
            && self
                .rows
                .iter()
                .zip(&other.rows)
                .all(|(a, b)| a.same_trace(b))
    }

    pub fn final_eval(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eval_reward)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub baseline_eval: RewardBreakdown,
    pub final_eval: RewardBreakdown,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Config,
    pub options: RunOptions,
    pub seed: u64,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub init_checkpoint: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: FinalMetrics,
}

pub struct RlOutcome {
    pub policy: VelocityField,
    pub log: TrainLog,
    pub bank: MemoryBank,
    pub metrics: FinalMetrics,
}

/// RL post-training from `init`. The initial model doubles as the frozen
/// KL reference.
pub fn train_rl(cfg: &Config, opts: RunOptions, init: &VelocityField) -> Result<RlOutcome> {
    cfg.validate()?;
    if init.arch != cfg.arch() {
        return Err(Error::Config(
            "checkpoint architecture does not match the config".into(),
        ));
    }
    let rl = &cfg.rl;
    let gamma = if opts.uses_align() {
        rl.align_gamma
    } else {
        0.0
    };
    let mut obj_cfg = rl.clone();
    obj_cfg.align_gamma = gamma;
    let n = cfg.task.latent_dim();
    let grid = rl.grid()?;
    let schedule = rl.schedule();

    let data = gen_dataset(&cfg.task, cfg.task.dataset_size, cfg.task.dataset_seed)?;
    let pool = make_pair_pool(&data, rl.pool_size, cfg.seed)?;
    let bench = eval_bench(cfg)?;

    let reference = init.clone_frozen();
    let mut policy = init.clone();
    policy.params.set_requires_grad(true);
    policy.params.zero_grad();
    let mut old = init.clone_frozen();
    let mut generation: u64 = 0;
    let mut opt = AdamState::new(rl.lr);
    let mut bank = MemoryBank::new(cfg.bank)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a67_7270_6f00_0001);
    let mut next_id: u64 = 0;
    let mut cursor = 0usize;
    let started = Instant::now();
    let baseline_eval = run_eval(&policy, &bench, cfg)?.mean;
    let mut final_eval = baseline_eval;
    let mut rows = Vec::with_capacity(rl.steps);

    for step in 0..rl.steps {
        // Rollout phase: F fresh SDE rollouts per group under theta_old,
        // sharing the pair's initial noise.
        let mut reqs = Vec::with_capacity(rl.groups_per_step * rl.fresh_per_step);
        let mut keys = Vec::with_capacity(rl.groups_per_step);
        for _ in 0..rl.groups_per_step {
            let idx = cursor % pool.len();
            cursor += 1;
            let pair = &pool[idx];
            let key = BankKey {
                condition_id: idx as u64,
                noise_seed: pair.noise_seed,
            };
            let x1 = initial_noise(pair.noise_seed, n);
            for _ in 0..rl.fresh_per_step {
                reqs.push(RolloutRequest {
                    condition: pair.condition.clone(),
                    x1: x1.clone(),
                    init_seed: pair.noise_seed,
                    noise_seed: rng.next_u64(),
                });
            }
            keys.push(key);
        }
        let trajs = sde_sample_batch(
            &old,
            &reqs,
            &grid,
            &schedule,
            rl.cfg_scale,
            true,
            generation,
        )?;
        let mut fresh_groups: Vec<Vec<Rollout>> = vec![Vec::new(); keys.len()];
        let mut reward_sum = 0.0;
        for (i, traj) in trajs.into_iter().enumerate() {
            let g = i / rl.fresh_per_step;
            let seq = to_sequence(cfg, traj.final_latent())?;
            let reward = reward_composite(&seq, &traj.condition, &cfg.reward, &cfg.task)?.total;
            reward_sum += reward;
            let mut r = Rollout::new(next_id, keys[g], traj, reward)?;
            r.source = RolloutSource::Fresh;
            next_id += 1;
            fresh_groups[g].push(r);
        }
        let mean_group_reward = reward_sum / reqs.len() as f64;

        let mut groups = Vec::with_capacity(keys.len());
        for (key, fresh) in keys.iter().zip(&fresh_groups) {
            let group = if opts.uses_bank() {
                bank.assemble_group(*key, fresh.clone(), rl.group_size, &mut rng)?
            } else {
                Group::new(fresh.clone())?
            };
            groups.push(group);
        }

        // Update phase.
        let mut g = Graph::new();
        let snaps = Snapshots {
            policy: &policy,
            old: &old,
            reference: &reference,
        };
        let obj = total_objective(&mut g, snaps, &groups, &obj_cfg)?;
        let loss = g.scale(obj.total, -1.0)?;
        let value =
            evaluate_and_backward(&g, loss, &mut policy.params).map_err(|e| Error::Diverged {
                step,
                detail: e.to_string(),
            })?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "objective is not finite".into(),
            });
        }
        adam_step(&mut policy.params, &mut opt)?;
        policy.params.zero_grad();
        if policy
            .params
            .iter()
            .any(|(_, t)| t.data().iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Diverged {
                step,
                detail: "parameters became non-finite".into(),
            });
        }

        if opts.uses_bank() {
            for (key, fresh) in keys.iter().zip(fresh_groups) {
                for r in fresh {
                    bank.push(*key, r)?;
                }
            }
        }
        if (step + 1) % rl.sync_interval == 0 {
            old = policy.clone_frozen();
            generation += 1;
            bank.evict_stale(generation);
        }

        let eval_reward = if (step + 1) % rl.eval_interval == 0 || step + 1 == rl.steps {
            final_eval = run_eval(&policy, &bench, cfg)?.mean;
            Some(final_eval.total)
        } else {
            None
        };
        rows.push(LogRow {
            step: step + 1,
            mean_group_reward,
            eval_reward,
            surrogate: obj.stats.surrogate,
            align: obj.stats.align,
            kl: obj.stats.kl,
            clip_fraction: obj.stats.clip_fraction,
            bank_fill: bank.len(),
            degenerate_groups: obj.stats.degenerate_groups,
            wall_time: started.elapsed().as_secs_f64(),
        });
    }
    Ok(RlOutcome {
        policy,
        log: TrainLog { rows },
        bank,
        metrics: FinalMetrics {
            baseline_eval,
            final_eval,
            steps: rl.steps,
        },
    })
}

/// Full RL run with outputs written to `out_dir`.
pub fn run_rl(
    cfg: &Config,
    opts: RunOptions,
    init_checkpoint: &Path,
    out_dir: &Path,
) -> Result<RunManifest> {
    let started_unix = unix_now();
    let init = load_model(cfg, init_checkpoint)?;
    std::fs::create_dir_all(out_dir)?;
    let out = match train_rl(cfg, opts, &init) {
        Ok(o) => o,
        Err(e @ Error::Diverged { .. }) => {
            let dump = out_dir.join("diverged_state.json");
            let _ = write_atomic(
                &dump,
                format!("{{\"error\": {:?}}}\n", e.to_string()).as_bytes(),
            );
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let checkpoint = out_dir.join("policy.ckpt");
    out.policy.params.save(&checkpoint)?;
    write_atomic(&out_dir.join("train_log.csv"), out.log.to_csv().as_bytes())?;
    if opts.uses_bank() {
        out.bank.save(out_dir.join("bank"))?;
    }
    let manifest = RunManifest {
        config: cfg.clone(),
        options: opts,
        seed: cfg.seed,
        code_version: env!("CARGO_PKG_VERSION").into(),
        started_unix,
        finished_unix: unix_now(),
        init_checkpoint: Some(init_checkpoint.to_path_buf()),
        checkpoint: Some(checkpoint),
        metrics: out.metrics,
    };
    write_atomic(
        &out_dir.join("train_manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}
