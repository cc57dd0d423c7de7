//! Toy conditional sequence task, analytic rewards and the evaluation bench.
//!
//! A sequence has `frames` frames of `dim` coordinates. Each style `s` owns a
//! damped rotation `A_s` and an attractor `target_s`; data follow
//! `f_{k+1} = A_s f_k + b_s + noise` with `b_s = (I - A_s) target_s`, starting
//! from the conditioning frame.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::velocity::Condition;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    /// Seed of the generated training dataset.
    pub dataset_seed: u64,
    pub frames: usize,
    pub dim: usize,
    pub num_styles: usize,
    /// Spectral radius of every style's dynamic.
    pub damping: f64,
    pub process_noise: f64,
    /// Distance of the style attractors from the origin.
    pub target_radius: f64,
    pub dataset_size: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            dataset_seed: 0,
            frames: 8,
            dim: 2,
            num_styles: 4,
            damping: 0.8,
            process_noise: 0.05,
            target_radius: 1.5,
            dataset_size: 4096,
        }
    }
}

impl TaskConfig {
    pub fn latent_dim(&self) -> usize {
        self.frames * self.dim
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut bad = Vec::new();
        if self.frames < 3 {
            bad.push("task.frames".into());
        }
        if self.dim == 0 {
            bad.push("task.dim".into());
        }
        if self.num_styles == 0 {
            bad.push("task.num_styles".into());
        }
        if !(0.0..1.0).contains(&self.damping) {
            bad.push("task.damping".into());
        }
        if self.process_noise < 0.0 {
            bad.push("task.process_noise".into());
        }
        if self.dataset_size == 0 {
            bad.push("task.dataset_size".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(bad)
        }
    }

    /// Attractor of style `s`: points spread evenly on a circle in the first
    /// two coordinates (remaining coordinates zero).
    pub fn target(&self, style: usize) -> Result<Vec<f64>> {
        if style >= self.num_styles {
            return Err(Error::InvalidArgument(format!("unknown style {style}")));
        }
        let ang = std::f64::consts::TAU * style as f64 / self.num_styles as f64 + 0.25;
        let mut v = vec![0.0; self.dim];
        v[0] = self.target_radius * ang.cos();
        if self.dim > 1 {
            v[1] = self.target_radius * ang.sin();
        }
        Ok(v)
    }

    /// Row-major `dim x dim` transition matrix: a damped rotation in the
    /// first coordinate plane, pure damping elsewhere.
    pub fn dynamic(&self, style: usize) -> Result<Vec<f64>> {
        if style >= self.num_styles {
            return Err(Error::InvalidArgument(format!("unknown style {style}")));
        }
        let d = self.dim;
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            a[i * d + i] = self.damping;
        }
        if d > 1 {
            let th = 0.6 * (style as f64 - (self.num_styles as f64 - 1.0) / 2.0);
            a[0] = self.damping * th.cos();
            a[1] = -self.damping * th.sin();
            a[d] = self.damping * th.sin();
            a[d + 1] = self.damping * th.cos();
        }
        Ok(a)
    }
}

/// A flattened `frames x dim` sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySequence {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl ToySequence {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * dim {
            return Err(Error::shape(
                "sequence",
                format!("{} values for {frames}x{dim}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "sequence" });
        }
        Ok(Self { frames, dim, data })
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn gen_dataset(
    task: &TaskConfig,
    num_items: usize,
    seed: u64,
) -> Result<Vec<(ToySequence, Condition)>> {
    if num_items == 0 {
        return Err(Error::InvalidArgument(
            "dataset size must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = task.dim;
    let mut out = Vec::with_capacity(num_items);
    for _ in 0..num_items {
        let style = rng.random_range(0..task.num_styles);
        let f0: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let a = task.dynamic(style)?;
        let target = task.target(style)?;
        let mut data = f0.clone();
        let mut f = f0.clone();
        for _ in 1..task.frames {
            let mut next = vec![0.0; d];
            for i in 0..d {
                let mut acc = target[i];
                for j in 0..d {
                    acc += a[i * d + j] * (f[j] - target[j]);
                }
                let eps: f64 = rng.sample(StandardNormal);
                next[i] = acc + task.process_noise * eps;
            }
            data.extend_from_slice(&next);
            f = next;
        }
        out.push((
            ToySequence::new(task.frames, d, data)?,
            Condition::new(f0, style),
        ));
    }
    Ok(out)
}

/// Negated mean second-difference energy.
pub fn reward_smooth(seq: &ToySequence) -> Result<f64> {
    if seq.frames < 3 {
        return Err(Error::InvalidArgument(
            "smoothness needs at least 3 frames".into(),
        ));
    }
    let mut total = 0.0;
    for k in 1..seq.frames - 1 {
        let (a, b, c) = (seq.frame(k - 1), seq.frame(k), seq.frame(k + 1));
        total += a
            .iter()
            .zip(b)
            .zip(c)
            .map(|((p, q), r)| {
                let d = r - 2.0 * q + p;
                d * d
            })
            .sum::<f64>();
    }
    Ok(-total / (seq.frames - 2) as f64)
}

pub fn reward_consistency(seq: &ToySequence, c: &Condition) -> Result<f64> {
    if c.first_frame.len() != seq.dim {
        return Err(Error::shape("reward_consistency", "condition frame size"));
    }
    Ok(-sq_dist(seq.frame(0), &c.first_frame))
}

pub fn reward_endpoint(seq: &ToySequence, c: &Condition, task: &TaskConfig) -> Result<f64> {
    let target = task.target(c.style_id)?;
    Ok(-sq_dist(seq.frame(seq.frames - 1), &target))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSpec {
    pub smooth: f64,
    pub endpoint: f64,
    pub consistency: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            smooth: 1.0,
            endpoint: 1.0,
            consistency: 1.0,
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut bad = Vec::new();
        for (k, v) in [
            ("reward.smooth", self.smooth),
            ("reward.endpoint", self.endpoint),
            ("reward.consistency", self.consistency),
        ] {
            if v.is_nan() || v < 0.0 {
                bad.push(k.to_string());
            }
        }
        if self.smooth + self.endpoint + self.consistency <= 0.0 {
            bad.push("reward (all weights zero)".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(bad)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub smooth: f64,
    pub endpoint: f64,
    pub consistency: f64,
    pub total: f64,
}

pub fn reward_composite(
    seq: &ToySequence,
    c: &Condition,
    spec: &RewardSpec,
    task: &TaskConfig,
) -> Result<RewardBreakdown> {
    let smooth = reward_smooth(seq)?;
    let endpoint = reward_endpoint(seq, c, task)?;
    let consistency = reward_consistency(seq, c)?;
    Ok(RewardBreakdown {
        smooth,
        endpoint,
        consistency,
        total: spec.smooth * smooth + spec.endpoint * endpoint + spec.consistency * consistency,
    })
}

/// A condition paired with the seed of its initial noise.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPair {
    pub condition: Condition,
    pub noise_seed: u64,
}

/// Training pool seeds have the top bit clear, bench seeds have it set, so
/// the two sets never intersect.
const BENCH_SEED_BIT: u64 = 1 << 63;

/// Fixed (condition, initial-noise) pairs cycled during RL.
pub fn make_pair_pool(
    dataset: &[(ToySequence, Condition)],
    size: usize,
    seed: u64,
) -> Result<Vec<PromptPair>> {
    if dataset.is_empty() || size == 0 {
        return Err(Error::InvalidArgument(
            "pair pool needs data and a positive size".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    Ok((0..size)
        .map(|_| {
            let idx = rng.random_range(0..dataset.len());
            PromptPair {
                condition: dataset[idx].1.clone(),
                noise_seed: rng.next_u64() & !BENCH_SEED_BIT,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalBench {
    pairs: Vec<PromptPair>,
}

impl EvalBench {
    pub fn pairs(&self) -> &[PromptPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn from_pairs(pairs: Vec<PromptPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("evaluation bench is empty".into()));
        }
        Ok(Self { pairs })
    }

    /// Text format: `#` comment lines, then one row per pair,
    /// `noise_seed style_id f_0 f_1 ... f_{D-1}`, whitespace separated.
    /// Floats use the shortest representation that parses back exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# noise_seed style_id first_frame...\n");
        for p in &self.pairs {
            let _ = write!(s, "{} {}", p.noise_seed, p.condition.style_id);
            for v in &p.condition.first_frame {
                let _ = write!(s, " {v:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("bench line {}: {what}", ln + 1));
            let mut it = line.split_whitespace();
            let seed = it
                .next()
                .ok_or_else(|| bad("missing seed"))?
                .parse::<u64>()
                .map_err(|_| bad("seed"))?;
            let style = it
                .next()
                .ok_or_else(|| bad("missing style"))?
                .parse::<usize>()
                .map_err(|_| bad("style"))?;
            let frame = it
                .map(|v| v.parse::<f64>().map_err(|_| bad("frame value")))
                .collect::<Result<Vec<_>>>()?;
            pairs.push(PromptPair {
                condition: Condition::new(frame, style),
                noise_seed: seed,
            });
        }
        Self::from_pairs(pairs)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// A frozen bench of fresh conditions whose noise seeds never collide with
/// the training pool.
pub fn make_eval_bench(task: &TaskConfig, size: usize, seed: u64) -> Result<EvalBench> {
    if size == 0 {
        return Err(Error::InvalidArgument("bench size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbe4c_b00c_5eed_0001);
    let pairs = (0..size)
        .map(|_| {
            let style = rng.random_range(0..task.num_styles);
            let f0: Vec<f64> = (0..task.dim).map(|_| rng.sample(StandardNormal)).collect();
            PromptPair {
                condition: Condition::new(f0, style),
                noise_seed: rng.next_u64() | BENCH_SEED_BIT,
            }
        })
        .collect();
    EvalBench::from_pairs(pairs)
}
