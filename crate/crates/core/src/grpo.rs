//! Group-relative policy optimization over SDE rollouts: advantages,
//! importance ratios, the clipped surrogate and the closed-form KL penalty.
//!
//! The batched objective shares one policy forward pass per transition row
//! between the GRPO terms and the alignment terms (see [`crate::align`]):
//! every term evaluated from `x^i_{t_k}` uses the same transition mean, only
//! the target latent differs.

use serde::{Deserialize, Serialize};

use crate::align::{select_anchors, AnchorPair};
use crate::bank::BankKey;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::sampler::{
    gaussian_logprob, guided_velocity, guided_velocity_graph, logprob_graph, transition_coeffs,
    transition_logprob, transition_mean, transition_mean_graph, SigmaSchedule, TimeGrid,
    Trajectory, TransitionCoeffs,
};
use crate::velocity::{Condition, VelocityField, VelocityModel};

/// Advantages are zeroed when the reward spread falls below this.
pub const DEGENERATE_STD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RolloutSource {
    Fresh,
    Bank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Unique within a run; groups never hold two rollouts with the same id.
    pub id: u64,
    pub key: BankKey,
    pub trajectory: Trajectory,
    pub reward: f64,
    pub source: RolloutSource,
    pub behavior_version: u64,
}

impl Rollout {
    pub fn new(id: u64, key: BankKey, trajectory: Trajectory, reward: f64) -> Result<Self> {
        if !reward.is_finite() {
            return Err(Error::NonFinite { op: "reward" });
        }
        if trajectory.log_densities.is_none() {
            return Err(Error::InvalidArgument(format!(
                "rollout {id} has no behavior log-densities"
            )));
        }
        if trajectory.init_seed != key.noise_seed {
            return Err(Error::InvalidArgument(format!(
                "rollout {id} initial-noise seed {} does not match key {key:?}",
                trajectory.init_seed
            )));
        }
        let behavior_version = trajectory.policy_version;
        Ok(Self {
            id,
            key,
            trajectory,
            reward,
            source: RolloutSource::Fresh,
            behavior_version,
        })
    }

    fn behavior_density(&self, k: usize) -> Result<f64> {
        self.trajectory
            .log_densities
            .as_ref()
            .and_then(|d| d.get(k).copied())
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "rollout {} lacks a stored density at step {k}",
                    self.id
                ))
            })
    }
}

/// Population-std normalization of rewards within a group.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "group of {} rollouts, need >= 2",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    if std.is_nan() || std < DEGENERATE_STD {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Rollouts sharing one condition and initial noise, with advantages and
/// anchors computed over the members.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
    pub anchors: AnchorPair,
}

impl Group {
    pub fn new(rollouts: Vec<Rollout>) -> Result<Self> {
        let first = rollouts
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty group".into()))?;
        for r in &rollouts[1..] {
            if r.key != first.key
                || r.trajectory.condition != first.trajectory.condition
                || r.trajectory.times != first.trajectory.times
            {
                return Err(Error::InvalidArgument(format!(
                    "rollout {} does not share the group's key, condition and grid",
                    r.id
                )));
            }
        }
        let mut ids: Vec<u64> = rollouts.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("duplicate rollout in group".into()));
        }
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
        let advantages = compute_advantages(&rewards)?;
        let anchors = select_anchors(&rewards, &advantages)?;
        Ok(Self {
            rollouts,
            advantages,
            anchors,
        })
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    pub fn key(&self) -> BankKey {
        self.rollouts[0].key
    }

    pub fn condition(&self) -> &Condition {
        &self.rollouts[0].trajectory.condition
    }

    pub fn degenerate(&self) -> bool {
        self.anchors.degenerate
    }

    pub fn mean_reward(&self) -> f64 {
        self.rollouts.iter().map(|r| r.reward).sum::<f64>() / self.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RLConfig {
    pub group_size: usize,
    /// Fresh rollouts generated per group and step.
    pub fresh_per_step: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub align_gamma: f64,
    pub eta: f64,
    pub cfg_scale: f64,
    /// Transitions from `t_k >= t_min` receive gradient.
    pub t_min: f64,
    pub time_steps: usize,
    pub lr: f64,
    pub steps: usize,
    pub sync_interval: usize,
    pub groups_per_step: usize,
    /// Number of (condition, initial-noise) pairs cycled during training.
    /// A key comes back every `pool_size / groups_per_step` steps; bank
    /// entries are only reused if that is within the staleness limit.
    pub pool_size: usize,
    /// Steps between bench evaluations; the final step is always evaluated.
    pub eval_interval: usize,
}

impl Default for RLConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            fresh_per_step: 6,
            clip_eps: 0.2,
            kl_beta: 0.01,
            align_gamma: 1.0,
            eta: 0.2,
            cfg_scale: 3.5,
            t_min: 0.5,
            time_steps: 16,
            lr: 1e-4,
            steps: 300,
            sync_interval: 1,
            groups_per_step: 4,
            pool_size: 16,
            eval_interval: 25,
        }
    }
}

impl RLConfig {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut bad = Vec::new();
        let mut check = |ok: bool, key: &str| {
            if !ok {
                bad.push(format!("rl.{key}"));
            }
        };
        check(self.group_size >= 2, "group_size");
        check(
            self.fresh_per_step >= 1 && self.fresh_per_step <= self.group_size,
            "fresh_per_step",
        );
        check(self.clip_eps > 0.0, "clip_eps");
        check(self.kl_beta >= 0.0, "kl_beta");
        check(self.align_gamma >= 0.0, "align_gamma");
        check(self.eta > 0.0, "eta");
        check(self.cfg_scale >= 0.0, "cfg_scale");
        check((0.0..1.0).contains(&self.t_min), "t_min");
        check(self.time_steps >= 2, "time_steps");
        check(self.lr > 0.0, "lr");
        check(self.sync_interval >= 1, "sync_interval");
        check(self.groups_per_step >= 1, "groups_per_step");
        check(self.pool_size >= 1, "pool_size");
        check(self.eval_interval >= 1, "eval_interval");
        if bad.is_empty() {
            Ok(())
        } else {
            Err(bad)
        }
    }

    pub fn schedule(&self) -> SigmaSchedule {
        SigmaSchedule::new(self.eta)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.time_steps)
    }
}

/// Steps `k` whose start time lies in the training window `[t_min, 1]`.
pub fn window_steps(times: &[f64], t_min: f64) -> Vec<usize> {
    (0..times.len().saturating_sub(1))
        .filter(|&k| times[k] >= t_min && times[k] > 0.0)
        .collect()
}

pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let a = ratio * advantage;
    let b = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    a.min(b)
}

fn clipped_term_graph(g: &mut Graph, ratio: NodeId, adv: &[f64], eps: f64) -> Result<NodeId> {
    let adv = g.constant(vec![adv.len()], adv.to_vec())?;
    let unclipped = g.mul(ratio, adv)?;
    let clipped = g.clip(ratio, 1.0 - eps, 1.0 + eps)?;
    let clipped = g.mul(clipped, adv)?;
    g.minimum(unclipped, clipped)
}

/// `exp(log pi_theta(x_{k+1} | x_k) - stored behavior log-density)`.
pub fn importance_ratio(
    policy: &dyn VelocityModel,
    rollout: &Rollout,
    k: usize,
    cfg: &RLConfig,
) -> Result<f64> {
    let tr = &rollout.trajectory;
    if k >= tr.steps() {
        return Err(Error::InvalidArgument(format!(
            "step {k} outside trajectory"
        )));
    }
    let dt = tr.times[k + 1] - tr.times[k];
    let lp = transition_logprob(
        policy,
        &tr.latents[k],
        &tr.latents[k + 1],
        &tr.condition,
        tr.times[k],
        dt,
        &cfg.schedule(),
        cfg.cfg_scale,
    )?;
    Ok((lp - rollout.behavior_density(k)?).exp())
}

/// Coefficient multiplying the dimension-averaged squared velocity gap in
/// the KL between two transition kernels with equal variance.
pub fn kl_coefficient(sigma: f64, t: f64, dt: f64) -> Result<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::ZeroStd);
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::TimeOutOfRange(t));
    }
    let c = sigma * (1.0 - t) / (2.0 * t) + 1.0 / sigma;
    Ok(dt.abs() / 2.0 * c * c)
}

pub fn kl_closed_form(v_theta: &[f64], v_ref: &[f64], sigma: f64, t: f64, dt: f64) -> Result<f64> {
    if v_theta.len() != v_ref.len() || v_theta.is_empty() {
        return Err(Error::shape("kl", "velocity lengths differ"));
    }
    let gap = v_theta
        .iter()
        .zip(v_ref)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / v_theta.len() as f64;
    Ok(kl_coefficient(sigma, t, dt)? * gap)
}

#[allow(clippy::too_many_arguments)]
pub fn kl_penalty(
    policy: &dyn VelocityModel,
    reference: &dyn VelocityModel,
    x_t: &[f64],
    c: &Condition,
    t: f64,
    dt: f64,
    schedule: &SigmaSchedule,
    cfg_scale: f64,
) -> Result<f64> {
    let co = transition_coeffs(schedule, t, dt)?;
    let conds = std::slice::from_ref(c);
    let v = guided_velocity(policy, x_t, conds, &[t], cfg_scale)?;
    let v_ref = guided_velocity(reference, x_t, conds, &[t], cfg_scale)?;
    kl_closed_form(&v, &v_ref, co.sigma, t, dt)
}

/// The three parameter sets an update touches.
#[derive(Clone, Copy)]
pub struct Snapshots<'a> {
    pub policy: &'a VelocityField,
    pub old: &'a VelocityField,
    pub reference: &'a VelocityField,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveStats {
    /// Clipped surrogate averaged per group, then over groups.
    pub surrogate: f64,
    pub kl: f64,
    pub align: f64,
    /// Share of GRPO terms with `|r - 1| > eps`.
    pub clip_fraction: f64,
    pub degenerate_groups: usize,
    pub rows: usize,
}

pub struct Objective {
    /// `J_grpo + gamma * J_align`, to be maximized.
    pub total: NodeId,
    pub stats: ObjectiveStats,
}

/// One row per (group, member, in-window step).
struct Rows {
    x_from: Vec<f64>,
    x_own: Vec<f64>,
    x_pos: Vec<f64>,
    x_neg: Vec<f64>,
    conds: Vec<Condition>,
    t: Vec<f64>,
    coeffs: Vec<TransitionCoeffs>,
    behavior: Vec<f64>,
    adv: Vec<f64>,
    adv_pos: Vec<f64>,
    adv_neg: Vec<f64>,
    /// Weight of the row in the per-group mean, further divided by the
    /// number of groups.
    weight: Vec<f64>,
    /// Same, but zero for degenerate groups.
    align_weight: Vec<f64>,
}

impl Rows {
    fn build(groups: &[Group], cfg: &RLConfig) -> Result<Self> {
        let schedule = cfg.schedule();
        let mut rows = Rows {
            x_from: Vec::new(),
            x_own: Vec::new(),
            x_pos: Vec::new(),
            x_neg: Vec::new(),
            conds: Vec::new(),
            t: Vec::new(),
            coeffs: Vec::new(),
            behavior: Vec::new(),
            adv: Vec::new(),
            adv_pos: Vec::new(),
            adv_neg: Vec::new(),
            weight: Vec::new(),
            align_weight: Vec::new(),
        };
        let ng = groups.len() as f64;
        for group in groups {
            let times = &group.rollouts[0].trajectory.times;
            let window = window_steps(times, cfg.t_min);
            if window.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "no step in the train window t >= {}",
                    cfg.t_min
                )));
            }
            let w = 1.0 / (ng * (group.len() * window.len()) as f64);
            let anchors = group.anchors;
            let pos = &group.rollouts[anchors.pos].trajectory;
            let neg = &group.rollouts[anchors.neg].trajectory;
            for (r, &adv) in group.rollouts.iter().zip(&group.advantages) {
                let tr = &r.trajectory;
                for &k in &window {
                    let dt = times[k + 1] - times[k];
                    let co = transition_coeffs(&schedule, times[k], dt)?;
                    rows.x_from.extend_from_slice(&tr.latents[k]);
                    rows.x_own.extend_from_slice(&tr.latents[k + 1]);
                    rows.x_pos.extend_from_slice(&pos.latents[k + 1]);
                    rows.x_neg.extend_from_slice(&neg.latents[k + 1]);
                    rows.conds.push(tr.condition.clone());
                    rows.t.push(times[k]);
                    rows.coeffs.push(co);
                    rows.behavior.push(r.behavior_density(k)?);
                    rows.adv.push(adv);
                    rows.adv_pos.push(group.advantages[anchors.pos]);
                    rows.adv_neg.push(group.advantages[anchors.neg]);
                    rows.weight.push(w);
                    rows.align_weight
                        .push(if anchors.degenerate { 0.0 } else { w });
                }
            }
        }
        Ok(rows)
    }

    fn len(&self) -> usize {
        self.t.len()
    }

    fn stds(&self) -> Vec<f64> {
        self.coeffs.iter().map(|c| c.std).collect()
    }
}

fn weighted_sum(g: &mut Graph, x: NodeId, w: &[f64]) -> Result<NodeId> {
    let w = g.constant(vec![w.len()], w.to_vec())?;
    let p = g.mul(x, w)?;
    g.sum(p)
}

/// Per-row log-densities of `targets` under `model`'s kernels from
/// `rows.x_from`, as plain values.
fn plain_logprobs(
    model: &VelocityField,
    rows: &Rows,
    targets: &[&[f64]],
    cfg: &RLConfig,
) -> Result<Vec<Vec<f64>>> {
    let n = model.arch.latent_dim;
    let v = guided_velocity(model, &rows.x_from, &rows.conds, &rows.t, cfg.cfg_scale)?;
    let mut out = vec![Vec::with_capacity(rows.len()); targets.len()];
    for (i, co) in rows.coeffs.iter().enumerate() {
        let span = i * n..(i + 1) * n;
        let mean = transition_mean(&rows.x_from[span.clone()], &v[span.clone()], co);
        for (o, tgt) in out.iter_mut().zip(targets) {
            o.push(gaussian_logprob(&tgt[span.clone()], &mean, co.std)?);
        }
    }
    Ok(out)
}

/// Which terms of the combined objective to build.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Terms {
    pub grpo: bool,
    pub gamma: f64,
}

pub(crate) fn build_objective(
    g: &mut Graph,
    snaps: Snapshots<'_>,
    groups: &[Group],
    cfg: &RLConfig,
    terms: Terms,
) -> Result<Objective> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("objective over zero groups".into()));
    }
    let rows = Rows::build(groups, cfg)?;
    let n = snaps.policy.arch.latent_dim;
    let m = rows.len();
    let stds = rows.stds();
    let x = g.constant(vec![m, n], rows.x_from.clone())?;
    let v = guided_velocity_graph(snaps.policy, g, x, &rows.conds, &rows.t, cfg.cfg_scale)?;
    let mean = transition_mean_graph(g, &rows.x_from, v, &rows.coeffs)?;
    let mut stats = ObjectiveStats {
        rows: m,
        degenerate_groups: groups.iter().filter(|gr| gr.degenerate()).count(),
        ..Default::default()
    };
    let mut total: Option<NodeId> = None;

    if terms.grpo {
        let lp = logprob_graph(g, mean, &rows.x_own, &stds)?;
        let behavior = g.constant(vec![m], rows.behavior.clone())?;
        let diff = g.sub(lp, behavior)?;
        let ratio = g.exp(diff)?;
        let clipped = clipped_term_graph(g, ratio, &rows.adv, cfg.clip_eps)?;
        let surrogate = weighted_sum(g, clipped, &rows.weight)?;
        stats.surrogate = g.scalar(surrogate)?;
        stats.clip_fraction = g
            .value(ratio)
            .iter()
            .filter(|r| (*r - 1.0).abs() > cfg.clip_eps)
            .count() as f64
            / m as f64;
        let mut j = surrogate;
        if cfg.kl_beta > 0.0 {
            let v_ref = guided_velocity(
                snaps.reference,
                &rows.x_from,
                &rows.conds,
                &rows.t,
                cfg.cfg_scale,
            )?;
            let v_ref = g.constant(vec![m, n], v_ref)?;
            let gap = g.sub(v, v_ref)?;
            let gap = g.square(gap)?;
            let gap = g.mean_cols(gap)?;
            let coef = rows
                .coeffs
                .iter()
                .zip(&rows.t)
                .map(|(co, &t)| kl_coefficient(co.sigma, t, co.dt))
                .collect::<Result<Vec<_>>>()?;
            let coef = g.constant(vec![m], coef)?;
            let kl = g.mul(gap, coef)?;
            let kl = weighted_sum(g, kl, &rows.weight)?;
            stats.kl = g.scalar(kl)?;
            let pen = g.scale(kl, cfg.kl_beta)?;
            j = g.sub(j, pen)?;
        }
        total = Some(j);
    }

    if terms.gamma > 0.0 && stats.degenerate_groups < groups.len() {
        let old = plain_logprobs(snaps.old, &rows, &[&rows.x_pos, &rows.x_neg], cfg)?;
        let mut side = |target: &[f64], old_lp: &[f64], adv: &[f64]| -> Result<NodeId> {
            let lp = logprob_graph(g, mean, target, &stds)?;
            let old_lp = g.constant(vec![m], old_lp.to_vec())?;
            let diff = g.sub(lp, old_lp)?;
            let ratio = g.exp(diff)?;
            let c = clipped_term_graph(g, ratio, adv, cfg.clip_eps)?;
            weighted_sum(g, c, &rows.align_weight)
        };
        let pos = side(&rows.x_pos, &old[0], &rows.adv_pos)?;
        let neg = side(&rows.x_neg, &old[1], &rows.adv_neg)?;
        let align = g.add(pos, neg)?;
        stats.align = g.scalar(align)?;
        let scaled = g.scale(align, terms.gamma)?;
        total = Some(match total {
            Some(j) => g.add(j, scaled)?,
            None => scaled,
        });
    }

    let total = match total {
        Some(t) => t,
        None => g.constant(vec![], vec![0.0])?,
    };
    Ok(Objective { total, stats })
}

/// Mean over groups of the per-group mean clipped surrogate, minus
/// `beta` times the matching mean KL.
pub fn grpo_objective(
    g: &mut Graph,
    snaps: Snapshots<'_>,
    groups: &[Group],
    cfg: &RLConfig,
) -> Result<Objective> {
    build_objective(
        g,
        snaps,
        groups,
        cfg,
        Terms {
            grpo: true,
            gamma: 0.0,
        },
    )
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::analytic::FnVelocity;
    use crate::sampler::{initial_noise, sde_sample_batch, RolloutRequest};
    use crate::velocity::VelocityArch;

    pub(crate) fn tiny_arch() -> VelocityArch {
        VelocityArch {
            latent_dim: 4,
            cond_dim: 2,
            num_styles: 2,
            hidden: 8,
            depth: 1,
            time_features: 4,
            style_embed: 2,
        }
    }

    pub(crate) fn small_cfg() -> RLConfig {
        RLConfig {
            time_steps: 6,
            t_min: 0.5,
            cfg_scale: 2.0,
            ..RLConfig::default()
        }
    }

    /// A group of `rewards.len()` rollouts sampled from `model` with
    /// rewards assigned by hand.
    pub(crate) fn group_from(
        model: &VelocityField,
        rewards: &[f64],
        cfg: &RLConfig,
        seed: u64,
    ) -> Group {
        let c = Condition::new(vec![0.3, -0.2], 1);
        let n = model.arch.latent_dim;
        let reqs: Vec<RolloutRequest> = (0..rewards.len())
            .map(|i| RolloutRequest {
                condition: c.clone(),
                x1: initial_noise(seed, n),
                init_seed: seed,
                noise_seed: seed * 1000 + i as u64 + 1,
            })
            .collect();
        let trajs = sde_sample_batch(
            model,
            &reqs,
            &cfg.grid().unwrap(),
            &cfg.schedule(),
            cfg.cfg_scale,
            true,
            model.version(),
        )
        .unwrap();
        let key = BankKey {
            condition_id: 0,
            noise_seed: seed,
        };
        let rollouts = trajs
            .into_iter()
            .zip(rewards)
            .enumerate()
            .map(|(i, (t, &r))| Rollout::new(seed * 1000 + i as u64, key, t, r).unwrap())
            .collect();
        Group::new(rollouts).unwrap()
    }

    #[test]
    fn advantages_of_three_rewards() {
        let a = compute_advantages(&[1.0, 2.0, 3.0]).unwrap();
        let expect = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!(
            (a[0] + expect).abs() < 1e-12 && a[1].abs() < 1e-15 && (a[2] - expect).abs() < 1e-12
        );
        assert!((expect - 1.224745).abs() < 1e-6);
        assert_eq!(compute_advantages(&[0.4; 5]).unwrap(), vec![0.0; 5]);
        assert!(compute_advantages(&[1.0]).is_err());
    }

    #[test]
    fn clipped_term_values() {
        assert_eq!(clipped_term(1.0, 0.7, 0.2), 0.7);
        assert!((clipped_term(1.5, 2.0, 0.2) - 2.4).abs() < 1e-12);
        assert!((clipped_term(0.5, -1.0, 0.2) + 0.8).abs() < 1e-12);
        assert!((clipped_term(0.5, 1.0, 0.2) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_hand_value() {
        let v = [2.0, -2.0];
        let r = [0.0, 0.0];
        assert!((kl_closed_form(&v, &r, 1.0, 0.5, -0.1).unwrap() - 0.45).abs() < 1e-12);
        assert_eq!(kl_closed_form(&v, &v, 1.0, 0.5, -0.1).unwrap(), 0.0);
        assert!(matches!(
            kl_coefficient(0.0, 0.5, -0.1),
            Err(Error::ZeroStd)
        ));
    }

    #[test]
    fn ratio_is_one_at_behavior_policy_and_matches_gaussian_shift() {
        let cfg = small_cfg();
        let model = VelocityField::new_random(tiny_arch(), 3).unwrap();
        let group = group_from(&model, &[0.0, 1.0], &cfg, 7);
        let r = &group.rollouts[0];
        for k in 0..r.trajectory.steps() {
            assert!((importance_ratio(&model, r, k, &cfg).unwrap() - 1.0).abs() < 1e-9);
        }
        // A policy whose velocity is shifted so the mean moves by one std
        // towards x_{k+1} in dimension 0: the ratio gains exp(d / N) with d
        // computable from the Gaussian quadratic form.
        let k = 1;
        let tr = &r.trajectory;
        let dt = tr.times[k + 1] - tr.times[k];
        let co = transition_coeffs(&cfg.schedule(), tr.times[k], dt).unwrap();
        let (mean, std) = crate::sampler::sde_transition(
            &model,
            &tr.latents[k],
            &tr.condition,
            tr.times[k],
            dt,
            &cfg.schedule(),
            cfg.cfg_scale,
        )
        .unwrap();
        let z = (tr.latents[k + 1][0] - mean[0]) / std;
        let step = std * z.signum();
        let shift = step / co.v_coef;
        let n = model.arch.latent_dim;
        let base = model.clone();
        let shifted = FnVelocity {
            dim: n,
            f: move |x: &[f64], c: &Condition, t: f64| {
                let mut v = base.vf_forward(x, c, t).unwrap();
                v[0] += shift;
                v
            },
        };
        // Guidance combines two shifted passes; (1-s) d + s d = d.
        let got = importance_ratio(&shifted, r, k, &cfg).unwrap().ln();
        let zn = z - z.signum();
        let expect = 0.5 * (z * z - zn * zn) / n as f64;
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn kl_equals_exact_gaussian_kl() {
        let cfg = small_cfg();
        let a = VelocityField::new_random(tiny_arch(), 1).unwrap();
        let b = VelocityField::new_random(tiny_arch(), 2).unwrap();
        let c = Condition::new(vec![0.1, 0.2], 0);
        let x = [0.3, -0.7, 1.1, 0.0];
        let (t, dt) = (0.8, -0.1);
        let kl = kl_penalty(&a, &b, &x, &c, t, dt, &cfg.schedule(), cfg.cfg_scale).unwrap();
        let (ma, sa) =
            crate::sampler::sde_transition(&a, &x, &c, t, dt, &cfg.schedule(), cfg.cfg_scale)
                .unwrap();
        let (mb, _) =
            crate::sampler::sde_transition(&b, &x, &c, t, dt, &cfg.schedule(), cfg.cfg_scale)
                .unwrap();
        let exact = ma
            .iter()
            .zip(&mb)
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            / (2.0 * sa * sa * 4.0);
        assert!(kl > 0.0 && (kl - exact).abs() < 1e-12 * exact.max(1.0));
    }

    #[test]
    fn objective_at_sync_is_zero_and_kl_vanishes_at_reference() {
        let cfg = RLConfig {
            kl_beta: 0.0,
            ..small_cfg()
        };
        let model = VelocityField::new_random(tiny_arch(), 5).unwrap();
        let snaps = Snapshots {
            policy: &model,
            old: &model,
            reference: &model,
        };
        let groups = vec![
            group_from(&model, &[1.0, 2.0, 3.0], &cfg, 1),
            group_from(&model, &[0.5, 0.5], &cfg, 2),
        ];
        let mut g = Graph::new();
        let obj = grpo_objective(&mut g, snaps, &groups, &cfg).unwrap();
        assert!(g.scalar(obj.total).unwrap().abs() < 1e-6);
        assert_eq!(obj.stats.clip_fraction, 0.0);
        assert_eq!(obj.stats.degenerate_groups, 1);

        let cfg = RLConfig {
            kl_beta: 0.5,
            ..cfg
        };
        let mut g = Graph::new();
        let obj = grpo_objective(&mut g, snaps, &groups, &cfg).unwrap();
        assert_eq!(obj.stats.kl, 0.0);
    }

    #[test]
    fn rollout_rejects_missing_density_and_group_rejects_mixed_keys() {
        let cfg = small_cfg();
        let model = VelocityField::new_random(tiny_arch(), 5).unwrap();
        let a = group_from(&model, &[1.0, 2.0], &cfg, 1);
        let b = group_from(&model, &[1.0, 2.0], &cfg, 2);
        let mixed = vec![a.rollouts[0].clone(), b.rollouts[0].clone()];
        assert!(Group::new(mixed).is_err());
        let dup = vec![a.rollouts[0].clone(), a.rollouts[0].clone()];
        assert!(Group::new(dup).is_err());
        let mut t = a.rollouts[0].trajectory.clone();
        t.log_densities = None;
        assert!(Rollout::new(99, a.key(), t, 0.0).is_err());
    }

    #[test]
    fn window_selects_high_noise_steps() {
        let grid = TimeGrid::uniform(16).unwrap();
        let w = window_steps(grid.times(), 0.5);
        assert_eq!(w, (0..=8).collect::<Vec<_>>());
        assert_eq!(window_steps(grid.times(), 0.0).len(), 16);
    }
}
