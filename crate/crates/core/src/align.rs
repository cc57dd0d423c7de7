//! Trajectory alignment: every group member's transition kernel is scored
//! on the realized next latents of the group's best and worst rollouts.
//!
//! ```text
//! r+_k(i) = pi_theta(x+_{k+1} | x^i_k) / pi_old(x+_{k+1} | x^i_k)
//! J_align = mean_{i,k} [ clip(r+, A+) + clip(r-, A-) ]
//! ```
//!
//! With `A+ > 0` the member kernels are pulled towards the positive anchor,
//! with `A- < 0` they are pushed away from the negative one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::grpo::{build_objective, Group, Objective, RLConfig, Snapshots, Terms, DEGENERATE_STD};
use crate::sampler::transition_logprob;
use crate::velocity::VelocityModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorPair {
    pub pos: usize,
    pub neg: usize,
    /// All rewards (numerically) equal; alignment is skipped.
    pub degenerate: bool,
}

/// Highest and lowest reward, lowest index on ties. The degenerate rule
/// matches the one zeroing advantages.
pub fn select_anchors(rewards: &[f64], advantages: &[f64]) -> Result<AnchorPair> {
    if rewards.len() < 2 || advantages.len() != rewards.len() {
        return Err(Error::InvalidArgument(
            "anchors need >= 2 rewards with matching advantages".into(),
        ));
    }
    let mut pos = 0;
    let mut neg = 0;
    for (i, &r) in rewards.iter().enumerate() {
        if r > rewards[pos] {
            pos = i;
        }
        if r < rewards[neg] {
            neg = i;
        }
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    let degenerate =
        pos == neg || std.is_nan() || std < DEGENERATE_STD || advantages.iter().all(|&a| a == 0.0);
    Ok(AnchorPair {
        pos,
        neg,
        degenerate,
    })
}

/// `exp(log pi_policy(x^a_{k+1} | x^i_k) - log pi_old(x^a_{k+1} | x^i_k))`
/// for member `i` and anchor `a` of `group`.
pub fn align_ratio(
    policy: &dyn VelocityModel,
    old: &dyn VelocityModel,
    group: &Group,
    member: usize,
    anchor: usize,
    k: usize,
    cfg: &RLConfig,
) -> Result<f64> {
    let (Some(m), Some(a)) = (group.rollouts.get(member), group.rollouts.get(anchor)) else {
        return Err(Error::InvalidArgument(format!(
            "member {member} or anchor {anchor} outside group"
        )));
    };
    let (tm, ta) = (&m.trajectory, &a.trajectory);
    if k >= tm.steps() || k + 1 >= ta.latents.len() {
        return Err(Error::InvalidArgument(format!(
            "anchor latents missing at step {k}"
        )));
    }
    let dt = tm.times[k + 1] - tm.times[k];
    let schedule = cfg.schedule();
    let lp = |model: &dyn VelocityModel| {
        transition_logprob(
            model,
            &tm.latents[k],
            &ta.latents[k + 1],
            &tm.condition,
            tm.times[k],
            dt,
            &schedule,
            cfg.cfg_scale,
        )
    };
    Ok((lp(policy)? - lp(old)?).exp())
}

/// The alignment objective alone, averaged per group and then over groups.
/// Degenerate groups contribute zero.
pub fn align_objective(
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
            grpo: false,
            gamma: 1.0,
        },
    )
}

/// `J_grpo + gamma * J_align`. With `gamma = 0` the alignment branch is
/// never built, so the result is the GRPO objective itself.
pub fn total_objective(
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
            gamma: cfg.align_gamma,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::evaluate_and_backward;
    use crate::grpo::tests::{group_from, small_cfg, tiny_arch};
    use crate::grpo::{grpo_objective, importance_ratio, window_steps};
    use crate::velocity::VelocityField;

    fn anchors(r: &[f64]) -> AnchorPair {
        select_anchors(r, &crate::grpo::compute_advantages(r).unwrap()).unwrap()
    }

    #[test]
    fn anchor_examples() {
        let a = anchors(&[0.1, 0.9, 0.5]);
        assert_eq!((a.pos, a.neg, a.degenerate), (1, 0, false));
        assert!(anchors(&[0.5, 0.5, 0.5]).degenerate);
        let a = anchors(&[0.9, 0.9, 0.1]);
        assert_eq!((a.pos, a.neg), (0, 2));
    }

    #[test]
    fn align_ratio_at_sync_and_self_consistency() {
        let cfg = small_cfg();
        let model = VelocityField::new_random(tiny_arch(), 9).unwrap();
        let group = group_from(&model, &[0.2, 0.8, 0.5], &cfg, 4);
        let window = window_steps(&group.rollouts[0].trajectory.times, cfg.t_min);
        for i in 0..3 {
            for a in 0..3 {
                for &k in &window {
                    assert!(
                        (align_ratio(&model, &model, &group, i, a, k, &cfg).unwrap() - 1.0).abs()
                            < 1e-9
                    );
                }
            }
        }
        let other = VelocityField::new_random(tiny_arch(), 10).unwrap();
        for &k in &window {
            let a = align_ratio(&other, &model, &group, 1, 1, k, &cfg).unwrap();
            let b = importance_ratio(&other, &group.rollouts[1], k, &cfg).unwrap();
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
        }
        assert!(align_ratio(&model, &model, &group, 0, 7, 0, &cfg).is_err());
    }

    #[test]
    fn sync_values_of_the_objectives() {
        let cfg = RLConfig {
            kl_beta: 0.0,
            ..small_cfg()
        };
        let model = VelocityField::new_random(tiny_arch(), 2).unwrap();
        let snaps = Snapshots {
            policy: &model,
            old: &model,
            reference: &model,
        };
        let groups = vec![group_from(&model, &[1.0, 2.0, 3.0], &cfg, 3)];
        let mut g = Graph::new();
        let al = align_objective(&mut g, snaps, &groups, &cfg).unwrap();
        assert!(g.scalar(al.total).unwrap().abs() < 1e-6);
        let mut g = Graph::new();
        let tot = total_objective(&mut g, snaps, &groups, &cfg).unwrap();
        assert!(g.scalar(tot.total).unwrap().abs() < 1e-6);

        // Skewed rewards: the align value is A+ + A- at sync.
        let groups = vec![group_from(&model, &[0.0, 0.0, 1.0, 5.0], &cfg, 3)];
        let adv = &groups[0].advantages;
        let expect = adv[3] + adv[0];
        let mut g = Graph::new();
        let al = align_objective(&mut g, snaps, &groups, &cfg).unwrap();
        assert!((g.scalar(al.total).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn gamma_zero_reduces_to_grpo_exactly() {
        let cfg = RLConfig {
            align_gamma: 0.0,
            ..small_cfg()
        };
        let model = VelocityField::new_random(tiny_arch(), 4).unwrap();
        let old = VelocityField::new_random(tiny_arch(), 5).unwrap();
        let groups = vec![group_from(&old, &[1.0, 4.0, 2.0], &cfg, 8)];
        let snaps = Snapshots {
            policy: &model,
            old: &old,
            reference: &old,
        };
        let run = |total: bool| {
            let mut p = model.params.clone();
            let mut g = Graph::new();
            let obj = if total {
                total_objective(&mut g, snaps, &groups, &cfg).unwrap()
            } else {
                grpo_objective(&mut g, snaps, &groups, &cfg).unwrap()
            };
            let v = evaluate_and_backward(&g, obj.total, &mut p).unwrap();
            (v, p)
        };
        let (va, pa) = run(true);
        let (vb, pb) = run(false);
        assert_eq!(va.to_bits(), vb.to_bits());
        for ((_, a), (_, b)) in pa.iter().zip(pb.iter()) {
            assert_eq!(a.grad(), b.grad());
        }
    }

    #[test]
    fn degenerate_group_contributes_no_alignment() {
        let cfg = small_cfg();
        let model = VelocityField::new_random(tiny_arch(), 4).unwrap();
        let other = VelocityField::new_random(tiny_arch(), 6).unwrap();
        let groups = vec![group_from(&model, &[1.0, 1.0], &cfg, 8)];
        let snaps = Snapshots {
            policy: &other,
            old: &model,
            reference: &model,
        };
        let mut g = Graph::new();
        let al = align_objective(&mut g, snaps, &groups, &cfg).unwrap();
        assert_eq!(g.scalar(al.total).unwrap(), 0.0);
    }
}
