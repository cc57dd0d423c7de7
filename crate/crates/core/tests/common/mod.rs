//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tagrpo::bank::{BankConfig, BankKey, MemoryBank};
use tagrpo::grpo::{Group, Rollout};
use tagrpo::sampler::Trajectory;
use tagrpo::velocity::Condition;

/// A two-step rollout with arbitrary latents; enough for bank bookkeeping.
pub fn synthetic_rollout(id: u64, key: BankKey, reward: f64, version: u64) -> Rollout {
    let traj = Trajectory {
        latents: vec![vec![0.0; 2], vec![id as f64, 0.5], vec![reward, 1.0]],
        log_densities: Some(vec![-1.0, -1.0]),
        noises: vec![vec![0.0; 2]; 2],
        times: vec![1.0, 0.5, 0.0],
        condition: Condition::new(vec![key.condition_id as f64, 0.0], 0),
        init_seed: key.noise_seed,
        noise_seed: id,
        policy_version: version,
    };
    Rollout::new(id, key, traj, reward).expect("valid synthetic rollout")
}

#[derive(Clone, Copy)]
struct Entry {
    id: u64,
    version: u64,
    reward: f64,
}

/// Drives a bank through `ops` random push / evict / assemble operations,
/// checking it against a plain reference model after every operation.
/// Returns the number of operations or the first violated law.
pub fn bank_law_checks(ops: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let capacity = 6;
    let staleness = 3;
    let mut bank = MemoryBank::new(BankConfig {
        capacity,
        staleness: Some(staleness),
    })
    .map_err(|e| e.to_string())?;
    let keys: Vec<BankKey> = (0..5)
        .map(|i| BankKey {
            condition_id: i,
            noise_seed: 1000 + i,
        })
        .collect();
    let mut model: BTreeMap<BankKey, VecDeque<Entry>> = BTreeMap::new();
    let mut generation = 0u64;
    let mut next_id = 0u64;

    for op in 0..ops {
        match rng.random_range(0..10) {
            0..=5 => {
                let key = keys[rng.random_range(0..keys.len())];
                // Coarse rewards so that ties occur.
                let reward = f64::from(rng.random_range(-8i32..=0)) / 4.0;
                bank.push(key, synthetic_rollout(next_id, key, reward, generation))
                    .map_err(|e| e.to_string())?;
                let q = model.entry(key).or_default();
                q.push_back(Entry {
                    id: next_id,
                    version: generation,
                    reward,
                });
                while q.len() > capacity {
                    q.pop_front();
                }
                next_id += 1;
                if q.len() > capacity {
                    return Err(format!("op {op}: capacity exceeded"));
                }
            }
            6 => {
                generation += 1;
                let evicted = bank.evict_stale(generation);
                let floor = generation.saturating_sub(staleness);
                let mut expected = 0;
                for q in model.values_mut() {
                    let before = q.len();
                    q.retain(|e| generation < staleness || e.version >= floor);
                    expected += before - q.len();
                }
                model.retain(|_, q| !q.is_empty());
                if evicted != expected {
                    return Err(format!(
                        "op {op}: evicted {evicted}, reference evicted {expected}"
                    ));
                }
            }
            _ => {
                let key = keys[rng.random_range(0..keys.len())];
                let fresh_n = rng.random_range(1..=4);
                let target = rng.random_range(2..=10);
                let fresh: Vec<Rollout> = (0..fresh_n)
                    .map(|j| {
                        let id = next_id + j as u64;
                        synthetic_rollout(
                            id,
                            key,
                            f64::from(rng.random_range(-8i32..=0)) / 4.0,
                            generation,
                        )
                    })
                    .collect();
                next_id += fresh_n as u64;
                let stored: Vec<Entry> = model
                    .get(&key)
                    .map(|q| q.iter().copied().collect())
                    .unwrap_or_default();
                let before = bank.len();
                let result = bank.assemble_group(key, fresh.clone(), target, &mut rng);
                if bank.len() != before {
                    return Err(format!("op {op}: assembly mutated the bank"));
                }
                let want_bank = target.saturating_sub(fresh_n).min(stored.len());
                if fresh_n + want_bank < 2 {
                    if result.is_ok() {
                        return Err(format!("op {op}: group of one was accepted"));
                    }
                    continue;
                }
                let group = result.map_err(|e| format!("op {op}: {e}"))?;
                check_group(op, &group, &fresh, &stored, want_bank)?;
                if want_bank == 0 {
                    let plain = Group::new(fresh).map_err(|e| e.to_string())?;
                    if plain != group {
                        return Err(format!(
                            "op {op}: fresh-only assembly differs from a plain group"
                        ));
                    }
                }
            }
        }
        for key in &keys {
            let got: Vec<u64> = bank.entries(key).map(|r| r.id).collect();
            let want: Vec<u64> = model
                .get(key)
                .map(|q| q.iter().map(|e| e.id).collect())
                .unwrap_or_default();
            if got != want {
                return Err(format!(
                    "op {op}: key {key:?} holds {got:?}, reference {want:?}"
                ));
            }
            if bank.entries(key).any(|r| r.key != *key) {
                return Err(format!("op {op}: foreign entry under {key:?}"));
            }
        }
    }
    Ok(ops)
}

fn check_group(
    op: usize,
    group: &Group,
    fresh: &[Rollout],
    stored: &[Entry],
    want_bank: usize,
) -> Result<(), String> {
    let ids: Vec<u64> = group.rollouts.iter().map(|r| r.id).collect();
    let unique: HashSet<u64> = ids.iter().copied().collect();
    if unique.len() != ids.len() {
        return Err(format!("op {op}: duplicate ids {ids:?}"));
    }
    if ids.len() != fresh.len() + want_bank {
        return Err(format!(
            "op {op}: group size {}, expected {}",
            ids.len(),
            fresh.len() + want_bank
        ));
    }
    if !ids.iter().zip(fresh).all(|(a, f)| *a == f.id) {
        return Err(format!("op {op}: fresh rollouts are not leading the group"));
    }
    let picked = &ids[fresh.len()..];
    let stored_ids: HashSet<u64> = stored.iter().map(|e| e.id).collect();
    if !picked.iter().all(|id| stored_ids.contains(id)) {
        return Err(format!(
            "op {op}: picked ids {picked:?} are not all stored under the key"
        ));
    }
    // First pick: highest reward, oldest on ties. Second: lowest among the rest.
    if let Some(&first) = picked.first() {
        let best = stored
            .iter()
            .fold(stored[0], |b, e| if e.reward > b.reward { *e } else { b });
        if first != best.id {
            return Err(format!(
                "op {op}: first bank pick {first}, expected max-reward {}",
                best.id
            ));
        }
        if let Some(&second) = picked.get(1) {
            let rest: Vec<Entry> = stored.iter().copied().filter(|e| e.id != best.id).collect();
            let worst = rest
                .iter()
                .fold(rest[0], |b, e| if e.reward < b.reward { *e } else { b });
            if second != worst.id {
                return Err(format!(
                    "op {op}: second bank pick {second}, expected min-reward {}",
                    worst.id
                ));
            }
        }
    }
    Ok(())
}
