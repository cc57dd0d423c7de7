//! Keyed FIFO store of past rollouts, used to fill groups beyond the fresh
//! rollouts generated at each step.
//!
//! On disk a bank is two files in one directory: `bank.json` (capacity,
//! staleness limit, and per key the ids and behavior versions in queue
//! order) and `bank.bin`, the rollouts themselves:
//!
//! ```text
//! magic "TGBANK01"
//! u32 entry count
//! per entry: u64 condition_id, u64 noise_seed, u64 id, f64 reward,
//!            u64 behavior_version, trajectory container
//! ```
//!
//! Entries appear key by key (keys ascending), each queue oldest first.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::io::{BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::{Group, Rollout, RolloutSource};
use crate::sampler::Trajectory;

const MAGIC: &[u8; 8] = b"TGBANK01";

/// Identifies a (condition, initial noise) pair of the training pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BankKey {
    pub condition_id: u64,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    /// Queue length per key.
    pub capacity: usize,
    /// Entries older than this many sync generations are evicted; `None`
    /// (written `"none"` in config files) means never.
    #[serde(with = "staleness_serde")]
    pub staleness: Option<u64>,
}

mod staleness_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<u64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(n) => s.serialize_u64(*n),
            None => s.serialize_str("none"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Limit(u64),
        Word(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u64>, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Limit(n) => Ok(Some(n)),
            Raw::Word(w) if w == "none" => Ok(None),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "staleness must be an integer or \"none\", got {w:?}"
            ))),
        }
    }
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            capacity: 32,
            staleness: Some(4),
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        if self.capacity == 0 {
            Err(vec!["bank.capacity".into()])
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    config: BankConfig,
    queues: BTreeMap<BankKey, VecDeque<Rollout>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: BankConfig,
    keys: Vec<ManifestKey>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestKey {
    key: BankKey,
    ids: Vec<u64>,
    versions: Vec<u64>,
}

impl MemoryBank {
    pub fn new(config: BankConfig) -> Result<Self> {
        if config.capacity == 0 {
            return Err(Error::Config("bank capacity must be positive".into()));
        }
        Ok(Self {
            config,
            queues: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> BankConfig {
        self.config
    }

    pub fn push(&mut self, key: BankKey, mut rollout: Rollout) -> Result<()> {
        if rollout.key != key {
            return Err(Error::KeyMismatch {
                expected: key,
                found: rollout.key,
            });
        }
        rollout.source = RolloutSource::Bank;
        let q = self.queues.entry(key).or_default();
        q.push_back(rollout);
        while q.len() > self.config.capacity {
            q.pop_front();
        }
        Ok(())
    }

    /// Drops entries whose behavior version is below `current - staleness`.
    pub fn evict_stale(&mut self, current_version: u64) -> usize {
        let Some(s) = self.config.staleness else {
            return 0;
        };
        let Some(floor) = current_version.checked_sub(s) else {
            return 0;
        };
        let mut evicted = 0;
        for q in self.queues.values_mut() {
            let before = q.len();
            q.retain(|r| r.behavior_version >= floor);
            evicted += before - q.len();
        }
        self.queues.retain(|_, q| !q.is_empty());
        evicted
    }

    pub fn entries(&self, key: &BankKey) -> impl Iterator<Item = &Rollout> {
        self.queues.get(key).into_iter().flatten()
    }

    pub fn len_of(&self, key: &BankKey) -> usize {
        self.queues.get(key).map_or(0, VecDeque::len)
    }

    /// Total stored rollouts across keys.
    pub fn len(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> impl Iterator<Item = &BankKey> {
        self.queues.keys()
    }

    /// Fresh rollouts plus up to `target - fresh.len()` bank entries of the
    /// same key: the highest-reward entry, the lowest-reward entry, then
    /// uniform picks without replacement. Ties go to the oldest entry.
    pub fn assemble_group<R: Rng>(
        &self,
        key: BankKey,
        fresh: Vec<Rollout>,
        target: usize,
        rng: &mut R,
    ) -> Result<Group> {
        if fresh.is_empty() {
            return Err(Error::InvalidArgument(
                "group assembly needs fresh rollouts".into(),
            ));
        }
        if let Some(r) = fresh.iter().find(|r| r.key != key) {
            return Err(Error::KeyMismatch {
                expected: key,
                found: r.key,
            });
        }
        let taken: HashSet<u64> = fresh.iter().map(|r| r.id).collect();
        let mut candidates: Vec<&Rollout> = self
            .entries(&key)
            .filter(|r| !taken.contains(&r.id))
            .collect();
        let mut seen = HashSet::new();
        candidates.retain(|r| seen.insert(r.id));
        let need = target.saturating_sub(fresh.len()).min(candidates.len());
        let mut picked: Vec<&Rollout> = Vec::with_capacity(need);
        if need > 0 {
            let mut hi = 0;
            for (i, r) in candidates.iter().enumerate() {
                if r.reward > candidates[hi].reward {
                    hi = i;
                }
            }
            picked.push(candidates.remove(hi));
        }
        if picked.len() < need {
            let mut lo = 0;
            for (i, r) in candidates.iter().enumerate() {
                if r.reward < candidates[lo].reward {
                    lo = i;
                }
            }
            picked.push(candidates.remove(lo));
        }
        let rest = need - picked.len();
        if rest > 0 {
            let idx = rand::seq::index::sample(rng, candidates.len(), rest);
            picked.extend(idx.iter().map(|i| candidates[i]));
        }
        let mut members = fresh;
        members.extend(picked.into_iter().cloned());
        if members.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "only {} rollouts available for key {key:?}",
                members.len()
            )));
        }
        Group::new(members)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let manifest = Manifest {
            config: self.config,
            keys: self
                .queues
                .iter()
                .map(|(k, q)| ManifestKey {
                    key: *k,
                    ids: q.iter().map(|r| r.id).collect(),
                    versions: q.iter().map(|r| r.behavior_version).collect(),
                })
                .collect(),
        };
        let mut bin = Vec::new();
        self.write_rollouts(&mut bin)?;
        crate::io::write_atomic(&dir.join("bank.bin"), &bin)?;
        crate::io::write_atomic(
            &dir.join("bank.json"),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )
    }

    fn write_rollouts<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(self.len() as u32)?;
        for (k, q) in &self.queues {
            for r in q {
                w.write_u64::<LittleEndian>(k.condition_id)?;
                w.write_u64::<LittleEndian>(k.noise_seed)?;
                w.write_u64::<LittleEndian>(r.id)?;
                w.write_f64::<LittleEndian>(r.reward)?;
                w.write_u64::<LittleEndian>(r.behavior_version)?;
                r.trajectory.write_to(w)?;
            }
        }
        Ok(())
    }

    /// Reads a bank written by [`MemoryBank::save`] and checks the binary
    /// part against the manifest.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("bank.json"))?)?;
        let mut bank = Self::new(manifest.config)?;
        let mut r = BufReader::new(std::fs::File::open(dir.join("bank.bin"))?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bank file has wrong magic".into()));
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        for _ in 0..count {
            let key = BankKey {
                condition_id: r.read_u64::<LittleEndian>()?,
                noise_seed: r.read_u64::<LittleEndian>()?,
            };
            let id = r.read_u64::<LittleEndian>()?;
            let reward = r.read_f64::<LittleEndian>()?;
            let behavior_version = r.read_u64::<LittleEndian>()?;
            let trajectory = Trajectory::read_from(&mut r)?;
            let mut rollout = Rollout::new(id, key, trajectory, reward)?;
            rollout.behavior_version = behavior_version;
            bank.push(key, rollout)?;
        }
        let listed: Vec<(BankKey, Vec<u64>, Vec<u64>)> = manifest
            .keys
            .into_iter()
            .map(|k| (k.key, k.ids, k.versions))
            .collect();
        let stored: Vec<(BankKey, Vec<u64>, Vec<u64>)> = bank
            .queues
            .iter()
            .map(|(k, q)| {
                (
                    *k,
                    q.iter().map(|r| r.id).collect(),
                    q.iter().map(|r| r.behavior_version).collect(),
                )
            })
            .collect();
        if listed != stored {
            return Err(Error::Format(
                "bank manifest does not match stored rollouts".into(),
            ));
        }
        Ok(bank)
    }
}
