//! Offline trajectory datasets: the `GRBM` file format and batch sampling.
//!
//! Layout (little-endian): magic `GRBM`, `u16` format version, `u32`
//! manifest length, the manifest as UTF-8 JSON, then one record per
//! episode: task index `u8` followed by 50 steps of `11 × f32`
//! observation, `u8` action, `u8` reward.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use gridroboman::{Task, EPISODE_LEN, NUM_ACTIONS, OBS_DIM};
use r2a_core::batch::{TrajectoryBatch, TrajectoryData, TrajectorySource, TransitionBatch};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"GRBM";
pub const FORMAT_VERSION: u16 = 1;
pub const STEPS: usize = EPISODE_LEN as usize;
const STEP_BYTES: usize = OBS_DIM * 4 + 2;
const EPISODE_BYTES: usize = 1 + STEPS * STEP_BYTES;
/// Discount used for the Monte Carlo value targets.
pub const MC_GAMMA: f64 = 0.99;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a dataset file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported dataset format version {0}")]
    UnsupportedVersion(u16),
    #[error("dataset file truncated: {0}")]
    Truncated(String),
    #[error("bad manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("dataset inconsistent: {0}")]
    Inconsistent(String),
    #[error("task {0} is not in the dataset")]
    MissingTask(String),
    #[error("need {need} trajectories but only {have} are admissible")]
    NotEnough { need: usize, have: usize },
    #[error("dataset is empty")]
    Empty,
}

pub type DataResult<T> = std::result::Result<T, DataError>;

/// How the episodes in a file were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorInfo {
    Scripted {
        epsilon: f64,
    },
    Random,
    OnlineDqn {
        epsilon_start: f64,
        epsilon_end: f64,
        /// Fraction of each task's episodes over which ε decays linearly.
        decay_fraction: f64,
        hidden: usize,
        batch_size: usize,
        updates_per_episode: usize,
        target_period: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u16,
    pub tasks: Vec<String>,
    pub episodes_per_task: usize,
    pub generator: GeneratorInfo,
    pub seed: u64,
    pub total_episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task: Task,
    pub observations: Vec<[f32; OBS_DIM]>,
    pub actions: Vec<u8>,
    pub rewards: Vec<u8>,
}

impl Episode {
    pub fn total_return(&self) -> f64 {
        self.rewards.iter().map(|&r| r as f64).sum()
    }

    fn check(&self) -> DataResult<()> {
        if self.observations.len() != STEPS || self.actions.len() != STEPS || self.rewards.len() != STEPS {
            return Err(DataError::Inconsistent(format!("episode of {} steps", self.actions.len())));
        }
        if self.actions.iter().any(|&a| a as usize >= NUM_ACTIONS) {
            return Err(DataError::Inconsistent("action out of range".into()));
        }
        if self.rewards.iter().any(|&r| r > 1) {
            return Err(DataError::Inconsistent("reward outside {0, 1}".into()));
        }
        Ok(())
    }
}

/// Discounted return from every step to the end of the episode.
pub fn discounted_returns(rewards: &[u8], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] as f64 + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Which trajectories a retrieval batch may draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrievalSource {
    Uniform,
    TaskFiltered(Task),
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub episodes: Vec<Episode>,
    /// Per-episode discounted returns, filled on construction.
    pub mc_returns: Vec<Vec<f64>>,
    by_task: BTreeMap<Task, Vec<usize>>,
}

impl Dataset {
    pub fn new(manifest: Manifest, episodes: Vec<Episode>) -> DataResult<Self> {
        if manifest.total_episodes != episodes.len() {
            return Err(DataError::Inconsistent(format!(
                "manifest lists {} episodes, found {}",
                manifest.total_episodes,
                episodes.len()
            )));
        }
        let mut by_task: BTreeMap<Task, Vec<usize>> = BTreeMap::new();
        for (i, e) in episodes.iter().enumerate() {
            e.check()?;
            by_task.entry(e.task).or_default().push(i);
        }
        for name in &manifest.tasks {
            let task: Task = name.parse().map_err(|_| DataError::MissingTask(name.clone()))?;
            let n = by_task.get(&task).map_or(0, Vec::len);
            if n != manifest.episodes_per_task {
                return Err(DataError::Inconsistent(format!(
                    "{name}: manifest says {} episodes, found {n}",
                    manifest.episodes_per_task
                )));
            }
        }
        if by_task.len() != manifest.tasks.len() {
            return Err(DataError::Inconsistent("episodes for tasks missing from the manifest".into()));
        }
        let mc_returns = episodes.iter().map(|e| discounted_returns(&e.rewards, MC_GAMMA)).collect();
        Ok(Self {
            manifest,
            episodes,
            mc_returns,
            by_task,
        })
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.by_task.keys().copied().collect()
    }

    pub fn episodes_of(&self, task: Task) -> &[usize] {
        self.by_task.get(&task).map_or(&[], Vec::as_slice)
    }

    pub fn encode(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serialises");
        let mut out = Vec::with_capacity(10 + manifest.len() + self.episodes.len() * EPISODE_BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for e in &self.episodes {
            out.push(e.task.index() as u8);
            for t in 0..STEPS {
                for v in e.observations[t] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.push(e.actions[t]);
                out.push(e.rewards[t]);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> DataResult<Self> {
        let need = |n: usize, what: &str| {
            if bytes.len() < n {
                Err(DataError::Truncated(format!("{what} needs {n} bytes, file has {}", bytes.len())))
            } else {
                Ok(())
            }
        };
        need(4, "magic")?;
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(DataError::BadMagic(magic));
        }
        need(10, "header")?;
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(DataError::UnsupportedVersion(version));
        }
        let mlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        need(10 + mlen, "manifest")?;
        let manifest: Manifest = serde_json::from_slice(&bytes[10..10 + mlen])?;
        if manifest.format_version != version {
            return Err(DataError::Inconsistent("manifest and header versions differ".into()));
        }
        let body = &bytes[10 + mlen..];
        if body.len() != manifest.total_episodes * EPISODE_BYTES {
            return Err(DataError::Truncated(format!(
                "expected {} episode bytes, found {}",
                manifest.total_episodes * EPISODE_BYTES,
                body.len()
            )));
        }
        let mut episodes = Vec::with_capacity(manifest.total_episodes);
        for rec in body.chunks_exact(EPISODE_BYTES) {
            let task = Task::from_index(rec[0] as usize)
                .ok_or_else(|| DataError::Inconsistent(format!("task index {}", rec[0])))?;
            let mut observations = Vec::with_capacity(STEPS);
            let mut actions = Vec::with_capacity(STEPS);
            let mut rewards = Vec::with_capacity(STEPS);
            for step in rec[1..].chunks_exact(STEP_BYTES) {
                let mut o = [0f32; OBS_DIM];
                for (i, v) in o.iter_mut().enumerate() {
                    *v = f32::from_le_bytes(step[4 * i..4 * i + 4].try_into().unwrap());
                }
                observations.push(o);
                actions.push(step[OBS_DIM * 4]);
                rewards.push(step[OBS_DIM * 4 + 1]);
            }
            episodes.push(Episode {
                task,
                observations,
                actions,
                rewards,
            });
        }
        Self::new(manifest, episodes)
    }

    pub fn save(&self, path: &Path) -> DataResult<()> {
        fs::write(path, self.encode()).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> DataResult<Self> {
        let bytes = fs::read(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }

    /// SHA-256 of the encoded file, hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.encode()))
    }

    fn trajectory(&self, episode: usize, start: usize, len: usize) -> TrajectoryData {
        let e = &self.episodes[episode];
        let range = start..start + len;
        TrajectoryData {
            observations: e.observations[range.clone()]
                .iter()
                .flat_map(|o| o.iter().map(|&v| v as f64))
                .collect(),
            actions: e.actions[range.clone()].iter().map(|&a| a as usize).collect(),
            rewards: e.rewards[range.clone()].iter().map(|&r| r as f64).collect(),
            mc_returns: self.mc_returns[episode][range].to_vec(),
            source: TrajectorySource {
                episode,
                start,
                task: e.task.index() as u8,
            },
        }
    }

    /// `n` distinct trajectories drawn uniformly from the admissible set.
    /// With `context_len` below the episode length each trajectory is a
    /// window at a uniformly random offset.
    pub fn sample_retrieval_batch<R: Rng + ?Sized>(
        &self,
        n: usize,
        source: RetrievalSource,
        context_len: usize,
        rng: &mut R,
    ) -> DataResult<TrajectoryBatch> {
        if self.episodes.is_empty() {
            return Err(DataError::Empty);
        }
        if context_len == 0 || context_len > STEPS {
            return Err(DataError::Inconsistent(format!("context length {context_len}")));
        }
        let all: Vec<usize>;
        let admissible: &[usize] = match source {
            RetrievalSource::Uniform => {
                all = (0..self.episodes.len()).collect();
                &all
            }
            RetrievalSource::TaskFiltered(task) => {
                let ids = self.episodes_of(task);
                if ids.is_empty() {
                    return Err(DataError::MissingTask(task.name()));
                }
                ids
            }
        };
        if n == 0 || n > admissible.len() {
            return Err(DataError::NotEnough {
                need: n,
                have: admissible.len(),
            });
        }
        let picked: Vec<TrajectoryData> = sample(rng, admissible.len(), n)
            .into_iter()
            .map(|i| {
                let start = if context_len < STEPS {
                    rng.random_range(0..=STEPS - context_len)
                } else {
                    0
                };
                self.trajectory(admissible[i], start, context_len)
            })
            .collect();
        TrajectoryBatch::new(&picked, OBS_DIM).map_err(|e| DataError::Inconsistent(e.to_string()))
    }

    /// Transitions sampled uniformly over every step of the episodes of
    /// `tasks` (all tasks when `None`). The last step of an episode is
    /// terminal and its next observation repeats the current one.
    pub fn sample_training_batch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        tasks: Option<&[Task]>,
        rng: &mut R,
    ) -> DataResult<TransitionBatch> {
        let pool: Vec<usize> = match tasks {
            None => (0..self.episodes.len()).collect(),
            Some(ts) => {
                let mut v = Vec::new();
                for &t in ts {
                    let ids = self.episodes_of(t);
                    if ids.is_empty() {
                        return Err(DataError::MissingTask(t.name()));
                    }
                    v.extend_from_slice(ids);
                }
                v
            }
        };
        if pool.is_empty() || batch_size == 0 {
            return Err(DataError::Empty);
        }
        Ok(transitions_from(&self.episodes, &pool, batch_size, rng))
    }
}

/// Uniform transition sampling from `episodes[pool[..]]`.
pub fn transitions_from<R: Rng + ?Sized>(
    episodes: &[Episode],
    pool: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> TransitionBatch {
    let mut b = TransitionBatch {
        obs_dim: OBS_DIM,
        ..Default::default()
    };
    for _ in 0..batch_size {
        let e = &episodes[pool[rng.random_range(0..pool.len())]];
        let t = rng.random_range(0..STEPS);
        let done = t + 1 == STEPS;
        let next = if done { t } else { t + 1 };
        b.observations.extend(e.observations[t].iter().map(|&v| v as f64));
        b.next_observations.extend(e.observations[next].iter().map(|&v| v as f64));
        b.actions.push(e.actions[t] as usize);
        b.rewards.push(e.rewards[t] as f64);
        b.dones.push(done);
        b.tasks.push(e.task.index() as u8);
    }
    b
}
