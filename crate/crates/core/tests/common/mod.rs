#![allow(dead_code)]

use r2a_core::agent::{AgentConfig, AgentKind, RetrievalSet};
use r2a_core::batch::{TrajectoryBatch, TrajectoryData, TrajectorySource, TransitionBatch};
use r2a_core::retrieval::RetrievalConfig;
use r2a_core::summarizer::SummarizerConfig;
use rand::Rng;

pub const OBS: usize = 11;

/// A width-8 agent small enough for finite differences.
pub fn small_config(kind: AgentKind) -> AgentConfig {
    AgentConfig {
        kind,
        hidden: 8,
        summarizer: SummarizerConfig {
            hidden: 8,
            ..Default::default()
        },
        retrieval: RetrievalConfig {
            n_slots: 2,
            slot_dim: 8,
            key_dim: 8,
            value_dim: 8,
            k_traj: 2,
            k_states: 4,
            ..Default::default()
        },
        target_period: 3,
        ..Default::default()
    }
}

pub fn trajectory<R: Rng>(rng: &mut R, len: usize, task: u8, episode: usize) -> TrajectoryData {
    let rewards: Vec<f64> = (0..len).map(|_| rng.random_range(0..2) as f64).collect();
    let mut mc = vec![0.0; len];
    let mut acc = 0.0;
    for t in (0..len).rev() {
        acc = rewards[t] + 0.99 * acc;
        mc[t] = acc;
    }
    TrajectoryData {
        observations: (0..len * OBS).map(|_| rng.random_range(0.0..1.0)).collect(),
        actions: (0..len).map(|_| rng.random_range(0..7)).collect(),
        rewards,
        mc_returns: mc,
        source: TrajectorySource { episode, start: 0, task },
    }
}

pub fn retrieval_batch<R: Rng>(rng: &mut R, n: usize, len: usize, task: u8) -> TrajectoryBatch {
    let trajs: Vec<_> = (0..n).map(|i| trajectory(rng, len, task, i)).collect();
    TrajectoryBatch::new(&trajs, OBS).unwrap()
}

pub fn transitions<R: Rng>(rng: &mut R, n: usize, tasks: &[u8]) -> TransitionBatch {
    TransitionBatch {
        obs_dim: OBS,
        observations: (0..n * OBS).map(|_| rng.random_range(0.0..1.0)).collect(),
        actions: (0..n).map(|_| rng.random_range(0..7)).collect(),
        rewards: (0..n).map(|_| rng.random_range(0..2) as f64).collect(),
        next_observations: (0..n * OBS).map(|_| rng.random_range(0.0..1.0)).collect(),
        dones: (0..n).map(|i| i % 5 == 4).collect(),
        tasks: (0..n).map(|i| tasks[i % tasks.len()]).collect(),
    }
}

pub fn retrieval_set<R: Rng>(rng: &mut R, tasks: &[u8], n: usize, len: usize) -> RetrievalSet {
    tasks.iter().map(|&t| (t, retrieval_batch(rng, n, len, t))).collect()
}
