//! Plain-data batches handed to the model by the data pipeline.

use crate::error::{Result, TensorError};

/// One fixed-length stretch of experience.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryData {
    /// `len × obs_dim` observations, row-major.
    pub observations: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Discounted return from each step to the end of the stored episode.
    pub mc_returns: Vec<f64>,
    pub source: TrajectorySource,
}

/// Where a retrieval trajectory came from in the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrajectorySource {
    pub episode: usize,
    pub start: usize,
    pub task: u8,
}

/// A retrieval batch in time-major layout: row `j * num_traj + i` holds
/// step `j` of trajectory `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub num_traj: usize,
    pub len: usize,
    pub obs_dim: usize,
    pub observations: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub mc_returns: Vec<f64>,
    /// Undiscounted reward sum of each trajectory.
    pub returns: Vec<f64>,
    pub sources: Vec<TrajectorySource>,
}

impl TrajectoryBatch {
    pub fn new(trajectories: &[TrajectoryData], obs_dim: usize) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or(TensorError::EmptyAxis { op: "trajectory_batch" })?;
        let len = first.actions.len();
        if len == 0 {
            return Err(TensorError::EmptyAxis { op: "trajectory_batch" });
        }
        for t in trajectories {
            if t.actions.len() != len
                || t.rewards.len() != len
                || t.mc_returns.len() != len
                || t.observations.len() != len * obs_dim
            {
                return Err(TensorError::Invalid(format!(
                    "trajectory from episode {} has inconsistent length (expected {len})",
                    t.source.episode
                )));
            }
        }
        let n = trajectories.len();
        let mut observations = Vec::with_capacity(n * len * obs_dim);
        let mut actions = Vec::with_capacity(n * len);
        let mut rewards = Vec::with_capacity(n * len);
        let mut mc_returns = Vec::with_capacity(n * len);
        for j in 0..len {
            for t in trajectories {
                observations.extend_from_slice(&t.observations[j * obs_dim..(j + 1) * obs_dim]);
                actions.push(t.actions[j]);
                rewards.push(t.rewards[j]);
                mc_returns.push(t.mc_returns[j]);
            }
        }
        Ok(Self {
            num_traj: n,
            len,
            obs_dim,
            observations,
            actions,
            rewards,
            mc_returns,
            returns: trajectories.iter().map(|t| t.rewards.iter().sum()).collect(),
            sources: trajectories.iter().map(|t| t.source).collect(),
        })
    }

    pub fn num_steps(&self) -> usize {
        self.num_traj * self.len
    }

    /// Row of step `step` of trajectory `traj`.
    pub fn row(&self, traj: usize, step: usize) -> usize {
        step * self.num_traj + traj
    }

    /// Inverse of [`TrajectoryBatch::row`].
    pub fn traj_step(&self, row: usize) -> (usize, usize) {
        (row % self.num_traj, row / self.num_traj)
    }

    /// Features of the previous step fed to the summarizer alongside the
    /// current observation: one-hot previous action then previous reward.
    /// Zero at the first step of every trajectory.
    pub fn previous_step_features(&self, num_actions: usize) -> Vec<f64> {
        let width = num_actions + 1;
        let mut out = vec![0.0; self.num_steps() * width];
        for j in 1..self.len {
            for i in 0..self.num_traj {
                let prev = self.row(i, j - 1);
                let r = self.row(i, j);
                out[r * width + self.actions[prev]] = 1.0;
                out[r * width + num_actions] = self.rewards[prev];
            }
        }
        out
    }
}

/// Transitions sampled for the TD loss.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransitionBatch {
    pub obs_dim: usize,
    pub observations: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_observations: Vec<f64>,
    pub dones: Vec<bool>,
    pub tasks: Vec<u8>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.observations.len() != n * self.obs_dim
            || self.next_observations.len() != n * self.obs_dim
            || self.rewards.len() != n
            || self.dones.len() != n
            || self.tasks.len() != n
        {
            return Err(TensorError::Invalid("transition batch fields disagree in length".into()));
        }
        Ok(())
    }
}
