//! Demonstration trajectories, synthetic demonstrators and dataset plumbing.

mod env;
mod io;
mod transform;

pub use env::{generate_dataset, generate_trajectory, Bounds, EnvKind, EnvSpec};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use transform::{downsample, normalize, split, NormStats, STD_FLOOR};

use serde::{Deserialize, Serialize};

use crate::error::{PodnetError, Result};

/// One demonstration: `T + 1` states and the `T` actions between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    #[serde(rename = "env")]
    pub env_name: String,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    #[serde(rename = "labels", default, skip_serializing_if = "Option::is_none")]
    pub true_labels: Option<Vec<usize>>,
}

impl Trajectory {
    /// Number of transitions `T`.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn action_dim(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| PodnetError::InvalidTrajectory {
            id: self.id.clone(),
            reason,
        };
        if self.states.len() != self.actions.len() + 1 {
            return Err(bad(format!(
                "{} states for {} actions (need exactly one more state than actions)",
                self.states.len(),
                self.actions.len()
            )));
        }
        let d = self.state_dim();
        if d == 0 || self.states.iter().any(|s| s.len() != d) {
            return Err(bad("state vectors have inconsistent or zero dimension".into()));
        }
        let m = self.action_dim();
        if !self.actions.is_empty() && (m == 0 || self.actions.iter().any(|a| a.len() != m)) {
            return Err(bad("action vectors have inconsistent or zero dimension".into()));
        }
        if let Some(labels) = &self.true_labels {
            if labels.len() != self.actions.len() {
                return Err(bad(format!(
                    "{} labels for {} actions",
                    labels.len(),
                    self.actions.len()
                )));
            }
        }
        Ok(())
    }
}

/// A non-empty set of trajectories sharing environment and dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub env_name: String,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| PodnetError::invalid("dataset must contain at least one trajectory"))?;
        let env_name = first.env_name.clone();
        let state_dim = first.state_dim();
        let action_dim = first.action_dim();
        for traj in &trajectories {
            traj.validate()?;
            if traj.env_name != env_name {
                return Err(PodnetError::InvalidTrajectory {
                    id: traj.id.clone(),
                    reason: format!("env `{}` differs from dataset env `{env_name}`", traj.env_name),
                });
            }
            if traj.state_dim() != state_dim || traj.action_dim() != action_dim {
                return Err(PodnetError::InvalidTrajectory {
                    id: traj.id.clone(),
                    reason: format!(
                        "dimensions ({}, {}) differ from dataset ({state_dim}, {action_dim})",
                        traj.state_dim(),
                        traj.action_dim()
                    ),
                });
            }
        }
        Ok(Self {
            trajectories,
            env_name,
            state_dim,
            action_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn has_labels(&self) -> bool {
        self.trajectories.iter().all(|t| t.true_labels.is_some())
    }

    /// Total number of transitions over all trajectories.
    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}
