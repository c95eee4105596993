use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, Trajectory};
use crate::error::{PodnetError, Result};
use crate::rng::{substream, tags};

pub const STD_FLOOR: f64 = 1e-8;

/// Keep every `stride`-th state. The action kept at a retained index is the
/// raw action issued at that index, and likewise for ground-truth labels.
pub fn downsample(traj: &Trajectory, stride: usize) -> Result<Trajectory> {
    if stride < 1 {
        return Err(PodnetError::invalid("stride must be >= 1"));
    }
    let kept: Vec<usize> = (0..traj.states.len()).step_by(stride).collect();
    if kept.len() < 2 {
        return Err(PodnetError::InvalidTrajectory {
            id: traj.id.clone(),
            reason: format!(
                "only {} state(s) survive downsampling with stride {stride}",
                kept.len()
            ),
        });
    }
    let transitions = &kept[..kept.len() - 1];
    Ok(Trajectory {
        id: traj.id.clone(),
        env_name: traj.env_name.clone(),
        states: kept.iter().map(|&i| traj.states[i].clone()).collect(),
        actions: transitions.iter().map(|&i| traj.actions[i].clone()).collect(),
        true_labels: traj
            .true_labels
            .as_ref()
            .map(|labels| transitions.iter().map(|&i| labels[i]).collect()),
    })
}

/// Per-dimension state statistics. Actions share the state scale so that a
/// normalized action is a displacement in normalized state units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, len: usize, what: &str) -> Result<()> {
        if len != self.dim() {
            return Err(PodnetError::shape(format!("normalize {what}"), self.dim(), len));
        }
        Ok(())
    }

    pub fn normalize_state(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.check(state.len(), "state")?;
        Ok(state
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (mu, sd))| (x - mu) / sd)
            .collect())
    }

    pub fn denormalize_state(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.check(state.len(), "state")?;
        Ok(state
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(z, (mu, sd))| z * sd + mu)
            .collect())
    }

    /// Actions are scaled per dimension by the state std. Requires `m == d`
    /// or, for `m != d`, falls back to the mean state std.
    pub fn normalize_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .enumerate()
            .map(|(i, a)| a / self.action_scale(i, action.len()))
            .collect()
    }

    pub fn denormalize_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .enumerate()
            .map(|(i, a)| a * self.action_scale(i, action.len()))
            .collect()
    }

    fn action_scale(&self, i: usize, m: usize) -> f64 {
        if m == self.dim() {
            self.std[i]
        } else {
            self.std.iter().sum::<f64>() / self.dim() as f64
        }
    }

    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        let trajectories = dataset
            .trajectories
            .iter()
            .map(|t| self.apply_trajectory(t))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(trajectories)
    }

    pub fn apply_trajectory(&self, traj: &Trajectory) -> Result<Trajectory> {
        Ok(Trajectory {
            states: traj
                .states
                .iter()
                .map(|s| self.normalize_state(s))
                .collect::<Result<_>>()?,
            actions: traj.actions.iter().map(|a| self.normalize_action(a)).collect(),
            ..traj.clone()
        })
    }

    pub fn invert(&self, dataset: &Dataset) -> Result<Dataset> {
        let trajectories = dataset
            .trajectories
            .iter()
            .map(|t| {
                Ok(Trajectory {
                    states: t
                        .states
                        .iter()
                        .map(|s| self.denormalize_state(s))
                        .collect::<Result<_>>()?,
                    actions: t.actions.iter().map(|a| self.denormalize_action(a)).collect(),
                    ..t.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(trajectories)
    }
}

/// Pooled per-dimension z-score of all states; std floored at [`STD_FLOOR`].
pub fn normalize(dataset: &Dataset) -> Result<(Dataset, NormStats)> {
    if dataset.is_empty() {
        return Err(PodnetError::invalid("cannot normalize an empty dataset"));
    }
    let d = dataset.state_dim;
    let mut count = 0usize;
    let mut mean = vec![0.0; d];
    for s in dataset.trajectories.iter().flat_map(|t| &t.states) {
        count += 1;
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; d];
    for s in dataset.trajectories.iter().flat_map(|t| &t.states) {
        for ((v, x), m) in var.iter_mut().zip(s).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var
        .into_iter()
        .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
        .collect();
    let stats = NormStats { mean, std };
    Ok((stats.apply(dataset)?, stats))
}

/// Trajectory-level split into `(train, holdout)`, deterministic in `seed`.
/// The holdout receives `floor(holdout_fraction * n)` trajectories.
pub fn split(dataset: &Dataset, holdout_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(PodnetError::invalid("holdout_fraction must lie in (0, 1)"));
    }
    let n = dataset.len();
    let n_hold = (holdout_fraction * n as f64 + 1e-9).floor() as usize;
    if n_hold == 0 || n_hold >= n {
        return Err(PodnetError::invalid(format!(
            "holdout fraction {holdout_fraction} of {n} trajectories leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, tags::SPLIT, 0));
    let mut is_hold = vec![false; n];
    for &i in &order[..n_hold] {
        is_hold[i] = true;
    }
    let (hold, train): (Vec<_>, Vec<_>) = dataset
        .trajectories
        .iter()
        .cloned()
        .zip(is_hold)
        .partition(|(_, h)| *h);
    let unzip = |v: Vec<(Trajectory, bool)>| Dataset::new(v.into_iter().map(|(t, _)| t).collect());
    Ok((unzip(train)?, unzip(hold)?))
}
