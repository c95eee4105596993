use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Trajectory};
use crate::error::{PodnetError, Result};
use crate::rng::seeded;

/// Constant velocities of the 1-D primitives, indexed by option.
const PRIMITIVE_VELOCITIES: [f64; 3] = [-0.3, 0.0, 0.3];
/// Inclusive range of raw steps a 1-D primitive is held for.
const PRIMITIVE_HOLD: (usize, usize) = (20, 40);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Waypoint2d,
    Primitive1d,
}

impl EnvKind {
    pub const ALL: [EnvKind; 2] = [EnvKind::Waypoint2d, EnvKind::Primitive1d];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Waypoint2d => "waypoint2d",
            EnvKind::Primitive1d => "primitive1d",
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            EnvKind::Waypoint2d => 2,
            EnvKind::Primitive1d => 1,
        }
    }

    pub fn action_dim(self) -> usize {
        self.state_dim()
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = PodnetError;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| PodnetError::UnknownEnv(s.to_string()))
    }
}

/// Axis-aligned state-space box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl Bounds {
    pub fn clamp(&self, state: &mut [f64]) {
        for ((x, lo), hi) in state.iter_mut().zip(&self.low).zip(&self.high) {
            *x = x.clamp(*lo, *hi);
        }
    }
}

/// A synthetic demonstration environment.
///
/// For `waypoint2d` the waypoint coordinates are stored in the `EnvSpec`, so every
/// dataset generated from one spec shares the same ground-truth options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub name: EnvKind,
    pub k_true: usize,
    pub max_speed: f64,
    pub noise_std: f64,
    pub arrival_radius: f64,
    pub bounds: Bounds,
    #[serde(default)]
    pub waypoints: Vec<Vec<f64>>,
    /// Option segments per demonstration (waypoint visits or primitives).
    pub segments: usize,
    /// Hard cap on raw steps per demonstration.
    pub max_raw_steps: usize,
}

impl EnvSpec {
    /// A 10x10 arena with `k_true` waypoints sampled from `seed`.
    pub fn waypoint2d(k_true: usize, seed: u64) -> Result<Self> {
        if k_true < 2 {
            return Err(PodnetError::invalid("waypoint2d needs k_true >= 2"));
        }
        let bounds = Bounds {
            low: vec![0.0, 0.0],
            high: vec![10.0, 10.0],
        };
        let waypoints = sample_waypoints(k_true, seed);
        Ok(Self {
            name: EnvKind::Waypoint2d,
            k_true,
            max_speed: 0.1,
            noise_std: 0.01,
            arrival_radius: 0.3,
            bounds,
            waypoints,
            segments: 4,
            max_raw_steps: 2000,
        })
    }

    pub fn primitive1d() -> Self {
        Self {
            name: EnvKind::Primitive1d,
            k_true: PRIMITIVE_VELOCITIES.len(),
            max_speed: 0.5,
            noise_std: 0.01,
            arrival_radius: 0.1,
            bounds: Bounds {
                low: vec![-100.0],
                high: vec![100.0],
            },
            waypoints: Vec::new(),
            segments: 6,
            max_raw_steps: 2000,
        }
    }

    /// Default spec for an environment name; `seed` only matters for waypoints.
    pub fn for_kind(kind: EnvKind, k_true: usize, seed: u64) -> Result<Self> {
        match kind {
            EnvKind::Waypoint2d => Self::waypoint2d(k_true, seed),
            EnvKind::Primitive1d => Ok(Self::primitive1d()),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.name.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.name.action_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.state_dim();
        if self.k_true < 2 {
            return Err(PodnetError::invalid("k_true must be >= 2"));
        }
        if !(self.max_speed > 0.0) || !(self.noise_std >= 0.0) || !(self.arrival_radius > 0.0) {
            return Err(PodnetError::invalid(
                "max_speed and arrival_radius must be positive, noise_std non-negative",
            ));
        }
        if self.bounds.low.len() != d || self.bounds.high.len() != d {
            return Err(PodnetError::shape("env bounds", d, self.bounds.low.len()));
        }
        if self.segments == 0 {
            return Err(PodnetError::invalid("segments must be >= 1"));
        }
        match self.name {
            EnvKind::Waypoint2d => {
                if self.waypoints.len() != self.k_true {
                    return Err(PodnetError::shape("waypoint count", self.k_true, self.waypoints.len()));
                }
                if let Some(w) = self.waypoints.iter().find(|w| w.len() != d) {
                    return Err(PodnetError::shape("waypoint", d, w.len()));
                }
            }
            EnvKind::Primitive1d => {
                if self.k_true != PRIMITIVE_VELOCITIES.len() {
                    return Err(PodnetError::invalid("primitive1d has exactly 3 options"));
                }
            }
        }
        Ok(())
    }

    /// Pure transition: `state + clip(action, ±max_speed)`, clipped to bounds.
    pub fn step(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        env_step(self, state, action)
    }
}

pub fn env_step(spec: &EnvSpec, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
    let d = spec.state_dim();
    if state.len() != d {
        return Err(PodnetError::shape("env_step state", d, state.len()));
    }
    if action.len() != spec.action_dim() {
        return Err(PodnetError::shape("env_step action", spec.action_dim(), action.len()));
    }
    let v = spec.max_speed;
    let mut next: Vec<f64> = state
        .iter()
        .zip(action)
        .map(|(s, a)| s + a.clamp(-v, v))
        .collect();
    spec.bounds.clamp(&mut next);
    Ok(next)
}

fn sample_waypoints(k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed);
    let (lo, hi) = (1.0, 9.0);
    // Chebyshev separation; relaxed when the arena cannot fit `k` points.
    let mut separation = 5.0_f64;
    loop {
        for _ in 0..2000 {
            let mut points: Vec<Vec<f64>> = Vec::with_capacity(k);
            for _ in 0..k {
                let p = vec![rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
                if points.iter().all(|q| chebyshev(q, &p) >= separation) {
                    points.push(p);
                } else {
                    break;
                }
            }
            if points.len() == k {
                return points;
            }
        }
        separation *= 0.85;
    }
}

fn chebyshev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Straight-line command toward `goal` at up to `max_speed`, each axis
/// clipped to `max_speed`.
fn heading(state: &[f64], goal: &[f64], max_speed: f64) -> Vec<f64> {
    let dist = euclidean(state, goal);
    let scale = if dist > max_speed { max_speed / dist } else { 1.0 };
    state
        .iter()
        .zip(goal)
        .map(|(s, w)| ((w - s) * scale).clamp(-max_speed, max_speed))
        .collect()
}

/// Pick an option uniformly among all but `previous`.
fn next_option<R: Rng>(rng: &mut R, k: usize, previous: usize) -> usize {
    let pick = rng.gen_range(0..k - 1);
    if pick >= previous {
        pick + 1
    } else {
        pick
    }
}

/// Generate one demonstration from its own seed.
pub fn generate_trajectory(spec: &EnvSpec, id: String, seed: u64) -> Result<Trajectory> {
    spec.validate()?;
    let mut rng = seeded(seed);
    let noise = Normal::new(0.0, spec.noise_std)
        .map_err(|e| PodnetError::invalid(format!("noise_std: {e}")))?;
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut labels = Vec::new();

    match spec.name {
        EnvKind::Waypoint2d => {
            let mut state: Vec<f64> = (0..2)
                .map(|i| rng.gen_range(spec.bounds.low[i]..spec.bounds.high[i]))
                .collect();
            let mut target = rng.gen_range(0..spec.k_true);
            let mut visits = 0;
            states.push(state.clone());
            while actions.len() < spec.max_raw_steps {
                let goal = &spec.waypoints[target];
                if euclidean(&state, goal) <= spec.arrival_radius {
                    visits += 1;
                    if visits == spec.segments {
                        break;
                    }
                    target = next_option(&mut rng, spec.k_true, target);
                    continue;
                }
                let action: Vec<f64> = heading(&state, goal, spec.max_speed)
                    .into_iter()
                    .map(|a| a + noise.sample(&mut rng))
                    .collect();
                state = env_step(spec, &state, &action)?;
                states.push(state.clone());
                actions.push(action);
                labels.push(target);
            }
        }
        EnvKind::Primitive1d => {
            let mut state = vec![0.0];
            states.push(state.clone());
            let mut option = rng.gen_range(0..spec.k_true);
            for segment in 0..spec.segments {
                if segment > 0 {
                    option = next_option(&mut rng, spec.k_true, option);
                }
                let hold = rng.gen_range(PRIMITIVE_HOLD.0..=PRIMITIVE_HOLD.1);
                for _ in 0..hold {
                    if actions.len() >= spec.max_raw_steps {
                        break;
                    }
                    let action = vec![PRIMITIVE_VELOCITIES[option] + noise.sample(&mut rng)];
                    state = env_step(spec, &state, &action)?;
                    states.push(state.clone());
                    actions.push(action);
                    labels.push(option);
                }
            }
        }
    }

    let traj = Trajectory {
        id,
        env_name: spec.name.name().to_string(),
        states,
        actions,
        true_labels: Some(labels),
    };
    traj.validate()?;
    Ok(traj)
}

/// `n_traj` demonstrations; trajectory `i` uses sub-seed `seed ^ i`.
pub fn generate_dataset(spec: &EnvSpec, n_traj: usize, seed: u64) -> Result<Dataset> {
    if n_traj < 1 {
        return Err(PodnetError::invalid("n_traj must be >= 1"));
    }
    let trajectories = (0..n_traj)
        .map(|i| generate_trajectory(spec, format!("{}-{seed}-{i:05}", spec.name), seed ^ i as u64))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(trajectories)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label_runs(labels: &[usize]) -> Vec<(usize, usize)> {
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for &l in labels {
            match runs.last_mut() {
                Some((label, len)) if *label == l => *len += 1,
                _ => runs.push((l, 1)),
            }
        }
        runs
    }

    #[test]
    fn env_step_clips_action() {
        let mut spec = EnvSpec::waypoint2d(3, 0).unwrap();
        spec.max_speed = 0.5;
        assert_eq!(spec.step(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), vec![0.5, 0.0]);
        assert_eq!(spec.step(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(spec.step(&[0.0, 0.0], &[0.2, -0.1]).unwrap(), vec![0.2, 0.0]);
        spec.bounds.low = vec![-5.0, -5.0];
        assert_eq!(spec.step(&[0.0, 0.0], &[0.2, -0.1]).unwrap(), vec![0.2, -0.1]);
        assert!(spec.step(&[0.0], &[0.0, 0.0]).is_err());
        assert!(spec.step(&[0.0, 0.0], &[0.0]).is_err());
    }

    #[test]
    fn heading_points_at_goal_with_bounded_speed() {
        let a = heading(&[0.0, 0.0], &[3.0, 4.0], 0.1);
        assert!((a[0] - 0.06).abs() < 1e-12 && (a[1] - 0.08).abs() < 1e-12);
        assert_eq!(heading(&[1.0, 1.0], &[1.03, 0.96], 0.1), vec![1.03 - 1.0, 0.96 - 1.0]);
        let a = heading(&[0.0, 0.0], &[-50.0, 0.0], 0.1);
        assert_eq!(a, vec![-0.1, 0.0]);
    }

    #[test]
    fn waypoint_labels_are_piecewise_constant_with_several_segments() {
        let spec = EnvSpec::waypoint2d(3, 0).unwrap();
        let ds = generate_dataset(&spec, 10, 0).unwrap();
        assert_eq!(ds.len(), 10);
        for traj in &ds.trajectories {
            let labels = traj.true_labels.as_ref().unwrap();
            assert_eq!(traj.states.len(), traj.actions.len() + 1);
            assert_eq!(labels.len(), traj.actions.len());
            assert!(labels.iter().all(|&l| l < 3));
            let runs = label_runs(labels);
            assert!(runs.len() >= 2, "{} has {} segments", traj.id, runs.len());
            for pair in runs.windows(2) {
                assert_ne!(pair[0].0, pair[1].0);
            }
        }
    }

    #[test]
    fn waypoint_segments_span_several_downsampled_steps() {
        let spec = EnvSpec::waypoint2d(3, 0).unwrap();
        let ds = generate_dataset(&spec, 20, 5).unwrap();
        for traj in &ds.trajectories {
            let runs = label_runs(traj.true_labels.as_ref().unwrap());
            // The first segment starts anywhere, so only interior runs are bounded.
            for &(_, len) in &runs[1..] {
                assert!(len >= 20, "{}: run of {len} raw steps", traj.id);
            }
        }
    }

    #[test]
    fn primitive_deltas_stay_near_their_velocity() {
        let spec = EnvSpec::primitive1d();
        let ds = generate_dataset(&spec, 1, 1).unwrap();
        let traj = &ds.trajectories[0];
        let labels = traj.true_labels.as_ref().unwrap();
        for (t, pair) in traj.states.windows(2).enumerate() {
            let delta = pair[1][0] - pair[0][0];
            let nearest = [-0.3, 0.0, 0.3]
                .iter()
                .map(|v| (delta - v).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest <= 4.0 * spec.noise_std, "step {t}: delta {delta}");
            assert!((delta - PRIMITIVE_VELOCITIES[labels[t]]).abs() <= 4.0 * spec.noise_std);
        }
        for (_, len) in label_runs(labels) {
            assert!((20..=40).contains(&len));
        }
    }

    #[test]
    fn generation_is_deterministic_and_validates_count() {
        let spec = EnvSpec::waypoint2d(3, 7).unwrap();
        assert_eq!(
            generate_dataset(&spec, 3, 11).unwrap(),
            generate_dataset(&spec, 3, 11).unwrap()
        );
        assert!(generate_dataset(&spec, 0, 0).is_err());
        assert!(matches!("maze".parse::<EnvKind>(), Err(PodnetError::UnknownEnv(_))));
        assert_eq!("primitive1d".parse::<EnvKind>().unwrap(), EnvKind::Primitive1d);
    }

    #[test]
    fn waypoints_are_separated() {
        for seed in 0..5 {
            let spec = EnvSpec::waypoint2d(3, seed).unwrap();
            for i in 0..3 {
                for j in i + 1..3 {
                    assert!(chebyshev(&spec.waypoints[i], &spec.waypoints[j]) >= 5.0);
                }
            }
        }
    }
}
