//! Beam search over option sequences through the option dynamics model, and
//! closed-loop execution of the resulting plan with the option policy.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::EnvSpec;
use crate::error::{PodnetError, Result};
use crate::latent::OptionLabel;
use crate::model::PodnetModel;
use crate::training::Checkpoint;

/// Deterministic state transition under a discrete option, in normalized units.
pub trait OptionDynamics {
    fn num_options(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn predict(&self, state: &[f64], option: usize) -> Result<Vec<f64>>;
}

impl OptionDynamics for PodnetModel {
    fn num_options(&self) -> usize {
        PodnetModel::num_options(self)
    }

    fn state_dim(&self) -> usize {
        self.dims().state_dim
    }

    fn predict(&self, state: &[f64], option: usize) -> Result<Vec<f64>> {
        self.dynamics_predict(state, &OptionLabel::one_hot(PodnetModel::num_options(self), option))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub beam_width: usize,
    pub max_depth: usize,
    /// Downsampled steps each planned option is held for.
    pub option_duration: usize,
    /// Goal tolerance as a distance in normalized state space.
    pub goal_eps: f64,
    /// Hard cap on raw environment steps during execution.
    pub max_exec_steps: usize,
    pub max_replans: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            beam_width: 8,
            max_depth: 12,
            option_duration: 5,
            goal_eps: 0.2,
            max_exec_steps: 2000,
            max_replans: 3,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width < 1 || self.max_depth < 1 || self.option_duration < 1 {
            return Err(PodnetError::invalid(
                "beam_width, max_depth and option_duration must be >= 1",
            ));
        }
        if !(self.goal_eps > 0.0 && self.goal_eps.is_finite()) {
            return Err(PodnetError::invalid("goal_eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub options: Vec<usize>,
    /// Start state followed by `option_duration` predictions per option.
    pub predicted_states: Vec<Vec<f64>>,
    pub feasible: bool,
    pub terminal_distance: f64,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone)]
struct Node {
    options: Vec<usize>,
    states: Vec<Vec<f64>>,
    distance: f64,
}

fn node_order(a: &Node, b: &Node) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then_with(|| a.options.cmp(&b.options))
}

impl Node {
    fn into_plan(self, goal_eps: f64) -> Plan {
        Plan {
            feasible: self.distance <= goal_eps,
            terminal_distance: self.distance,
            options: self.options,
            predicted_states: self.states,
        }
    }
}

/// Beam search from `start` toward `goal` (both normalized). Stops at the
/// first depth whose best node is within `goal_eps`; otherwise returns the
/// best node seen at any depth, the empty sequence included. Ties go to the
/// lexicographically smaller option sequence, then the shorter one.
pub fn plan_with<D: OptionDynamics + ?Sized>(
    dynamics: &D,
    start: &[f64],
    goal: &[f64],
    cfg: &PlannerConfig,
) -> Result<Plan> {
    cfg.validate()?;
    let d = dynamics.state_dim();
    if start.len() != d || goal.len() != d {
        return Err(PodnetError::ShapeMismatch {
            context: "planner start/goal".into(),
            expected: d,
            actual: if start.len() != d { start.len() } else { goal.len() },
        });
    }
    let root = Node {
        options: Vec::new(),
        states: vec![start.to_vec()],
        distance: euclidean(start, goal),
    };
    if root.distance <= cfg.goal_eps {
        return Ok(root.into_plan(cfg.goal_eps));
    }
    let mut best = root.clone();
    let mut beam = vec![root];
    for _ in 0..cfg.max_depth {
        let mut children = Vec::with_capacity(beam.len() * dynamics.num_options());
        for node in &beam {
            for option in 0..dynamics.num_options() {
                let mut states = node.states.clone();
                for _ in 0..cfg.option_duration {
                    let next = dynamics.predict(states.last().expect("non-empty"), option)?;
                    states.push(next);
                }
                let mut options = node.options.clone();
                options.push(option);
                let distance = euclidean(states.last().expect("non-empty"), goal);
                children.push(Node {
                    options,
                    states,
                    distance,
                });
            }
        }
        children.sort_by(node_order);
        children.truncate(cfg.beam_width);
        let top = &children[0];
        if top.distance <= cfg.goal_eps {
            return Ok(top.clone().into_plan(cfg.goal_eps));
        }
        if node_order(top, &best) == Ordering::Less {
            best = top.clone();
        }
        beam = children;
    }
    Ok(best.into_plan(cfg.goal_eps))
}

/// Plan between raw-unit states with a checkpoint's model.
pub fn plan(checkpoint: &Checkpoint, start: &[f64], goal: &[f64], cfg: &PlannerConfig) -> Result<Plan> {
    let norm = &checkpoint.model.norm;
    plan_with(
        &checkpoint.model,
        &norm.normalize_state(start)?,
        &norm.normalize_state(goal)?,
        cfg,
    )
}

/// States and actions are in environment units; `options[i]` was active for
/// `actions[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub options: Vec<usize>,
    pub reached: bool,
    pub plans: Vec<Plan>,
}

impl ExecutionTrace {
    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        let d = self.states.first().map_or(0, Vec::len);
        let m = self.actions.first().map_or(0, Vec::len);
        let mut header = vec!["step".to_string()];
        header.extend((0..d).map(|i| format!("s{i}")));
        header.extend((0..m).map(|i| format!("a{i}")));
        header.push("option".into());
        writeln!(writer, "{}", header.join(","))?;
        for (t, state) in self.states.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(state.iter().map(f64::to_string));
            match (self.actions.get(t), self.options.get(t)) {
                (Some(a), Some(o)) => {
                    row.extend(a.iter().map(f64::to_string));
                    row.push(o.to_string());
                }
                _ => row.extend(std::iter::repeat(String::new()).take(m + 1)),
            }
            writeln!(writer, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Closed-loop execution: plan, hold each option for
/// `option_duration * stride` raw steps while applying the policy, and
/// replan from the current state when a plan runs out.
pub fn execute(
    checkpoint: &Checkpoint,
    spec: &EnvSpec,
    start: &[f64],
    goal: &[f64],
    cfg: &PlannerConfig,
) -> Result<ExecutionTrace> {
    cfg.validate()?;
    let model = &checkpoint.model;
    let norm = &model.norm;
    if spec.state_dim() != model.dims().state_dim || spec.action_dim() != model.dims().action_dim {
        return Err(PodnetError::invalid(format!(
            "environment `{}` does not match the checkpoint's dimensions",
            spec.name
        )));
    }
    let goal_n = norm.normalize_state(goal)?;
    let at_goal = |s: &[f64]| -> Result<bool> { Ok(euclidean(&norm.normalize_state(s)?, &goal_n) <= cfg.goal_eps) };

    let mut trace = ExecutionTrace {
        states: vec![start.to_vec()],
        actions: Vec::new(),
        options: Vec::new(),
        reached: at_goal(start)?,
        plans: Vec::new(),
    };
    let hold = cfg.option_duration * checkpoint.config.stride;
    let k = model.num_options();
    'outer: for _ in 0..=cfg.max_replans {
        if trace.reached {
            break;
        }
        let current = trace.states.last().expect("non-empty").clone();
        let p = plan_with(model, &norm.normalize_state(&current)?, &goal_n, cfg)?;
        let options = p.options.clone();
        trace.plans.push(p);
        if options.is_empty() {
            break;
        }
        for option in options {
            let label = OptionLabel::one_hot(k, option);
            for _ in 0..hold {
                if trace.actions.len() >= cfg.max_exec_steps {
                    break 'outer;
                }
                let s = trace.states.last().expect("non-empty");
                let action = norm.denormalize_action(&model.policy_action(&norm.normalize_state(s)?, &label)?);
                let next = spec.step(s, &action)?;
                trace.reached = at_goal(&next)?;
                trace.states.push(next);
                trace.actions.push(action);
                trace.options.push(option);
                if trace.reached {
                    break 'outer;
                }
            }
        }
    }
    Ok(trace)
}
