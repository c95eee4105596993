//! The three PODNet networks and the composite training objective.
//!
//! * inference: an LSTM over `concat(s_t, c_{t-1})` followed by a linear head
//!   producing option logits,
//! * policy: an MLP over `concat(s_t, c_t)` producing the action,
//! * dynamics: an MLP over `concat(s_t, c_t)` producing the next
//!   (downsampled, normalized) state.
//!
//! All functions here work in normalized units.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{NormStats, Trajectory};
use crate::error::{PodnetError, Result};
use crate::latent::{gumbel_noise, CategoricalPosterior, OptionLabel};
use crate::nn::tape::{argmax, one_hot};
use crate::nn::{init_lstm, init_mlp, Lstm, Mlp, ParamStore, Tape, Var};
use crate::rng::{seeded, substream, tags};

pub const INFERENCE_LSTM: &str = "inference.lstm";
pub const INFERENCE_HEAD: &str = "inference.head";
pub const POLICY: &str = "policy";
pub const DYNAMICS: &str = "dynamics";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub state_dim: usize,
    pub action_dim: usize,
    pub num_options: usize,
    pub lstm_hidden: usize,
    pub mlp_hidden: Vec<usize>,
}

/// How option labels are produced from the inference network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Gumbel-Softmax sample (training).
    Sampled,
    /// Argmax of the posterior (evaluation).
    Greedy,
}

/// What sampled labels look like to downstream networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relaxation {
    /// Hard one-hot forward, soft gradient.
    #[default]
    StraightThrough,
    /// Soft sample in both passes. Makes the loss smooth in every parameter,
    /// which is what finite differences can verify.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// Mean over steps of `KL(posterior_t || uniform)`.
    #[default]
    PerStep,
    /// `KL(mean posterior || uniform)` over the whole batch.
    Marginal,
}

/// Hyperparameters of one loss evaluation. `beta` is signed: the KL term
/// enters the total as `beta * kl`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossHyper {
    pub beta: f64,
    pub tau: f64,
    pub horizon: usize,
    pub mode: InferenceMode,
    pub relaxation: Relaxation,
    pub kl_mode: KlMode,
}

impl Default for LossHyper {
    fn default() -> Self {
        Self {
            beta: 0.1,
            tau: 1.0,
            horizon: 3,
            mode: InferenceMode::Sampled,
            relaxation: Relaxation::StraightThrough,
            kl_mode: KlMode::PerStep,
        }
    }
}

/// Per-step means of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub odc: f64,
    pub bc: f64,
    pub kl: f64,
}

/// Inferred labels for every transition of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionAssignment {
    pub labels: Vec<OptionLabel>,
    pub posteriors: Vec<CategoricalPosterior>,
}

impl OptionAssignment {
    pub fn indices(&self) -> Vec<usize> {
        self.labels.iter().map(OptionLabel::index).collect()
    }
}

/// Loss nodes of one batch on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossGraph {
    pub total: Var,
    pub odc: Var,
    pub bc: Var,
    pub kl: Var,
}

impl LossGraph {
    pub fn breakdown(&self, tape: &Tape<'_>) -> LossBreakdown {
        LossBreakdown {
            total: tape.scalar(self.total),
            odc: tape.scalar(self.odc),
            bc: tape.scalar(self.bc),
            kl: tape.scalar(self.kl),
        }
    }
}

struct StepNodes {
    probs: Vec<Var>,
    labels: Vec<Var>,
}

/// Network handles plus the parameters they index into.
#[derive(Debug, Clone)]
pub struct PodnetModel {
    pub params: ParamStore,
    pub norm: NormStats,
    dims: ModelDims,
    lstm: Lstm,
    head: Mlp,
    policy: Mlp,
    dynamics: Mlp,
}

impl PodnetModel {
    /// Fresh parameters: uniform `±1/sqrt(fan_in)` weights, zero biases and
    /// forget-gate bias 1.
    pub fn init(dims: ModelDims, norm: NormStats, seed: u64) -> Result<Self> {
        if dims.num_options < 1 || dims.state_dim == 0 || dims.action_dim == 0 || dims.lstm_hidden == 0 {
            return Err(PodnetError::invalid(format!("invalid model dimensions {dims:?}")));
        }
        let mut rng = substream(seed, tags::INIT, 0);
        let (d, k) = (dims.state_dim, dims.num_options);
        let mut params = ParamStore::new();
        init_lstm(&mut params, INFERENCE_LSTM, d + k, dims.lstm_hidden, &mut rng)?;
        init_mlp(&mut params, INFERENCE_HEAD, &[dims.lstm_hidden, k], &mut rng)?;
        let chain = |out: usize| {
            let mut sizes = vec![d + k];
            sizes.extend(&dims.mlp_hidden);
            sizes.push(out);
            sizes
        };
        init_mlp(&mut params, POLICY, &chain(dims.action_dim), &mut rng)?;
        init_mlp(&mut params, DYNAMICS, &chain(d), &mut rng)?;
        Self::from_params(params, norm)
    }

    /// Rebuild a model around existing parameters, validating every shape.
    pub fn from_params(params: ParamStore, norm: NormStats) -> Result<Self> {
        let lstm = Lstm::from_store(&params, INFERENCE_LSTM)?;
        let head = Mlp::from_store(&params, INFERENCE_HEAD)?;
        let policy = Mlp::from_store(&params, POLICY)?;
        let dynamics = Mlp::from_store(&params, DYNAMICS)?;
        let d = norm.dim();
        let k = head.output_dim();
        if head.input_dim() != lstm.hidden_size() {
            return Err(PodnetError::shape("inference head input", lstm.hidden_size(), head.input_dim()));
        }
        if lstm.input_dim() != d + k {
            return Err(PodnetError::shape("inference input", d + k, lstm.input_dim()));
        }
        if policy.input_dim() != d + k {
            return Err(PodnetError::shape("policy input", d + k, policy.input_dim()));
        }
        if dynamics.input_dim() != d + k || dynamics.output_dim() != d {
            return Err(PodnetError::shape("dynamics output", d, dynamics.output_dim()));
        }
        let mlp_hidden = (0..)
            .map_while(|i| params.get(&format!("{POLICY}.l{i}.w")))
            .map(|t| t.matrix_dims().0)
            .collect::<Vec<_>>();
        let dims = ModelDims {
            state_dim: d,
            action_dim: policy.output_dim(),
            num_options: k,
            lstm_hidden: lstm.hidden_size(),
            mlp_hidden: mlp_hidden[..mlp_hidden.len() - 1].to_vec(),
        };
        Ok(Self {
            params,
            norm,
            dims,
            lstm,
            head,
            policy,
            dynamics,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn num_options(&self) -> usize {
        self.dims.num_options
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.dims.state_dim {
            return Err(PodnetError::shape("state", self.dims.state_dim, state.len()));
        }
        Ok(())
    }

    fn check_option(&self, option: &[f64]) -> Result<()> {
        if option.len() != self.dims.num_options {
            return Err(PodnetError::shape("option label", self.dims.num_options, option.len()));
        }
        Ok(())
    }

    fn check_trajectory(&self, traj: &Trajectory) -> Result<()> {
        traj.validate()?;
        if traj.state_dim() != self.dims.state_dim {
            return Err(PodnetError::shape(format!("trajectory {} states", traj.id), self.dims.state_dim, traj.state_dim()));
        }
        if !traj.actions.is_empty() && traj.action_dim() != self.dims.action_dim {
            return Err(PodnetError::shape(format!("trajectory {} actions", traj.id), self.dims.action_dim, traj.action_dim()));
        }
        Ok(())
    }

    /// Run the inference network over `states[..T]`, recording posteriors and
    /// the labels handed to the policy and dynamics networks.
    fn infer_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        states: &[Vec<f64>],
        hyper: &LossHyper,
        rng: &mut R,
    ) -> Result<StepNodes> {
        let k = self.dims.num_options;
        let h = self.dims.lstm_hidden;
        let steps = states.len().saturating_sub(1);
        let mut hidden = tape.constant(vec![0.0; h]);
        let mut cell = tape.constant(vec![0.0; h]);
        let mut previous = tape.constant(vec![0.0; k]);
        let mut probs = Vec::with_capacity(steps);
        let mut labels = Vec::with_capacity(steps);
        for state in &states[..steps] {
            let s = tape.constant(state.clone());
            let input = tape.concat(&[s, previous]);
            (hidden, cell) = self.lstm.step(tape, input, hidden, cell)?;
            let logits = self.head.forward(tape, hidden)?;
            probs.push(tape.softmax(logits));
            let label = if k == 1 {
                tape.constant(vec![1.0])
            } else {
                match hyper.mode {
                    InferenceMode::Greedy => {
                        let idx = argmax(tape.value(logits));
                        tape.constant(one_hot(k, idx))
                    }
                    InferenceMode::Sampled => {
                        let noise = gumbel_noise(k, rng);
                        let perturbed = tape.offset(logits, &noise)?;
                        let scaled = tape.scale(perturbed, 1.0 / hyper.tau);
                        let soft = tape.softmax(scaled);
                        match hyper.relaxation {
                            Relaxation::StraightThrough => tape.straight_through(soft),
                            Relaxation::Soft => soft,
                        }
                    }
                }
            };
            labels.push(label);
            previous = label;
        }
        Ok(StepNodes { probs, labels })
    }

    fn policy_on_tape(&self, tape: &mut Tape<'_>, state: Var, label: Var) -> Result<Var> {
        let x = tape.concat(&[state, label]);
        self.policy.forward(tape, x)
    }

    fn dynamics_on_tape(&self, tape: &mut Tape<'_>, state: Var, label: Var) -> Result<Var> {
        let x = tape.concat(&[state, label]);
        self.dynamics.forward(tape, x)
    }

    /// Build the batch objective on `tape`. The tape may read from any store
    /// with this model's layout (for example a perturbed copy).
    pub fn build_loss(
        &self,
        tape: &mut Tape<'_>,
        batch: &[Trajectory],
        hyper: &LossHyper,
        noise_seed: u64,
    ) -> Result<LossGraph> {
        if batch.is_empty() {
            return Err(PodnetError::invalid("empty batch"));
        }
        if hyper.horizon < 1 {
            return Err(PodnetError::invalid("prediction horizon must be >= 1"));
        }
        if hyper.mode == InferenceMode::Sampled && self.dims.num_options > 1 && !(hyper.tau > 0.0) {
            return Err(PodnetError::invalid("temperature must be positive"));
        }
        let horizon = hyper.horizon;
        let mut n_steps = 0usize;
        let mut n_odc = 0usize;
        for traj in batch {
            self.check_trajectory(traj)?;
            if traj.len() < horizon {
                return Err(PodnetError::InvalidTrajectory {
                    id: traj.id.clone(),
                    reason: format!("{} transitions, need at least horizon {horizon}", traj.len()),
                });
            }
            n_steps += traj.len();
            n_odc += (0..traj.len()).map(|t| horizon.min(traj.len() - t)).sum::<usize>();
        }

        let mut bc_terms = Vec::with_capacity(n_steps);
        let mut odc_terms = Vec::with_capacity(n_odc);
        let mut all_probs = Vec::with_capacity(n_steps);
        for (index, traj) in batch.iter().enumerate() {
            let mut rng = substream(noise_seed, tags::GUMBEL, index as u64);
            let steps = self.infer_on_tape(tape, &traj.states, hyper, &mut rng)?;
            let states: Vec<Var> = traj.states.iter().map(|s| tape.constant(s.clone())).collect();
            for t in 0..traj.len() {
                let predicted = self.policy_on_tape(tape, states[t], steps.labels[t])?;
                let target = tape.constant(traj.actions[t].clone());
                let err = tape.sub(target, predicted)?;
                bc_terms.push(tape.sum_squares(err));

                let mut rolled = states[t];
                for j in 1..=horizon.min(traj.len() - t) {
                    rolled = self.dynamics_on_tape(tape, rolled, steps.labels[t + j - 1])?;
                    let err = tape.sub(states[t + j], rolled)?;
                    odc_terms.push(tape.sum_squares(err));
                }
            }
            all_probs.extend(steps.probs);
        }

        let bc_sum = tape.add_many(&bc_terms)?;
        let bc = tape.scale(bc_sum, 1.0 / n_steps as f64);
        let odc_sum = tape.add_many(&odc_terms)?;
        let odc = tape.scale(odc_sum, 1.0 / n_odc as f64);
        let kl = match hyper.kl_mode {
            KlMode::PerStep => {
                let kls: Vec<Var> = all_probs.iter().map(|&p| tape.kl_uniform(p)).collect();
                let kl_sum = tape.add_many(&kls)?;
                tape.scale(kl_sum, 1.0 / n_steps as f64)
            }
            KlMode::Marginal => {
                let p_sum = tape.add_many(&all_probs)?;
                let p_mean = tape.scale(p_sum, 1.0 / n_steps as f64);
                tape.kl_uniform(p_mean)
            }
        };
        let weighted_kl = tape.scale(kl, hyper.beta);
        let total = tape.add_many(&[odc, bc, weighted_kl])?;
        Ok(LossGraph { total, odc, bc, kl })
    }

    /// Loss terms for a batch of downsampled, normalized trajectories.
    pub fn compute_loss<R: Rng + ?Sized>(
        &self,
        batch: &[Trajectory],
        hyper: &LossHyper,
        rng: &mut R,
    ) -> Result<LossBreakdown> {
        let noise_seed = rng.gen();
        let mut tape = Tape::new(&self.params);
        let graph = self.build_loss(&mut tape, batch, hyper, noise_seed)?;
        let out = graph.breakdown(&tape);
        if !out.total.is_finite() {
            return Err(PodnetError::NonFiniteLoss(out.total));
        }
        Ok(out)
    }

    /// Loss terms and gradients of the total with respect to every parameter.
    pub fn loss_and_gradients(
        &self,
        batch: &[Trajectory],
        hyper: &LossHyper,
        noise_seed: u64,
    ) -> Result<(LossBreakdown, ParamStore)> {
        let mut tape = Tape::new(&self.params);
        let graph = self.build_loss(&mut tape, batch, hyper, noise_seed)?;
        let out = graph.breakdown(&tape);
        if !out.total.is_finite() {
            return Err(PodnetError::NonFiniteLoss(out.total));
        }
        Ok((out, tape.backward(graph.total)?))
    }

    /// Option labels for each of the `T` transitions of `states` (length `T + 1`).
    pub fn infer_options<R: Rng + ?Sized>(
        &self,
        states: &[Vec<f64>],
        tau: f64,
        rng: &mut R,
        mode: InferenceMode,
    ) -> Result<OptionAssignment> {
        if states.len() < 2 {
            return Err(PodnetError::invalid("need at least one transition to infer options"));
        }
        for s in states {
            self.check_state(s)?;
        }
        if mode == InferenceMode::Sampled && self.dims.num_options > 1 && !(tau > 0.0) {
            return Err(PodnetError::invalid("temperature must be positive"));
        }
        let hyper = LossHyper {
            tau,
            mode,
            ..LossHyper::default()
        };
        let mut tape = Tape::new(&self.params);
        let steps = self.infer_on_tape(&mut tape, states, &hyper, rng)?;
        let labels = steps
            .labels
            .iter()
            .map(|&l| {
                let v = tape.value(l).to_vec();
                let hard = one_hot(v.len(), argmax(&v));
                OptionLabel { soft: v, hard }
            })
            .collect::<Vec<_>>();
        let posteriors = steps
            .probs
            .iter()
            .map(|&p| {
                let probs = tape.value(p).to_vec();
                let logits = probs.iter().map(|q| q.max(1e-300).ln()).collect();
                CategoricalPosterior { logits, probs }
            })
            .collect();
        // In sampled mode the soft part is the relaxed sample rather than the
        // fed-back hard value.
        let labels = if mode == InferenceMode::Sampled {
            labels
        } else {
            labels
                .into_iter()
                .zip(&steps.probs)
                .map(|(l, &p)| OptionLabel {
                    soft: tape.value(p).to_vec(),
                    hard: l.hard,
                })
                .collect()
        };
        Ok(OptionAssignment { labels, posteriors })
    }

    /// Greedy option indices; convenience for evaluation.
    pub fn greedy_options(&self, states: &[Vec<f64>]) -> Result<Vec<usize>> {
        Ok(self
            .infer_options(states, 1.0, &mut seeded(0), InferenceMode::Greedy)?
            .indices())
    }

    fn run_head(&self, mlp: &Mlp, state: &[f64], option: &[f64]) -> Result<Vec<f64>> {
        self.check_state(state)?;
        self.check_option(option)?;
        let mut tape = Tape::new(&self.params);
        let s = tape.constant(state.to_vec());
        let c = tape.constant(option.to_vec());
        let x = tape.concat(&[s, c]);
        let y = mlp.forward(&mut tape, x)?;
        Ok(tape.value(y).to_vec())
    }

    /// Policy action (normalized units) for the option's hard label.
    pub fn policy_action(&self, state: &[f64], option: &OptionLabel) -> Result<Vec<f64>> {
        self.run_head(&self.policy, state, &option.hard)
    }

    /// Predicted next downsampled state (normalized units).
    pub fn dynamics_predict(&self, state: &[f64], option: &OptionLabel) -> Result<Vec<f64>> {
        self.run_head(&self.dynamics, state, &option.hard)
    }

    /// `horizon + 1` states: the start followed by iterated predictions.
    pub fn rollout_dynamics(&self, state: &[f64], options: &[OptionLabel], horizon: usize) -> Result<Vec<Vec<f64>>> {
        if horizon > options.len() {
            return Err(PodnetError::invalid(format!(
                "rollout horizon {horizon} exceeds {} options",
                options.len()
            )));
        }
        self.check_state(state)?;
        let mut out = Vec::with_capacity(horizon + 1);
        out.push(state.to_vec());
        for option in &options[..horizon] {
            let next = self.dynamics_predict(out.last().expect("non-empty"), option)?;
            out.push(next);
        }
        Ok(out)
    }

    /// Posterior probabilities at every step under greedy inference.
    pub fn posterior_probs(&self, states: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .infer_options(states, 1.0, &mut seeded(0), InferenceMode::Greedy)?
            .posteriors
            .into_iter()
            .map(|p| p.probs)
            .collect())
    }
}
