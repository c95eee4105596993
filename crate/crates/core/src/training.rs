//! Offline training, held-out behavior-cloning evaluation, option-count
//! discovery and checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{downsample, normalize, split, Dataset, NormStats, Trajectory};
use crate::error::{PodnetError, Result};
use crate::latent::TemperatureSchedule;
use crate::model::{InferenceMode, KlMode, LossBreakdown, LossHyper, ModelDims, PodnetModel, Relaxation};
use crate::nn::{Adam, ParamStore, Tensor};
use crate::rng::{seeded, substream, tags};

pub const CHECKPOINT_VERSION: u64 = 1;

/// Relative improvement the option-count search needs to keep moving.
pub const DISCOVERY_REL_TOL: f64 = 0.01;

/// Trajectories per chunk when evaluating without gradients.
const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of options `K`.
    pub num_options: usize,
    pub beta: f64,
    /// `+1` adds `beta * KL` to the minimized loss, `-1` subtracts it.
    pub kl_sign: i8,
    pub kl_mode: KlMode,
    pub lr: f64,
    pub epochs: usize,
    /// Trajectories per optimizer step.
    pub batch_size: usize,
    pub stride: usize,
    pub horizon: usize,
    pub tau0: f64,
    pub tau_min: f64,
    /// Fraction of all optimizer steps over which the temperature decays.
    pub tau_decay_fraction: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
    pub lstm_hidden: usize,
    pub mlp_hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_options: 3,
            beta: 0.03,
            kl_sign: 1,
            kl_mode: KlMode::PerStep,
            lr: 1e-3,
            epochs: 60,
            batch_size: 4,
            stride: 5,
            horizon: 3,
            tau0: 1.0,
            tau_min: 0.5,
            tau_decay_fraction: 0.8,
            holdout_fraction: 0.2,
            seed: 0,
            lstm_hidden: 32,
            mlp_hidden: vec![32, 32],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(PodnetError::invalid(msg.to_string()));
        if self.num_options < 1 {
            return fail("num_options must be >= 1");
        }
        if self.kl_sign != 1 && self.kl_sign != -1 {
            return fail("kl_sign must be +1 or -1");
        }
        if !(self.lr > 0.0) || !self.beta.is_finite() {
            return fail("lr must be positive and beta finite");
        }
        if self.epochs < 1 || self.batch_size < 1 || self.stride < 1 || self.horizon < 1 {
            return fail("epochs, batch_size, stride and horizon must be >= 1");
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return fail("holdout_fraction must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.tau_decay_fraction) {
            return fail("tau_decay_fraction must lie in [0, 1]");
        }
        if self.lstm_hidden < 1 || self.mlp_hidden.iter().any(|&h| h < 1) {
            return fail("hidden sizes must be >= 1");
        }
        self.schedule(1).validate()
    }

    pub fn signed_beta(&self) -> f64 {
        self.beta * f64::from(self.kl_sign)
    }

    pub fn schedule(&self, total_steps: u64) -> TemperatureSchedule {
        TemperatureSchedule {
            tau0: self.tau0,
            tau_min: self.tau_min,
            decay_steps: (self.tau_decay_fraction * total_steps as f64).round() as u64,
        }
    }

    fn hyper(&self, tau: f64) -> LossHyper {
        LossHyper {
            beta: self.signed_beta(),
            tau,
            horizon: self.horizon,
            mode: InferenceMode::Sampled,
            relaxation: Relaxation::StraightThrough,
            kl_mode: self.kl_mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub odc: f64,
    pub bc: f64,
    pub kl: f64,
    pub heldout_bc: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,total,odc,bc,kl,heldout_bc,tau";

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch, r.total, r.odc, r.bc, r.kl, r.heldout_bc, r.tau
            );
        }
        out
    }
}

/// A trained model with everything needed to reproduce its preprocessing.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: PodnetModel,
    /// Final epoch of the training run, when known.
    pub summary: Option<EpochRecord>,
}

impl Checkpoint {
    pub fn norm(&self) -> &NormStats {
        &self.model.norm
    }

    /// Downsample with the checkpoint's stride and normalize with its stats.
    pub fn prepare(&self, dataset: &Dataset) -> Result<Dataset> {
        if dataset.state_dim != self.model.dims().state_dim || dataset.action_dim != self.model.dims().action_dim {
            return Err(PodnetError::invalid(format!(
                "dataset dimensions (d={}, m={}) do not match checkpoint (d={}, m={})",
                dataset.state_dim,
                dataset.action_dim,
                self.model.dims().state_dim,
                self.model.dims().action_dim
            )));
        }
        self.model.norm.apply(&downsample_dataset(dataset, self.config.stride)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            norm: self.model.norm.clone(),
            params: self
                .model
                .params
                .iter()
                .map(|(name, t)| (name.to_string(), t.clone()))
                .collect(),
            history: self.summary,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| PodnetError::Checkpoint("missing integer `version`".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(PodnetError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let file: CheckpointFile = serde_json::from_value(value)?;
        file.config.validate()?;
        for (name, t) in &file.params {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(PodnetError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?} but {} values",
                    t.shape,
                    t.data.len()
                )));
            }
        }
        let action_dim = (0..)
            .map_while(|i| file.params.get(&format!("policy.l{i}.w")))
            .last()
            .map(|t| t.matrix_dims().0)
            .ok_or_else(|| PodnetError::Checkpoint("missing tensor `policy.l0.w`".into()))?;
        let dims = model_dims(&file.config, file.norm.dim(), action_dim);
        let template = PodnetModel::init(dims, file.norm.clone(), 0)?;
        let mut params = template.params.clone();
        for (name, t) in template.params.iter() {
            let stored = file
                .params
                .get(name)
                .ok_or_else(|| PodnetError::Checkpoint(format!("missing tensor `{name}`")))?;
            if stored.shape != t.shape {
                return Err(PodnetError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    stored.shape, t.shape
                )));
            }
            params.set_data(name, stored.data.clone())?;
        }
        if let Some(extra) = file.params.keys().find(|k| params.id(k).is_none()) {
            return Err(PodnetError::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self {
            config: file.config,
            model: PodnetModel::from_params(params, file.norm)?,
            summary: file.history,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u64,
    config: TrainConfig,
    norm: NormStats,
    params: BTreeMap<String, Tensor>,
    #[serde(default)]
    history: Option<EpochRecord>,
}

fn model_dims(config: &TrainConfig, state_dim: usize, action_dim: usize) -> ModelDims {
    ModelDims {
        state_dim,
        action_dim,
        num_options: config.num_options,
        lstm_hidden: config.lstm_hidden,
        mlp_hidden: config.mlp_hidden.clone(),
    }
}

pub fn downsample_dataset(dataset: &Dataset, stride: usize) -> Result<Dataset> {
    Dataset::new(
        dataset
            .trajectories
            .iter()
            .map(|t| downsample(t, stride))
            .collect::<Result<Vec<_>>>()?,
    )
}

fn require_horizon(dataset: &Dataset, horizon: usize) -> Result<()> {
    match dataset.trajectories.iter().find(|t| t.len() < horizon) {
        Some(t) => Err(PodnetError::InvalidTrajectory {
            id: t.id.clone(),
            reason: format!(
                "{} transitions after downsampling, prediction horizon is {horizon}",
                t.len()
            ),
        }),
        None => Ok(()),
    }
}

/// Mean squared action error per step under greedy labels, over prepared
/// (downsampled, normalized) trajectories.
pub fn bc_loss_prepared(model: &PodnetModel, trajectories: &[Trajectory]) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(PodnetError::invalid("empty holdout"));
    }
    let hyper = LossHyper {
        beta: 0.0,
        tau: 1.0,
        horizon: 1,
        mode: InferenceMode::Greedy,
        relaxation: Relaxation::StraightThrough,
        kl_mode: KlMode::PerStep,
    };
    let mut weighted = 0.0;
    let mut steps = 0usize;
    for chunk in trajectories.chunks(EVAL_CHUNK) {
        let n: usize = chunk.iter().map(Trajectory::len).sum();
        let out = model.compute_loss(chunk, &hyper, &mut seeded(0))?;
        weighted += out.bc * n as f64;
        steps += n;
    }
    Ok(weighted / steps as f64)
}

/// Held-out behavior-cloning loss of a checkpoint on raw demonstrations.
pub fn evaluate_bc_loss(checkpoint: &Checkpoint, heldout: &Dataset) -> Result<f64> {
    if heldout.is_empty() {
        return Err(PodnetError::invalid("empty holdout"));
    }
    let prepared = checkpoint.prepare(heldout)?;
    bc_loss_prepared(&checkpoint.model, &prepared.trajectories)
}

/// Train on raw demonstrations: downsample, normalize, split off a holdout,
/// then run Adam over shuffled trajectory batches. Fully determined by the
/// dataset and `config.seed`; never touches an environment.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(Checkpoint, TrainHistory)> {
    train_with_progress(dataset, config, |_| {})
}

pub fn train_with_progress(
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainHistory)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(PodnetError::invalid("empty dataset"));
    }
    let downsampled = downsample_dataset(dataset, config.stride)?;
    require_horizon(&downsampled, config.horizon)?;
    let (normalized, norm) = normalize(&downsampled)?;
    let (train_set, holdout) = split(&normalized, config.holdout_fraction, config.seed)?;

    let dims = model_dims(config, dataset.state_dim, dataset.action_dim);
    let mut model = PodnetModel::init(dims, norm, config.seed)?;
    let mut adam = Adam::new(&model.params);

    let n_train = train_set.len();
    let batch_size = config.batch_size.min(n_train);
    let steps_per_epoch = n_train.div_ceil(batch_size);
    let schedule = config.schedule((config.epochs * steps_per_epoch) as u64);
    let mut shuffle_rng = substream(config.seed, tags::SHUFFLE, 0);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut history = TrainHistory::default();
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossBreakdown::default();
        let mut tau = schedule.temperature(step)?;
        for chunk in order.chunks(batch_size) {
            tau = schedule.temperature(step)?;
            let batch: Vec<Trajectory> = chunk.iter().map(|&i| train_set.trajectories[i].clone()).collect();
            let noise_seed = substream(config.seed, tags::GUMBEL, step).gen();
            let (out, grads) = model.loss_and_gradients(&batch, &config.hyper(tau), noise_seed)?;
            adam.step(&mut model.params, &grads, config.lr)?;
            sums.total += out.total;
            sums.odc += out.odc;
            sums.bc += out.bc;
            sums.kl += out.kl;
            step += 1;
        }
        let n = steps_per_epoch as f64;
        let record = EpochRecord {
            epoch,
            total: sums.total / n,
            odc: sums.odc / n,
            bc: sums.bc / n,
            kl: sums.kl / n,
            heldout_bc: bc_loss_prepared(&model, &holdout.trajectories)?,
            tau,
        };
        on_epoch(&record);
        history.records.push(record);
    }

    let checkpoint = Checkpoint {
        config: config.clone(),
        model,
        summary: history.last().copied(),
    };
    Ok((checkpoint, history))
}

/// Table row of the option-count search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptionCountScore {
    pub num_options: usize,
    pub heldout_bc: f64,
}

/// Hill-climb over the option count starting from `config.num_options`,
/// scoring each candidate by held-out behavior-cloning loss after training
/// from scratch with the same seed.
pub fn discover_num_options(
    dataset: &Dataset,
    config: &TrainConfig,
    k_min: usize,
    k_max: usize,
) -> Result<(usize, Vec<OptionCountScore>)> {
    discover_with(config.num_options, k_min, k_max, |k| {
        let candidate = TrainConfig {
            num_options: k,
            ..config.clone()
        };
        let (_, history) = train(dataset, &candidate)?;
        Ok(history.last().expect("epochs >= 1").heldout_bc)
    })
}

/// The search itself, over any scoring function.
///
/// Scores the start, then both neighbours; moves toward the better neighbour
/// while each step improves on the previous score by more than
/// [`DISCOVERY_REL_TOL`]. Returns the lowest-scoring count among everything
/// evaluated (ties to fewer options) and the table sorted by count.
pub fn discover_with(
    start: usize,
    k_min: usize,
    k_max: usize,
    mut score: impl FnMut(usize) -> Result<f64>,
) -> Result<(usize, Vec<OptionCountScore>)> {
    if !(2 <= k_min && k_min <= start && start <= k_max) {
        return Err(PodnetError::invalid(format!(
            "need 2 <= k_min ({k_min}) <= start ({start}) <= k_max ({k_max})"
        )));
    }
    let mut table: BTreeMap<usize, f64> = BTreeMap::new();
    let mut eval = |k: usize, table: &mut BTreeMap<usize, f64>| -> Result<f64> {
        if let Some(&s) = table.get(&k) {
            return Ok(s);
        }
        let s = score(k)?;
        table.insert(k, s);
        Ok(s)
    };
    let improves = |new: f64, old: f64| new < old * (1.0 - DISCOVERY_REL_TOL);

    let start_score = eval(start, &mut table)?;
    let down = if start > k_min { Some(eval(start - 1, &mut table)?) } else { None };
    let up = if start < k_max { Some(eval(start + 1, &mut table)?) } else { None };
    let direction: Option<isize> = match (down, up) {
        (Some(d), Some(u)) if improves(d.min(u), start_score) => Some(if d <= u { -1 } else { 1 }),
        (Some(d), None) if improves(d, start_score) => Some(-1),
        (None, Some(u)) if improves(u, start_score) => Some(1),
        _ => None,
    };
    if let Some(dir) = direction {
        let mut current = start.checked_add_signed(dir).expect("neighbour in range");
        let mut current_score = table[&current];
        loop {
            let Some(next) = current.checked_add_signed(dir).filter(|k| (k_min..=k_max).contains(k)) else {
                break;
            };
            let next_score = eval(next, &mut table)?;
            if !improves(next_score, current_score) {
                break;
            }
            current = next;
            current_score = next_score;
        }
    }

    let best = table
        .iter()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(b.0)))
        .map(|(&k, _)| k)
        .expect("at least one candidate");
    let rows = table
        .into_iter()
        .map(|(num_options, heldout_bc)| OptionCountScore {
            num_options,
            heldout_bc,
        })
        .collect();
    Ok((best, rows))
}

/// Mean per-step posterior entropy (nats) under greedy inference.
pub fn mean_posterior_entropy(model: &PodnetModel, trajectories: &[Trajectory]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for t in trajectories {
        for p in model.posterior_probs(&t.states)? {
            total += crate::latent::entropy(&p);
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

/// Parameters with the layout of a fresh model; used by tests and tools that
/// need a checkpoint without training.
pub fn untrained_checkpoint(config: &TrainConfig, norm: NormStats, action_dim: usize) -> Result<Checkpoint> {
    config.validate()?;
    let dims = model_dims(config, norm.dim(), action_dim);
    Ok(Checkpoint {
        config: config.clone(),
        model: PodnetModel::init(dims, norm, config.seed)?,
        summary: None,
    })
}

/// Replace a checkpoint's parameters (layout must match).
pub fn with_params(checkpoint: &Checkpoint, params: ParamStore) -> Result<Checkpoint> {
    if !params.same_layout(&checkpoint.model.params) {
        return Err(PodnetError::invalid("parameter layout differs from checkpoint"));
    }
    Ok(Checkpoint {
        model: PodnetModel::from_params(params, checkpoint.model.norm.clone())?,
        ..checkpoint.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, EnvSpec};

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            lstm_hidden: 8,
            mlp_hidden: vec![8],
            ..TrainConfig::default()
        }
    }

    fn small_data() -> Dataset {
        generate_dataset(&EnvSpec::waypoint2d(3, 0).unwrap(), 10, 0).unwrap()
    }

    #[test]
    fn training_is_deterministic() {
        let data = small_data();
        let (_, a) = train(&data, &small_config()).unwrap();
        let (_, b) = train(&data, &small_config()).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(a.to_csv().starts_with("epoch,total,odc,bc,kl,heldout_bc,tau\n"));
    }

    #[test]
    fn oversized_batch_is_clamped() {
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1000,
            ..small_config()
        };
        let (_, h) = train(&small_data(), &cfg).unwrap();
        assert_eq!(h.len(), 1);
    }

    #[test]
    fn too_short_after_downsampling_is_rejected() {
        let cfg = TrainConfig {
            stride: 400,
            ..small_config()
        };
        assert!(train(&small_data(), &cfg).is_err());
    }

    #[test]
    fn bc_evaluation_matches_greedy_loss_component() {
        let data = small_data();
        let (ckpt, _) = train(&data, &small_config()).unwrap();
        let prepared = ckpt.prepare(&data).unwrap();
        let direct = evaluate_bc_loss(&ckpt, &data).unwrap();
        let hyper = LossHyper {
            beta: 0.0,
            horizon: 1,
            mode: InferenceMode::Greedy,
            ..LossHyper::default()
        };
        let whole = ckpt
            .model
            .compute_loss(&prepared.trajectories, &hyper, &mut seeded(0))
            .unwrap();
        assert!((direct - whole.bc).abs() < 1e-12);
        assert_eq!(direct, evaluate_bc_loss(&ckpt, &data).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_and_guards() {
        let data = small_data();
        let (ckpt, _) = train(&data, &small_config()).unwrap();
        let json = ckpt.to_json().unwrap();
        let back = Checkpoint::from_json(&json).unwrap();
        assert_eq!(back.model.params, ckpt.model.params);
        assert_eq!(back.config, ckpt.config);

        let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
        value["version"] = serde_json::json!(2);
        assert!(matches!(
            Checkpoint::from_json(&value.to_string()),
            Err(PodnetError::VersionMismatch { found: 2, .. })
        ));

        let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
        value["params"]["policy.l0.b"]["data"].as_array_mut().unwrap().pop();
        assert!(Checkpoint::from_json(&value.to_string()).is_err());

        let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
        value["params"].as_object_mut().unwrap().remove("dynamics.l1.w");
        let err = Checkpoint::from_json(&value.to_string()).unwrap_err();
        assert!(err.to_string().contains("dynamics.l1.w"), "{err}");
    }

    #[test]
    fn discovery_search_logic() {
        let (k, rows) = discover_with(2, 2, 2, |_| Ok(1.0)).unwrap();
        assert_eq!((k, rows.len()), (2, 1));

        // Convex profile with minimum at 3, starting from 5.
        let profile = |k: usize| Ok(((k as f64) - 3.0).powi(2) + 1.0);
        let mut calls = Vec::new();
        let (k, rows) = discover_with(5, 2, 6, |k| {
            calls.push(k);
            profile(k)
        })
        .unwrap();
        assert_eq!(k, 3);
        let ks: Vec<usize> = rows.iter().map(|r| r.num_options).collect();
        assert_eq!(ks, vec![2, 3, 4, 5, 6]);
        let mut sorted = calls.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), calls.len(), "each count trained once");

        // Flat profile: no move past the neighbours.
        let (k, rows) = discover_with(4, 2, 6, |_| Ok(1.0)).unwrap();
        assert_eq!(k, 3);
        assert_eq!(rows.len(), 3);

        assert!(discover_with(1, 1, 3, profile).is_err());
        assert!(discover_with(4, 5, 6, profile).is_err());
    }
}
