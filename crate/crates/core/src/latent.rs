//! Categorical latent machinery: Gumbel-Softmax sampling with straight-through
//! hard labels, KL divergence to the uniform prior and the temperature schedule.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{PodnetError, Result};
use crate::nn::tape::{argmax, kl_uniform_value, one_hot, softmax};

/// A posterior over `K` options.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalPosterior {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl CategoricalPosterior {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probs = softmax(&logits);
        Self { logits, probs }
    }
}

/// An option label: a simplex point for gradients and its one-hot argmax for
/// the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionLabel {
    pub soft: Vec<f64>,
    pub hard: Vec<f64>,
}

impl OptionLabel {
    pub fn from_soft(soft: Vec<f64>) -> Self {
        let hard = one_hot(soft.len(), argmax(&soft));
        Self { soft, hard }
    }

    /// A deterministic label for option `index` out of `k`.
    pub fn one_hot(k: usize, index: usize) -> Self {
        let v = one_hot(k, index);
        Self {
            soft: v.clone(),
            hard: v,
        }
    }

    pub fn index(&self) -> usize {
        argmax(&self.hard)
    }

    pub fn num_options(&self) -> usize {
        self.hard.len()
    }
}

fn check_k(k: usize) -> Result<()> {
    if k < 2 {
        return Err(PodnetError::invalid(format!("need at least 2 categories, got {k}")));
    }
    Ok(())
}

/// Standard Gumbel(0, 1) noise of length `k`.
pub fn gumbel_noise<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel parameters are valid");
    (0..k).map(|_| gumbel.sample(rng)).collect()
}

/// `soft = softmax((logits + g) / tau)` for the given noise `g`.
pub fn relaxed_sample(logits: &[f64], noise: &[f64], tau: f64) -> Vec<f64> {
    let z: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| (l + g) / tau).collect();
    softmax(&z)
}

pub fn sample_gumbel_softmax<R: Rng + ?Sized>(logits: &[f64], tau: f64, rng: &mut R) -> Result<OptionLabel> {
    check_k(logits.len())?;
    if !(tau > 0.0) {
        return Err(PodnetError::invalid(format!("temperature must be positive, got {tau}")));
    }
    let noise = gumbel_noise(logits.len(), rng);
    Ok(OptionLabel::from_soft(relaxed_sample(logits, &noise, tau)))
}

/// Noise-free label: softmax probabilities and their argmax (lowest index on ties).
pub fn greedy_label(logits: &[f64]) -> Result<OptionLabel> {
    check_k(logits.len())?;
    Ok(OptionLabel::from_soft(softmax(logits)))
}

/// `KL(p || uniform) = ln K - H(p)`, with probabilities clamped at 1e-12 inside
/// the logarithm.
pub fn kl_to_uniform(probs: &[f64]) -> Result<f64> {
    let total: f64 = probs.iter().sum();
    if probs.is_empty() || (total - 1.0).abs() > 1e-6 || probs.iter().any(|&p| !(-1e-12..=1.0 + 1e-12).contains(&p)) {
        return Err(PodnetError::invalid("kl_to_uniform expects a point on the probability simplex"));
    }
    Ok(kl_uniform_value(probs))
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Exponential decay from `tau0` to `tau_min` over `decay_steps`, then flat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub tau0: f64,
    pub tau_min: f64,
    pub decay_steps: u64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            tau0: 1.0,
            tau_min: 0.5,
            decay_steps: 1,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau0 >= self.tau_min) {
            return Err(PodnetError::invalid("temperature schedule needs tau0 >= tau_min > 0"));
        }
        Ok(())
    }

    pub fn temperature(&self, step: u64) -> Result<f64> {
        self.validate()?;
        if self.decay_steps == 0 || step >= self.decay_steps {
            return Ok(self.tau_min);
        }
        let frac = step as f64 / self.decay_steps as f64;
        Ok(self.tau0 * (self.tau_min / self.tau0).powf(frac))
    }
}
