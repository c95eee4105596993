//! Option discovery from unstructured demonstration trajectories.
//!
//! A categorical variational autoencoder built from three networks:
//!
//! * a recurrent option inference network that labels every step of a
//!   demonstration with a discrete option,
//! * an option-conditioned policy trained by behavior cloning,
//! * an option dynamics model that predicts the next state from the current
//!   state and option.
//!
//! The learned option dynamics are then searched by a beam-search
//! meta-controller ([`planner`]) to produce option sequences that reach a goal
//! state, which the policy turns into actions.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod latent;
pub mod model;
pub mod nn;
pub mod planner;
pub mod rng;
pub mod training;

pub use data::{Dataset, EnvKind, EnvSpec, NormStats, Trajectory};
pub use error::{PodnetError, Result};
pub use evaluation::SegmentationReport;
pub use latent::{CategoricalPosterior, OptionLabel, TemperatureSchedule};
pub use model::{InferenceMode, KlMode, LossBreakdown, LossHyper, OptionAssignment, PodnetModel};
pub use nn::{Adam, ParamStore, Tape, Tensor, Var};
pub use planner::{ExecutionTrace, Plan, PlannerConfig};
pub use training::{Checkpoint, TrainConfig, TrainHistory};
