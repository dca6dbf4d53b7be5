//! Left-right hidden Markov models with Gaussian emissions for motion
//! classification and probabilistic trajectory forecasting from sensor time
//! series.
//!
//! Each class of motion is modelled by one left-right HMM whose hidden
//! states correspond to the time steps of the training trajectories. A short
//! history is classified by comparing forward log-likelihoods under the class
//! models; the winning model's Viterbi path, extended to the model horizon,
//! turns its per-state Gaussians into a forecast with a ±1 s.d. band.

pub mod dataio;
pub mod distance;
pub mod error;
pub mod experiment;
pub mod forecast;
pub mod inference;
pub mod logspace;
pub mod model;
pub mod training;

pub use distance::{cross_fitness_distance, CrossFitnessReport};
pub use error::{HmmError, Result};
pub use forecast::{export_forecast, forecast, ForecastRow, ProbabilisticTrajectory};
pub use inference::{classify, log_likelihood, viterbi, ClassDecision, ViterbiResult};
pub use model::{
    gaussian_log_density, validate_model, GaussianEmission, LrHmmModel, ObservationSequence,
    Violation,
};
pub use training::{
    baum_welch, baum_welch_from, forward_backward, initialize_model, ForwardBackwardCache,
    TrainingConfig, TrainingTrace,
};
