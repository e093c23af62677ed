//! Asymptotic and finite-size uncertainty metrics for probabilistic
//! classifiers trained on random features.
//!
//! The theory side (`scalar_kernel`, `spectra`, `state_evolution`,
//! `metrics`, `hyperopt`) is generic over [`Scalar`]; the simulation side
//! (`monte_carlo`, `gamp`) works in `f64`.

pub mod error;
pub mod scalar;
pub mod scalar_kernel;
pub mod spectra;
pub mod metrics;
pub mod state_evolution;
pub mod hyperopt;
pub mod gamp;
pub mod monte_carlo;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use scalar_kernel::{ChannelEval, EstimatorKind};
pub use spectra::{Activation, ActivationMoments, EffectiveNoise, SpectralLaw};

pub type SpectralModel64 = spectra::SpectralModel<f64>;
pub type SpectralModel32 = spectra::SpectralModel<f32>;

pub type Overlaps64 = state_evolution::Overlaps<f64>;
pub type ScenarioConfig64 = state_evolution::ScenarioConfig<f64>;
pub type FixedPoint64 = state_evolution::FixedPoint<f64>;
pub type EffectiveNoise64 = spectra::EffectiveNoise<f64>;
pub type MetricsRecord64 = metrics::MetricsRecord<f64>;
pub type LambdaOptimum64 = hyperopt::LambdaOptimum<f64>;
pub type Overlaps32 = state_evolution::Overlaps<f32>;
pub type ScenarioConfig32 = state_evolution::ScenarioConfig<f32>;
