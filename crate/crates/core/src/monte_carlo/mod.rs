//! Finite-size experiments: synthetic data, Newton-trained logistic
//! regression, Laplace variances, GAMP posteriors and empirical metrics.

pub mod data;
pub mod empirical;
pub mod erm;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gamp::{run_gamp, GampOptions, GampRun, GampStatus, OverlapProbe};
use crate::scalar_kernel::EstimatorKind;

pub use data::{generate_dataset, DataSpec, Dataset, Split, Stream};
pub use empirical::{empirical_metrics, temperature_scale_fit, EmpiricalMetrics, Predictions, ECE_BINS};
pub use erm::{laplace_variance, train_erm, TrainedModel};

/// A fitted predictor of one of the four kinds.
#[derive(Debug, Clone)]
pub enum Predictor {
    Erm(TrainedModel),
    Lap(TrainedModel),
    Gamp(GampRun),
}

impl Predictor {
    pub fn theta(&self) -> &nalgebra::DVector<f64> {
        match self {
            Predictor::Erm(m) | Predictor::Lap(m) => &m.theta_hat,
            Predictor::Gamp(r) => &r.theta_hat,
        }
    }

    /// Scores and confidence-map variances on the given feature rows.
    pub fn evaluate(&self, phi: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let score: Vec<f64> = (phi * self.theta()).iter().copied().collect();
        let var = match self {
            Predictor::Erm(_) => vec![0.0; score.len()],
            Predictor::Lap(m) => laplace_variance(m, phi)?,
            Predictor::Gamp(r) => r.predictive_variance(phi),
        };
        Ok((score, var))
    }
}

/// Test-split predictions with oracle probabilities.
pub fn predict_test(ds: &Dataset, pred: &Predictor) -> Result<Predictions> {
    let mut out = Predictions { score: Vec::new(), var: Vec::new(), oracle: empirical::test_oracle(ds) };
    let mut failure = None;
    ds.for_test_chunks(|_, phi| match pred.evaluate(phi) {
        Ok((s, v)) => {
            out.score.extend(s);
            out.var.extend(v);
        }
        Err(e) => failure = Some(e),
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Empirical-Bayes posterior by GAMP in whitened coordinates.
pub fn eb_predict(ds: &Dataset, lambda: f64, opts: &GampOptions) -> Result<GampRun> {
    let opts = GampOptions { whiten: true, ..*opts };
    let run = run_gamp(ds, EstimatorKind::Eb, lambda, &opts)?;
    match run.status {
        GampStatus::Converged => Ok(run),
        GampStatus::Diverged => Err(Error::Diverged(run.trace.last().map(|r| r.residual).unwrap_or(f64::NAN))),
        GampStatus::MaxIter => Err(Error::NoConvergence {
            iterations: run.iterations,
            residual: run.trace.last().map(|r| r.residual).unwrap_or(f64::NAN),
        }),
    }
}

/// Fits the estimator on the training split.
pub fn fit(ds: &Dataset, estimator: EstimatorKind, lambda: f64, opts: &GampOptions) -> Result<Predictor> {
    Ok(match estimator {
        EstimatorKind::Erm => Predictor::Erm(train_erm(ds, lambda)?),
        EstimatorKind::Lap => Predictor::Lap(train_erm(ds, lambda)?),
        EstimatorKind::Eb => Predictor::Gamp(eb_predict(ds, lambda, opts)?),
        EstimatorKind::Bo => {
            let run = run_gamp(ds, EstimatorKind::Bo, 0.0, &GampOptions { whiten: true, ..*opts })?;
            if run.status != GampStatus::Converged {
                return Err(Error::NoConvergence { iterations: run.iterations, residual: f64::NAN });
            }
            Predictor::Gamp(run)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub estimator: EstimatorKind,
    pub lambda: f64,
    pub seed: u64,
    pub metrics: EmpiricalMetrics,
    pub m_emp: f64,
    pub q_emp: f64,
    /// Validation temperature and the metrics after rescaling, when requested.
    pub temperature: Option<f64>,
    pub scaled: Option<EmpiricalMetrics>,
}

/// One dataset, several estimators.
pub fn run_trial(
    spec: &DataSpec,
    estimators: &[(EstimatorKind, f64)],
    levels: &[f64],
    temperature: bool,
    opts: &GampOptions,
) -> Result<Vec<TrialRecord>> {
    if estimators.is_empty() {
        return invalid("no estimators requested");
    }
    let ds = generate_dataset(spec)?;
    let probe = OverlapProbe::from_dataset(&ds);
    let mut out = Vec::with_capacity(estimators.len());
    for &(est, lambda) in estimators {
        let pred = fit(&ds, est, lambda, opts)?;
        let p = predict_test(&ds, &pred)?;
        let metrics = empirical_metrics(&p, levels, ECE_BINS)?;
        let (m_emp, q_emp) = probe.overlaps(pred.theta());
        let (temperature, scaled) = if temperature {
            let val_phi = ds.val.phi.as_ref().ok_or_else(|| Error::InvalidInput("validation features missing".into()))?;
            let scores = val_phi * pred.theta();
            let (t, _) = temperature_scale_fit(&scores, &ds.val.y)?;
            (Some(t), Some(empirical_metrics(&p.scaled(t), levels, ECE_BINS)?))
        } else {
            (None, None)
        };
        out.push(TrialRecord { estimator: est, lambda, seed: spec.seed, metrics, m_emp, q_emp, temperature, scaled });
    }
    Ok(out)
}

/// Trials with seeds base_seed, base_seed + 1, ...; failures are kept per trial.
pub fn run_trials(
    spec: &DataSpec,
    estimators: &[(EstimatorKind, f64)],
    levels: &[f64],
    trials: usize,
    temperature: bool,
    opts: &GampOptions,
) -> Vec<Result<Vec<TrialRecord>>> {
    (0..trials as u64)
        .into_par_iter()
        .map(|k| {
            let s = DataSpec { seed: spec.seed + k, ..spec.clone() };
            run_trial(&s, estimators, levels, temperature, opts)
        })
        .collect()
}

/// Mean and standard error; the error is None for a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: Option<f64>,
    pub count: usize,
}

pub fn mean_se(xs: impl IntoIterator<Item = f64>) -> MeanSe {
    let v: Vec<f64> = xs.into_iter().filter(|x| x.is_finite()).collect();
    let n = v.len();
    if n == 0 {
        return MeanSe { mean: f64::NAN, se: None, count: 0 };
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let se = if n > 1 {
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Some((var / n as f64).sqrt())
    } else {
        None
    };
    MeanSe { mean, se, count: n }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_se_edge_cases() {
        let one = mean_se([0.3]);
        assert_eq!(one.mean, 0.3);
        assert!(one.se.is_none());
        let two = mean_se([1.0, 3.0, f64::NAN]);
        assert_eq!(two.count, 2);
        assert!((two.se.unwrap() - 1.0).abs() < 1e-15);
    }
}
