use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::hyperopt::golden_section;
use crate::scalar_kernel::{log_sigmoid, smoothed};

use super::data::Dataset;

pub const ECE_BINS: usize = 15;
pub const WINDOW: f64 = 0.02;
const MIN_WINDOW_POINTS: usize = 30;

/// Per-sample scores, prediction variances and oracle probabilities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    pub score: Vec<f64>,
    /// Smoothing variance of the confidence map (0 for the plain logit).
    pub var: Vec<f64>,
    pub oracle: Vec<f64>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.score.len()
    }

    pub fn is_empty(&self) -> bool {
        self.score.is_empty()
    }

    pub fn confidence(&self, i: usize) -> f64 {
        smoothed(self.score[i], self.var[i]).value
    }

    /// Predictions of theta / T.
    pub fn scaled(&self, temp: f64) -> Predictions {
        Predictions {
            score: self.score.iter().map(|s| s / temp).collect(),
            var: self.var.iter().map(|v| v / (temp * temp)).collect(),
            oracle: self.oracle.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMetrics {
    pub gen_error: f64,
    pub gen_loss: f64,
    pub calibration: Vec<(f64, f64)>,
    pub ece: f64,
    pub warnings: Vec<String>,
}

impl EmpiricalMetrics {
    pub fn calibration_at(&self, level: f64) -> Option<f64> {
        self.calibration.iter().find(|(l, _)| *l == level).map(|(_, d)| *d)
    }
}

// ell - E[f* | f_hat = ell] by a local linear fit in a window around ell
fn window_calibration(conf: &[f64], oracle: &[f64], level: f64, half_width: f64) -> Option<(f64, usize)> {
    let (mut n, mut sx, mut sy, mut sxx, mut sxy) = (0usize, 0.0, 0.0, 0.0, 0.0);
    for (&c, &o) in conf.iter().zip(oracle) {
        let u = c - level;
        if u.abs() <= half_width {
            n += 1;
            sx += u;
            sy += o;
            sxx += u * u;
            sxy += u * o;
        }
    }
    if n < MIN_WINDOW_POINTS {
        return None;
    }
    let nf = n as f64;
    let den = nf * sxx - sx * sx;
    let intercept = if den > 1e-14 * nf * sxx.max(1e-300) { (sxx * sy - sx * sxy) / den } else { sy / nf };
    Some((level - intercept, n))
}

/// Error, loss, calibration at `levels` and equal-mass ECE.
pub fn empirical_metrics(pred: &Predictions, levels: &[f64], bins: usize) -> Result<EmpiricalMetrics> {
    let n = pred.len();
    if n == 0 || pred.var.len() != n || pred.oracle.len() != n {
        return invalid("predictions are empty or have mismatched lengths");
    }
    let mut warnings = Vec::new();
    let conf: Vec<f64> = (0..n).map(|i| pred.confidence(i)).collect();
    let (mut err, mut loss) = (0.0, 0.0);
    for i in 0..n {
        let f = pred.oracle[i];
        let s = pred.score[i];
        // expected disagreement given x, so label noise does not enter the variance
        err += if s > 0.0 {
            1.0 - f
        } else if s < 0.0 {
            f
        } else {
            0.5
        };
        let (lp, lm) = if pred.var[i] == 0.0 {
            (log_sigmoid(s), log_sigmoid(-s))
        } else {
            (conf[i].ln(), (1.0 - conf[i]).ln())
        };
        loss -= f * lp + (1.0 - f) * lm;
    }
    let mut calibration = Vec::with_capacity(levels.len());
    for &l in levels {
        if !(l > 0.0 && l < 1.0) {
            return invalid(format!("level {l} outside (0,1)"));
        }
        let mut h = WINDOW;
        let mut found = None;
        for _ in 0..6 {
            if let Some(r) = window_calibration(&conf, &pred.oracle, l, h) {
                found = Some(r);
                break;
            }
            h *= 2.0;
        }
        match found {
            Some((d, _)) => {
                if h > WINDOW {
                    warnings.push(format!("window at level {l} widened to {h}"));
                }
                calibration.push((l, d));
            }
            None => {
                warnings.push(format!("no predictions near level {l}"));
                calibration.push((l, f64::NAN));
            }
        }
    }
    Ok(EmpiricalMetrics { gen_error: err / n as f64, gen_loss: loss / n as f64, calibration, ece: ece(&conf, &pred.oracle, bins), warnings })
}

/// Equal-mass binned ECE, sum_b (n_b / n) |mean f_hat - mean f*|.
pub fn ece(conf: &[f64], oracle: &[f64], bins: usize) -> f64 {
    let n = conf.len();
    if n == 0 {
        return f64::NAN;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]));
    let bins = bins.clamp(1, n);
    let mut total = 0.0;
    for b in 0..bins {
        let lo = b * n / bins;
        let hi = (b + 1) * n / bins;
        if hi == lo {
            continue;
        }
        let (mut c, mut o) = (0.0, 0.0);
        for &i in &idx[lo..hi] {
            c += conf[i];
            o += oracle[i];
        }
        total += (c - o).abs();
    }
    total / n as f64
}

/// Temperature minimizing the validation cross-entropy of sigma(score / T).
pub fn temperature_scale_fit(val_scores: &DVector<f64>, val_labels: &DVector<f64>) -> Result<(f64, Vec<String>)> {
    if val_scores.is_empty() || val_scores.len() != val_labels.len() {
        return invalid("validation split is empty or mismatched");
    }
    let ce = |x: f64| -> f64 {
        let t = 10f64.powf(x);
        val_scores.iter().zip(val_labels.iter()).map(|(&s, &y)| -log_sigmoid(y * s / t)).sum::<f64>()
    };
    let (lo, hi) = (0.05f64.log10(), 20f64.log10());
    let grid: Vec<f64> = (0..41).map(|k| lo + (hi - lo) * k as f64 / 40.0).collect();
    let vals: Vec<f64> = grid.iter().map(|&x| ce(x)).collect();
    let best = (0..grid.len()).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    let mut warnings = Vec::new();
    if best == 0 || best + 1 == grid.len() {
        warnings.push(format!("validation temperature at the boundary T = {:.4}", 10f64.powf(grid[best])));
    }
    let (x, _) = golden_section(ce, grid[best.saturating_sub(1)], grid[(best + 1).min(grid.len() - 1)], 1e-7);
    Ok((10f64.powf(x), warnings))
}

/// Oracle probabilities of the test split.
pub fn test_oracle(ds: &Dataset) -> Vec<f64> {
    ds.test.teacher_field.iter().map(|&z| ds.oracle(z)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar_kernel::sigmoid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(n: usize) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        (0..n).map(|_| r.gen_range(-3.0..3.0)).collect()
    }

    #[test]
    fn oracle_is_self_calibrated() {
        let z = sample(200_000);
        let pred = Predictions { score: z.clone(), var: vec![0.0; z.len()], oracle: z.iter().map(|&z| sigmoid(z)).collect() };
        let m = empirical_metrics(&pred, &[0.6, 0.75, 0.9], ECE_BINS).unwrap();
        for (_, d) in &m.calibration {
            assert!(d.abs() < 1e-10);
        }
        assert!(m.ece < 1e-12);
    }

    #[test]
    fn constant_predictor() {
        let z = sample(50_000);
        let oracle: Vec<f64> = z.iter().map(|&z| sigmoid(z)).collect();
        let c = 3f64.ln();
        let pred = Predictions { score: vec![c; z.len()], var: vec![0.0; z.len()], oracle: oracle.clone() };
        let m = empirical_metrics(&pred, &[0.75], ECE_BINS).unwrap();
        let mean = oracle.iter().sum::<f64>() / oracle.len() as f64;
        assert!((m.calibration_at(0.75).unwrap() - (0.75 - mean)).abs() < 1e-9);
        assert!((m.gen_error - (1.0 - mean)).abs() < 1e-12);
    }

    #[test]
    fn temperature_reparametrization() {
        let z = sample(4000);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let y: Vec<f64> = z.iter().map(|&z| if r.gen::<f64>() < sigmoid(0.5 * z) { 1.0 } else { -1.0 }).collect();
        let s = DVector::from_vec(z.clone());
        let yv = DVector::from_vec(y);
        let (t1, _) = temperature_scale_fit(&s, &yv).unwrap();
        let (t2, _) = temperature_scale_fit(&(&s * 3.0), &yv).unwrap();
        assert!((t2 / t1 - 3.0).abs() < 1e-5, "{t1} {t2}");
        assert!((t1 - 2.0).abs() < 0.3);
    }
}
