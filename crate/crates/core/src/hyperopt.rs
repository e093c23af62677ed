//! One-dimensional selection of the ridge penalty and of the temperature.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::{gen_error, gen_loss, metrics_record, temperature_scale, MetricsRecord, DEFAULT_LEVELS};
use crate::scalar::Scalar;
use crate::scalar_kernel::EstimatorKind;
use crate::spectra::SpectralModel;
use crate::state_evolution::{free_entropy, solve_from, Overlaps, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Error,
    Loss,
    Evidence,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::Error => "error",
            Criterion::Loss => "loss",
            Criterion::Evidence => "evidence",
        }
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "error" => Ok(Criterion::Error),
            "loss" => Ok(Criterion::Loss),
            "evidence" => Ok(Criterion::Evidence),
            _ => invalid(format!("unknown criterion '{s}' (expected error, loss or evidence)")),
        }
    }
}

/// Search domain and tolerances for a scalar minimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarOptProblem {
    /// log10 bounds of the search domain.
    pub log_lo: f64,
    pub log_hi: f64,
    pub grid: usize,
    /// Relative tolerance on the argument.
    pub rel_tol: f64,
}

impl ScalarOptProblem {
    pub const LAMBDA: ScalarOptProblem = ScalarOptProblem { log_lo: -6.0, log_hi: 3.0, grid: 25, rel_tol: 1e-4 };
    pub const TEMPERATURE: ScalarOptProblem =
        ScalarOptProblem { log_lo: -1.301_029_995_663_981_2, log_hi: 1.301_029_995_663_981_2, grid: 41, rel_tol: 1e-6 };

    fn grid_points(&self) -> Vec<f64> {
        let n = self.grid.max(2);
        (0..n).map(|k| self.log_lo + (self.log_hi - self.log_lo) * k as f64 / (n - 1) as f64).collect()
    }

    fn log_tol(&self) -> f64 {
        self.rel_tol / std::f64::consts::LN_10
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaOptimum<T> {
    pub criterion: Criterion,
    pub lambda: T,
    /// Minimized value (the negated free entropy for evidence).
    pub objective: T,
    pub overlaps: Overlaps<T>,
    pub metrics: MetricsRecord<T>,
    pub evaluations: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureOptimum<T> {
    pub temperature: T,
    pub loss: T,
    pub warnings: Vec<String>,
}

/// Minimizes `f` over [a, b] by golden section; returns (x, f(x)).
pub fn golden_section(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (a.min(b), a.max(b));
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

struct LambdaObjective<'a, T> {
    criterion: Criterion,
    cfg: &'a ScenarioConfig<T>,
    spec: &'a SpectralModel<T>,
    // (log10 lambda, fixed point) of every successful solve, for warm starts
    solved: Vec<(f64, Overlaps<T>)>,
    evaluations: usize,
}

impl<'a, T: Scalar> LambdaObjective<'a, T> {
    fn nearest(&self, x: f64) -> Option<Overlaps<T>> {
        self.solved
            .iter()
            .min_by(|a, b| (a.0 - x).abs().total_cmp(&(b.0 - x).abs()))
            .map(|s| s.1)
    }

    fn solve(&mut self, x: f64) -> Result<Overlaps<T>> {
        self.evaluations += 1;
        let cfg = self.cfg.with_lambda(T::c(10f64.powf(x)));
        let warm = self.nearest(x);
        let fp = match solve_from(&cfg, self.spec, warm.as_ref()) {
            Ok(fp) => fp,
            Err(Error::Interpolating { q }) => return Err(Error::Interpolating { q }),
            Err(_) if warm.is_some() => solve_from(&cfg, self.spec, None)?,
            Err(e) => return Err(e),
        };
        self.solved.push((x, fp.overlaps));
        Ok(fp.overlaps)
    }

    fn score(&self, x: f64, o: &Overlaps<T>) -> Result<f64> {
        Ok(match self.criterion {
            Criterion::Error => gen_error(o).f64(),
            Criterion::Loss => gen_loss(o).f64(),
            Criterion::Evidence => -free_entropy(&self.cfg.with_lambda(T::c(10f64.powf(x))), o, self.spec)?.f64(),
        })
    }

    // diverged or failed states score +inf
    fn eval(&mut self, x: f64) -> f64 {
        match self.solve(x).and_then(|o| self.score(x, &o)) {
            Ok(v) if v.is_finite() => v,
            _ => f64::INFINITY,
        }
    }
}

/// lambda minimizing test error or test loss, or maximizing the evidence.
pub fn optimize_lambda<T: Scalar>(criterion: Criterion, cfg: &ScenarioConfig<T>, spec: &SpectralModel<T>) -> Result<LambdaOptimum<T>> {
    optimize_lambda_with(criterion, cfg, spec, &ScalarOptProblem::LAMBDA)
}

pub fn optimize_lambda_with<T: Scalar>(
    criterion: Criterion,
    cfg: &ScenarioConfig<T>,
    spec: &SpectralModel<T>,
    problem: &ScalarOptProblem,
) -> Result<LambdaOptimum<T>> {
    match (criterion, cfg.estimator) {
        (_, EstimatorKind::Bo) => return invalid("the Bayes-optimal estimator has no lambda to tune"),
        (Criterion::Evidence, e) if e != EstimatorKind::Eb => {
            return invalid(format!("evidence maximization needs the eb estimator, got {}", e.name()))
        }
        _ => {}
    }
    let mut obj = LambdaObjective { criterion, cfg, spec, solved: Vec::new(), evaluations: 0 };
    let mut warnings = Vec::new();

    // descending scan so that each solve starts from a more regular neighbour
    let grid = problem.grid_points();
    let mut values = vec![f64::INFINITY; grid.len()];
    for k in (0..grid.len()).rev() {
        values[k] = obj.eval(grid[k]);
    }
    let best = (0..grid.len())
        .filter(|&k| values[k].is_finite())
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .ok_or_else(|| Error::NoConvergence { iterations: grid.len(), residual: f64::INFINITY })?;
    let minima = (0..grid.len())
        .filter(|&k| {
            values[k].is_finite()
                && (k == 0 || values[k] < values[k - 1])
                && (k + 1 == grid.len() || values[k] <= values[k + 1])
        })
        .count();
    if minima > 1 {
        warnings.push(format!("{minima} local minima on the lambda grid; refining the global one"));
    }
    if best == 0 || best + 1 == grid.len() {
        warnings.push(format!("{} optimum at the boundary lambda = 1e{}", criterion.name(), grid[best]));
    }

    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(grid.len() - 1)];
    let (mut x, mut fx) = golden_section(|x| obj.eval(x), lo, hi, problem.log_tol());
    if values[best] < fx {
        x = grid[best];
        fx = values[best];
    }
    let overlaps = obj.solve(x)?;
    let metrics = metrics_record(&overlaps, &DEFAULT_LEVELS.map(T::c), None)?;
    Ok(LambdaOptimum {
        criterion,
        lambda: T::c(10f64.powf(x)),
        objective: T::c(fx),
        overlaps,
        metrics,
        evaluations: obj.evaluations,
        warnings,
    })
}

/// Temperature minimizing the asymptotic test loss of theta / T.
pub fn optimal_temperature<T: Scalar>(overlaps: &Overlaps<T>) -> Result<TemperatureOptimum<T>> {
    optimal_temperature_with(overlaps, &ScalarOptProblem::TEMPERATURE)
}

pub fn optimal_temperature_with<T: Scalar>(overlaps: &Overlaps<T>, problem: &ScalarOptProblem) -> Result<TemperatureOptimum<T>> {
    if !(overlaps.q > T::zero()) {
        return invalid("temperature scaling needs q > 0");
    }
    let loss = |x: f64| -> f64 {
        match temperature_scale(overlaps, T::c(10f64.powf(x))) {
            Ok(o) => gen_loss(&o).f64(),
            Err(_) => f64::INFINITY,
        }
    };
    let grid = problem.grid_points();
    let values: Vec<f64> = grid.iter().map(|&x| loss(x)).collect();
    let best = (0..grid.len()).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
    let mut warnings = Vec::new();
    if best == 0 || best + 1 == grid.len() {
        warnings.push(format!("temperature optimum at the boundary T = {:.4}", 10f64.powf(grid[best])));
    }
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(grid.len() - 1)];
    let (x, fx) = golden_section(loss, lo, hi, problem.log_tol());
    Ok(TemperatureOptimum { temperature: T::c(10f64.powf(x)), loss: T::c(fx), warnings })
}
