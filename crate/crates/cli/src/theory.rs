//! Theory sweeps and lambda optimization over a grid.

use rayon::prelude::*;
use rfcal::hyperopt::{optimal_temperature, optimize_lambda, Criterion, LambdaOptimum};
use rfcal::metrics::{metrics_record, temperature_scale, MetricsRecord};
use rfcal::spectra::{activation_moments, load_eigenvalues, SpectralModel};
use rfcal::state_evolution::{hat_tau, solve_from, solve_homotopy, Overlaps, ScenarioConfig};
use rfcal::EstimatorKind;

use crate::config::{Axis, EstimatorEntry, LambdaRule, SweepSpec};
use crate::error::CliError;
use crate::output::{Cell, Table};

/// Scenario at one value of p/n, with lambda and estimator still to be set.
pub fn base_config(spec: &SweepSpec, p_over_n: f64) -> ScenarioConfig<f64> {
    let s = &spec.scenario;
    let mut cfg = ScenarioConfig::from_ratios(s.n_over_d, p_over_n, s.tau0, 1.0, EstimatorKind::Erm);
    cfg.teacher_norm_sq = s.teacher_norm_sq;
    cfg.activation = s.activation.clone();
    cfg
}

/// Marchenko-Pastur unless the scenario names an eigenvalue file.
pub fn spectral_model(spec: &SweepSpec, cfg: &ScenarioConfig<f64>) -> Result<SpectralModel<f64>, CliError> {
    match &spec.scenario.eigenvalues {
        Some(path) => {
            let eig = load_eigenvalues(path)?;
            let moments = activation_moments(&cfg.activation)?;
            Ok(SpectralModel::empirical(moments, cfg.gamma, eig)?)
        }
        None => Ok(cfg.spectral_model()?),
    }
}

/// Everything shared by the estimators at one fit point.
pub struct PointContext {
    pub p_over_n: f64,
    pub cfg: ScenarioConfig<f64>,
    pub model: Result<SpectralModel<f64>, String>,
    pub bo: Result<Overlaps<f64>, String>,
    optima: Vec<(Criterion, Result<LambdaOptimum<f64>, String>)>,
}

impl PointContext {
    pub fn build(spec: &SweepSpec, p_over_n: f64, criteria: &[Criterion]) -> Self {
        let cfg = base_config(spec, p_over_n);
        let model = spectral_model(spec, &cfg).map_err(|e| e.to_string());
        let (bo, optima) = match &model {
            Ok(m) => {
                let bo = solve_from(&cfg.with_estimator(EstimatorKind::Bo).with_lambda(0.0), m, None)
                    .map(|f| f.overlaps)
                    .map_err(|e| e.to_string());
                let optima = criteria
                    .iter()
                    .map(|&c| {
                        let est = if c == Criterion::Evidence { EstimatorKind::Eb } else { EstimatorKind::Erm };
                        (c, optimize_lambda(c, &cfg.with_estimator(est), m).map_err(|e| e.to_string()))
                    })
                    .collect();
                (bo, optima)
            }
            Err(e) => (Err(e.clone()), Vec::new()),
        };
        PointContext { p_over_n, cfg, model, bo, optima }
    }

    pub fn optimum(&self, c: Criterion) -> Result<&LambdaOptimum<f64>, String> {
        match self.optima.iter().find(|(k, _)| *k == c) {
            Some((_, Ok(o))) => Ok(o),
            Some((_, Err(e))) => Err(format!("lambda_{}: {e}", c.name())),
            None => Err(format!("lambda_{} was not computed", c.name())),
        }
    }

    /// lambda_error and lambda_loss belong to erm and are shared by the other estimators.
    pub fn lambda(&self, rule: LambdaRule) -> Result<(f64, Vec<String>), String> {
        match rule {
            LambdaRule::Fixed(x) => Ok((x, Vec::new())),
            LambdaRule::None => Ok((0.0, Vec::new())),
            LambdaRule::Optimal(c) => self.optimum(c).map(|o| (o.lambda, o.warnings.clone())),
        }
    }
}

/// Criteria some entry needs.
pub fn needed_criteria(entries: &[EstimatorEntry]) -> Vec<Criterion> {
    let mut out = Vec::new();
    for e in entries {
        if let LambdaRule::Optimal(c) = e.lambda {
            if !out.contains(&c) {
                out.push(c);
            }
        }
    }
    out
}

/// One context per fit point, built in parallel.
pub fn contexts(spec: &SweepSpec) -> Vec<PointContext> {
    let crit = needed_criteria(&spec.estimators);
    let pns: Vec<f64> = (0..spec.fit_points()).map(|i| spec.p_over_n(i)).collect();
    pns.par_iter().map(|&pn| PointContext::build(spec, pn, &crit)).collect()
}

/// A solved estimator at one fit point.
#[derive(Debug, Clone)]
pub struct Solved {
    pub lambda: f64,
    /// Before temperature scaling.
    pub raw: Overlaps<f64>,
    pub temperature: Option<f64>,
    pub warnings: Vec<String>,
}

impl Solved {
    pub fn scaled(&self) -> Overlaps<f64> {
        match self.temperature {
            Some(t) => temperature_scale(&self.raw, t).unwrap_or(self.raw),
            None => self.raw,
        }
    }
}

pub fn solve_entry(
    entry: &EstimatorEntry,
    ctx: &PointContext,
    lambda_override: Option<f64>,
    warm: Option<&Overlaps<f64>>,
) -> Result<Solved, String> {
    let model = ctx.model.as_ref().map_err(|e| e.clone())?;
    if entry.kind == EstimatorKind::Bo {
        let raw = *ctx.bo.as_ref().map_err(|e| e.clone())?;
        return finish(entry, 0.0, raw, Vec::new());
    }
    let (lambda, warnings) = match lambda_override {
        Some(l) => (l, Vec::new()),
        None => ctx.lambda(entry.lambda)?,
    };
    let cfg = ctx.cfg.with_estimator(entry.kind).with_lambda(lambda);
    let fp = match entry.kind {
        EstimatorKind::Erm | EstimatorKind::Lap => solve_homotopy(&cfg, model, warm),
        _ => solve_from(&cfg, model, warm),
    };
    let fp = match fp {
        Ok(f) => f,
        // a bad warm start can stall the iteration; retry cold
        Err(_) if warm.is_some() => match entry.kind {
            EstimatorKind::Erm | EstimatorKind::Lap => solve_homotopy(&cfg, model, None),
            _ => solve_from(&cfg, model, None),
        }
        .map_err(|e| e.to_string())?,
        Err(e) => return Err(e.to_string()),
    };
    finish(entry, lambda, fp.overlaps, warnings)
}

fn finish(entry: &EstimatorEntry, lambda: f64, raw: Overlaps<f64>, mut warnings: Vec<String>) -> Result<Solved, String> {
    let temperature = if entry.temperature_scaling {
        let t = optimal_temperature(&raw).map_err(|e| e.to_string())?;
        warnings.extend(t.warnings);
        Some(t.temperature)
    } else {
        None
    };
    Ok(Solved { lambda, raw, temperature, warnings })
}

fn metric_columns(levels: &[f64]) -> Vec<String> {
    let mut c: Vec<String> = ["gen_error", "gen_loss", "ece"].iter().map(|s| s.to_string()).collect();
    c.extend(levels.iter().map(|l| format!("calibration_{l}")));
    c
}

pub fn theory_columns(levels: &[f64]) -> Vec<String> {
    let mut c: Vec<String> = [
        "axis", "x", "p_over_n", "estimator", "lambda_rule", "scaling", "lambda", "temperature", "status", "m", "q", "v", "m_hat",
        "q_hat", "v_hat", "rho", "tau_add_sq", "noise_total", "hat_tau_sq",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    c.extend(metric_columns(levels));
    c.push("hessian_trace".into());
    c.extend(levels.iter().map(|l| format!("cond_variance_{l}")));
    c
}

fn status(warnings: &[String]) -> String {
    if warnings.is_empty() {
        "ok".into()
    } else {
        format!("warn: {}", warnings.join("; "))
    }
}

fn row_prefix(spec: &SweepSpec, x: f64, pn: f64, entry: &EstimatorEntry) -> Vec<Cell> {
    let rule = if spec.axis == Axis::Lambda && entry.kind != EstimatorKind::Bo { "axis".to_string() } else { entry.lambda.label() };
    vec![spec.axis.name().into(), x.into(), pn.into(), entry.kind.name().into(), rule.into(), entry.scaling_label().into()]
}

fn failed_row(spec: &SweepSpec, x: f64, pn: f64, entry: &EstimatorEntry, msg: &str, width: usize) -> Vec<Cell> {
    let mut r = row_prefix(spec, x, pn, entry);
    r.push(Cell::Empty);
    r.push(Cell::Empty);
    r.push(format!("error: {msg}").into());
    r.resize(width, Cell::Empty);
    r
}

fn solved_row(spec: &SweepSpec, x: f64, ctx: &PointContext, entry: &EstimatorEntry, s: &Solved, o: &Overlaps<f64>) -> Vec<Cell> {
    let mut warnings = s.warnings.clone();
    let rec: Result<MetricsRecord<f64>, String> = metrics_record(o, &spec.levels, ctx.bo.as_ref().ok())
        .or_else(|e| {
            warnings.push(format!("conditional variance: {e}"));
            metrics_record(o, &spec.levels, None)
        })
        .map_err(|e| e.to_string());
    let mut r = row_prefix(spec, x, ctx.p_over_n, entry);
    let rec = match rec {
        Ok(r) => r,
        Err(e) => return failed_row(spec, x, ctx.p_over_n, entry, &e, theory_columns(&spec.levels).len()),
    };
    r.push(Cell::opt((entry.kind != EstimatorKind::Bo).then_some(s.lambda)));
    r.push(Cell::opt(if spec.axis == Axis::Temperature { Some(x) } else { s.temperature }));
    r.push(status(&warnings).into());
    for v in [o.m, o.q, o.v, o.m_hat, o.q_hat, o.v_hat, o.rho, o.noise.tau_add_sq, o.noise.total(), o.hat_tau_sq] {
        r.push(v.into());
    }
    r.push(rec.gen_error.into());
    r.push(rec.gen_loss.into());
    r.push(rec.ece.into());
    for (_, d) in &rec.calibration {
        r.push((*d).into());
    }
    let trace = match (entry.kind, &ctx.model) {
        (EstimatorKind::Erm | EstimatorKind::Lap, Ok(m)) => hat_tau(EstimatorKind::Lap, &s.raw, m, s.lambda).ok(),
        _ => None,
    };
    r.push(Cell::opt(trace));
    if rec.cond_variance.is_empty() {
        r.extend(spec.levels.iter().map(|_| Cell::Empty));
    } else {
        r.extend(rec.cond_variance.iter().map(|(_, v)| Cell::Num(*v)));
    }
    r
}

/// Rows in grid order, then estimator order.
pub fn run_theory_sweep(spec: &SweepSpec) -> Table {
    let ctxs = contexts(spec);
    run_theory_sweep_with(spec, &ctxs)
}

pub fn run_theory_sweep_with(spec: &SweepSpec, ctxs: &[PointContext]) -> Table {
    let cols = theory_columns(&spec.levels);
    let width = cols.len();
    // each estimator is a warm-started chain along the axis
    let chains: Vec<Vec<Result<Solved, String>>> = spec
        .estimators
        .par_iter()
        .map(|entry| {
            let mut warm: Option<Overlaps<f64>> = None;
            ctxs.iter()
                .enumerate()
                .map(|(i, ctx)| {
                    let lam = (spec.axis == Axis::Lambda).then(|| spec.grid[i]);
                    let res = solve_entry(entry, ctx, lam, warm.as_ref());
                    warm = res.as_ref().ok().map(|s| s.raw);
                    res
                })
                .collect()
        })
        .collect();
    let mut table = Table::new("theory-sweep", cols);
    for (i, &x) in spec.grid.iter().enumerate() {
        let k = if spec.fit_points() == 1 { 0 } else { i };
        let ctx = &ctxs[k];
        for (e, entry) in spec.estimators.iter().enumerate() {
            let row = match &chains[e][k] {
                Ok(s) => {
                    let o = match spec.axis {
                        Axis::Temperature => temperature_scale(&s.raw, x).unwrap_or(s.raw),
                        _ => s.scaled(),
                    };
                    solved_row(spec, x, ctx, entry, s, &o)
                }
                Err(msg) => failed_row(spec, x, ctx.p_over_n, entry, msg, width),
            };
            table.push(row);
        }
    }
    table
}

pub fn hyperopt_columns(levels: &[f64]) -> Vec<String> {
    let mut c: Vec<String> = ["p_over_n", "criterion", "estimator", "lambda", "objective", "evaluations", "status", "m", "q", "v", "hat_tau_sq"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    c.extend(metric_columns(levels));
    c.push("temperature".into());
    c.push("scaled_gen_loss".into());
    c
}

/// lambda* for one criterion at each p/n of the sweep.
pub fn run_hyperopt(spec: &SweepSpec, criterion: Criterion) -> Table {
    let pns: Vec<f64> = (0..spec.fit_points()).map(|i| spec.p_over_n(i)).collect();
    let est = if criterion == Criterion::Evidence { EstimatorKind::Eb } else { EstimatorKind::Erm };
    let rows: Vec<Vec<Cell>> = pns
        .par_iter()
        .map(|&pn| {
            let cfg = base_config(spec, pn).with_estimator(est);
            let mut r: Vec<Cell> = vec![pn.into(), criterion.name().into(), est.name().into()];
            let res = spectral_model(spec, &cfg).map_err(|e| e.to_string()).and_then(|m| {
                let o = optimize_lambda(criterion, &cfg, &m).map_err(|e| e.to_string())?;
                let rec = metrics_record(&o.overlaps, &spec.levels, None).map_err(|e| e.to_string())?;
                Ok((o, rec))
            });
            match res {
                Ok((o, rec)) => {
                    let ts = optimal_temperature(&o.overlaps).ok();
                    let mut warnings = o.warnings.clone();
                    if let Some(t) = &ts {
                        warnings.extend(t.warnings.iter().cloned());
                    }
                    r.extend([Cell::Num(o.lambda), Cell::Num(o.objective), Cell::Int(o.evaluations as u64), status(&warnings).into()]);
                    r.extend([o.overlaps.m, o.overlaps.q, o.overlaps.v, o.overlaps.hat_tau_sq].map(Cell::Num));
                    r.extend([rec.gen_error, rec.gen_loss, rec.ece].map(Cell::Num));
                    r.extend(rec.calibration.iter().map(|(_, d)| Cell::Num(*d)));
                    r.push(Cell::opt(ts.as_ref().map(|t| t.temperature)));
                    r.push(Cell::opt(ts.as_ref().map(|t| t.loss)));
                }
                Err(e) => {
                    r.extend([Cell::Empty, Cell::Empty, Cell::Empty, format!("error: {e}").into()]);
                    r.resize(hyperopt_columns(&spec.levels).len(), Cell::Empty);
                }
            }
            r
        })
        .collect();
    let mut t = Table::new("hyperopt", hyperopt_columns(&spec.levels));
    for r in rows {
        t.push(r);
    }
    t
}

/// True when every row's status is ok or a warning.
pub fn all_ok(t: &Table) -> bool {
    let Some(k) = t.columns.iter().position(|c| c == "status") else { return true };
    t.rows.iter().all(|r| !matches!(&r[k], Cell::Text(s) if s.starts_with("error") || s.starts_with("partial")))
}
