//! Monte Carlo sweeps: trial aggregation per grid point and estimator.

use rfcal::gamp::GampOptions;
use rfcal::monte_carlo::{mean_se, run_trials, DataSpec, MeanSe, TrialRecord};
use rfcal::EstimatorKind;

use crate::config::{Axis, EstimatorEntry, SweepSpec};
use crate::error::{usage, CliError};
use crate::output::{Cell, Table};
use crate::theory::{contexts, PointContext};

pub fn data_spec(spec: &SweepSpec, p_over_n: f64, seed: u64) -> DataSpec {
    let s = &spec.scenario;
    let d = spec.mc.d;
    DataSpec {
        d,
        n_train: (s.n_over_d * d as f64).round() as usize,
        n_val: spec.mc.n_val,
        n_test: spec.mc.n_test,
        gamma: p_over_n * s.n_over_d,
        tau0_sq: s.tau0 * s.tau0,
        activation: s.activation.clone(),
        teacher_norm_sq: s.teacher_norm_sq,
        seed,
    }
}

fn metric_names(levels: &[f64]) -> Vec<String> {
    let mut c: Vec<String> = ["gen_error", "gen_loss", "ece"].iter().map(|s| s.to_string()).collect();
    c.extend(levels.iter().map(|l| format!("calibration_{l}")));
    c.extend(["m_emp", "q_emp", "temperature"].iter().map(|s| s.to_string()));
    c
}

pub fn mc_columns(levels: &[f64]) -> Vec<String> {
    let mut c: Vec<String> = ["axis", "x", "p_over_n", "estimator", "lambda_rule", "scaling", "lambda", "status", "trials", "failed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for m in metric_names(levels) {
        c.push(format!("{m}_mean"));
        c.push(format!("{m}_se"));
    }
    c
}

/// Per-trial values in `metric_names` order.
fn trial_values(rec: &TrialRecord, entry: &EstimatorEntry, levels: &[f64]) -> Vec<f64> {
    let (m, t) = match (entry.temperature_scaling, &rec.scaled, rec.temperature) {
        (true, Some(s), Some(t)) => (s, t),
        _ => (&rec.metrics, 1.0),
    };
    let mut v = vec![m.gen_error, m.gen_loss, m.ece];
    v.extend(levels.iter().map(|&l| m.calibration_at(l).unwrap_or(f64::NAN)));
    // overlaps of the rescaled score theta / T
    v.push(rec.m_emp / t);
    v.push(rec.q_emp / (t * t));
    v.push(if entry.temperature_scaling { t } else { f64::NAN });
    v
}

/// One row per (grid point, estimator), aggregated over trials.
pub fn run_mc_sweep(spec: &SweepSpec) -> Result<Table, CliError> {
    if !matches!(spec.axis, Axis::POverN | Axis::Lambda) {
        return usage("mc-sweep supports the p_over_n and lambda axes");
    }
    let ctxs = contexts(spec);
    Ok(run_mc_sweep_with(spec, &ctxs, &GampOptions::default()))
}

pub fn run_mc_sweep_with(spec: &SweepSpec, ctxs: &[PointContext], opts: &GampOptions) -> Table {
    let cols = mc_columns(&spec.levels);
    let width = cols.len();
    let names = metric_names(&spec.levels);
    let mut table = Table::new("mc-sweep", cols);
    let scaling = spec.estimators.iter().any(|e| e.temperature_scaling);
    for (i, &x) in spec.grid.iter().enumerate() {
        let ctx = &ctxs[i];
        let pn = ctx.p_over_n;
        // lambda per entry; failures keep their slot
        let lambdas: Vec<Result<f64, String>> = spec
            .estimators
            .iter()
            .map(|e| match (spec.axis, e.kind) {
                (_, EstimatorKind::Bo) => Ok(0.0),
                (Axis::Lambda, _) => Ok(x),
                _ => ctx.lambda(e.lambda).map(|(l, _)| l),
            })
            .collect();
        let fitted: Vec<(usize, (EstimatorKind, f64))> = spec
            .estimators
            .iter()
            .zip(&lambdas)
            .enumerate()
            .filter_map(|(k, (e, l))| l.as_ref().ok().map(|&l| (k, (e.kind, l))))
            .collect();
        let runs = if fitted.is_empty() {
            Vec::new()
        } else {
            let list: Vec<(EstimatorKind, f64)> = fitted.iter().map(|(_, p)| *p).collect();
            let seed = spec.mc.seed + (i * spec.mc.trials) as u64;
            run_trials(&data_spec(spec, pn, seed), &list, &spec.levels, spec.mc.trials, scaling, opts)
        };
        for (k, entry) in spec.estimators.iter().enumerate() {
            let rule = if spec.axis == Axis::Lambda && entry.kind != EstimatorKind::Bo { "axis".to_string() } else { entry.lambda.label() };
            let mut r: Vec<Cell> =
                vec![spec.axis.name().into(), x.into(), pn.into(), entry.kind.name().into(), rule.into(), entry.scaling_label().into()];
            let lambda = match &lambdas[k] {
                Ok(l) => *l,
                Err(e) => {
                    r.extend([Cell::Empty, format!("error: {e}").into(), Cell::Int(0), Cell::Int(spec.mc.trials as u64)]);
                    r.resize(width, Cell::Empty);
                    table.push(r);
                    continue;
                }
            };
            let slot = fitted.iter().position(|(j, _)| *j == k).expect("fitted entry");
            let mut per_trial: Vec<Vec<f64>> = Vec::new();
            let mut first_err = None;
            for run in &runs {
                match run {
                    Ok(recs) => per_trial.push(trial_values(&recs[slot], entry, &spec.levels)),
                    Err(e) => {
                        first_err.get_or_insert_with(|| e.to_string());
                    }
                }
            }
            let failed = runs.len() - per_trial.len();
            let status = match (&first_err, per_trial.is_empty()) {
                (None, _) => "ok".to_string(),
                (Some(e), true) => format!("error: {e}"),
                (Some(e), false) => format!("partial: {failed} of {} trials failed ({e})", runs.len()),
            };
            r.push(Cell::opt((entry.kind != EstimatorKind::Bo).then_some(lambda)));
            r.push(status.into());
            r.push(Cell::Int(per_trial.len() as u64));
            r.push(Cell::Int(failed as u64));
            for j in 0..names.len() {
                let s: MeanSe = mean_se(per_trial.iter().map(|v| v[j]));
                if s.count == 0 {
                    r.extend([Cell::Empty, Cell::Empty]);
                } else {
                    r.extend([Cell::Num(s.mean), Cell::opt(s.se)]);
                }
            }
            table.push(r);
        }
    }
    table
}
