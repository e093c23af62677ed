//! Single GAMP run on a synthetic dataset, with its iteration trace.

use std::str::FromStr;

use rfcal::gamp::{run_gamp, GampOptions, GampRun, GampStatus};
use rfcal::monte_carlo::erm::train_erm;
use rfcal::monte_carlo::generate_dataset;
use rfcal::EstimatorKind;

use crate::config::SweepSpec;
use crate::error::CliError;
use crate::mc::data_spec;
use crate::output::{Cell, Table};

#[derive(Debug, Clone)]
pub struct GampReport {
    pub run: GampRun,
    pub trace: Table,
    /// ||theta_gamp - theta_newton|| / ||theta_newton||, erm only.
    pub newton_distance: Option<f64>,
}

/// Runs at the scenario's p/n with the MC dimensions.
pub fn run(spec: &SweepSpec) -> Result<GampReport, CliError> {
    let g = &spec.gamp;
    let est = EstimatorKind::from_str(&g.estimator)?;
    let ds_spec = rfcal::monte_carlo::DataSpec { n_val: 0, n_test: 0, ..data_spec(spec, spec.scenario.p_over_n, spec.mc.seed) };
    let ds = generate_dataset(&ds_spec)?;
    let opts = GampOptions { max_iter: g.max_iter, tol: g.tol, damping: g.damping, whiten: g.whiten, seed: spec.mc.seed, ..Default::default() };
    let run = run_gamp(&ds, est, g.lambda, &opts)?;
    let newton_distance = if est == EstimatorKind::Erm {
        let m = train_erm(&ds, g.lambda)?;
        Some((&run.theta_hat - &m.theta_hat).norm() / m.theta_hat.norm())
    } else {
        None
    };
    let mut trace = Table::new("gamp-trace", ["iteration", "residual", "m_emp", "q_emp"].iter().map(|s| s.to_string()).collect());
    for r in &run.trace {
        trace.push(vec![Cell::Int(r.iteration as u64), r.residual.into(), r.m_emp.into(), r.q_emp.into()]);
    }
    Ok(GampReport { run, trace, newton_distance })
}

pub fn converged(r: &GampReport) -> bool {
    r.run.status == GampStatus::Converged
}
