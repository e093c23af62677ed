//! Acceptance suite: one pass/fail line per criterion.
//!
//! Set RFCAL_ACCEPT_ONLY=1,5,9 to run a subset.

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rfcal::gamp::{run_gamp, GampOptions};
use rfcal::hyperopt::{optimal_temperature, Criterion};
use rfcal::metrics::{calibration, gen_error, joint_density, temperature_scale, JointDensityParams};
use rfcal::monte_carlo::{generate_dataset, laplace_variance, train_erm, DataSpec};
use rfcal::scalar_kernel::quadrature::composite_legendre;
use rfcal::scalar_kernel::{channel_eval, prox_logistic, sigmoid, smoothed};
use rfcal::spectra::{activation_moments, SpectralModel};
use rfcal::state_evolution::{psi_w, psi_w_grad, solve_from, Overlaps, ScenarioConfig};
use rfcal::{Activation, EffectiveNoise, EstimatorKind};
use rfcal_cli::compare::compare;
use rfcal_cli::config::{EstimatorEntry, LambdaRule};
use rfcal_cli::mc::run_mc_sweep_with;
use rfcal_cli::output::{Format, ReadTable};
use rfcal_cli::theory::{contexts, run_theory_sweep_with, solve_entry, PointContext};
use rfcal_cli::{spec_from_str, Overrides, SweepSpec};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn spec(text: &str) -> SweepSpec {
    spec_from_str(text, &Overrides::default()).expect("acceptance config")
}

fn fig1_with(estimators: &str) -> SweepSpec {
    spec(&format!("preset = \"fig1\"\n{estimators}"))
}

const ERM_RULES: &str = "[[estimators]]\nkind = \"erm\"\nlambda = \"error\"\n[[estimators]]\nkind = \"erm\"\nlambda = \"loss\"\n";

fn column(t: &ReadTable, name: &str, rows: impl Iterator<Item = usize>) -> Vec<f64> {
    let k = t.col(name).unwrap_or_else(|| panic!("column {name}"));
    rows.map(|i| t.rows[i][k].parse::<f64>().unwrap_or(f64::NAN)).collect()
}

// 1. Oracle error against an independent 2-D Simpson rule.
fn c1() -> Outcome {
    let o = Overlaps {
        m: 1.0,
        q: 1.0,
        v: 0.0,
        m_hat: 0.0,
        q_hat: 0.0,
        v_hat: 0.0,
        rho: 1.0,
        noise: EffectiveNoise::new(0.25, 0.0, 1.0),
        hat_tau_sq: 0.0,
    };
    let lib: f64 = gen_error(&o);
    // 2 E[sigma(-z - tau0 xi); z > 0]
    let simpson = |a: f64, b: f64, n: usize| -> Vec<(f64, f64)> {
        let h = (b - a) / n as f64;
        (0..=n)
            .map(|k| {
                let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
                (a + k as f64 * h, w * h / 3.0)
            })
            .collect()
    };
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let zs = simpson(0.0, 10.0, 1000);
    let xs = simpson(-10.0, 10.0, 2000);
    let mut acc = 0.0;
    for &(z, wz) in &zs {
        let mut inner = 0.0;
        for &(x, wx) in &xs {
            inner += wx * phi(x) * sigmoid::<f64>(-z - 0.5 * x);
        }
        acc += wz * phi(z) * inner;
    }
    let oracle = 2.0 * acc;
    let pass = (lib - 0.332).abs() <= 3e-3 && (lib - oracle).abs() < 1e-6;
    outcome(pass, format!("E_gen = {lib:.6}, independent quadrature {oracle:.6}"))
}

// 2. Finite-size points against theory.
fn c2() -> Outcome {
    let s = spec(
        "preset = \"fig1-points\"\n[mc]\nd = 200\ntrials = 30\nn_test = 10000\n\
         [[estimators]]\nkind = \"erm\"\nlambda = 1e-2\n[[estimators]]\nkind = \"eb\"\nlambda = 1e-2\n",
    );
    let ctxs = contexts(&s);
    let th = run_theory_sweep_with(&s, &ctxs);
    let mc = run_mc_sweep_with(&s, &ctxs, &GampOptions::default());
    let th = ReadTable::parse(&th.to_string(Format::Csv)).unwrap();
    let mc = ReadTable::parse(&mc.to_string(Format::Csv)).unwrap();
    let cmp = compare(&th, &mc).unwrap();
    let cmp = ReadTable::parse(&cmp.table.to_string(Format::Csv)).unwrap();
    let (mk, zk, sk) = (cmp.col("metric").unwrap(), cmp.col("z").unwrap(), cmp.col("status").unwrap());
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut bad = Vec::new();
    for r in &cmp.rows {
        if r[mk] != "gen_error" && r[mk] != "calibration_0.75" {
            continue;
        }
        checked += 1;
        match r[zk].parse::<f64>() {
            Ok(z) if r[sk] == "ok" => {
                worst = worst.max(z.abs());
                if z.abs() > 3.0 {
                    bad.push(format!("{} {} {} z={z:.2}", r[1], r[2], r[mk]));
                }
            }
            _ => bad.push(format!("{} {} {} missing", r[1], r[2], r[mk])),
        }
    }
    let pass = bad.is_empty() && checked == 16;
    outcome(pass, format!("{checked} comparisons, max |z| = {worst:.2}{}", if bad.is_empty() { String::new() } else { format!("; {}", bad.join(", ")) }))
}

// 3. Nishimori identities at every bo point.
fn c3(grid: &[f64]) -> Outcome {
    let mut worst = [0.0f64; 3];
    let mut failures = 0;
    for &pn in grid {
        let cfg = ScenarioConfig::from_ratios(2.0, pn, 0.5, 0.0, EstimatorKind::Bo);
        let sp = cfg.spectral_model().unwrap();
        match solve_from(&cfg, &sp, None) {
            Ok(fp) => {
                let o = fp.overlaps;
                worst[0] = worst[0].max((o.m - o.q).abs() / o.q);
                worst[1] = worst[1].max((o.v - (o.rho - o.q)).abs() / o.rho);
                for l in [0.6, 0.75, 0.9] {
                    worst[2] = worst[2].max(calibration(l, &o).map(f64::abs).unwrap_or(f64::INFINITY));
                }
            }
            Err(_) => failures += 1,
        }
    }
    let pass = failures == 0 && worst.iter().all(|w| *w < 1e-6);
    outcome(pass, format!("{} points: max |m-q|/q = {:.1e}, |v-(rho-q)|/rho = {:.1e}, |Delta| = {:.1e}", grid.len(), worst[0], worst[1], worst[2]))
}

// 4. Double-descent signatures.
fn c4(fig1: &SweepSpec, ctxs: &[PointContext]) -> Outcome {
    let s = SweepSpec {
        estimators: vec![EstimatorEntry { kind: EstimatorKind::Erm, lambda: LambdaRule::Fixed(1e-6), temperature_scaling: false }],
        ..fig1.clone()
    };
    let t = ReadTable::parse(&run_theory_sweep_with(&s, ctxs).to_string(Format::Csv)).unwrap();
    let n = t.rows.len();
    let err = column(&t, "gen_error", 0..n);
    let cal = column(&t, "calibration_0.75", 0..n);
    if err.iter().chain(&cal).any(|x| !x.is_finite()) {
        return outcome(false, "failed fixed points at lambda = 1e-6");
    }
    let peaks: Vec<usize> = (1..n - 1).filter(|&i| err[i] > err[i - 1] && err[i] > err[i + 1]).collect();
    let Some(&ip) = peaks.iter().max_by(|&&a, &&b| err[a].partial_cmp(&err[b]).unwrap()) else {
        return outcome(false, "no interior maximum of gen_error");
    };
    let ic = (0..n).max_by(|&a, &b| cal[a].partial_cmp(&cal[b]).unwrap()).unwrap();
    let near = ic.abs_diff(ip) <= 1 && (cal[ip] - 0.25).abs() < 0.01;
    // calibration at lambda_error
    let le: Vec<f64> = ctxs.iter().map(|c| c.optimum(Criterion::Error).map(|o| calibration(0.75, &o.overlaps).unwrap()).unwrap_or(f64::NAN)).collect();
    let up = le.windows(2).any(|w| w[1] > w[0] + 1e-6);
    let down = le.windows(2).any(|w| w[1] < w[0] - 1e-6);
    let imax = (0..le.len()).max_by(|&a, &b| le[a].partial_cmp(&le[b]).unwrap()).unwrap();
    let pass = near && up && down && le.iter().all(|x| x.is_finite());
    outcome(
        pass,
        format!(
            "error peak {:.4} at p/n = {}, Delta_0.75 = {:.4} there (max at p/n = {}); Delta_0.75(lambda_error) peaks at p/n = {} (rises: {up}, falls: {down})",
            err[ip], fig1.grid[ip], cal[ip], fig1.grid[ic], fig1.grid[imax]
        ),
    )
}

// 5. eb at lambda_error matches erm.
fn c5(ctxs: &[PointContext]) -> Outcome {
    let eb = EstimatorEntry { kind: EstimatorKind::Eb, lambda: LambdaRule::Optimal(Criterion::Error), temperature_scaling: false };
    let mut worst: f64 = 0.0;
    let mut failed = 0;
    let mut warm = None;
    for c in ctxs {
        let erm = c.optimum(Criterion::Error).map(|o| gen_error(&o.overlaps));
        let s = solve_entry(&eb, c, None, warm.as_ref());
        warm = s.as_ref().ok().map(|s| s.raw);
        match (erm, s) {
            (Ok(a), Ok(b)) => worst = worst.max((a - gen_error(&b.raw)).abs()),
            _ => failed += 1,
        }
    }
    outcome(failed == 0 && worst <= 1e-4, format!("max |E_eb - E_erm| = {worst:.2e} over {} points", ctxs.len()))
}

// 6. Laplace quadratic form against its deterministic equivalent.
fn c6() -> Outcome {
    const SEEDS: u64 = 16;
    let s = spec(&format!("preset = \"fig1\"\n[sweep]\naxis = \"p_over_n\"\ngrid = [0.25, 1.0, 2.0, 4.0]\n{ERM_RULES}"));
    let ctxs = contexts(&s);
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    let mut ok = true;
    for c in &ctxs {
        let mut lambdas = Vec::new();
        for crit in [Criterion::Error, Criterion::Loss] {
            match c.optimum(crit) {
                Ok(o) => lambdas.push(o.lambda),
                Err(e) => {
                    ok = false;
                    lines.push(e);
                }
            }
        }
        lambdas.push(1e-4);
        for lam in lambdas {
            let lap = EstimatorEntry { kind: EstimatorKind::Lap, lambda: LambdaRule::Fixed(lam), temperature_scaling: false };
            let Ok(th) = solve_entry(&lap, c, None, None).map(|s| s.raw.hat_tau_sq) else {
                ok = false;
                continue;
            };
            let mut acc = 0.0;
            for seed in 0..SEEDS {
                let ds = generate_dataset(&DataSpec {
                    d: 256,
                    n_train: 512,
                    n_val: 0,
                    n_test: 2000,
                    gamma: 2.0 * c.p_over_n,
                    tau0_sq: 0.25,
                    activation: Activation::Erf,
                    teacher_norm_sq: 1.0,
                    seed: 7000 + seed,
                })
                .unwrap();
                let m = train_erm(&ds, lam).unwrap();
                let (mut sum, mut k) = (0.0, 0usize);
                ds.for_test_chunks(|_, phi| {
                    let v = laplace_variance(&m, phi).unwrap();
                    sum += v.iter().sum::<f64>();
                    k += v.len();
                });
                acc += sum / k as f64;
            }
            let mcv = acc / SEEDS as f64;
            let rel = mcv / th - 1.0;
            worst = worst.max(rel.abs());
            lines.push(format!("p/n={} lambda={lam:.3e}: {rel:+.4}", c.p_over_n));
        }
    }
    outcome(ok && worst <= 0.02 && lines.len() == 12, format!("max rel. deviation {worst:.4} [{}]", lines.join(", ")))
}

// 7. Temperature scaling at lambda_error and lambda_loss.
fn c7(fig1: &SweepSpec, ctxs: &[PointContext]) -> Outcome {
    let mut worst_cal: f64 = 0.0;
    let mut worst_err: f64 = 0.0;
    let mut count = 0;
    let mut failed = 0;
    for (c, &pn) in ctxs.iter().zip(&fig1.grid) {
        if !(0.5..=5.0).contains(&pn) {
            continue;
        }
        for crit in [Criterion::Error, Criterion::Loss] {
            let res = c.optimum(crit).map_err(|e| e).and_then(|o| {
                let t = optimal_temperature(&o.overlaps).map_err(|e| e.to_string())?;
                let s = temperature_scale(&o.overlaps, t.temperature).map_err(|e| e.to_string())?;
                Ok((calibration(0.75, &s).unwrap(), (gen_error(&s) - gen_error(&o.overlaps)).abs()))
            });
            match res {
                Ok((d, e)) => {
                    worst_cal = worst_cal.max(d.abs());
                    worst_err = worst_err.max(e);
                    count += 1;
                }
                Err(_) => failed += 1,
            }
        }
    }
    let pass = failed == 0 && worst_cal <= 5e-3 && worst_err <= 1e-12;
    outcome(pass, format!("{count} points: max |Delta_0.75| after scaling = {worst_cal:.2e}, max error change = {worst_err:.1e}"))
}

// 8. GAMP for erm against Newton.
fn c8() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let ds = generate_dataset(&DataSpec {
            d: 200,
            n_train: 400,
            n_val: 0,
            n_test: 0,
            gamma: 1.5,
            tau0_sq: 0.25,
            activation: Activation::Erf,
            teacher_norm_sq: 1.0,
            seed,
        })
        .unwrap();
        assert_eq!(ds.p, 300);
        let newton = train_erm(&ds, 0.1).unwrap();
        let run = run_gamp(&ds, EstimatorKind::Erm, 0.1, &GampOptions { seed, ..Default::default() }).unwrap();
        worst = worst.max((&run.theta_hat - &newton.theta_hat).norm() / newton.theta_hat.norm());
    }
    outcome(worst < 1e-3, format!("max relative distance {worst:.2e} over 10 seeds"))
}

// 9. Numerical hygiene.
fn c9() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let cfg = ScenarioConfig::from_ratios(2.0, 1.0, 0.5, 0.1, EstimatorKind::Erm);
    let sp = cfg.spectral_model().unwrap();

    // Psi_w gradient
    let mut w: f64 = 0.0;
    for est in [EstimatorKind::Erm, EstimatorKind::Lap, EstimatorKind::Eb, EstimatorKind::Bo] {
        for h in [(0.3, 0.7, 1.2), (1.5, 2.0, 0.4), (0.05, 0.1, 3.0)] {
            let g = psi_w_grad(h, est, &sp, 0.1, 1.0).unwrap();
            let f = |a: f64, b: f64, c: f64| psi_w((a, b, c), est, &sp, 0.1, 1.0).unwrap();
            let e = 1e-5;
            let fd = [
                (f(h.0 + e, h.1, h.2) - f(h.0 - e, h.1, h.2)) / (2.0 * e),
                (f(h.0, h.1 + e, h.2) - f(h.0, h.1 - e, h.2)) / (2.0 * e),
                (f(h.0, h.1, h.2 + e) - f(h.0, h.1, h.2 - e)) / (2.0 * e),
            ];
            for (a, b) in [g.0, g.1, g.2].iter().zip(fd) {
                w = w.max((a - b).abs() / b.abs().max(1e-3));
            }
        }
    }
    pass &= w < 1e-6;
    notes.push(format!("psi_w grad {w:.1e}"));

    // joint density normalization, in field coordinates
    let mut w: f64 = 0.0;
    let (u, wu) = composite_legendre(-12.0, 12.0, 24, 12);
    for p in [
        JointDensityParams { sigma_cov: [[1.0, 0.4], [0.4, 0.6]], noise_a: 0.25, noise_b: 0.0 },
        JointDensityParams { sigma_cov: [[0.9, 0.3], [0.3, 1.1]], noise_a: 0.4, noise_b: 0.3 },
    ] {
        let mut total = 0.0;
        for (&x, &wx) in u.iter().zip(&wu) {
            let a = smoothed(x, p.noise_a);
            if a.value <= 0.0 || a.value >= 1.0 {
                continue;
            }
            for (&y, &wy) in u.iter().zip(&wu) {
                let b = smoothed(y, p.noise_b);
                if b.value <= 0.0 || b.value >= 1.0 {
                    continue;
                }
                total += wx * wy * joint_density(a.value, b.value, &p).unwrap() * a.d1 * b.d1;
            }
        }
        w = w.max((total - 1.0).abs());
    }
    pass &= w < 1e-6;
    notes.push(format!("density mass {w:.1e}"));

    // channel derivative
    let noise = EffectiveNoise::new(0.25, 0.2, 1.0);
    let mut w: f64 = 0.0;
    for est in [EstimatorKind::Erm, EstimatorKind::Eb, EstimatorKind::Bo] {
        for y in [-1.0, 1.0] {
            for k in 0..41 {
                let omega = -6.0 + 0.3 * k as f64;
                for v in [0.05, 0.3, 1.0, 4.0] {
                    let h = 1e-5;
                    let c = channel_eval::<f64>(est, y, omega, v, &noise).unwrap();
                    let pl = channel_eval::<f64>(est, y, omega + h, v, &noise).unwrap();
                    let mi = channel_eval::<f64>(est, y, omega - h, v, &noise).unwrap();
                    let fd = (pl.value - mi.value) / (2.0 * h);
                    w = w.max((c.d_omega - fd).abs() / fd.abs().max(1e-3));
                }
            }
        }
    }
    pass &= w < 1e-6;
    notes.push(format!("d_omega {w:.1e}"));

    // prox stationarity
    let mut w: f64 = 0.0;
    for y in [-1.0, 1.0] {
        for i in 0..241 {
            let omega = -30.0 + 0.25 * i as f64;
            for j in 0..91 {
                let v = 10f64.powf(-6.0 + 0.1 * j as f64);
                let z = prox_logistic::<f64>(y, omega, v).unwrap();
                let r = z - omega - y * v * sigmoid::<f64>(-y * z);
                w = w.max(r.abs() / (1.0 + z.abs()));
            }
        }
    }
    pass &= w < 1e-12;
    notes.push(format!("prox {w:.1e}"));

    // Marchenko-Pastur integrals against sampled spectra
    let mom = activation_moments(&Activation::Erf).unwrap();
    let mut w: f64 = 0.0;
    for gamma in [0.5, 2.0] {
        let model = SpectralModel::<f64>::marchenko_pastur(mom, gamma).unwrap();
        let d = 1000;
        let ds = generate_dataset(&DataSpec {
            d,
            n_train: 1,
            n_val: 0,
            n_test: 0,
            gamma,
            tau0_sq: 0.0,
            activation: Activation::Erf,
            teacher_norm_sq: 1.0,
            seed: 11,
        })
        .unwrap();
        let g: DMatrix<f64> = &ds.weights * ds.weights.transpose() / d as f64;
        let eig = SymmetricEigen::new(g).eigenvalues;
        let om = |x: f64| model.omega(x);
        let tests: [Box<dyn Fn(f64) -> f64>; 4] =
            [Box::new(|x| x), Box::new(|x| x * x), Box::new(move |x| om(x) / (0.1 + om(x))), Box::new(|x| 1.0 / (1.0 + x))];
        for h in tests.iter() {
            let th = model.integrate(|x| h(x));
            let mc = eig.iter().map(|&x| h(x.max(0.0))).sum::<f64>() / eig.len() as f64;
            w = w.max((mc / th - 1.0).abs());
        }
    }
    pass &= w < 0.01;
    notes.push(format!("MP {w:.1e}"));
    outcome(pass, notes.join(", "))
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("RFCAL_ACCEPT_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |k: u32| only.as_ref().map_or(true, |o| o.contains(&k));
    let limits: [(u32, &str, Option<f64>); 9] = [
        (1, "oracle error", Some(1.0)),
        (2, "MC matches theory", Some(1800.0)),
        (3, "Nishimori identities", Some(60.0)),
        (4, "double-descent signatures", None),
        (5, "eb = erm at lambda_error", None),
        (6, "Hessian deterministic equivalent", Some(600.0)),
        (7, "temperature scaling", None),
        (8, "GAMP = Newton for erm", None),
        (9, "numerical hygiene", Some(120.0)),
    ];
    let fig1 = fig1_with(ERM_RULES);
    let shared = if want(4) || want(5) || want(7) {
        let t0 = Instant::now();
        let c = contexts(&fig1);
        println!("[info] lambda_error and lambda_loss on the {}-point fig1 grid in {:.1} s", fig1.grid.len(), t0.elapsed().as_secs_f64());
        Some(c)
    } else {
        None
    };
    let mut failures = 0;
    for (k, name, limit) in limits {
        if !want(k) {
            continue;
        }
        let t0 = Instant::now();
        let o = match k {
            1 => c1(),
            2 => c2(),
            3 => c3(&fig1.grid),
            4 => c4(&fig1, shared.as_ref().unwrap()),
            5 => c5(shared.as_ref().unwrap()),
            6 => c6(),
            7 => c7(&fig1, shared.as_ref().unwrap()),
            8 => c8(),
            _ => c9(),
        };
        let secs = t0.elapsed().as_secs_f64();
        let in_time = limit.map_or(true, |l| secs < l);
        let pass = o.pass && in_time;
        if !pass {
            failures += 1;
        }
        let budget = limit.map(|l| format!(" / {l:.0} s")).unwrap_or_default();
        println!("[{}] {k}. {name}: {} ({secs:.1} s{budget})", if pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
