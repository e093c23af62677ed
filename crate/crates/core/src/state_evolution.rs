//! Self-consistent overlap equations for the four estimators, the prior
//! potential and the free entropy used for evidence maximization.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::scalar_kernel::{erm_channel, gauss_logit_channel, smoothed, EstimatorKind};
use crate::spectra::{tau_add, Activation, EffectiveNoise, SpectralModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions<T> {
    pub damping: T,
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Scalar> Default for SolverOptions<T> {
    fn default() -> Self {
        SolverOptions { damping: T::c(0.5), tol: T::c(1e-9), max_iter: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig<T> {
    /// n / p
    pub alpha: T,
    /// p / d
    pub gamma: T,
    pub tau0_sq: T,
    pub lambda: T,
    pub teacher_norm_sq: T,
    pub activation: Activation,
    pub estimator: EstimatorKind,
    pub solver: SolverOptions<T>,
}

impl<T: Scalar> ScenarioConfig<T> {
    /// Scenario at sample ratio n/d and overparametrization p/n.
    pub fn from_ratios(n_over_d: T, p_over_n: T, tau0: T, lambda: T, estimator: EstimatorKind) -> Self {
        ScenarioConfig {
            alpha: T::one() / p_over_n,
            gamma: p_over_n * n_over_d,
            tau0_sq: tau0 * tau0,
            lambda,
            teacher_norm_sq: T::one(),
            activation: Activation::Erf,
            estimator,
            solver: SolverOptions::default(),
        }
    }

    pub fn with_estimator(&self, estimator: EstimatorKind) -> Self {
        ScenarioConfig { estimator, ..self.clone() }
    }

    pub fn with_lambda(&self, lambda: T) -> Self {
        ScenarioConfig { lambda, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= T::zero()) || !self.alpha.is_finite() {
            return invalid(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.gamma > T::zero()) || !self.gamma.is_finite() {
            return invalid(format!("gamma must be > 0, got {}", self.gamma));
        }
        if !(self.tau0_sq >= T::zero()) {
            return invalid("tau0^2 must be >= 0");
        }
        if !(self.teacher_norm_sq > T::zero()) {
            return invalid("teacher norm must be > 0");
        }
        if self.estimator != EstimatorKind::Bo && !(self.lambda > T::zero()) {
            return invalid(format!("lambda must be > 0 for {}, got {}", self.estimator.name(), self.lambda));
        }
        if !(self.solver.damping >= T::zero() && self.solver.damping < T::one()) {
            return invalid("damping must lie in [0, 1)");
        }
        self.activation.validate()
    }

    pub fn spectral_model(&self) -> Result<SpectralModel<T>> {
        SpectralModel::from_activation(&self.activation, self.gamma)
    }
}

/// Sufficient statistics at a fixed point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlaps<T> {
    pub m: T,
    pub q: T,
    pub v: T,
    pub m_hat: T,
    pub q_hat: T,
    pub v_hat: T,
    /// Teacher self-overlap in feature space.
    pub rho: T,
    pub noise: EffectiveNoise<T>,
    pub hat_tau_sq: T,
}

impl<T: Scalar> Overlaps<T> {
    /// rho - m^2 / q
    pub fn v_star(&self) -> T {
        if self.q > T::zero() {
            (self.rho - self.m * self.m / self.q).max(T::zero())
        } else {
            self.rho
        }
    }

    /// m / q, taken as 0 when q = 0.
    pub fn ratio(&self) -> T {
        if self.q > T::zero() {
            self.m / self.q
        } else {
            T::zero()
        }
    }
}

/// Fixed-point diagnostics returned with the overlaps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPoint<T> {
    pub overlaps: Overlaps<T>,
    pub iterations: usize,
    pub residual: T,
}

/// Everything the iteration needs that does not change between sweeps.
#[derive(Debug, Clone)]
pub struct Problem<'a, T> {
    pub cfg: &'a ScenarioConfig<T>,
    pub spec: &'a SpectralModel<T>,
    pub noise: EffectiveNoise<T>,
    pub rho: T,
}

impl<'a, T: Scalar> Problem<'a, T> {
    pub fn new(cfg: &'a ScenarioConfig<T>, spec: &'a SpectralModel<T>) -> Result<Self> {
        cfg.validate()?;
        let t = tau_add(spec)?;
        let noise = EffectiveNoise::new(cfg.tau0_sq, t, cfg.teacher_norm_sq);
        let rho = cfg.teacher_norm_sq * (T::one() - t);
        Ok(Problem { cfg, spec, noise, rho })
    }

    fn blank(&self, m: T, q: T, v: T) -> Overlaps<T> {
        Overlaps {
            m,
            q,
            v,
            m_hat: T::zero(),
            q_hat: T::zero(),
            v_hat: T::zero(),
            rho: self.rho,
            noise: self.noise,
            hat_tau_sq: T::zero(),
        }
    }
}

// Prior precision at spectral point x; None means infinite.
#[inline]
fn prior_precision<T: Scalar>(kind: EstimatorKind, x: T, spec: &SpectralModel<T>, lambda: T, rho_theta: T) -> Option<T> {
    match kind {
        EstimatorKind::Bo => {
            let c = spec.gamma * rho_theta * spec.kappa1 * spec.kappa1 * x;
            if c > T::zero() {
                let w = spec.omega(x);
                Some(w * w / c)
            } else {
                None
            }
        }
        _ => Some(lambda),
    }
}

/// Prior potential Psi_w(m_hat, q_hat, v_hat).
pub fn psi_w<T: Scalar>(
    hats: (T, T, T),
    estimator: EstimatorKind,
    spec: &SpectralModel<T>,
    lambda: T,
    teacher_norm_sq: T,
) -> Result<T> {
    let (mh, qh, vh) = hats;
    let k1sq = spec.kappa1 * spec.kappa1;
    let half = T::c(0.5);
    let mut acc = T::zero();
    let mut bad = false;
    let mut add = |x: T, w: T| {
        let Some(pi) = prior_precision(estimator, x, spec, lambda, teacher_norm_sq) else { return };
        let om = spec.omega(x);
        let d = pi + vh * om;
        if !(d > T::zero()) {
            bad = true;
            return;
        }
        let c = teacher_norm_sq * k1sq * x;
        acc += w * half * ((mh * mh * c + qh * om) / d - (vh * om / pi).ln_1p());
    };
    if spec.atom() > T::zero() {
        add(T::zero(), spec.atom());
    }
    for (x, w) in spec.bulk() {
        add(x, w);
    }
    if bad {
        return Err(Error::Unphysical("nonpositive prior denominator".into()));
    }
    Ok(acc)
}

/// Partial derivatives of Psi_w in (m_hat, q_hat, v_hat).
pub fn psi_w_grad<T: Scalar>(
    hats: (T, T, T),
    estimator: EstimatorKind,
    spec: &SpectralModel<T>,
    lambda: T,
    teacher_norm_sq: T,
) -> Result<(T, T, T)> {
    let (mh, qh, vh) = hats;
    let k1sq = spec.kappa1 * spec.kappa1;
    let half = T::c(0.5);
    let (mut dm, mut dq, mut dv) = (T::zero(), T::zero(), T::zero());
    let mut bad = false;
    let mut add = |x: T, w: T| {
        let Some(pi) = prior_precision(estimator, x, spec, lambda, teacher_norm_sq) else { return };
        let om = spec.omega(x);
        let d = pi + vh * om;
        if !(d > T::zero()) {
            bad = true;
            return;
        }
        let c = teacher_norm_sq * k1sq * x;
        let id = T::one() / d;
        dm += w * mh * c * id;
        dq += w * half * om * id;
        dv -= w * half * om * id * ((mh * mh * c + qh * om) * id + T::one());
    };
    if spec.atom() > T::zero() {
        add(T::zero(), spec.atom());
    }
    for (x, w) in spec.bulk() {
        add(x, w);
    }
    if bad {
        return Err(Error::Unphysical("nonpositive prior denominator".into()));
    }
    Ok((dm, dq, dv))
}

/// Hat variables from (m, q, v): the channel half of one sweep.
pub fn channel_hats<T: Scalar>(prob: &Problem<'_, T>, m: T, q: T, v: T) -> Result<(T, T, T)> {
    if !(q >= T::zero()) || !(v > T::zero()) {
        return Err(Error::Unphysical(format!("q = {q}, v = {v}")));
    }
    let cfg = prob.cfg;
    let ratio = if q > T::zero() { m / q } else { T::zero() };
    let vstar = (prob.rho - m * ratio).max(T::zero());
    let w0 = vstar + prob.noise.total();
    let sd = q.sqrt();
    let rules = T::rules();
    let (mut mh, mut qh, mut vh) = (T::zero(), T::zero(), T::zero());
    for (&z, &w) in rules.gh_field.z.iter().zip(&rules.gh_field.w) {
        let xi = sd * z;
        let z0 = smoothed(ratio * xi, w0);
        for (y, zy, dzy) in [(T::one(), z0.value, z0.d1), (-T::one(), T::one() - z0.value, -z0.d1)] {
            let ch = match cfg.estimator {
                EstimatorKind::Erm | EstimatorKind::Lap => erm_channel(y, xi, v),
                EstimatorKind::Eb => gauss_logit_channel(y, xi, v, T::one()),
                EstimatorKind::Bo => gauss_logit_channel(y, xi, v + prob.noise.total(), T::one()),
            };
            mh += w * dzy * ch.value;
            qh += w * zy * ch.value * ch.value;
            vh -= w * zy * ch.d_omega;
        }
    }
    let a = cfg.alpha;
    Ok((a * cfg.gamma.sqrt() * mh, a * qh, a * vh))
}

/// (m, q, v) from the hat variables: the prior half of one sweep.
pub fn prior_overlaps<T: Scalar>(prob: &Problem<'_, T>, hats: (T, T, T)) -> Result<(T, T, T)> {
    let cfg = prob.cfg;
    let (dm, dq, dv) = psi_w_grad(hats, cfg.estimator, prob.spec, cfg.lambda, cfg.teacher_norm_sq)?;
    let v = dq + dq;
    let q = -(dv + dv) - v;
    Ok((cfg.gamma.sqrt() * dm, q, v))
}

/// One damped sweep from `current`.
pub fn se_step<T: Scalar>(current: &Overlaps<T>, cfg: &ScenarioConfig<T>, spec: &SpectralModel<T>) -> Result<Overlaps<T>> {
    let prob = Problem::new(cfg, spec)?;
    step(&prob, current, cfg.solver.damping)
}

fn step<T: Scalar>(prob: &Problem<'_, T>, cur: &Overlaps<T>, eta: T) -> Result<Overlaps<T>> {
    let hats = channel_hats(prob, cur.m, cur.q, cur.v)?;
    let (m, q, v) = prior_overlaps(prob, hats)?;
    let mix = |new: T, old: T| (T::one() - eta) * new + eta * old;
    let mut out = prob.blank(mix(m, cur.m), mix(q, cur.q), mix(v, cur.v));
    out.m_hat = hats.0;
    out.q_hat = hats.1;
    out.v_hat = hats.2;
    if ![out.m, out.q, out.v, out.m_hat, out.q_hat, out.v_hat].iter().all(|x| x.is_finite()) || out.v <= T::zero() || out.q < T::zero() {
        return Err(Error::Unphysical(format!(
            "iteration left the physical region: m={} q={} v={} hats=({}, {}, {})",
            out.m, out.q, out.v, out.m_hat, out.q_hat, out.v_hat
        )));
    }
    Ok(out)
}

fn rel_change<T: Scalar>(a: &Overlaps<T>, b: &Overlaps<T>) -> T {
    let floor = T::c(1e-12);
    let r = |x: T, y: T| (x - y).abs() / x.abs().max(y.abs()).max(floor);
    r(a.m, b.m).max(r(a.q, b.q)).max(r(a.v, b.v))
}

pub fn initial_overlaps<T: Scalar>(prob: &Problem<'_, T>) -> Overlaps<T> {
    let mut o = prob.blank(T::c(0.1), T::c(0.5), T::one());
    if o.m * o.m > prob.rho * o.q {
        o.m = (prob.rho * o.q).sqrt() * T::c(0.5);
    }
    o
}

/// Iterates to the fixed point from the default initialization.
pub fn solve_fixed_point<T: Scalar>(cfg: &ScenarioConfig<T>, spec: &SpectralModel<T>) -> Result<Overlaps<T>> {
    Ok(solve_from(cfg, spec, None)?.overlaps)
}

/// Iterates to the fixed point, optionally warm-started.
pub fn solve_from<T: Scalar>(
    cfg: &ScenarioConfig<T>,
    spec: &SpectralModel<T>,
    init: Option<&Overlaps<T>>,
) -> Result<FixedPoint<T>> {
    let prob = Problem::new(cfg, spec)?;
    let mut cur = match init {
        Some(o) if o.q > T::zero() && o.v > T::zero() && o.m.is_finite() => {
            let mut o = *o;
            o.rho = prob.rho;
            o.noise = prob.noise;
            if o.m * o.m > o.rho * o.q {
                o.m = o.m.signum() * (o.rho * o.q).sqrt();
            }
            o
        }
        _ => initial_overlaps(&prob),
    };
    let mut eta = cfg.solver.damping;
    let hi_damp = T::c(0.85).max(eta);
    let mut signs: [i8; 3] = [0; 3];
    let mut residual = T::infinity();
    let mut it = 0;
    while it < cfg.solver.max_iter {
        it += 1;
        let next = step(&prob, &cur, eta)?;
        residual = rel_change(&next, &cur);
        let dq = next.q - cur.q;
        signs = [signs[1], signs[2], if dq > T::zero() { 1 } else if dq < T::zero() { -1 } else { 0 }];
        if eta < hi_damp && signs[0] != 0 && signs[0] == -signs[1] && signs[1] == -signs[2] {
            eta = hi_damp;
        }
        cur = next;
        if cur.q > T::c(1e8) {
            return Err(Error::Interpolating { q: cur.q.f64() });
        }
        if residual < cfg.solver.tol {
            return finish(&prob, cur, it, residual);
        }
        // slow spirals near the interpolation threshold: polish with Newton
        if it % NEWTON_EVERY == 0 {
            if let Some((o, evals)) = newton_polish(&prob, &cur) {
                return finish(&prob, o, it + evals, cfg.solver.tol);
            }
        }
    }
    Err(Error::NoConvergence { iterations: cfg.solver.max_iter, residual: residual.f64() })
}

const NEWTON_EVERY: usize = 200;

fn finish<T: Scalar>(prob: &Problem<'_, T>, mut cur: Overlaps<T>, iterations: usize, residual: T) -> Result<FixedPoint<T>> {
    // hats consistent with the returned primal variables
    let hats = channel_hats(prob, cur.m, cur.q, cur.v)?;
    cur.m_hat = hats.0;
    cur.q_hat = hats.1;
    cur.v_hat = hats.2;
    cur.hat_tau_sq = hat_tau(prob.cfg.estimator, &cur, prob.spec, prob.cfg.lambda)?;
    Ok(FixedPoint { overlaps: cur, iterations, residual })
}

// Undamped sweep in the coordinates (m, ln q, ln v).
fn sweep_coords<T: Scalar>(prob: &Problem<'_, T>, u: [T; 3]) -> Option<[T; 3]> {
    let o = prob.blank(u[0], u[1].exp(), u[2].exp());
    let n = step(prob, &o, T::zero()).ok()?;
    if !(n.q > T::zero()) {
        return None;
    }
    Some([n.m, n.q.ln(), n.v.ln()])
}

fn solve3<T: Scalar>(a: [[T; 3]; 3], b: [T; 3]) -> Option<[T; 3]> {
    let det = |m: &[[T; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&a);
    if !(d.abs() > T::zero()) || !d.is_finite() {
        return None;
    }
    let mut x = [T::zero(); 3];
    for (k, xk) in x.iter_mut().enumerate() {
        let mut m = a;
        for r in 0..3 {
            m[r][k] = b[r];
        }
        *xk = det(&m) / d;
    }
    Some(x)
}

/// Newton iteration on u - F(u); returns the fixed point and the number of sweeps spent.
fn newton_polish<T: Scalar>(prob: &Problem<'_, T>, start: &Overlaps<T>) -> Option<(Overlaps<T>, usize)> {
    let tol = prob.cfg.solver.tol;
    let mut u = [start.m, start.q.ln(), start.v.ln()];
    let mut evals = 0;
    let resid = |u: &[T; 3], f: &[T; 3]| [f[0] - u[0], f[1] - u[1], f[2] - u[2]];
    let norm = |r: &[T; 3], u: &[T; 3]| {
        let scale_m = u[0].abs().max(T::c(1e-3));
        (r[0] / scale_m).abs().max(r[1].abs()).max(r[2].abs())
    };
    let mut f = sweep_coords(prob, u)?;
    evals += 1;
    let mut r = resid(&u, &f);
    for _ in 0..30 {
        if norm(&r, &u) < tol {
            let o = prob.blank(f[0], f[1].exp(), f[2].exp());
            return Some((o, evals));
        }
        let mut jac = [[T::zero(); 3]; 3];
        for k in 0..3 {
            let h = T::c(1e-6) * (T::one() + u[k].abs());
            let mut up = u;
            up[k] += h;
            let fp = sweep_coords(prob, up)?;
            evals += 1;
            let rp = resid(&up, &fp);
            for i in 0..3 {
                jac[i][k] = (rp[i] - r[i]) / h;
            }
        }
        let du = solve3(jac, [-r[0], -r[1], -r[2]])?;
        let base = norm(&r, &u);
        let mut t = T::one();
        let mut accepted = false;
        for _ in 0..20 {
            let un = [u[0] + t * du[0], u[1] + t * du[1], u[2] + t * du[2]];
            if let Some(fnew) = sweep_coords(prob, un) {
                evals += 1;
                let rn = resid(&un, &fnew);
                if norm(&rn, &un) < base {
                    u = un;
                    f = fnew;
                    r = rn;
                    accepted = true;
                    break;
                }
            }
            t = t * T::c(0.5);
        }
        if !accepted {
            return None;
        }
    }
    None
}

/// Solve at a small lambda by geometric continuation from 1e-1.
pub fn solve_homotopy<T: Scalar>(cfg: &ScenarioConfig<T>, spec: &SpectralModel<T>, init: Option<&Overlaps<T>>) -> Result<FixedPoint<T>> {
    let target = cfg.lambda;
    if cfg.estimator != EstimatorKind::Bo && !(target > T::zero()) {
        return invalid(format!("lambda must be > 0, got {target}"));
    }
    let mut lam = T::c(0.1);
    let mut warm = init.copied();
    if target >= lam || cfg.estimator == EstimatorKind::Bo {
        return solve_from(cfg, spec, warm.as_ref());
    }
    let factor = T::c(10f64.powf(-0.25));
    loop {
        let c = cfg.with_lambda(lam);
        let fp = solve_from(&c, spec, warm.as_ref())?;
        if lam == target {
            return Ok(fp);
        }
        warm = Some(fp.overlaps);
        lam = (lam * factor).max(target);
    }
}

/// Prediction noise variance of an estimator.
pub fn hat_tau<T: Scalar>(estimator: EstimatorKind, overlaps: &Overlaps<T>, spec: &SpectralModel<T>, lambda: T) -> Result<T> {
    let t = match estimator {
        EstimatorKind::Erm => T::zero(),
        EstimatorKind::Lap => {
            let vh = overlaps.v_hat;
            spec.integrate(|x| {
                let om = spec.omega(x);
                om / (lambda + vh * om)
            })
        }
        EstimatorKind::Eb => overlaps.v,
        EstimatorKind::Bo => overlaps.v + overlaps.noise.total(),
    };
    if !(t >= T::zero()) {
        return Err(Error::Unphysical(format!("negative prediction noise {t}")));
    }
    Ok(t)
}

/// Channel part of the free entropy: E over the field of sum_y Z0 log Z_g.
pub fn psi_y<T: Scalar>(prob: &Problem<'_, T>, m: T, q: T, v: T) -> T {
    let ratio = if q > T::zero() { m / q } else { T::zero() };
    let vstar = (prob.rho - m * ratio).max(T::zero());
    let w0 = vstar + prob.noise.total();
    let sd = q.sqrt();
    let rules = T::rules();
    let mut acc = T::zero();
    for (&z, &w) in rules.gh_field.z.iter().zip(&rules.gh_field.w) {
        let xi = sd * z;
        let z0 = smoothed(ratio * xi, w0).value;
        for (y, zy) in [(T::one(), z0), (-T::one(), T::one() - z0)] {
            let lz = match prob.cfg.estimator {
                EstimatorKind::Erm | EstimatorKind::Lap => erm_channel(y, xi, v).log_partition,
                EstimatorKind::Eb => gauss_logit_channel(y, xi, v, T::one()).log_partition,
                EstimatorKind::Bo => gauss_logit_channel(y, xi, v + prob.noise.total(), T::one()).log_partition,
            };
            acc += w * zy * lz;
        }
    }
    acc
}

/// Replica free entropy per feature at the given overlaps; at the eb fixed
/// point this is the log-evidence density.
pub fn free_entropy<T: Scalar>(cfg: &ScenarioConfig<T>, o: &Overlaps<T>, spec: &SpectralModel<T>) -> Result<T> {
    let prob = Problem::new(cfg, spec)?;
    let half = T::c(0.5);
    let pw = psi_w((o.m_hat, o.q_hat, o.v_hat), cfg.estimator, spec, cfg.lambda, cfg.teacher_norm_sq)?;
    let py = psi_y(&prob, o.m, o.q, o.v);
    Ok(-o.m * o.m_hat / cfg.gamma.sqrt() + half * (o.q * o.v_hat - o.q_hat * o.v + o.v_hat * o.v) + pw + cfg.alpha * py)
}

/// Free energy, the negative free entropy.
pub fn free_energy<T: Scalar>(cfg: &ScenarioConfig<T>, o: &Overlaps<T>, spec: &SpectralModel<T>) -> Result<T> {
    Ok(-free_entropy(cfg, o, spec)?)
}
