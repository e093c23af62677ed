//! Generalized approximate message passing on a finite design.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::monte_carlo::data::{rng, Dataset, Stream};
use crate::scalar_kernel::{channel_eval, EstimatorKind};
use crate::spectra::{tau_add, ActivationMoments, EffectiveNoise, SpectralModel};

/// Eigenbasis of F F^T / d built from the smaller Gram matrix.
#[derive(Debug, Clone)]
pub struct FeatureBasis {
    pub p: usize,
    pub kappa1: f64,
    pub kappa_star: f64,
    /// Nonzero eigenvalues of F F^T / d.
    pub eig: Vec<f64>,
    /// p x r orthonormal eigenvectors; the complement has eigenvalue 0.
    pub u: DMatrix<f64>,
}

impl FeatureBasis {
    pub fn new(weights: &DMatrix<f64>, moments: &ActivationMoments) -> Result<Self> {
        let (p, d) = weights.shape();
        let df = d as f64;
        let (eig, u) = if p <= d {
            let g = weights * weights.transpose() / df;
            let se = SymmetricEigen::new(g);
            (se.eigenvalues.iter().map(|x| x.max(0.0)).collect::<Vec<_>>(), se.eigenvectors)
        } else {
            let g = weights.transpose() * weights / df;
            let se = SymmetricEigen::new(g);
            let top = se.eigenvalues.iter().cloned().fold(0.0, f64::max);
            let keep: Vec<usize> = (0..d).filter(|&k| se.eigenvalues[k] > 1e-12 * top.max(1.0)).collect();
            let mut u = DMatrix::zeros(p, keep.len());
            let mut eig = Vec::with_capacity(keep.len());
            for (j, &k) in keep.iter().enumerate() {
                let x = se.eigenvalues[k];
                let col = weights * se.eigenvectors.column(k) / (df * x).sqrt();
                u.set_column(j, &col);
                eig.push(x);
            }
            (eig, u)
        };
        if eig.iter().any(|x| !x.is_finite()) {
            return Err(Error::Linalg("non-finite eigenvalue of the feature Gram matrix".into()));
        }
        Ok(FeatureBasis { p, kappa1: moments.kappa1, kappa_star: moments.kappa_star, eig, u })
    }

    pub fn rank(&self) -> usize {
        self.eig.len()
    }

    /// Population feature covariance eigenvalue (times p) at x.
    pub fn omega(&self, x: f64) -> f64 {
        self.kappa1 * self.kappa1 * x + self.kappa_star * self.kappa_star
    }

    fn coeffs(&self, f: &impl Fn(f64) -> f64) -> (f64, DVector<f64>) {
        let f0 = if self.rank() < self.p { f(0.0) } else { 0.0 };
        (f0, DVector::from_iterator(self.rank(), self.eig.iter().map(|&x| f(x) - f0)))
    }

    /// f(F F^T / d) b
    pub fn apply(&self, f: impl Fn(f64) -> f64, b: &DVector<f64>) -> DVector<f64> {
        let (f0, c) = self.coeffs(&f);
        let t = self.u.tr_mul(b).component_mul(&c);
        b * f0 + &self.u * t
    }

    /// M f(F F^T / d) for a matrix with p columns.
    pub fn apply_rows(&self, f: impl Fn(f64) -> f64, m: &DMatrix<f64>) -> DMatrix<f64> {
        let (f0, c) = self.coeffs(&f);
        let mut t = m * &self.u;
        for (mut col, &ck) in t.column_iter_mut().zip(c.iter()) {
            col *= ck;
        }
        m * f0 + t * self.u.transpose()
    }

    /// Diagonal of f(F F^T / d).
    pub fn diag(&self, f: impl Fn(f64) -> f64) -> DVector<f64> {
        let (f0, c) = self.coeffs(&f);
        DVector::from_fn(self.p, |i, _| f0 + self.u.row(i).iter().zip(c.iter()).map(|(u, c)| u * u * c).sum::<f64>())
    }

    /// r^T f(F F^T / d) r for each row r.
    pub fn quadratic_forms(&self, f: impl Fn(f64) -> f64, rows: &DMatrix<f64>) -> Vec<f64> {
        let (f0, c) = self.coeffs(&f);
        let t = rows * &self.u;
        rows.row_iter()
            .zip(t.row_iter())
            .map(|(r, t)| f0 * r.norm_squared() + t.iter().zip(c.iter()).map(|(t, c)| t * t * c).sum::<f64>())
            .collect()
    }
}

/// Prior variances per eigenmode of the whitened weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SpectralPrior {
    /// Ridge penalty lambda on theta: whitened variance omega / lambda.
    Ridge { lambda: f64 },
    /// Projection of the Gaussian teacher on the features.
    Teacher { teacher_norm_sq: f64, gamma: f64 },
}

impl SpectralPrior {
    fn variance(&self, basis: &FeatureBasis, x: f64) -> f64 {
        match *self {
            SpectralPrior::Ridge { lambda } => basis.omega(x) / lambda,
            SpectralPrior::Teacher { teacher_norm_sq, gamma } => {
                gamma * teacher_norm_sq * basis.kappa1 * basis.kappa1 * x / basis.omega(x)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum PriorDenoiser {
    /// Independent Gaussian prior N(0, 1/lambda).
    Ridge { lambda: f64 },
    /// Dense Gaussian prior N(0, Sigma), solved exactly.
    GaussianCov { sigma: DMatrix<f64> },
    /// Gaussian prior diagonal in the feature eigenbasis; the precision A is
    /// replaced by its mean so the posterior stays diagonal there.
    Spectral { basis: Arc<FeatureBasis>, prior: SpectralPrior },
}

impl PriorDenoiser {
    pub fn ridge(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return invalid(format!("ridge lambda must be > 0, got {lambda}"));
        }
        Ok(PriorDenoiser::Ridge { lambda })
    }

    pub fn gaussian_cov(sigma: DMatrix<f64>) -> Result<Self> {
        if !sigma.is_square() {
            return invalid("covariance must be square");
        }
        let scale = sigma.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
        if (&sigma - sigma.transpose()).iter().any(|v| v.abs() > 1e-10 * scale) {
            return invalid("covariance is not symmetric");
        }
        let low = SymmetricEigen::new(sigma.clone()).eigenvalues.min();
        if low < -1e-10 * scale {
            return invalid(format!("covariance is not positive semidefinite (eigenvalue {low:e})"));
        }
        Ok(PriorDenoiser::GaussianCov { sigma })
    }
}

/// Posterior mean and variance of w under the prior and N(b / A, 1 / A).
pub fn prior_denoise(denoiser: &PriorDenoiser, b: &DVector<f64>, a: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    if b.len() != a.len() {
        return invalid("b and A have different lengths");
    }
    if a.iter().any(|v| !(*v >= 0.0)) {
        return invalid("A must be componentwise >= 0");
    }
    match denoiser {
        PriorDenoiser::Ridge { lambda } => {
            let var = a.map(|a| 1.0 / (lambda + a));
            Ok((b.component_mul(&var), var))
        }
        PriorDenoiser::GaussianCov { sigma } => {
            // (Sigma^-1 + A)^-1 = Sigma - Sigma S (I + S Sigma S)^-1 S Sigma with S = A^{1/2}
            let p = b.len();
            let s = a.map(f64::sqrt);
            let mut m = sigma.clone();
            for i in 0..p {
                for j in 0..p {
                    m[(i, j)] *= s[i] * s[j];
                }
                m[(i, i)] += 1.0;
            }
            let chol = Cholesky::new(m).ok_or_else(|| Error::Linalg("singular prior system".into()))?;
            let sb = sigma * b;
            let t = chol.solve(&sb.component_mul(&s));
            let mean = &sb - sigma * t.component_mul(&s);
            let mut ss = sigma.clone();
            for (i, mut row) in ss.row_iter_mut().enumerate() {
                row *= s[i];
            }
            let l = chol.l();
            let k = l.solve_lower_triangular(&ss).ok_or_else(|| Error::Linalg("singular prior system".into()))?;
            let var = DVector::from_fn(p, |i, _| (sigma[(i, i)] - k.column(i).norm_squared()).max(0.0));
            Ok((mean, var))
        }
        PriorDenoiser::Spectral { basis, prior } => {
            let abar = a.mean();
            let f = |x: f64| {
                let s = prior.variance(basis, x);
                s / (1.0 + abar * s)
            };
            Ok((basis.apply(f, b), basis.diag(f)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GampOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Weight of the new iterate in the damped updates of theta, c and omega.
    pub damping: f64,
    pub init_sd: f64,
    /// Run in whitened feature coordinates with the spectral prior.
    pub whiten: bool,
    /// Disable only for the negative control.
    pub onsager: bool,
    pub seed: u64,
}

impl Default for GampOptions {
    fn default() -> Self {
        GampOptions { max_iter: 3000, tol: 1e-7, damping: 0.7, init_sd: 0.1, whiten: false, onsager: true, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GampStatus {
    Converged,
    MaxIter,
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub residual: f64,
    pub m_emp: f64,
    pub q_emp: f64,
}

/// Iterates of one run; theta_hat and c_hat live in the coordinates of the design passed in.
#[derive(Debug, Clone)]
pub struct GampState {
    pub theta_hat: DVector<f64>,
    pub c_hat: DVector<f64>,
    pub g: DVector<f64>,
    pub d_g: DVector<f64>,
    pub omega: DVector<f64>,
    pub v: DVector<f64>,
    pub a: DVector<f64>,
    pub iteration: usize,
    pub residuals: Vec<f64>,
    pub status: GampStatus,
}

/// Message passing on an explicit design matrix.
pub fn gamp_core(
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    estimator: EstimatorKind,
    noise: &EffectiveNoise<f64>,
    denoiser: &PriorDenoiser,
    opts: &GampOptions,
    mut observe: impl FnMut(&GampState),
) -> Result<GampState> {
    let (n, p) = phi.shape();
    if y.len() != n {
        return invalid("label count does not match the design");
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return invalid("damping must lie in (0, 1]");
    }
    let phi2 = phi.map(|v| v * v);
    let mut r = rng(opts.seed, Stream::Gamp);
    let mut st = GampState {
        theta_hat: DVector::from_fn(p, |_, _| opts.init_sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r)),
        c_hat: DVector::from_element(p, 1.0),
        g: DVector::zeros(n),
        d_g: DVector::zeros(n),
        omega: DVector::zeros(n),
        v: DVector::zeros(n),
        a: DVector::zeros(p),
        iteration: 0,
        residuals: Vec::new(),
        status: GampStatus::MaxIter,
    };
    let eta = opts.damping;
    for it in 0..opts.max_iter {
        st.iteration = it + 1;
        st.v = &phi2 * &st.c_hat;
        let mut omega = phi * &st.theta_hat;
        if opts.onsager {
            omega -= st.v.component_mul(&st.g);
        }
        st.omega = if it == 0 { omega } else { omega * eta + &st.omega * (1.0 - eta) };
        for mu in 0..n {
            let ch = channel_eval(estimator, y[mu], st.omega[mu], st.v[mu], noise)?;
            st.g[mu] = ch.value;
            st.d_g[mu] = ch.d_omega;
        }
        st.a = -(phi2.tr_mul(&st.d_g));
        st.a.apply(|v| *v = v.max(0.0));
        if let PriorDenoiser::Spectral { .. } = denoiser {
            // the spectral posterior uses one precision; b must use the same one
            let abar = st.a.mean();
            st.a.fill(abar);
        }
        let b = phi.tr_mul(&st.g) + st.a.component_mul(&st.theta_hat);
        let (mean, var) = prior_denoise(denoiser, &b, &st.a)?;
        let next = &mean * eta + &st.theta_hat * (1.0 - eta);
        let res = (&next - &st.theta_hat).norm() / st.theta_hat.norm().max(1e-300);
        st.c_hat = var * eta + &st.c_hat * (1.0 - eta);
        st.theta_hat = next;
        st.residuals.push(res);
        observe(&st);
        if !res.is_finite() || res > 1e6 || st.theta_hat.iter().any(|v| !v.is_finite()) {
            st.status = GampStatus::Diverged;
            return Ok(st);
        }
        if res < opts.tol {
            st.status = GampStatus::Converged;
            return Ok(st);
        }
    }
    Ok(st)
}

/// Result of a run on a dataset, mapped back to feature coordinates.
#[derive(Debug, Clone)]
pub struct GampRun {
    pub estimator: EstimatorKind,
    pub theta_hat: DVector<f64>,
    /// Marginal variances of theta.
    pub c_hat: DVector<f64>,
    pub trace: Vec<TraceRow>,
    pub status: GampStatus,
    pub iterations: usize,
    basis: Option<(Arc<FeatureBasis>, SpectralPrior, f64)>,
}

impl GampRun {
    /// Predictive variance phi^T Cov(theta) phi for each row.
    pub fn predictive_variance(&self, rows: &DMatrix<f64>) -> Vec<f64> {
        match &self.basis {
            Some((basis, prior, abar)) => basis.quadratic_forms(
                |x| {
                    let s = prior.variance(basis, x);
                    s / (1.0 + abar * s) / basis.omega(x)
                },
                rows,
            ),
            None => rows.row_iter().map(|r| r.iter().zip(self.c_hat.iter()).map(|(v, c)| v * v * c).sum()).collect(),
        }
    }
}

/// Empirical overlaps of theta with the population feature covariance.
pub struct OverlapProbe<'a> {
    pub weights: &'a DMatrix<f64>,
    pub theta_star: &'a DVector<f64>,
    pub kappa1: f64,
    pub kappa_star: f64,
}

impl OverlapProbe<'_> {
    pub fn from_dataset(ds: &Dataset) -> OverlapProbe<'_> {
        OverlapProbe { weights: &ds.weights, theta_star: &ds.theta_star, kappa1: ds.moments.kappa1, kappa_star: ds.moments.kappa_star }
    }

    /// (m, q) = (cov of student and teacher fields, student field variance).
    pub fn overlaps(&self, theta: &DVector<f64>) -> (f64, f64) {
        let (p, d) = self.weights.shape();
        let ft = self.weights.tr_mul(theta);
        let m = self.kappa1 * ft.dot(self.theta_star) / (d as f64 * (p as f64).sqrt());
        let q = (self.kappa1 * self.kappa1 * ft.norm_squared() / d as f64 + self.kappa_star * self.kappa_star * theta.norm_squared()) / p as f64;
        (m, q)
    }
}

/// Channel noise of the Bayes-optimal estimator for this dataset.
pub fn dataset_noise(ds: &Dataset) -> Result<EffectiveNoise<f64>> {
    let spec = SpectralModel::marchenko_pastur(ds.moments, ds.p as f64 / ds.spec.d as f64)?;
    Ok(EffectiveNoise::new(ds.spec.tau0_sq, tau_add(&spec)?, ds.spec.teacher_norm_sq))
}

/// GAMP for erm, eb or bo on the training split.
pub fn run_gamp(ds: &Dataset, estimator: EstimatorKind, lambda: f64, opts: &GampOptions) -> Result<GampRun> {
    let phi = ds.train.phi.as_ref().ok_or_else(|| Error::InvalidInput("training features missing".into()))?;
    let noise = dataset_noise(ds)?;
    let probe = OverlapProbe::from_dataset(ds);
    if estimator == EstimatorKind::Lap {
        return invalid("the Laplace estimator is built from the erm solution, not from GAMP");
    }
    let mut trace = Vec::new();
    if opts.whiten || estimator == EstimatorKind::Bo {
        let basis = Arc::new(FeatureBasis::new(&ds.weights, &ds.moments)?);
        let prior = match estimator {
            EstimatorKind::Bo => SpectralPrior::Teacher { teacher_norm_sq: ds.spec.teacher_norm_sq, gamma: ds.p as f64 / ds.spec.d as f64 },
            _ => {
                if !(lambda > 0.0) {
                    return invalid(format!("lambda must be > 0, got {lambda}"));
                }
                SpectralPrior::Ridge { lambda }
            }
        };
        let whitened = basis.apply_rows(|x| basis.omega(x).powf(-0.5), phi);
        let den = PriorDenoiser::Spectral { basis: basis.clone(), prior };
        let st = gamp_core(&whitened, &ds.train.y, estimator, &noise, &den, opts, |s| {
            let theta = basis.apply(|x| basis.omega(x).powf(-0.5), &s.theta_hat);
            let (m, q) = probe.overlaps(&theta);
            trace.push(TraceRow { iteration: s.iteration, residual: *s.residuals.last().unwrap_or(&f64::NAN), m_emp: m, q_emp: q });
        })?;
        let theta_hat = basis.apply(|x| basis.omega(x).powf(-0.5), &st.theta_hat);
        let abar = st.a.mean();
        let c_hat = basis.diag(|x| {
            let s = prior.variance(&basis, x);
            s / (1.0 + abar * s) / basis.omega(x)
        });
        Ok(GampRun { estimator, theta_hat, c_hat, trace, status: st.status, iterations: st.iteration, basis: Some((basis, prior, abar)) })
    } else {
        let den = PriorDenoiser::ridge(lambda)?;
        let st = gamp_core(phi, &ds.train.y, estimator, &noise, &den, opts, |s| {
            let (m, q) = probe.overlaps(&s.theta_hat);
            trace.push(TraceRow { iteration: s.iteration, residual: *s.residuals.last().unwrap_or(&f64::NAN), m_emp: m, q_emp: q });
        })?;
        Ok(GampRun { estimator, theta_hat: st.theta_hat, c_hat: st.c_hat, trace, status: st.status, iterations: st.iteration, basis: None })
    }
}

/// Trace rows as CSV text.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("iteration,residual,m_emp,q_emp\n");
    for r in trace {
        s.push_str(&format!("{},{:e},{:e},{:e}\n", r.iteration, r.residual, r.m_emp, r.q_emp));
    }
    s
}
