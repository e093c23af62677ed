//! Closed-form asymptotic metrics of a converged fixed point.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::scalar_kernel::{log_sigmoid, smoothed, smoothed_sigmoid_inverse};
use crate::state_evolution::Overlaps;

pub const DEFAULT_LEVELS: [f64; 4] = [0.6, 0.75, 0.9, 0.95];

/// Joint law of (oracle confidence, estimator confidence).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointDensityParams<T> {
    pub sigma_cov: [[T; 2]; 2],
    pub noise_a: T,
    pub noise_b: T,
}

impl<T: Scalar> JointDensityParams<T> {
    /// Teacher field against the estimator field.
    pub fn from_overlaps(o: &Overlaps<T>) -> Self {
        JointDensityParams {
            sigma_cov: [[o.rho, o.m], [o.m, o.q]],
            noise_a: o.noise.total(),
            noise_b: o.hat_tau_sq,
        }
    }

    fn det(&self) -> T {
        let s = &self.sigma_cov;
        s[0][0] * s[1][1] - s[0][1] * s[1][0]
    }
}

/// Density of (a, b) = (f*(x), f_hat(x)) on (0,1)^2.
pub fn joint_density<T: Scalar>(a: T, b: T, params: &JointDensityParams<T>) -> Result<T> {
    for (name, p) in [("a", a), ("b", b)] {
        if !(p > T::zero() && p < T::one()) {
            return invalid(format!("{name} = {p} outside (0,1)"));
        }
    }
    let det = params.det();
    if !(det > T::zero()) {
        return Err(Error::Unphysical(format!("covariance determinant {det} is not positive")));
    }
    let u = smoothed_sigmoid_inverse(a, params.noise_a)?;
    let w = smoothed_sigmoid_inverse(b, params.noise_b)?;
    let s = &params.sigma_cov;
    let quad = (s[1][1] * u * u - (s[0][1] + s[1][0]) * u * w + s[0][0] * w * w) / det;
    let g = (-T::c(0.5) * quad).exp() / (T::c(2.0) * T::PI() * det.sqrt());
    let ja = smoothed(u, params.noise_a).d1;
    let jb = smoothed(w, params.noise_b).d1;
    Ok(g / (ja * jb))
}

/// Probability that the sign of the estimator disagrees with the label.
pub fn gen_error<T: Scalar>(o: &Overlaps<T>) -> T {
    let k = if o.q > T::zero() { o.m / o.q.sqrt() } else { T::zero() };
    let w0 = o.v_star() + o.noise.total();
    let r = T::rules();
    let mut acc = T::zero();
    for (&s, &w) in r.half_s.iter().zip(&r.half_w) {
        acc += w * smoothed(-k * s, w0).value;
    }
    acc + acc
}

/// Cross-entropy of the estimator's confidence map on a fresh sample.
pub fn gen_loss<T: Scalar>(o: &Overlaps<T>) -> T {
    let k = if o.q > T::zero() { o.m / o.q.sqrt() } else { T::zero() };
    let sq = o.q.max(T::zero()).sqrt();
    let w0 = o.v_star() + o.noise.total();
    let tau = o.hat_tau_sq;
    T::rules().split_normal(|s| {
        let z0 = smoothed(k * s, w0).value;
        let (lp, lm) = if tau == T::zero() {
            (log_sigmoid(sq * s), log_sigmoid(-sq * s))
        } else {
            let p = smoothed(sq * s, tau).value;
            (p.ln(), (T::one() - p).ln())
        };
        -(z0 * lp + (T::one() - z0) * lm)
    })
}

/// Delta_l = l - E[f* | f_hat = l].
pub fn calibration<T: Scalar>(level: T, o: &Overlaps<T>) -> Result<T> {
    if !(level > T::zero() && level < T::one()) {
        return invalid(format!("level {level} outside (0,1)"));
    }
    let nu = smoothed_sigmoid_inverse(level, o.hat_tau_sq)?;
    Ok(level - smoothed(o.ratio() * nu, o.v_star() + o.noise.total()).value)
}

/// Expected calibration error, integrated over the estimator's local field.
pub fn ece<T: Scalar>(o: &Overlaps<T>) -> T {
    let k = if o.q > T::zero() { o.m / o.q.sqrt() } else { T::zero() };
    let sq = o.q.max(T::zero()).sqrt();
    let w0 = o.v_star() + o.noise.total();
    let tau = o.hat_tau_sq;
    T::rules().split_normal(|s| (smoothed(sq * s, tau).value - smoothed(k * s, w0).value).abs())
}

/// Variance of the Bayes-optimal confidence given f_t = level.
pub fn conditional_variance<T: Scalar>(level: T, o_t: &Overlaps<T>, o_bo: &Overlaps<T>) -> Result<T> {
    let delta = calibration(level, o_t)?;
    let nu = smoothed_sigmoid_inverse(level, o_t.hat_tau_sq)?;
    let mean = o_t.ratio() * nu;
    let var = o_bo.q - if o_t.q > T::zero() { o_t.m * o_t.m / o_t.q } else { T::zero() };
    if var < T::c(-1e-10) {
        return Err(Error::Unphysical(format!("negative conditional variance {var}")));
    }
    let sd = var.max(T::zero()).sqrt();
    let w_bo = (o_bo.rho - o_bo.q).max(T::zero()) + o_bo.noise.total();
    let second = T::rules().gh_field.expect(|z| {
        let s = smoothed(mean + sd * z, w_bo).value;
        s * s
    });
    let c = level - delta;
    let out = second - c * c;
    if out < T::c(-1e-10) {
        return Err(Error::Unphysical(format!("negative conditional variance {out}")));
    }
    Ok(out.max(T::zero()))
}

/// Overlaps of the rescaled score theta / T; the predictive variance scales with it.
pub fn temperature_scale<T: Scalar>(o: &Overlaps<T>, temp: T) -> Result<Overlaps<T>> {
    if !(temp > T::zero()) {
        return invalid(format!("temperature must be > 0, got {temp}"));
    }
    let t2 = temp * temp;
    Ok(Overlaps { m: o.m / temp, q: o.q / t2, hat_tau_sq: o.hat_tau_sq / t2, ..*o })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord<T> {
    pub gen_error: T,
    pub gen_loss: T,
    pub calibration: Vec<(T, T)>,
    pub ece: T,
    pub cond_variance: Vec<(T, T)>,
    pub hat_tau_sq: T,
    pub overlaps: Overlaps<T>,
}

impl<T: Scalar> MetricsRecord<T> {
    pub fn calibration_at(&self, level: T) -> Option<T> {
        self.calibration.iter().find(|(l, _)| *l == level).map(|(_, d)| *d)
    }
}

/// All metrics at the given levels; conditional variances need the bo point.
pub fn metrics_record<T: Scalar>(o: &Overlaps<T>, levels: &[T], bo: Option<&Overlaps<T>>) -> Result<MetricsRecord<T>> {
    let calibration = levels.iter().map(|&l| Ok((l, calibration(l, o)?))).collect::<Result<Vec<_>>>()?;
    let cond_variance = match bo {
        Some(b) => levels.iter().map(|&l| Ok((l, conditional_variance(l, o, b)?))).collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    Ok(MetricsRecord {
        gen_error: gen_error(o),
        gen_loss: gen_loss(o),
        calibration,
        ece: ece(o),
        cond_variance,
        hat_tau_sq: o.hat_tau_sq,
        overlaps: *o,
    })
}
