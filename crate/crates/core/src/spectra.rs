//! Activation moments, the spectral law of the feature Gram matrix and the
//! mismatch noise of the random-features teacher.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::scalar_kernel::quadrature::QuadratureRule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Activation {
    Erf,
    Tanh,
    Relu,
    Sign,
    Linear,
    /// Piecewise linear through the given knots, constant outside them.
    Tabulated { x: Vec<f64>, y: Vec<f64> },
}

impl Default for Activation {
    fn default() -> Self {
        Activation::Erf
    }
}

impl Activation {
    pub fn eval(&self, z: f64) -> f64 {
        match self {
            Activation::Erf => libm::erf(z),
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Sign => {
                if z > 0.0 {
                    1.0
                } else if z < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => z,
            Activation::Tabulated { x, y } => {
                if z <= x[0] {
                    return y[0];
                }
                let last = x.len() - 1;
                if z >= x[last] {
                    return y[last];
                }
                let k = x.partition_point(|&k| k <= z) - 1;
                let t = (z - x[k]) / (x[k + 1] - x[k]);
                y[k] + t * (y[k + 1] - y[k])
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Activation::Tabulated { x, y } = self {
            if x.len() < 2 || x.len() != y.len() {
                return invalid("tabulated activation needs >= 2 knots with matching values");
            }
            if !x.windows(2).all(|w| w[0] < w[1]) {
                return invalid("tabulated knots must be strictly increasing");
            }
            if x.iter().chain(y).any(|v| !v.is_finite()) {
                return invalid("tabulated activation has non-finite entries");
            }
        }
        Ok(())
    }

    fn breakpoints(&self) -> Vec<f64> {
        let mut b = vec![-12.0, 0.0, 12.0];
        if let Activation::Tabulated { x, .. } = self {
            b.extend(x.iter().copied().filter(|k| k.abs() < 12.0));
        }
        b.sort_by(|a, c| a.partial_cmp(c).unwrap());
        b.dedup();
        b
    }
}

/// Gaussian moments of an activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationMoments {
    pub kappa0: f64,
    pub kappa1: f64,
    pub kappa_star: f64,
}

/// kappa0 = E phi(z), kappa1 = E z phi(z), kappa_star^2 = E phi^2 - kappa0^2 - kappa1^2.
pub fn activation_moments(act: &Activation) -> Result<ActivationMoments> {
    act.validate()?;
    let base = QuadratureRule::gauss_legendre(16);
    let bp = act.breakpoints();
    let (mut e0, mut e1, mut e2) = (0.0, 0.0, 0.0);
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    for w in bp.windows(2) {
        let pieces = ((w[1] - w[0]) / 0.5).ceil().max(1.0) as usize;
        let h = (w[1] - w[0]) / pieces as f64;
        for k in 0..pieces {
            let lo = w[0] + k as f64 * h;
            for (&t, &wt) in base.nodes.iter().zip(&base.weights) {
                let z = lo + 0.5 * h * (t + 1.0);
                let f = act.eval(z);
                let g = 0.5 * h * wt * norm * (-0.5 * z * z).exp();
                e0 += g * f;
                e1 += g * z * f;
                e2 += g * f * f;
            }
        }
    }
    if ![e0, e1, e2].iter().all(|v| v.is_finite()) {
        return invalid("activation has non-finite Gaussian moments");
    }
    let ks2 = (e2 - e0 * e0 - e1 * e1).max(0.0);
    Ok(ActivationMoments { kappa0: e0, kappa1: e1, kappa_star: ks2.sqrt() })
}

/// Teacher label noise and the mismatch noise from the feature map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveNoise<T> {
    pub tau0_sq: T,
    /// Normalized mismatch variance in [0, 1], per unit teacher norm.
    pub tau_add_sq: T,
    pub teacher_norm_sq: T,
}

impl<T: Scalar> EffectiveNoise<T> {
    pub fn new(tau0_sq: T, tau_add_sq: T, teacher_norm_sq: T) -> Self {
        EffectiveNoise { tau0_sq, tau_add_sq, teacher_norm_sq }
    }

    /// Variance smoothing the oracle confidence map.
    #[inline]
    pub fn total(&self) -> T {
        self.tau0_sq + self.teacher_norm_sq * self.tau_add_sq
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SpectralLaw {
    MarchenkoPastur,
    Empirical { eigenvalues: Vec<f64> },
}

/// Activation moments together with the spectral law of F F^T / d, stored
/// as a discrete measure plus an atom at zero.
#[derive(Debug, Clone)]
pub struct SpectralModel<T> {
    pub kappa0: T,
    pub kappa1: T,
    pub kappa_star: T,
    pub gamma: T,
    pub mu: SpectralLaw,
    points: Vec<T>,
    weights: Vec<T>,
    atom: T,
}

const MP_PANELS: usize = 48;
const MP_ORDER: usize = 8;

impl<T: Scalar> SpectralModel<T> {
    pub fn marchenko_pastur(moments: ActivationMoments, gamma: T) -> Result<Self> {
        if !(gamma > T::zero()) || !gamma.is_finite() {
            return invalid(format!("gamma must be positive, got {gamma}"));
        }
        let g = gamma.f64();
        let a = (1.0 - g.sqrt()).powi(2);
        let b = (1.0 + g.sqrt()).powi(2);
        let r = 0.5 * (b - a);
        // x = a + r (1 - cos theta); panels graded towards theta = 0 where x can approach 0
        let base = QuadratureRule::gauss_legendre(MP_ORDER);
        let mut points = Vec::with_capacity(MP_PANELS * MP_ORDER);
        let mut weights = Vec::with_capacity(MP_PANELS * MP_ORDER);
        let pi = std::f64::consts::PI;
        for k in 0..MP_PANELS {
            let lo = pi * (k as f64 / MP_PANELS as f64).powi(4);
            let hi = pi * ((k + 1) as f64 / MP_PANELS as f64).powi(4);
            for (&t, &wt) in base.nodes.iter().zip(&base.weights) {
                let th = lo + 0.5 * (hi - lo) * (t + 1.0);
                let x = a + 2.0 * r * (0.5 * th).sin().powi(2);
                let s = th.sin();
                let w = 0.5 * (hi - lo) * wt * r * r * s * s / (2.0 * pi * g * x);
                points.push(T::c(x));
                weights.push(T::c(w));
            }
        }
        let atom = T::c((1.0 - 1.0 / g).max(0.0));
        Ok(SpectralModel {
            kappa0: T::c(moments.kappa0),
            kappa1: T::c(moments.kappa1),
            kappa_star: T::c(moments.kappa_star),
            gamma,
            mu: SpectralLaw::MarchenkoPastur,
            points,
            weights,
            atom,
        })
    }

    /// Empirical law from eigenvalues of F F^T / d (p of them).
    pub fn empirical(moments: ActivationMoments, gamma: T, eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return invalid("empty eigenvalue list");
        }
        if eigenvalues.iter().any(|x| !x.is_finite() || *x < -1e-8) {
            return invalid("eigenvalues must be finite and nonnegative");
        }
        let max = eigenvalues.iter().cloned().fold(0.0, f64::max);
        let cut = 1e-10 * max.max(1.0);
        let w = 1.0 / eigenvalues.len() as f64;
        let mut points = Vec::new();
        let mut zeros = 0usize;
        for &x in &eigenvalues {
            if x <= cut {
                zeros += 1;
            } else {
                points.push(T::c(x));
            }
        }
        let weights = vec![T::c(w); points.len()];
        Ok(SpectralModel {
            kappa0: T::c(moments.kappa0),
            kappa1: T::c(moments.kappa1),
            kappa_star: T::c(moments.kappa_star),
            gamma,
            mu: SpectralLaw::Empirical { eigenvalues },
            points,
            weights,
            atom: T::c(zeros as f64 * w),
        })
    }

    pub fn from_activation(act: &Activation, gamma: T) -> Result<Self> {
        Self::marchenko_pastur(activation_moments(act)?, gamma)
    }

    #[inline]
    pub fn kappa_star_sq(&self) -> T {
        self.kappa_star * self.kappa_star
    }

    /// Eigenvalue of the feature covariance at spectral point x.
    #[inline]
    pub fn omega(&self, x: T) -> T {
        self.kappa1 * self.kappa1 * x + self.kappa_star_sq()
    }

    pub fn atom(&self) -> T {
        self.atom
    }

    /// Points and weights of the continuous (nonzero) part.
    pub fn bulk(&self) -> impl Iterator<Item = (T, T)> + '_ {
        self.points.iter().copied().zip(self.weights.iter().copied())
    }

    /// Integral of h against the spectral law, atom included.
    pub fn integrate(&self, h: impl Fn(T) -> T) -> T {
        let mut acc = if self.atom > T::zero() { self.atom * h(T::zero()) } else { T::zero() };
        for (x, w) in self.bulk() {
            acc += w * h(x);
        }
        acc
    }
}

pub fn spectral_integrate<T: Scalar>(model: &SpectralModel<T>, h: impl Fn(T) -> T) -> T {
    model.integrate(h)
}

/// Normalized mismatch variance 1 - gamma E[k1^2 x / (k1^2 x + k*^2)], in [0, 1].
pub fn tau_add<T: Scalar>(model: &SpectralModel<T>) -> Result<T> {
    let k1sq = model.kappa1 * model.kappa1;
    let e = model.integrate(|x| {
        let num = k1sq * x;
        if num == T::zero() {
            T::zero()
        } else {
            num / (num + model.kappa_star_sq())
        }
    });
    let t = T::one() - model.gamma * e;
    let eps = T::c(1e-6);
    if t < -eps || t > T::one() + eps {
        return Err(Error::Unphysical(format!("tau_add^2 = {t} outside [0,1]")));
    }
    Ok(t.max(T::zero()).min(T::one()))
}

/// One eigenvalue per line; blank lines and `#` comments are skipped.
pub fn load_eigenvalues(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    parse_eigenvalues(&text)
}

pub fn parse_eigenvalues(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: `{line}` is not a real number", i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn known_moments() {
        let m = activation_moments(&Activation::Linear).unwrap();
        assert!(m.kappa0.abs() < 1e-14 && (m.kappa1 - 1.0).abs() < 1e-13 && m.kappa_star < 1e-6);
        let m = activation_moments(&Activation::Erf).unwrap();
        assert!((m.kappa1 - 2.0 / (3.0 * PI).sqrt()).abs() < 1e-12);
        let ex2 = (2.0 / PI) * (2.0f64 / 3.0).asin();
        assert!((m.kappa_star.powi(2) - (ex2 - m.kappa1.powi(2))).abs() < 1e-12);
        let m = activation_moments(&Activation::Sign).unwrap();
        assert!(m.kappa0.abs() < 1e-14);
        assert!((m.kappa1 - (2.0 / PI).sqrt()).abs() < 1e-12);
        assert!((m.kappa_star.powi(2) - (1.0 - 2.0 / PI)).abs() < 1e-12);
        let m = activation_moments(&Activation::Relu).unwrap();
        assert!((m.kappa0 - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-12);
        assert!((m.kappa1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tabulated_matches_sign_shape() {
        let t = Activation::Tabulated { x: vec![-1e-9, 1e-9], y: vec![-1.0, 1.0] };
        let m = activation_moments(&t).unwrap();
        assert!((m.kappa1 - (2.0 / PI).sqrt()).abs() < 1e-6);
        assert!(activation_moments(&Activation::Tabulated { x: vec![1.0], y: vec![0.0] }).is_err());
    }

    #[test]
    fn mp_moments() {
        let mom = activation_moments(&Activation::Erf).unwrap();
        for g in [0.25, 0.5, 1.0, 1.0001, 2.0, 8.0] {
            let s = SpectralModel::<f64>::marchenko_pastur(mom, g).unwrap();
            assert!((s.integrate(|_| 1.0) - 1.0).abs() < 1e-10, "g={g}");
            assert!((s.integrate(|x| x) - 1.0).abs() < 1e-8, "g={g}");
            assert!((s.integrate(|x| x * x) - (1.0 + g)).abs() < 1e-8, "g={g}");
        }
    }

    #[test]
    fn tau_add_linear_activation() {
        let mom = activation_moments(&Activation::Linear).unwrap();
        let mom = ActivationMoments { kappa_star: 0.0, ..mom };
        for g in [0.3, 0.7] {
            let s = SpectralModel::<f64>::marchenko_pastur(mom, g).unwrap();
            assert!((tau_add(&s).unwrap() - (1.0 - g)).abs() < 1e-8);
        }
        for g in [1.0, 3.0] {
            let s = SpectralModel::<f64>::marchenko_pastur(mom, g).unwrap();
            assert!(tau_add(&s).unwrap() < 1e-8);
        }
        let zero = ActivationMoments { kappa0: 0.0, kappa1: 0.0, kappa_star: 1.0 };
        let s = SpectralModel::<f64>::marchenko_pastur(zero, 2.0).unwrap();
        assert_eq!(tau_add(&s).unwrap(), 1.0);
    }

    #[test]
    fn tau_add_decreases_with_gamma() {
        let mom = activation_moments(&Activation::Erf).unwrap();
        let mut prev = 1.0;
        for k in 1..40 {
            let g = 0.1 * k as f64;
            let t = tau_add(&SpectralModel::<f64>::marchenko_pastur(mom, g).unwrap()).unwrap();
            assert!(t <= prev + 1e-12);
            prev = t;
        }
    }

    #[test]
    fn eigenvalue_file_parsing() {
        let v = parse_eigenvalues("# header\n1.5\n\n0\n2e-1\n").unwrap();
        assert_eq!(v, vec![1.5, 0.0, 0.2]);
        assert!(parse_eigenvalues("abc").is_err());
        let mom = activation_moments(&Activation::Erf).unwrap();
        let s = SpectralModel::<f64>::empirical(mom, 1.5, vec![0.0, 1.0, 2.0]).unwrap();
        assert!((s.atom() - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.integrate(|x| x) - 1.0).abs() < 1e-15);
    }
}
