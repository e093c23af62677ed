//! Sigmoid family, Gaussian smoothing, the logistic proximal map and the
//! output channels of every estimator.

pub mod quadrature;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::spectra::EffectiveNoise;

pub use quadrature::{QuadratureRule, RuleKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Erm,
    Bo,
    Eb,
    Lap,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Erm => "erm",
            EstimatorKind::Bo => "bo",
            EstimatorKind::Eb => "eb",
            EstimatorKind::Lap => "lap",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "erm" => Ok(EstimatorKind::Erm),
            "bo" => Ok(EstimatorKind::Bo),
            "eb" => Ok(EstimatorKind::Eb),
            "lap" | "laplace" => Ok(EstimatorKind::Lap),
            other => invalid(format!("unknown estimator kind `{other}`")),
        }
    }
}

/// Output of an estimator's channel at one (y, omega, V).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelEval<T> {
    pub value: T,
    pub d_omega: T,
    pub log_partition: T,
}

/// A smoothed sigmoid and its first two derivatives in x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smoothed<T> {
    pub value: T,
    pub d1: T,
    pub d2: T,
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// log sigmoid(x) without overflow.
#[inline]
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn smoothed_sigmoid<T: Scalar>(x: T, v: T) -> Result<T> {
    if !(v >= T::zero()) {
        return invalid(format!("smoothing variance must be >= 0, got {v}"));
    }
    Ok(smoothed(x, v).value)
}

/// sigma_v(x) with derivatives, for v >= 0 (not checked).
pub fn smoothed<T: Scalar>(x: T, v: T) -> Smoothed<T> {
    if x > T::zero() {
        let s = smoothed_nonpos(-x, v);
        Smoothed { value: T::one() - s.value, d1: s.d1, d2: -s.d2 }
    } else if x == T::zero() {
        let s = smoothed_nonpos(x, v);
        Smoothed { value: T::c(0.5), d1: s.d1, d2: T::zero() }
    } else {
        smoothed_nonpos(x, v)
    }
}

fn smoothed_nonpos<T: Scalar>(x: T, v: T) -> Smoothed<T> {
    let one = T::one();
    if v == T::zero() {
        let s = sigmoid(x);
        let d1 = s * sigmoid(-x);
        return Smoothed { value: s, d1, d2: d1 * (one - s - s) };
    }
    let rules = T::rules();
    if v <= one {
        let sd = v.sqrt();
        let r = &rules.gh_sigmoid;
        let (mut s0, mut s1, mut s2) = (T::zero(), T::zero(), T::zero());
        for (&z, &w) in r.z.iter().zip(&r.w) {
            let u = x + sd * z;
            let s = sigmoid(u);
            let d = s * sigmoid(-u);
            s0 += w * s;
            s1 += w * d;
            s2 += w * d * (one - s - s);
        }
        return Smoothed { value: s0, d1: s1, d2: s2 };
    }
    // Heaviside part in closed form plus an odd, exponentially decaying correction.
    let sd = v.sqrt();
    let norm = one / (T::c(2.0) * T::PI() * v).sqrt();
    let half = T::c(0.5);
    let inv_v = one / v;
    let g0 = norm * (-half * x * x * inv_v).exp();
    let mut s0 = (x / sd).norm_cdf();
    let mut s1 = g0;
    let mut s2 = -x * inv_v * g0;
    for (&t, &w) in rules.tail_t.iter().zip(&rules.tail_w) {
        let a = -t - x;
        let b = t - x;
        let nm = norm * (-half * a * a * inv_v).exp();
        let np = norm * (-half * b * b * inv_v).exp();
        s0 += w * (nm - np);
        s1 += w * (nm * a - np * b) * inv_v;
        s2 += w * (nm * (a * a * inv_v - one) - np * (b * b * inv_v - one)) * inv_v;
    }
    Smoothed { value: s0, d1: s1, d2: s2 }
}

/// x with sigma_v(x) = p.
pub fn smoothed_sigmoid_inverse<T: Scalar>(p: T, v: T) -> Result<T> {
    if !(p > T::zero() && p < T::one()) {
        return invalid(format!("probability must lie in (0,1), got {p}"));
    }
    if !(v >= T::zero()) {
        return invalid(format!("smoothing variance must be >= 0, got {v}"));
    }
    let half = T::c(0.5);
    if p == half {
        return Ok(T::zero());
    }
    if p > half {
        return Ok(-inverse_below_half(T::one() - p, v));
    }
    Ok(inverse_below_half(p, v))
}

fn inverse_below_half<T: Scalar>(p: T, v: T) -> T {
    if v == T::zero() {
        return (p / (T::one() - p)).ln();
    }
    let mut lo = T::c(-50.0);
    while smoothed(lo, v).value > p {
        lo = lo * T::c(2.0);
        if lo < T::c(-1e12) {
            break;
        }
    }
    let mut hi = T::zero();
    let width = T::c(1e-6).max(T::epsilon().sqrt());
    while hi - lo > width * (T::one() + hi.abs()) {
        let mid = T::c(0.5) * (lo + hi);
        if smoothed(mid, v).value > p {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut x = T::c(0.5) * (lo + hi);
    for _ in 0..30 {
        let s = smoothed(x, v);
        if s.d1 <= T::zero() {
            break;
        }
        let mut next = x - (s.value - p) / s.d1;
        if next < lo || next > hi {
            next = T::c(0.5) * (lo + hi);
        }
        if s.value > p {
            hi = hi.min(x);
        } else {
            lo = lo.max(x);
        }
        let done = (next - x).abs() <= T::c(4.0) * T::epsilon() * (T::one() + x.abs());
        x = next;
        if done {
            break;
        }
    }
    x
}

/// argmin_z V log(1 + e^{-yz}) + (z - omega)^2 / 2.
pub fn prox_logistic<T: Scalar>(y: T, omega: T, v: T) -> Result<T> {
    if !(v > T::zero()) {
        return invalid(format!("prox variance must be > 0, got {v}"));
    }
    if y.abs() != T::one() {
        return invalid(format!("label must be +1 or -1, got {y}"));
    }
    Ok(y * prox_t(y * omega, v))
}

// Solves t = a + V sigmoid(-t), the prox in the label-aligned coordinate.
fn prox_t<T: Scalar>(a: T, v: T) -> T {
    let mut lo = a;
    let mut hi = a + v;
    let mut t = (a + v * sigmoid(-a)).min(hi).max(lo);
    let tol = T::c(2.0) * T::epsilon();
    let mut width = hi - lo;
    for _ in 0..400 {
        let s = sigmoid(-t);
        let f = t - a - v * s;
        if f.abs() <= tol * (t.abs() + a.abs() + v * s) {
            return t;
        }
        if f > T::zero() {
            hi = t;
        } else {
            lo = t;
        }
        if hi - lo <= tol * (T::one() + t.abs()) {
            return t;
        }
        let df = T::one() + v * s * (T::one() - s);
        let next = t - f / df;
        // Newton can bounce between the bracket ends; bisect when it stalls
        let stalled = hi - lo > T::c(0.5) * width;
        width = hi - lo;
        t = if next > lo && next < hi && !stalled { next } else { T::c(0.5) * (lo + hi) };
    }
    t
}

pub fn channel_eval<T: Scalar>(
    estimator: EstimatorKind,
    y: T,
    omega: T,
    v: T,
    noise: &EffectiveNoise<T>,
) -> Result<ChannelEval<T>> {
    channel_eval_beta(estimator, y, omega, v, noise, T::one())
}

/// Channel with an explicit inverse temperature for the eb likelihood.
pub fn channel_eval_beta<T: Scalar>(
    estimator: EstimatorKind,
    y: T,
    omega: T,
    v: T,
    noise: &EffectiveNoise<T>,
    beta: T,
) -> Result<ChannelEval<T>> {
    if !(v > T::zero()) {
        return invalid(format!("channel variance must be > 0, got {v}"));
    }
    if y.abs() != T::one() {
        return invalid(format!("label must be +1 or -1, got {y}"));
    }
    Ok(match estimator {
        EstimatorKind::Erm | EstimatorKind::Lap => erm_channel(y, omega, v),
        EstimatorKind::Eb => gauss_logit_channel(y, omega, v, beta),
        EstimatorKind::Bo => gauss_logit_channel(y, omega, v + noise.total(), T::one()),
    })
}

#[inline]
pub(crate) fn erm_channel<T: Scalar>(y: T, omega: T, v: T) -> ChannelEval<T> {
    let t = prox_t(y * omega, v);
    let z = y * t;
    let s = sigmoid(t) * sigmoid(-t);
    let dprox = T::one() / (T::one() + v * s);
    let loss = -log_sigmoid(t);
    ChannelEval {
        value: (z - omega) / v,
        d_omega: (dprox - T::one()) / v,
        log_partition: -(loss + (z - omega) * (z - omega) / (v + v)),
    }
}

// d/d omega log sigma_{beta^2 w}(beta y omega)
#[inline]
pub(crate) fn gauss_logit_channel<T: Scalar>(y: T, omega: T, w: T, beta: T) -> ChannelEval<T> {
    let s = smoothed(beta * y * omega, beta * beta * w);
    if s.value <= T::min_positive_value() * T::c(1e10) {
        // far tail: log sigma_w(x) ~ x + w/2
        return ChannelEval { value: beta * y, d_omega: T::zero(), log_partition: beta * y * omega + beta * beta * w / T::c(2.0) };
    }
    let g = beta * y * s.d1 / s.value;
    ChannelEval {
        value: g,
        d_omega: beta * beta * s.d2 / s.value - g * g,
        log_partition: s.value.ln(),
    }
}

/// Z0(y, omega, v) = sigma_{v + noise}(y omega).
pub fn partition_z0<T: Scalar>(y: T, omega: T, v: T, noise: &EffectiveNoise<T>) -> Result<T> {
    if !(v >= T::zero()) {
        return invalid(format!("variance must be >= 0, got {v}"));
    }
    Ok(smoothed(y * omega, v + noise.total()).value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference(x: f64, v: f64) -> f64 {
        let r = QuadratureRule::gauss_hermite(2000).standard_normal();
        r.expect(|z| sigmoid::<f64>(x + v.sqrt() * z))
    }

    #[test]
    fn sigmoid_identities() {
        assert_eq!(sigmoid::<f64>(0.0), 0.5);
        assert!((sigmoid::<f64>(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!((sigmoid::<f64>(-2.3) - (1.0 - sigmoid::<f64>(2.3))).abs() < 1e-15);
        assert!(sigmoid::<f64>(700.0) <= 1.0 && sigmoid::<f64>(-700.0) >= 0.0);
        assert!(sigmoid::<f64>(-800.0f64).is_finite());
    }

    #[test]
    fn smoothed_matches_reference() {
        for &(x, v) in &[(1.0, 1.0), (-0.3, 0.4), (2.0, 0.9)] {
            let a = smoothed_sigmoid::<f64>(x, v).unwrap();
            assert!((a - reference(x, v)).abs() < 1e-12, "{x} {v}");
        }
        // large variance branch against a dense reference
        for &(x, v) in &[(1.0, 2.0), (-3.0, 7.5), (0.4, 50.0)] {
            let a = smoothed_sigmoid::<f64>(x, v).unwrap();
            assert!((a - reference(x, v)).abs() < 1e-9, "{x} {v} {a} {}", reference(x, v));
        }
    }

    #[test]
    fn smoothed_limits() {
        for v in [0.0, 0.3, 4.0, 100.0] {
            assert!((smoothed_sigmoid::<f64>(0.0, v).unwrap() - 0.5).abs() < 1e-15);
        }
        assert_eq!(smoothed_sigmoid::<f64>(1.7, 0.0).unwrap(), sigmoid::<f64>(1.7));
        assert!((smoothed_sigmoid::<f64>(1.0, 1e6).unwrap() - 0.5).abs() < 1e-3);
        assert!(smoothed_sigmoid::<f64>(1.0, -1.0).is_err());
    }

    #[test]
    fn smoothed_derivatives_match_differences() {
        for &(x, v) in &[(0.3, 0.5), (-1.2, 3.0), (2.5, 0.0), (-6.0, 20.0)] {
            let h = 1e-5;
            let s = smoothed::<f64>(x, v);
            let fd1 = (smoothed::<f64>(x + h, v).value - smoothed::<f64>(x - h, v).value) / (2.0 * h);
            let fd2 = (smoothed::<f64>(x + h, v).d1 - smoothed::<f64>(x - h, v).d1) / (2.0 * h);
            assert!((s.d1 - fd1).abs() < 1e-8 * (1.0 + fd1.abs()));
            assert!((s.d2 - fd2).abs() < 1e-8 * (1.0 + fd2.abs()));
        }
    }

    #[test]
    fn inverse_roundtrip() {
        for x in [-3.0, 0.2, 5.0] {
            for v in [0.0, 0.25, 2.0] {
                let p = smoothed_sigmoid::<f64>(x, v).unwrap();
                let back = smoothed_sigmoid_inverse::<f64>(p, v).unwrap();
                assert!((back - x).abs() < 1e-10, "{x} {v} {back}");
            }
        }
        assert_eq!(smoothed_sigmoid_inverse::<f64>(0.5, 1.3).unwrap(), 0.0);
        let x = smoothed_sigmoid_inverse::<f64>(0.75, 1.0).unwrap();
        assert!((smoothed_sigmoid::<f64>(x, 1.0).unwrap() - 0.75).abs() < 1e-12);
        assert!(smoothed_sigmoid_inverse::<f64>(1.0, 1.0).is_err());
    }

    #[test]
    fn prox_examples() {
        let z = prox_logistic::<f64>(1.0, 0.0, 1.0).unwrap();
        // bisection oracle on z = sigmoid::<f64>(-z)
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..100 {
            let m = 0.5 * (lo + hi);
            if m - sigmoid::<f64>(-m) > 0.0 { hi = m } else { lo = m }
        }
        assert!((z - lo).abs() < 1e-14);
        assert!((z - 0.4010).abs() < 1e-4);
        assert!((prox_logistic::<f64>(1.0, 0.3, 1e-14).unwrap() - 0.3).abs() < 1e-10);
        let a = prox_logistic::<f64>(-1.0, 0.7, 0.5).unwrap();
        let b = prox_logistic::<f64>(1.0, -0.7, 0.5).unwrap();
        assert!((a + b).abs() < 1e-15);
        assert!(prox_logistic::<f64>(1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn prox_dense_grid() {
        // includes a case where plain safeguarded Newton used to bounce for 200 steps
        let mut cases = vec![(1.0, -8.737758234813764, 12.92)];
        for i in 0..=240 {
            for j in 0..=90 {
                cases.push((if i % 2 == 0 { 1.0 } else { -1.0 }, -30.0 + 0.25 * i as f64, 10f64.powf(-6.0 + 0.1 * j as f64)));
            }
        }
        for (y, omega, v) in cases {
            let z = prox_logistic::<f64>(y, omega, v).unwrap();
            let r = z - omega - y * v * sigmoid::<f64>(-y * z);
            assert!(r.abs() < 1e-12 * (1.0 + z.abs()), "y={y} omega={omega} v={v} r={r}");
        }
    }

    #[test]
    fn channel_examples() {
        let noise = EffectiveNoise::new(0.25, 0.1, 1.0);
        let e = channel_eval::<f64>(EstimatorKind::Erm, 1.0, 0.0, 1.0, &noise).unwrap();
        assert!((e.value - 0.40101).abs() < 1e-4);
        for y in [-1.0, 1.0] {
            let b = channel_eval::<f64>(EstimatorKind::Bo, y, 0.0, 0.6, &noise).unwrap();
            let tot = 0.6 + noise.total();
            assert!((b.value - 2.0 * y * smoothed::<f64>(0.0, tot).d1).abs() < 1e-14);
        }
        let zp = channel_eval::<f64>(EstimatorKind::Eb, 1.0, 0.3, 0.8, &noise).unwrap().log_partition.exp();
        let zm = channel_eval::<f64>(EstimatorKind::Eb, -1.0, 0.3, 0.8, &noise).unwrap().log_partition.exp();
        assert!((zp + zm - 1.0).abs() < 1e-14);
    }

    #[test]
    fn z0_examples() {
        let noise = EffectiveNoise::new(0.25, 0.0, 1.0);
        assert_eq!(partition_z0::<f64>(1.0, 0.0, 0.3, &noise).unwrap(), 0.5);
        let a = partition_z0::<f64>(1.0, 1.1, 0.3, &noise).unwrap() + partition_z0::<f64>(-1.0, 1.1, 0.3, &noise).unwrap();
        assert!((a - 1.0).abs() < 1e-15);
        let z = partition_z0::<f64>(1.0, 1.0, 0.5, &noise).unwrap();
        assert!((z - reference(1.0, 0.75)).abs() < 1e-12);
    }

    #[test]
    fn f32_kernel_is_usable() {
        let s = smoothed_sigmoid(1.0f32, 1.0f32).unwrap();
        assert!((s as f64 - reference(1.0, 1.0)).abs() < 1e-5);
        let z = prox_logistic(1.0f32, 0.0, 1.0).unwrap();
        assert!((z - 0.40101).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn prox_stationarity(y in prop::bool::ANY, omega in -30.0f64..30.0, lv in -6.0f64..3.0) {
            let y = if y { 1.0 } else { -1.0 };
            let v = 10f64.powf(lv);
            let z = prox_logistic::<f64>(y, omega, v).unwrap();
            let r = z - omega - y * v * sigmoid::<f64>(-y * z);
            prop_assert!(r.abs() < 1e-12 * (1.0 + z.abs()));
        }

        #[test]
        fn bayes_channel_derivative(y in prop::bool::ANY, omega in -5.0f64..5.0, v in 0.05f64..5.0, bo in prop::bool::ANY) {
            let y = if y { 1.0 } else { -1.0 };
            let kind = if bo { EstimatorKind::Bo } else { EstimatorKind::Eb };
            let noise = EffectiveNoise::new(0.25, 0.2, 1.0);
            let h = 1e-5;
            let c = channel_eval::<f64>(kind, y, omega, v, &noise).unwrap();
            let p = channel_eval::<f64>(kind, y, omega + h, v, &noise).unwrap();
            let m = channel_eval::<f64>(kind, y, omega - h, v, &noise).unwrap();
            let fd = (p.value - m.value) / (2.0 * h);
            prop_assert!((c.d_omega - fd).abs() <= 1e-6 * fd.abs().max(1e-3));
            let fdl = (p.log_partition - m.log_partition) / (2.0 * h);
            prop_assert!((c.value - fdl).abs() <= 1e-6 * fdl.abs().max(1e-3));
        }

        #[test]
        fn smoothing_is_monotone_and_less_confident(x in -20.0f64..20.0, v in 0.0f64..30.0) {
            let a = smoothed::<f64>(x, v).value;
            let b = smoothed::<f64>(x + 0.01, v).value;
            prop_assert!(b >= a);
            prop_assert!((a - 0.5).abs() <= (sigmoid::<f64>(x) - 0.5).abs() + 1e-15);
        }
    }
}
