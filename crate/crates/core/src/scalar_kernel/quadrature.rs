//! Gauss rules and the precomputed node sets used by the kernels.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleKind {
    GaussHermite,
    GaussLegendre,
}

/// Nodes and weights of a Gauss rule.
///
/// Hermite rules are for the weight `exp(-x^2)` (weights sum to sqrt(pi)),
/// Legendre rules for the unit weight on [-1, 1] (weights sum to 2).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule<T> {
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
    pub kind: RuleKind,
    pub order: usize,
}

impl QuadratureRule<f64> {
    pub fn gauss_hermite(n: usize) -> Self {
        assert!(n >= 1, "order must be positive");
        let half = n / 2;
        let mut pos = Vec::with_capacity(half + 1);
        // positive roots, largest first
        for k in 0..half {
            let idx = n - 1 - k; // eigenvalue index in ascending order
            let mut x = hermite_root_bisect(n, idx);
            for _ in 0..3 {
                let (p_n, p_nm1, _) = hermite_scaled(n, x);
                let dx = p_n / ((2.0 * n as f64).sqrt() * p_nm1);
                x -= dx;
                if dx.abs() < 1e-15 * x.abs().max(1.0) {
                    break;
                }
            }
            pos.push(x);
        }
        let mut nodes = Vec::with_capacity(n);
        for &x in pos.iter() {
            nodes.push(-x);
        }
        if n % 2 == 1 {
            nodes.push(0.0);
        }
        for &x in pos.iter().rev() {
            nodes.push(x);
        }
        let weights = nodes
            .iter()
            .map(|&x| {
                let (_, p_nm1, log_scale) = hermite_scaled(n, x);
                let log_w = -(n as f64).ln() - 2.0 * (p_nm1.abs().ln() + log_scale);
                log_w.exp()
            })
            .collect();
        QuadratureRule { nodes, weights, kind: RuleKind::GaussHermite, order: n }
    }

    pub fn gauss_legendre(n: usize) -> Self {
        assert!(n >= 1, "order must be positive");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = (n + 1) / 2;
        for i in 0..m {
            let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut pp;
            loop {
                let (p, dp) = legendre(n, z);
                pp = dp;
                let dz = p / dp;
                z -= dz;
                if dz.abs() < 1e-16 {
                    break;
                }
            }
            let (_, dp) = legendre(n, z);
            pp = if dp.is_finite() { dp } else { pp };
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            let w = 2.0 / ((1.0 - z * z) * pp * pp);
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        QuadratureRule { nodes, weights, kind: RuleKind::GaussLegendre, order: n }
    }

    pub fn cast<T: Scalar>(&self) -> QuadratureRule<T> {
        QuadratureRule {
            nodes: self.nodes.iter().map(|&x| T::c(x)).collect(),
            weights: self.weights.iter().map(|&x| T::c(x)).collect(),
            kind: self.kind,
            order: self.order,
        }
    }
}

impl<T: Scalar> QuadratureRule<T> {
    /// Nodes and weights for E over N(0,1); Hermite rules only.
    pub fn standard_normal(&self) -> NormalRule<T> {
        assert_eq!(self.kind, RuleKind::GaussHermite);
        let s2 = T::SQRT_2();
        let inv = T::one() / T::PI().sqrt();
        NormalRule {
            z: self.nodes.iter().map(|&x| x * s2).collect(),
            w: self.weights.iter().map(|&w| w * inv).collect(),
        }
    }
}

/// Rule for expectations over a standard normal variable.
#[derive(Debug, Clone)]
pub struct NormalRule<T> {
    pub z: Vec<T>,
    pub w: Vec<T>,
}

impl<T: Scalar> NormalRule<T> {
    #[inline]
    pub fn expect(&self, mut f: impl FnMut(T) -> T) -> T {
        let mut acc = T::zero();
        for (&z, &w) in self.z.iter().zip(&self.w) {
            acc += w * f(z);
        }
        acc
    }
}

/// Composite Gauss–Legendre nodes on [a, b] with `panels` equal panels.
pub fn composite_legendre(a: f64, b: f64, panels: usize, order: usize) -> (Vec<f64>, Vec<f64>) {
    let base = QuadratureRule::gauss_legendre(order);
    let h = (b - a) / panels as f64;
    let mut x = Vec::with_capacity(panels * order);
    let mut w = Vec::with_capacity(panels * order);
    for k in 0..panels {
        let lo = a + k as f64 * h;
        for (&t, &wt) in base.nodes.iter().zip(&base.weights) {
            x.push(lo + 0.5 * h * (t + 1.0));
            w.push(0.5 * h * wt);
        }
    }
    (x, w)
}

/// Every precomputed node set, converted to one precision.
#[derive(Debug, Clone)]
pub struct Rules<T> {
    /// Order 120, for smoothed sigmoids with small smoothing variance.
    pub gh_sigmoid: NormalRule<T>,
    /// Order 150, for the outer expectation over the local field.
    pub gh_field: NormalRule<T>,
    /// Order 300, used as a refinement check.
    pub gh_fine: NormalRule<T>,
    /// Positive half line [0, 40] for the logistic tail correction.
    pub tail_t: Vec<T>,
    /// Weights of `tail_t` premultiplied by sigmoid(-t).
    pub tail_w: Vec<T>,
    /// Half line [0, 12] for half-normal expectations; weights include the N(0,1) density.
    pub half_s: Vec<T>,
    pub half_w: Vec<T>,
    /// Order 16 Legendre panel on [-1, 1].
    pub panel: QuadratureRule<T>,
}

pub const ORDER_SIGMOID: usize = 120;
pub const ORDER_FIELD: usize = 150;
pub const ORDER_FINE: usize = 300;

impl<T: Scalar> Rules<T> {
    pub fn build() -> Self {
        let gh = |n: usize| QuadratureRule::gauss_hermite(n).cast::<T>().standard_normal();
        let (t, tw) = composite_legendre(0.0, 40.0, 16, 12);
        let tail_w = t
            .iter()
            .zip(&tw)
            .map(|(&t, &w)| T::c(w / (1.0 + t.exp())))
            .collect();
        let (s, sw) = composite_legendre(0.0, 12.0, 24, 16);
        let half_w = s
            .iter()
            .zip(&sw)
            .map(|(&s, &w)| T::c(w * (-0.5 * s * s).exp() / (2.0 * PI).sqrt()))
            .collect();
        Rules {
            gh_sigmoid: gh(ORDER_SIGMOID),
            gh_field: gh(ORDER_FIELD),
            gh_fine: gh(ORDER_FINE),
            tail_t: t.into_iter().map(T::c).collect(),
            tail_w,
            half_s: s.into_iter().map(T::c).collect(),
            half_w,
            panel: QuadratureRule::gauss_legendre(16).cast(),
        }
    }

    /// E f(Z), Z ~ N(0,1), for integrands with a kink or jump at 0.
    #[inline]
    pub fn split_normal(&self, mut f: impl FnMut(T) -> T) -> T {
        let mut acc = T::zero();
        for (&s, &w) in self.half_s.iter().zip(&self.half_w) {
            acc += w * (f(s) + f(-s));
        }
        acc
    }
}

// Number of eigenvalues of the Hermite Jacobi matrix below x (Sturm count).
fn sturm_count(n: usize, x: f64) -> usize {
    let mut count = 0;
    let mut d = -x;
    if d < 0.0 {
        count += 1;
    }
    for k in 1..n {
        let b2 = k as f64 / 2.0;
        let prev = if d == 0.0 { 1e-300 } else { d };
        d = -x - b2 / prev;
        if d < 0.0 {
            count += 1;
        }
    }
    count
}

fn hermite_root_bisect(n: usize, idx: usize) -> f64 {
    let bound = (2.0 * n as f64 + 1.0).sqrt() + 1.0;
    let (mut lo, mut hi) = (-bound, bound);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sturm_count(n, mid) > idx {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-14 * mid.abs().max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

// Orthonormal Hermite values p_n(x), p_{n-1}(x), rescaled; true value = scaled * exp(log_scale).
fn hermite_scaled(n: usize, x: f64) -> (f64, f64, f64) {
    let mut p0 = PI.powf(-0.25);
    let mut p1 = 0.0;
    let mut log_scale = 0.0;
    for j in 1..=n {
        let jf = j as f64;
        let p2 = p1;
        p1 = p0;
        p0 = x * (2.0 / jf).sqrt() * p1 - ((jf - 1.0) / jf).sqrt() * p2;
        let a = p0.abs().max(p1.abs());
        if a > 1e150 {
            p0 /= a;
            p1 /= a;
            log_scale += a.ln();
        }
    }
    (p0, p1, log_scale)
}

fn legendre(n: usize, z: f64) -> (f64, f64) {
    let mut p1 = 1.0;
    let mut p2 = 0.0;
    for j in 1..=n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
    }
    let dp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
    (p1, dp)
}
