use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{invalid, Error, Result};
use crate::scalar_kernel::{log_sigmoid, sigmoid};

use super::data::Dataset;

pub const MAX_NEWTON: usize = 500;

/// Factorization of H = Phi^T D Phi + lambda I at the minimizer.
#[derive(Debug, Clone)]
pub enum HessianFactor {
    /// Cholesky of the p x p matrix.
    Primal(Cholesky<f64, Dyn>),
    /// Cholesky of lambda I + B B^T with B = D^{1/2} Phi (n x n), for p > n.
    Dual { chol: Cholesky<f64, Dyn>, b: DMatrix<f64>, lambda: f64 },
}

impl HessianFactor {
    fn build(phi: &DMatrix<f64>, gram: Option<&DMatrix<f64>>, dw: &DVector<f64>, lambda: f64) -> Result<Self> {
        let (n, p) = phi.shape();
        if p <= n {
            let mut dphi = phi.clone();
            for (mut row, &w) in dphi.row_iter_mut().zip(dw.iter()) {
                row *= w;
            }
            let mut h = phi.transpose() * dphi;
            for i in 0..p {
                h[(i, i)] += lambda;
            }
            let chol = Cholesky::new(h).ok_or_else(|| Error::Linalg("Hessian is not positive definite".into()))?;
            Ok(HessianFactor::Primal(chol))
        } else {
            let s = dw.map(f64::sqrt);
            let mut k = match gram {
                Some(g) => g.clone(),
                None => phi * phi.transpose(),
            };
            for i in 0..n {
                for j in 0..n {
                    k[(i, j)] *= s[i] * s[j];
                }
                k[(i, i)] += lambda;
            }
            let chol = Cholesky::new(k).ok_or_else(|| Error::Linalg("dual Hessian is not positive definite".into()))?;
            let mut b = phi.clone();
            for (mut row, &w) in b.row_iter_mut().zip(s.iter()) {
                row *= w;
            }
            Ok(HessianFactor::Dual { chol, b, lambda })
        }
    }

    /// H^{-1} g
    pub fn solve(&self, g: &DVector<f64>) -> DVector<f64> {
        match self {
            HessianFactor::Primal(c) => c.solve(g),
            HessianFactor::Dual { chol, b, lambda } => {
                let t = chol.solve(&(b * g));
                (g - b.transpose() * t) / *lambda
            }
        }
    }

    /// phi^T H^{-1} phi for every row of `rows`.
    pub fn quadratic_forms(&self, rows: &DMatrix<f64>) -> Vec<f64> {
        match self {
            HessianFactor::Primal(c) => {
                let mut t = rows.transpose();
                let l = c.l();
                l.solve_lower_triangular_mut(&mut t);
                t.column_iter().map(|col| col.norm_squared()).collect()
            }
            HessianFactor::Dual { chol, b, lambda } => {
                let mut t = b * rows.transpose();
                let l = chol.l();
                l.solve_lower_triangular_mut(&mut t);
                rows.row_iter()
                    .zip(t.column_iter())
                    .map(|(r, c)| ((r.norm_squared() - c.norm_squared()) / lambda).max(0.0))
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub theta_hat: DVector<f64>,
    pub lambda: f64,
    pub converged: bool,
    pub grad_norm: f64,
    pub iterations: usize,
    pub hessian: Option<HessianFactor>,
}

impl TrainedModel {
    pub fn scores(&self, phi: &DMatrix<f64>) -> DVector<f64> {
        phi * &self.theta_hat
    }
}

/// Regularized logistic risk sum log(1 + e^{-y z}) + lambda |theta|^2 / 2.
pub fn risk(phi: &DMatrix<f64>, y: &DVector<f64>, theta: &DVector<f64>, lambda: f64) -> f64 {
    let z = phi * theta;
    let loss: f64 = z.iter().zip(y.iter()).map(|(&z, &y)| -log_sigmoid(y * z)).sum();
    loss + 0.5 * lambda * theta.norm_squared()
}

/// Damped Newton with backtracking on the training split.
pub fn train_erm(dataset: &Dataset, lambda: f64) -> Result<TrainedModel> {
    let phi = dataset.train.phi.as_ref().ok_or_else(|| Error::InvalidInput("training features missing".into()))?;
    train_logistic(phi, &dataset.train.y, lambda)
}

pub fn train_logistic(phi: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<TrainedModel> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return invalid(format!("lambda must be > 0, got {lambda}"));
    }
    let (n, p) = phi.shape();
    let gram = if p > n { Some(phi * phi.transpose()) } else { None };
    let mut theta = DVector::zeros(p);
    let mut obj = risk(phi, y, &theta, lambda);
    let mut grad_norm = f64::INFINITY;
    let mut polished = false;
    for it in 0..MAX_NEWTON {
        let z = phi * &theta;
        // residuals y sigma(-y z) and curvatures sigma(z) sigma(-z)
        let r = DVector::from_iterator(n, z.iter().zip(y.iter()).map(|(&z, &y)| y * sigmoid(-y * z)));
        let dw = DVector::from_iterator(n, z.iter().map(|&z| sigmoid(z) * sigmoid(-z)));
        let g = &theta * lambda - phi.transpose() * &r;
        grad_norm = g.norm();
        if grad_norm < 1e-10 * theta.norm().max(1.0) {
            let hessian = Some(HessianFactor::build(phi, gram.as_ref(), &dw, lambda)?);
            return Ok(TrainedModel { theta_hat: theta, lambda, converged: true, grad_norm, iterations: it, hessian });
        }
        let h = HessianFactor::build(phi, gram.as_ref(), &dw, lambda)?;
        let step = -h.solve(&g);
        let slope = g.dot(&step);
        // the Newton decrement bounds the suboptimality even when H is ill-conditioned;
        // one full step first, which settles the gradient when it is not
        if -slope < 1e-12 * obj.abs().max(1.0) {
            if polished {
                return Ok(TrainedModel { theta_hat: theta, lambda, converged: true, grad_norm, iterations: it, hessian: Some(h) });
            }
            polished = true;
            theta += step;
            obj = risk(phi, y, &theta, lambda);
            continue;
        }
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = &theta + &step * t;
            let c = risk(phi, y, &cand, lambda);
            if c <= obj + 1e-4 * t * slope {
                theta = cand;
                obj = c;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            // at round-off level the full step is still the best we can do
            theta += step;
            obj = risk(phi, y, &theta, lambda);
        }
    }
    Err(Error::NoConvergence { iterations: MAX_NEWTON, residual: grad_norm })
}

/// phi(x)^T H^{-1} phi(x) for the rows of `phi_rows`.
pub fn laplace_variance(model: &TrainedModel, phi_rows: &DMatrix<f64>) -> Result<Vec<f64>> {
    let h = model.hessian.as_ref().ok_or_else(|| Error::InvalidInput("model has no Hessian factorization".into()))?;
    Ok(h.quadratic_forms(phi_rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monte_carlo::data::{generate_dataset, DataSpec};
    use crate::spectra::Activation;

    fn data(d: usize, n: usize, gamma: f64) -> Dataset {
        generate_dataset(&DataSpec {
            d,
            n_train: n,
            n_val: 50,
            n_test: 200,
            gamma,
            tau0_sq: 0.25,
            activation: Activation::Erf,
            teacher_norm_sq: 1.0,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn newton_certificate_in_both_regimes() {
        for gamma in [0.5, 3.0] {
            let ds = data(40, 80, gamma);
            let m = train_erm(&ds, 1e-2).unwrap();
            assert!(m.converged && m.grad_norm < 1e-10 * m.theta_hat.norm().max(1.0));
            let phi = ds.train.phi.as_ref().unwrap();
            assert!(risk(phi, &ds.train.y, &m.theta_hat, 1e-2) <= 80.0 * 2f64.ln());
        }
    }

    #[test]
    fn ridge_limit() {
        let ds = data(30, 60, 1.0);
        let lambda = 1e6;
        let m = train_erm(&ds, lambda).unwrap();
        let phi = ds.train.phi.as_ref().unwrap();
        let g0 = phi.transpose() * ds.train.y.map(|y| 0.5 * y);
        assert!(m.theta_hat.norm() <= g0.norm() / lambda * (1.0 + 1e-3));
    }

    #[test]
    fn primal_and_dual_forms_agree() {
        let ds = data(20, 30, 2.5);
        let phi = ds.train.phi.as_ref().unwrap();
        let dw = DVector::from_fn(phi.nrows(), |i, _| 0.05 + 0.2 * ((i * 7) % 5) as f64 / 5.0);
        let dual = HessianFactor::build(phi, None, &dw, 0.3).unwrap();
        // force the primal path by building it directly
        let mut dphi = phi.clone();
        for (mut row, &w) in dphi.row_iter_mut().zip(dw.iter()) {
            row *= w;
        }
        let mut h = phi.transpose() * dphi;
        for i in 0..h.nrows() {
            h[(i, i)] += 0.3;
        }
        let primal = HessianFactor::Primal(Cholesky::new(h.clone()).unwrap());
        let x = ds.val.phi.as_ref().unwrap().rows(0, 5).into_owned();
        let a = dual.quadratic_forms(&x);
        let b = primal.quadratic_forms(&x);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10 * v.abs().max(1.0));
            assert!(*u > 0.0);
        }
        let g = DVector::from_fn(h.nrows(), |i, _| (i as f64).sin());
        assert!((&h * dual.solve(&g) - &g).norm() < 1e-10 * g.norm());
    }

    #[test]
    fn laplace_ridge_limit() {
        let ds = data(20, 40, 1.0);
        let lambda = 1e7;
        let m = train_erm(&ds, lambda).unwrap();
        let x = ds.val.phi.as_ref().unwrap().rows(0, 4).into_owned();
        let s = laplace_variance(&m, &x).unwrap();
        for (r, s) in x.row_iter().zip(&s) {
            assert!((s * lambda / r.norm_squared() - 1.0).abs() < 1e-5);
        }
    }
}
