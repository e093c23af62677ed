use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar_kernel::smoothed;
use crate::spectra::{activation_moments, Activation, ActivationMoments};

/// Purpose tags; each draws from its own stream of the seeded generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Teacher = 1,
    Features = 2,
    Train = 3,
    Validation = 4,
    Test = 5,
    Gamp = 6,
}

pub fn rng(seed: u64, tag: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(tag as u64);
    r
}

pub(crate) fn normal_matrix(rows: usize, cols: usize, sd: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    // column-major fill keeps the stream order independent of the storage
    DMatrix::from_fn(rows, cols, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub d: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// p / d
    pub gamma: f64,
    /// Label noise variance.
    pub tau0_sq: f64,
    pub activation: Activation,
    pub teacher_norm_sq: f64,
    pub seed: u64,
}

impl DataSpec {
    pub fn p(&self) -> usize {
        (self.gamma * self.d as f64).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_train == 0 || self.p() == 0 {
            return invalid(format!("dimensions must be positive (d={}, n={}, p={})", self.d, self.n_train, self.p()));
        }
        if !(self.tau0_sq >= 0.0) || !(self.teacher_norm_sq > 0.0) {
            return invalid("need tau0^2 >= 0 and a positive teacher norm");
        }
        self.activation.validate()
    }
}

/// Inputs, labels and teacher fields of one split.
#[derive(Debug, Clone)]
pub struct Split {
    /// m x d
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// theta*^T x per row.
    pub teacher_field: DVector<f64>,
    /// m x p, absent for the test split (built in chunks on demand).
    pub phi: Option<DMatrix<f64>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DataSpec,
    pub p: usize,
    pub moments: ActivationMoments,
    pub theta_star: DVector<f64>,
    /// p x d, entries N(0, 1).
    pub weights: DMatrix<f64>,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

pub const TEST_CHUNK: usize = 2048;

impl Dataset {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.spec.d, self.train.len(), self.p)
    }

    /// Centered features phi(F x) / sqrt(p) for the rows of `x`.
    pub fn features(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * self.weights.transpose();
        let k0 = self.moments.kappa0;
        let s = 1.0 / (self.p as f64).sqrt();
        let act = &self.spec.activation;
        z.apply(|v| *v = (act.eval(*v) - k0) * s);
        z
    }

    /// Oracle probability f*(x) = sigma_{tau0^2}(theta*^T x).
    pub fn oracle(&self, teacher_field: f64) -> f64 {
        smoothed(teacher_field, self.spec.tau0_sq).value
    }

    /// Calls `f(rows, features)` on consecutive chunks of the test split.
    pub fn for_test_chunks(&self, mut f: impl FnMut(std::ops::Range<usize>, &DMatrix<f64>)) {
        let n = self.test.len();
        let mut start = 0;
        while start < n {
            let end = (start + TEST_CHUNK).min(n);
            let x = self.test.x.rows(start, end - start).into_owned();
            let phi = self.features(&x);
            f(start..end, &phi);
            start = end;
        }
    }
}

fn draw_split(spec: &DataSpec, theta: &DVector<f64>, m: usize, tag: Stream) -> Split {
    let mut r = rng(spec.seed, tag);
    let x = normal_matrix(m, spec.d, 1.0 / (spec.d as f64).sqrt(), &mut r);
    let field = &x * theta;
    let y = DVector::from_iterator(
        m,
        field.iter().map(|&z| {
            let p = smoothed(z, spec.tau0_sq).value;
            if r.gen::<f64>() < p {
                1.0
            } else {
                -1.0
            }
        }),
    );
    Split { x, y, teacher_field: field, phi: None }
}

/// Teacher, feature map and the three splits, reproducible from the seed.
pub fn generate_dataset(spec: &DataSpec) -> Result<Dataset> {
    spec.validate()?;
    let p = spec.p();
    let moments = activation_moments(&spec.activation)?;
    let mut rt = rng(spec.seed, Stream::Teacher);
    let theta_star = DVector::from_fn(spec.d, |_, _| spec.teacher_norm_sq.sqrt() * rt.sample::<f64, _>(StandardNormal));
    let mut rf = rng(spec.seed, Stream::Features);
    let weights = normal_matrix(p, spec.d, 1.0, &mut rf);
    let train = draw_split(spec, &theta_star, spec.n_train, Stream::Train);
    let val = draw_split(spec, &theta_star, spec.n_val, Stream::Validation);
    let test = draw_split(spec, &theta_star, spec.n_test, Stream::Test);
    let mut ds = Dataset { spec: spec.clone(), p, moments, theta_star, weights, train, val, test };
    ds.train.phi = Some(ds.features(&ds.train.x));
    ds.val.phi = Some(ds.features(&ds.val.x));
    Ok(ds)
}
