use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CarveError, Result};

/// Noise families, each standardized to mean 0 and variance 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    /// `Exp(1) - 1`.
    CenteredExponential,
    /// Laplace with scale `1/sqrt(2)`.
    Laplace,
    Rademacher,
    /// Uniform on `[-sqrt(3), sqrt(3)]`.
    Uniform,
}

const LAPLACE_SCALE: f64 = std::f64::consts::FRAC_1_SQRT_2;

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Gaussian,
        Family::CenteredExponential,
        Family::Laplace,
        Family::Rademacher,
        Family::Uniform,
    ];

    pub fn variance(&self) -> f64 {
        match self {
            Family::Gaussian | Family::CenteredExponential | Family::Rademacher => 1.0,
            Family::Laplace => 2.0 * LAPLACE_SCALE * LAPLACE_SCALE,
            Family::Uniform => {
                let h = 3f64.sqrt();
                h * h / 3.0
            }
        }
    }

    pub fn skewness(&self) -> f64 {
        match self {
            Family::CenteredExponential => 2.0,
            _ => 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Family::Gaussian => rng.sample(StandardNormal),
            Family::CenteredExponential => -(1.0 - rng.random::<f64>()).ln() - 1.0,
            Family::Laplace => {
                let u: f64 = rng.random::<f64>() - 0.5;
                -LAPLACE_SCALE * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            Family::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            Family::Uniform => 3f64.sqrt() * (2.0 * rng.random::<f64>() - 1.0),
        }
    }

    /// Sum of `n` iid standardized draws, sampled directly from its law where
    /// that law is available in closed form.
    pub fn sample_sum<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> f64 {
        if n == 0 {
            return 0.0;
        }
        let nf = n as f64;
        match self {
            Family::Gaussian => nf.sqrt() * rng.sample::<f64, _>(StandardNormal),
            Family::CenteredExponential => gamma(nf, 1.0).sample(rng) - nf,
            Family::Laplace => {
                let g = gamma(nf, LAPLACE_SCALE);
                g.sample(rng) - g.sample(rng)
            }
            Family::Rademacher => {
                let b = Binomial::new(n as u64, 0.5).expect("valid binomial");
                2.0 * b.sample(rng) as f64 - nf
            }
            Family::Uniform => (0..n).map(|_| self.sample(rng)).sum(),
        }
    }
}

fn gamma(shape: f64, scale: f64) -> Gamma<f64> {
    Gamma::new(shape, scale).expect("positive gamma parameters")
}

/// Rows `beta + L eps` with `eps` iid from `family` and `L L' = Sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeSpec {
    pub family: Family,
    pub beta: DVector<f64>,
    pub sigma: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl GenerativeSpec {
    pub fn new(family: Family, beta: DVector<f64>, sigma: Option<DMatrix<f64>>) -> Result<Self> {
        let d = beta.len();
        if d == 0 || beta.iter().any(|b| !b.is_finite()) {
            return Err(CarveError::Config(
                "beta must be a non-empty finite vector".into(),
            ));
        }
        let sigma = sigma.unwrap_or_else(|| DMatrix::identity(d, d));
        if sigma.shape() != (d, d) {
            return Err(CarveError::Config(format!("Sigma must be {d} x {d}")));
        }
        if (&sigma - sigma.transpose()).amax() > 1e-12 {
            return Err(CarveError::Config("Sigma must be symmetric".into()));
        }
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| CarveError::Config("Sigma must be positive definite".into()))?
            .l();
        Ok(Self {
            family,
            beta,
            sigma,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn is_diagonal(&self) -> bool {
        let d = self.dim();
        (0..d).all(|i| (0..d).all(|j| i == j || self.sigma[(i, j)] == 0.0))
    }

    pub fn sample_triangular_array(&self, n: usize, rng: &mut ChaCha20Rng) -> Result<DMatrix<f64>> {
        if n == 0 {
            return Err(CarveError::Domain("need at least one sample".into()));
        }
        let d = self.dim();
        let mut out = DMatrix::zeros(n, d);
        let mut eps = DVector::zeros(d);
        for i in 0..n {
            for v in eps.iter_mut() {
                *v = self.family.sample(rng);
            }
            let row = &self.beta + &self.chol * &eps;
            out.set_row(i, &row.transpose());
        }
        Ok(out)
    }

    /// Column sums of an `n x d` triangular array, drawn from their exact law.
    pub fn sample_stage_sum(&self, n: usize, rng: &mut ChaCha20Rng) -> DVector<f64> {
        let eps = DVector::from_fn(self.dim(), |_, _| self.family.sample_sum(n, rng));
        &self.beta * n as f64 + &self.chol * eps
    }
}
