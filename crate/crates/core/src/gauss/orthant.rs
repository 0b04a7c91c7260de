use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::rng::RngStream;
use crate::error::{CarveError, Result};

const EIGEN_FLOOR: f64 = 1e-10;

/// A multivariate normal law given by mean and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct MvnSpec {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl MvnSpec {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let k = mean.len();
        if k == 0 || covariance.nrows() != k || covariance.ncols() != k {
            return Err(CarveError::Domain(format!(
                "mean of length {k} needs a {k}x{k} covariance, got {}x{}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(CarveError::Domain(
                "non-finite mean or covariance entry".into(),
            ));
        }
        for i in 0..k {
            for j in 0..i {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-12 {
                    return Err(CarveError::Domain(format!(
                        "covariance not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let min_eig = covariance.clone().symmetric_eigenvalues().min();
        if min_eig < -EIGEN_FLOOR {
            return Err(CarveError::Domain(format!(
                "covariance has eigenvalue {min_eig} below -1e-10"
            )));
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Lower-triangular `L` with `L L^T` equal to `cov`, after flooring
/// eigenvalues at 1e-10 when needed. The flag reports whether the floor
/// was applied.
pub fn psd_factor(cov: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let eig = cov.clone().symmetric_eigen();
    let floored = eig.eigenvalues.iter().any(|&l| l < EIGEN_FLOOR);
    let target = if floored {
        warn!(
            "covariance eigenvalue {:.3e} floored at {EIGEN_FLOOR:e}",
            eig.eigenvalues.min()
        );
        let lam = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR));
        let v = &eig.eigenvectors;
        let mut m = v * DMatrix::from_diagonal(&lam) * v.transpose();
        m = 0.5 * (&m + m.transpose());
        m
    } else {
        cov.clone()
    };
    target.cholesky().map(|c| (c.l(), floored)).ok_or_else(|| {
        CarveError::Numeric("Cholesky factorization failed after regularization".into())
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthantEstimate {
    pub estimate: f64,
    pub std_error: f64,
    /// Whether the covariance needed an eigenvalue floor.
    pub regularized: bool,
}

/// Plain Monte Carlo estimate of `P(X > 0)` componentwise.
pub fn mvn_orthant_mc(
    spec: &MvnSpec,
    n_samples: usize,
    stream: &RngStream,
) -> Result<OrthantEstimate> {
    if n_samples < 1000 {
        return Err(CarveError::Domain(format!(
            "orthant Monte Carlo needs at least 1000 samples, got {n_samples}"
        )));
    }
    let (l, regularized) = psd_factor(&spec.covariance)?;
    let k = spec.dim();
    let mut rng = stream.rng();
    let mut g = vec![0.0; k];
    let mut hits = 0usize;
    for _ in 0..n_samples {
        for v in g.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let inside = (0..k).all(|i| {
            let mut x = spec.mean[i];
            for j in 0..=i {
                x += l[(i, j)] * g[j];
            }
            x > 0.0
        });
        if inside {
            hits += 1;
        }
    }
    let n = n_samples as f64;
    let p = hits as f64 / n;
    let sd = (p * (1.0 - p) * n / (n - 1.0)).sqrt();
    Ok(OrthantEstimate {
        estimate: p,
        std_error: sd / n.sqrt(),
        regularized,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogOrthantEstimate {
    pub log_estimate: f64,
    /// Standard error of the estimate divided by the estimate.
    pub rel_std_error: f64,
    pub regularized: bool,
}

impl LogOrthantEstimate {
    pub fn estimate(&self) -> f64 {
        self.log_estimate.exp()
    }
}

/// Solves `min 1/2 v'Gv - v'b` over `v >= 0` by coordinate descent. The
/// point `G v` is the most likely point of `N(0, G)` in `{y >= b}`.
fn dominating_dual(gamma: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let k = b.len();
    let mut nu: DVector<f64> = DVector::zeros(k);
    for _ in 0..10_000 {
        let mut change = 0.0f64;
        for j in 0..k {
            let mut s = b[j];
            for i in 0..k {
                if i != j {
                    s -= gamma[(j, i)] * nu[i];
                }
            }
            let next: f64 = (s / gamma[(j, j)]).max(0.0);
            change = change.max((next - nu[j]).abs());
            nu[j] = next;
        }
        if change < 1e-13 * (1.0 + nu.amax()) {
            break;
        }
    }
    nu
}

/// Importance-sampling estimate of `P(X > 0)` for rare orthants, with the
/// proposal mean shifted to the dominating point of the orthant.
pub fn mvn_orthant_is(
    spec: &MvnSpec,
    n_samples: usize,
    stream: &RngStream,
) -> Result<LogOrthantEstimate> {
    if n_samples < 1000 {
        return Err(CarveError::Domain(format!(
            "orthant importance sampling needs at least 1000 samples, got {n_samples}"
        )));
    }
    let (l, regularized) = psd_factor(&spec.covariance)?;
    let gamma = &l * l.transpose();
    let k = spec.dim();
    let b = -&spec.mean;
    let nu = dominating_dual(&gamma, &b);
    let shift = &gamma * &nu;
    let base = -0.5 * nu.dot(&shift);
    // Tilt direction in the standard-normal coordinates.
    let lt_nu = l.transpose() * &nu;
    let mut rng = stream.rng();
    let mut g = vec![0.0; k];
    let mut weights = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        for v in g.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let inside = (0..k).all(|i| {
            let mut y = shift[i];
            for j in 0..=i {
                y += l[(i, j)] * g[j];
            }
            y >= b[i]
        });
        if inside {
            let t: f64 = (0..k).map(|j| lt_nu[j] * g[j]).sum();
            weights.push(-t);
        } else {
            weights.push(f64::NEG_INFINITY);
        }
    }
    let top = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return Ok(LogOrthantEstimate {
            log_estimate: f64::NEG_INFINITY,
            rel_std_error: f64::INFINITY,
            regularized,
        });
    }
    let n = n_samples as f64;
    let scaled: Vec<f64> = weights.iter().map(|w| (w - top).exp()).collect();
    let mean = scaled.iter().sum::<f64>() / n;
    let var = scaled.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(LogOrthantEstimate {
        log_estimate: base + top + mean.ln(),
        rel_std_error: (var / n).sqrt() / mean,
        regularized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::special::{log_phi_bar, phi_bar};

    fn spec(mean: &[f64], cov: &[f64]) -> MvnSpec {
        let k = mean.len();
        MvnSpec::new(
            DVector::from_row_slice(mean),
            DMatrix::from_row_slice(k, k, cov),
        )
        .unwrap()
    }

    #[test]
    fn trivial_orthants() {
        let s = RngStream::new(1, 0);
        let e = mvn_orthant_mc(&spec(&[0.0], &[1.0]), 100_000, &s).unwrap();
        assert!((e.estimate - 0.5).abs() < 3.0 * e.std_error);
        let e = mvn_orthant_mc(&spec(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]), 100_000, &s).unwrap();
        assert!((e.estimate - 0.25).abs() < 3.0 * e.std_error);
        assert!(!e.regularized);
    }

    #[test]
    fn correlated_pair_matches_grid() {
        // Midpoint rule on a 2000 x 2000 grid over [0, 8]^2.
        let rho: f64 = 0.5;
        let det = 1.0 - rho * rho;
        let n = 2000;
        let h = 8.0 / n as f64;
        let mut grid = 0.0;
        for i in 0..n {
            let x = (i as f64 + 0.5) * h;
            for j in 0..n {
                let y = (j as f64 + 0.5) * h;
                let q = (x * x - 2.0 * rho * x * y + y * y) / det;
                grid += (-0.5 * q).exp();
            }
        }
        grid *= h * h / (2.0 * std::f64::consts::PI * det.sqrt());
        assert!((grid - 1.0 / 3.0).abs() < 1e-5);
        let e = mvn_orthant_mc(
            &spec(&[0.0, 0.0], &[1.0, rho, rho, 1.0]),
            200_000,
            &RngStream::new(5, 2),
        )
        .unwrap();
        assert!((e.estimate - grid).abs() < 3.0 * e.std_error);
    }

    #[test]
    fn deterministic_per_stream() {
        let s = spec(&[0.1, -0.2], &[1.0, 0.3, 0.3, 2.0]);
        let a = mvn_orthant_mc(&s, 5000, &RngStream::new(9, 4)).unwrap();
        let b = mvn_orthant_mc(&s, 5000, &RngStream::new(9, 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn singular_covariance_is_floored() {
        let e = mvn_orthant_mc(
            &spec(&[0.0, 0.0], &[1.0, 1.0, 1.0, 1.0]),
            50_000,
            &RngStream::new(2, 0),
        )
        .unwrap();
        assert!(e.regularized);
        assert!((e.estimate - 0.5).abs() < 3.0 * e.std_error + 1e-3);
    }

    #[test]
    fn rejects_invalid_specs() {
        let asym = MvnSpec::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.1, 1.0]),
        );
        assert!(asym.is_err());
        let neg = MvnSpec::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
        );
        assert!(neg.is_err());
        let s = spec(&[0.0], &[1.0]);
        assert!(mvn_orthant_mc(&s, 10, &RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn importance_sampling_hits_rare_tails() {
        let s = spec(&[-8.0], &[1.0]);
        let e = mvn_orthant_is(&s, 100_000, &RngStream::new(3, 1)).unwrap();
        let exact = log_phi_bar(8.0);
        assert!(((e.log_estimate - exact).exp() - 1.0).abs() < 4.0 * e.rel_std_error);
        // Independent coordinates factorize.
        let s = spec(&[-6.0, -7.0], &[1.0, 0.0, 0.0, 2.0]);
        let e = mvn_orthant_is(&s, 200_000, &RngStream::new(3, 2)).unwrap();
        let exact = log_phi_bar(6.0) + log_phi_bar(7.0 / 2f64.sqrt());
        assert!(((e.log_estimate - exact).exp() - 1.0).abs() < 4.0 * e.rel_std_error);
    }

    #[test]
    fn importance_sampling_agrees_with_plain_mc_when_not_rare() {
        let s = spec(&[0.3, -0.5], &[1.0, 0.4, 0.4, 1.5]);
        let is = mvn_orthant_is(&s, 200_000, &RngStream::new(4, 0)).unwrap();
        let mc = mvn_orthant_mc(&s, 200_000, &RngStream::new(4, 1)).unwrap();
        let se = (mc.std_error.powi(2) + (is.rel_std_error * is.estimate()).powi(2)).sqrt();
        assert!((is.estimate() - mc.estimate).abs() < 4.0 * se);
        assert!(phi_bar(0.0) > mc.estimate);
    }
}
