use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CarveError, Result};

const UPDATE_TOL: f64 = 1e-10;
const KKT_TOL: f64 = 1e-9;
const MAX_SWEEPS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticNetFit {
    pub beta_hat: Vec<f64>,
    pub active: Vec<usize>,
    pub active_signs: Vec<f64>,
    /// `-gradient_j` of the smooth part for inactive `j`; lies in `[-lambda, lambda]`.
    pub inactive_subgradient: Vec<f64>,
    pub kkt_residual: f64,
    pub lambda: f64,
    pub eta: f64,
    pub rho: f64,
    pub sweeps: usize,
}

fn loss_scale(n1: usize, rho: f64) -> f64 {
    let n = n1 as f64 * (1.0 + rho * rho);
    (1.0 + rho * rho) / n.sqrt()
}

/// `(1+rho^2)/(2 sqrt(n)) |y1 - X1 b|^2 + lambda |b|_1 + eta/2 |b|^2` with
/// `n = n1 (1 + rho^2)`.
pub fn elastic_net_objective(
    y1: &DVector<f64>,
    x1: &DMatrix<f64>,
    beta: &DVector<f64>,
    lambda: f64,
    eta: f64,
    rho: f64,
) -> f64 {
    let a = loss_scale(x1.nrows(), rho);
    let r = y1 - x1 * beta;
    0.5 * a * r.norm_squared()
        + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
        + 0.5 * eta * beta.norm_squared()
}

fn smooth_gradient(
    a: f64,
    eta: f64,
    x1: &DMatrix<f64>,
    resid: &DVector<f64>,
    beta: &DVector<f64>,
) -> DVector<f64> {
    -a * x1.tr_mul(resid) + eta * beta
}

fn kkt_residual(grad: &DVector<f64>, beta: &DVector<f64>, lambda: f64) -> f64 {
    grad.iter()
        .zip(beta.iter())
        .map(|(&g, &b)| {
            if b != 0.0 {
                (g + lambda * b.signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

fn soft_threshold(c: f64, lambda: f64) -> f64 {
    c.signum() * (c.abs() - lambda).max(0.0)
}

/// Cyclic coordinate descent on `1/2 b'Hb - c'b + lambda |b|_1 + eta/2 |b|^2`.
fn coordinate_descent<G>(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    lambda: f64,
    eta: f64,
    kkt: G,
) -> Result<(DVector<f64>, usize)>
where
    G: Fn(&DVector<f64>) -> f64,
{
    let p = c.len();
    let mut beta = DVector::zeros(p);
    // Running value of H b.
    let mut hb: DVector<f64> = DVector::zeros(p);
    let mut sweeps = 0;
    let mut polish = 0;
    loop {
        sweeps += 1;
        let mut max_change = 0.0f64;
        for j in 0..p {
            let denom = h[(j, j)] + eta;
            if denom <= 0.0 {
                continue;
            }
            let old = beta[j];
            let cj = c[j] - hb[j] + h[(j, j)] * old;
            let new = soft_threshold(cj, lambda) / denom;
            if new != old {
                hb.axpy(new - old, &h.column(j), 1.0);
                beta[j] = new;
                max_change = max_change.max((new - old).abs());
            }
        }
        if max_change < UPDATE_TOL {
            hb = h * &beta;
            if kkt(&beta) < KKT_TOL || polish >= 50 {
                return Ok((beta, sweeps));
            }
            polish += 1;
        }
        if sweeps >= MAX_SWEEPS {
            return Err(CarveError::SolverConvergence {
                iterations: sweeps,
                change: max_change,
            });
        }
    }
}

fn assemble(
    beta: DVector<f64>,
    grad: DVector<f64>,
    lambda: f64,
    eta: f64,
    rho: f64,
    sweeps: usize,
) -> ElasticNetFit {
    let p = beta.len();
    let kkt = kkt_residual(&grad, &beta, lambda);
    let active: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
    let active_signs = active.iter().map(|&j| beta[j].signum()).collect();
    let inactive_subgradient = (0..p)
        .filter(|&j| beta[j] == 0.0)
        .map(|j| -grad[j])
        .collect();
    ElasticNetFit {
        beta_hat: beta.iter().copied().collect(),
        active,
        active_signs,
        inactive_subgradient,
        kkt_residual: kkt,
        lambda,
        eta,
        rho,
        sweeps,
    }
}

fn check_inputs(y: &DVector<f64>, x: &DMatrix<f64>, lambda: f64, eta: f64, rho: f64) -> Result<()> {
    let (n, p) = x.shape();
    if y.len() != n || n == 0 || p == 0 {
        return Err(CarveError::Domain(format!(
            "response has {} rows, design is {n}x{p}",
            y.len()
        )));
    }
    if !(lambda > 0.0) || !(eta >= 0.0) || !(rho >= 0.0) {
        return Err(CarveError::Domain(
            "need lambda > 0, eta >= 0, rho >= 0".into(),
        ));
    }
    Ok(())
}

/// Fits the elastic net on first-stage data with the carved loss scaling.
pub fn elastic_net_fit(
    y1: &DVector<f64>,
    x1: &DMatrix<f64>,
    lambda: f64,
    eta: f64,
    rho: f64,
) -> Result<ElasticNetFit> {
    check_inputs(y1, x1, lambda, eta, rho)?;
    let a = loss_scale(x1.nrows(), rho);
    let h = a * x1.tr_mul(x1);
    let c = a * x1.tr_mul(y1);
    let grad = |b: &DVector<f64>| smooth_gradient(a, eta, x1, &(y1 - x1 * b), b);
    let (beta, sweeps) =
        coordinate_descent(&h, &c, lambda, eta, |b| kkt_residual(&grad(b), b, lambda))?;
    let g = grad(&beta);
    Ok(assemble(beta, g, lambda, eta, rho, sweeps))
}

/// Fits `|y - X b|^2 / (2 sqrt(n)) - w'b + lambda |b|_1 + eta/2 |b|^2` on
/// the full data, with an explicit randomization `w`.
pub fn randomized_elastic_net_fit(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    w: &DVector<f64>,
    lambda: f64,
    eta: f64,
    rho: f64,
) -> Result<ElasticNetFit> {
    check_inputs(y, x, lambda, eta, rho)?;
    if w.len() != x.ncols() {
        return Err(CarveError::Domain(
            "randomization length must match the number of columns".into(),
        ));
    }
    let a = 1.0 / (x.nrows() as f64).sqrt();
    let h = a * x.tr_mul(x);
    let c = a * x.tr_mul(y) + w;
    let grad = |b: &DVector<f64>| smooth_gradient(a, eta, x, &(y - x * b), b) - w;
    let (beta, sweeps) =
        coordinate_descent(&h, &c, lambda, eta, |b| kkt_residual(&grad(b), b, lambda))?;
    let g = grad(&beta);
    Ok(assemble(beta, g, lambda, eta, rho, sweeps))
}

/// The randomization implied by fitting on the first stage only:
/// `[-X'(y - X b) + (1 + rho^2) X1'(y1 - X1 b)] / sqrt(n)`.
pub fn kkt_randomization(
    fit: &ElasticNetFit,
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    y1: &DVector<f64>,
    x1: &DMatrix<f64>,
    rho: f64,
) -> Result<DVector<f64>> {
    let p = fit.beta_hat.len();
    if x.ncols() != p || x1.ncols() != p || y.len() != x.nrows() || y1.len() != x1.nrows() {
        return Err(CarveError::Domain(
            "dimension mismatch in randomization inputs".into(),
        ));
    }
    let beta = DVector::from_column_slice(&fit.beta_hat);
    let n = x.nrows() as f64;
    let full = x.tr_mul(&(y - x * &beta));
    let first = x1.tr_mul(&(y1 - x1 * &beta));
    Ok((-full + (1.0 + rho * rho) * first) / n.sqrt())
}
