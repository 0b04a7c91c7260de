//! Carved inference for correlated statistics.
//!
//! The full-data statistic is `Z ~ N(mu, Sigma)` and the randomization is
//! `W ~ N(0, rho^2 Omega)`, independent of `Z`. Selection is encoded by an
//! affine map `W = P_E Z + Q_E T + r_E` under which the observed outcome is
//! exactly the event `T > 0`, with any extra conditioning folded into `r_E`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, CarveError, Result};
use crate::gauss::{
    integrate, log_normal_interval, log_phi_bar, mvn_orthant_mc, phi_bar, psd_factor, MvnSpec,
    OrthantEstimate, QuadratureConfig, RngStream, LN_SQRT_2PI,
};
use crate::inference::{invert_pivot, ConfidenceInterval, PivotResult};
use crate::selection::{ElasticNetFit, SelectionOutcome};
use crate::seq::MIN_SELECTION_PROB;

const SQRT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CarveGeometry {
    /// Covariance of the statistic `Z`.
    pub sigma: DMatrix<f64>,
    /// Covariance of `W / rho`; equals `sigma` for screening rules.
    pub omega: DMatrix<f64>,
    pub q_e: DMatrix<f64>,
    pub r_e: DVector<f64>,
    pub p_e: DMatrix<f64>,
    pub rho: f64,
}

fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| CarveError::Numeric(format!("{what} is not positive definite")))
}

fn sym_power(m: &DMatrix<f64>, power: f64) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let lam = eig.eigenvalues.map(|l| l.max(SQRT_FLOOR).powf(power));
    &eig.eigenvectors * DMatrix::from_diagonal(&lam) * eig.eigenvectors.transpose()
}

/// Symmetric square root by eigendecomposition, eigenvalues floored at 1e-12.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_power(m, 0.5)
}

pub fn sym_inv_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_power(m, -0.5)
}

impl CarveGeometry {
    pub fn new(
        sigma: DMatrix<f64>,
        omega: DMatrix<f64>,
        q_e: DMatrix<f64>,
        r_e: DVector<f64>,
        p_e: DMatrix<f64>,
        rho: f64,
    ) -> Result<Self> {
        let d = sigma.nrows();
        let shapes_ok = sigma.is_square()
            && omega.shape() == (d, d)
            && p_e.shape() == (d, d)
            && q_e.nrows() == d
            && q_e.ncols() >= 1
            && r_e.len() == d;
        if !shapes_ok {
            return Err(CarveError::Domain(
                "inconsistent carving geometry dimensions".into(),
            ));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(CarveError::Domain(format!(
                "rho must be positive, got {rho}"
            )));
        }
        let g = Self {
            sigma,
            omega,
            q_e,
            r_e,
            p_e,
            rho,
        };
        if g.sigma.iter().chain(g.r_e.iter()).any(|v| !v.is_finite()) {
            return Err(CarveError::Domain("non-finite geometry entries".into()));
        }
        spd_inverse(&g.sigma, "Sigma")?;
        spd_inverse(&g.inner_precision()?, "Q_E' Omega^-1 Q_E")?;
        Ok(g)
    }

    /// Geometry of a screening rule: `W = -Z + Q_E T + r_E`, where column
    /// `i` of `Q_E` is `s_i e_j` for the `i`-th selected `j`.
    pub fn screening(sigma: &DMatrix<f64>, outcome: &SelectionOutcome, rho: f64) -> Result<Self> {
        let d = sigma.nrows();
        let k = outcome.selected.len();
        if k == 0 || outcome.selected.iter().any(|&j| j >= d) {
            return Err(CarveError::Domain(
                "selection does not fit the covariance dimension".into(),
            ));
        }
        let scale = (1.0 + rho * rho).sqrt();
        let mut q_e = DMatrix::zeros(d, k);
        let mut r_e = DVector::zeros(d);
        for (i, &j) in outcome.selected.iter().enumerate() {
            let s = outcome.signs[i];
            q_e[(j, i)] = s;
            r_e[j] = s * scale * outcome.event_threshold(i);
        }
        let rest = outcome.complement(d);
        if rest.len() != outcome.dropped_values.len() {
            return Err(CarveError::Domain(
                "dropped values do not match the complement".into(),
            ));
        }
        for (&j, &v) in rest.iter().zip(&outcome.dropped_values) {
            r_e[j] = scale * v;
        }
        Self::new(
            sigma.clone(),
            sigma.clone(),
            q_e,
            r_e,
            -DMatrix::identity(d, d),
            rho,
        )
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn k(&self) -> usize {
        self.q_e.ncols()
    }

    fn omega_inv(&self) -> Result<DMatrix<f64>> {
        spd_inverse(&self.omega, "Omega")
    }

    /// `Q_E' Omega^-1 Q_E / rho^2`, the inverse covariance of `T` given `Z`.
    pub fn inner_precision(&self) -> Result<DMatrix<f64>> {
        let oi = self.omega_inv()?;
        Ok(self.q_e.transpose() * oi * &self.q_e / (self.rho * self.rho))
    }

    /// `(P_E, Q_E, r_E)` evaluated at the observed `(Z, W)` recover `T`.
    pub fn solve_t(&self, z: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        let rhs = w - &self.p_e * z - &self.r_e;
        let qtq = self.q_e.transpose() * &self.q_e;
        let inv = spd_inverse(&qtq, "Q_E' Q_E")?;
        Ok(inv * self.q_e.transpose() * rhs)
    }
}

/// The whitened carving parameters of the Gaussian carved likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAlpha {
    /// `|E| x d`, acting on the standardized statistic.
    pub q: Vec<Vec<f64>>,
    pub sqrt_n_alpha: Vec<f64>,
}

impl QAlpha {
    pub fn new(q: DMatrix<f64>, sqrt_n_alpha: DVector<f64>) -> Result<Self> {
        if q.nrows() != sqrt_n_alpha.len() || q.nrows() == 0 {
            return Err(CarveError::Domain("Q rows must match alpha length".into()));
        }
        if q.iter().chain(sqrt_n_alpha.iter()).any(|v| !v.is_finite()) {
            return Err(CarveError::Domain("non-finite Q or alpha".into()));
        }
        Ok(Self {
            q: q.row_iter().map(|r| r.iter().copied().collect()).collect(),
            sqrt_n_alpha: sqrt_n_alpha.iter().copied().collect(),
        })
    }

    pub fn q_matrix(&self) -> DMatrix<f64> {
        let k = self.q.len();
        let d = self.q[0].len();
        DMatrix::from_fn(k, d, |i, j| self.q[i][j])
    }

    pub fn alpha(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.sqrt_n_alpha)
    }

    pub fn k(&self) -> usize {
        self.q.len()
    }

    pub fn dim(&self) -> usize {
        self.q[0].len()
    }
}

/// `Q = Sigma~^{1/2} Q_E' Omega^-1 P_E Sigma^{1/2} / rho^2` and
/// `sqrt(n) alpha = Sigma~^{1/2} Q_E' Omega^-1 (P_E mu + r_E) / rho^2`, with
/// `Sigma~^-1 = Q_E' Omega^-1 Q_E / rho^2`. For screening (`P_E = -I`,
/// `Omega = Sigma`) this is `Q = -Sigma~^{1/2} Q_E' Sigma^{-1/2} / rho^2`.
pub fn build_q_alpha(geom: &CarveGeometry, mean: &DVector<f64>) -> Result<QAlpha> {
    if mean.len() != geom.dim() {
        return Err(CarveError::Domain(
            "mean dimension does not match geometry".into(),
        ));
    }
    let rho2 = geom.rho * geom.rho;
    let oi = geom.omega_inv()?;
    let half = sym_inv_sqrt(&geom.inner_precision()?);
    let core = &half * geom.q_e.transpose() * oi;
    let q = &core * &geom.p_e * sym_sqrt(&geom.sigma) / rho2;
    let alpha = &core * (&geom.p_e * mean + &geom.r_e) / rho2;
    QAlpha::new(q, alpha)
}

/// Law whose positive-orthant probability is the product-form selection
/// probability `E[prod_j Phibar(Q_j Z + sqrt(n) alpha_j)]`.
pub fn product_form_law(qa: &QAlpha) -> Result<MvnSpec> {
    let q = qa.q_matrix();
    let k = qa.k();
    let mut cov = DMatrix::identity(k, k) + &q * q.transpose();
    cov = 0.5 * (&cov + cov.transpose());
    MvnSpec::new(-qa.alpha(), cov)
}

/// `E[prod_j Phibar(Q_j Z + sqrt(n) alpha_j)]` for `Z ~ N(0, I)`, as the
/// orthant probability of `N(-sqrt(n) alpha, I + Q Q')`.
pub fn mv_selection_prob(qa: &QAlpha, n_mc: usize, rng: &RngStream) -> Result<OrthantEstimate> {
    if qa.k() > 50 {
        return Err(CarveError::Domain(
            "selection probabilities support at most 50 selected coordinates".into(),
        ));
    }
    mvn_orthant_mc(&product_form_law(qa)?, n_mc, rng)
}

/// The same expectation by averaging the product over draws of `Z`.
pub fn mv_selection_prob_direct(qa: &QAlpha, n_mc: usize, rng: &RngStream) -> Result<(f64, f64)> {
    if n_mc < 2 {
        return Err(CarveError::Domain("need at least two draws".into()));
    }
    let mut r = rng.rng();
    let d = qa.dim();
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n_mc {
        let z = DVector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal));
        let v = mv_carved_density_ratio(&z, qa, 1.0)?;
        s += v;
        s2 += v * v;
    }
    let n = n_mc as f64;
    let mean = s / n;
    let var = (s2 - n * mean * mean) / (n - 1.0);
    Ok((mean, (var.max(0.0) / n).sqrt()))
}

/// Law of `T` given `R` alone: `T ~ N(c, A A' + Sigma~)`; its positive
/// orthant probability is the exact selection probability.
pub fn selection_law(geom: &CarveGeometry, mean: &DVector<f64>) -> Result<MvnSpec> {
    if mean.len() != geom.dim() {
        return Err(CarveError::Domain(
            "mean dimension does not match geometry".into(),
        ));
    }
    let rho2 = geom.rho * geom.rho;
    let oi = geom.omega_inv()?;
    let cond_cov = spd_inverse(&geom.inner_precision()?, "inner precision")?;
    let core = -(&cond_cov * geom.q_e.transpose() * oi) / rho2;
    let a = &core * &geom.p_e * sym_sqrt(&geom.sigma);
    let c = &core * (&geom.p_e * mean + &geom.r_e);
    let mut cov = &a * a.transpose() + cond_cov;
    cov = 0.5 * (&cov + cov.transpose());
    MvnSpec::new(c, cov)
}

pub fn mv_selection_prob_exact(
    geom: &CarveGeometry,
    mean: &DVector<f64>,
    n_mc: usize,
    rng: &RngStream,
) -> Result<OrthantEstimate> {
    mvn_orthant_mc(&selection_law(geom, mean)?, n_mc, rng)
}

/// `prod_j Phibar(Q_j z + sqrt(n) alpha_j) / selprob`.
pub fn mv_carved_density_ratio(z: &DVector<f64>, qa: &QAlpha, selprob: f64) -> Result<f64> {
    if !(selprob > 0.0) {
        return Err(CarveError::Domain(format!(
            "selection probability must be positive, got {selprob}"
        )));
    }
    if z.len() != qa.dim() {
        return Err(CarveError::Domain("z dimension does not match Q".into()));
    }
    let prod: f64 =
        qa.q.iter()
            .zip(&qa.sqrt_n_alpha)
            .map(|(row, a)| phi_bar(row.iter().zip(z.iter()).map(|(q, x)| q * x).sum::<f64>() + a))
            .product();
    Ok(prod / selprob)
}

/// `Z_{-j} - Sigma_{-j,j} Z_j / sigma_j^2`, returned with a zero in slot `j`.
pub fn nuisance_statistic(
    z: &DVector<f64>,
    sigma: &DMatrix<f64>,
    j: usize,
) -> Result<DVector<f64>> {
    if j >= z.len() || sigma.shape() != (z.len(), z.len()) {
        return Err(CarveError::Domain(
            "nuisance: index or dimension mismatch".into(),
        ));
    }
    let s_jj = sigma[(j, j)];
    let mut n = z - sigma.column(j) * (z[j] / s_jj);
    n[j] = 0.0;
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MvPivotOptions {
    /// Draws for the inner orthant integral when `|E| >= 2`.
    pub n_mc: usize,
    /// Use the Monte Carlo inner integral even when `|E| = 1`.
    pub force_mc: bool,
}

impl Default for MvPivotOptions {
    fn default() -> Self {
        Self {
            n_mc: 4000,
            force_mc: false,
        }
    }
}

/// Joint Gaussian law of `(Z_j, T)` given the nuisance statistic and `r_E`,
/// before restricting to `T > 0`. Its mean is affine in `mu_j`.
struct ConditionalLaw {
    k: usize,
    s_zz: f64,
    /// Mean of `(z, t)` at `mu_j = 0` and its derivative in `mu_j`.
    base_mean: DVector<f64>,
    slope: DVector<f64>,
    /// Regression of `t` on `z`.
    b: DVector<f64>,
    /// Cholesky factor of the covariance of `t` given `z`.
    cond_chol: DMatrix<f64>,
}

impl ConditionalLaw {
    fn new(geom: &CarveGeometry, j: usize, nuisance: &DVector<f64>) -> Result<Self> {
        let d = geom.dim();
        if j >= d || nuisance.len() != d {
            return Err(CarveError::Domain(
                "pivot: coordinate or nuisance dimension mismatch".into(),
            ));
        }
        let k = geom.k();
        let rho2 = geom.rho * geom.rho;
        let s_jj = geom.sigma[(j, j)];
        let u1 = geom.sigma.column(j) / s_jj;
        let mut u0 = nuisance.clone();
        u0[j] = 0.0;
        let v0 = &geom.p_e * u0 + &geom.r_e;
        let v1 = &geom.p_e * u1;
        let mut bmat = DMatrix::zeros(d, k + 1);
        bmat.set_column(0, &v1);
        bmat.columns_mut(1, k).copy_from(&geom.q_e);
        let oi = geom.omega_inv()?;
        let mut lambda = bmat.transpose() * &oi * &bmat / rho2;
        lambda[(0, 0)] += 1.0 / s_jj;
        lambda = 0.5 * (&lambda + lambda.transpose());
        let cov = spd_inverse(&lambda, "joint precision of (Z_j, T)")?;
        let h0 = -(bmat.transpose() * &oi * v0) / rho2;
        let base_mean = &cov * h0;
        let slope = cov.column(0) / s_jj;
        let s_zz = cov[(0, 0)];
        let s_tz = cov.view((1, 0), (k, 1)).into_owned();
        let b = DVector::from_iterator(k, s_tz.iter().map(|v| v / s_zz));
        let mut cond = cov.view((1, 1), (k, k)).into_owned() - &s_tz * s_tz.transpose() / s_zz;
        cond = 0.5 * (&cond + cond.transpose());
        let (cond_chol, _) = psd_factor(&cond)?;
        Ok(Self {
            k,
            s_zz,
            base_mean,
            slope,
            b,
            cond_chol,
        })
    }

    fn mean(&self, mu_j: f64) -> DVector<f64> {
        &self.base_mean + &self.slope * mu_j
    }

    /// Exact pivot for a single selected coordinate.
    fn exact_pivot(&self, z_obs: f64, mu_j: f64, cfg: &QuadratureConfig) -> Result<PivotResult> {
        let m = self.mean(mu_j);
        let (m_z, m_t) = (m[0], m[1]);
        let sd_z = self.s_zz.sqrt();
        let cond_sd = self.cond_chol[(0, 0)];
        let b = self.b[0];
        let s_tt = cond_sd * cond_sd + b * b * self.s_zz;
        let sd_t = s_tt.sqrt();
        let log_den = log_phi_bar(-m_t / sd_t);
        if !(log_den >= MIN_SELECTION_PROB.ln()) {
            return Err(CarveError::RareEventUnderflow { log_prob: log_den });
        }
        let denominator = log_den.exp();
        let x_obs = (z_obs - m_z) / sd_z;
        // Standardized z; selection factor P(t > 0 | z).
        let slope = b * sd_z;
        let log_f = |x: f64| -0.5 * x * x - LN_SQRT_2PI + log_phi_bar(-(m_t + slope * x) / cond_sd);
        let a = -m_t / sd_t;
        let inv_mills = (-0.5 * a * a - LN_SQRT_2PI - log_phi_bar(a)).exp();
        let center = slope / sd_t * inv_mills;
        let r = cfg.truncation_radius;
        let (lo, hi) = (center - r, center + r);
        let start = x_obs.max(lo);
        if start >= hi {
            return Ok(PivotResult {
                value: 0.0,
                numerator: 0.0,
                denominator,
                quadrature_error: 0.0,
                std_error: 0.0,
            });
        }
        let shift = log_f(center);
        let q = integrate(|x| (log_f(x) - shift).exp(), start, hi, cfg)?;
        let scale = (shift - log_den).exp();
        let value = (q.value * scale).clamp(0.0, 1.0);
        Ok(PivotResult {
            value,
            numerator: value * denominator,
            denominator,
            quadrature_error: q.error * scale,
            std_error: 0.0,
        })
    }

    fn draws(&self, n_mc: usize, rng: &RngStream) -> Vec<f64> {
        let mut r = rng.rng();
        let k = self.k;
        let mut out = vec![0.0; n_mc * k];
        let mut g = vec![0.0; k];
        for i in 0..n_mc {
            for v in g.iter_mut() {
                *v = r.sample(StandardNormal);
            }
            for l in 0..k {
                out[i * k + l] = g[..=l]
                    .iter()
                    .enumerate()
                    .map(|(c, gc)| self.cond_chol[(l, c)] * gc)
                    .sum();
            }
        }
        out
    }

    /// Pivot with the inner orthant integral replaced by an average over
    /// fixed draws; each draw cuts an exact interval of `z`, integrated in
    /// closed form against the Gaussian law of `z`.
    fn mc_pivot(&self, z_obs: f64, mu_j: f64, draws: &[f64]) -> Result<PivotResult> {
        let k = self.k;
        let n = draws.len() / k;
        let m = self.mean(mu_j);
        let m_z = m[0];
        let sd_z = self.s_zz.sqrt();
        let x_obs = (z_obs - m_z) / sd_z;
        let mut log_num = Vec::with_capacity(n);
        let mut log_den = Vec::with_capacity(n);
        for i in 0..n {
            let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
            for l in 0..k {
                // t_l = m_t + b_l (z - m_z) + e_l > 0, in standardized z.
                let off = m[1 + l] + draws[i * k + l];
                let slope = self.b[l] * sd_z;
                if slope > 0.0 {
                    lo = lo.max(-off / slope);
                } else if slope < 0.0 {
                    hi = hi.min(-off / slope);
                } else if off <= 0.0 {
                    hi = f64::NEG_INFINITY;
                }
            }
            log_den.push(log_normal_interval(lo, hi));
            log_num.push(log_normal_interval(lo.max(x_obs), hi));
        }
        let top = log_den.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if top == f64::NEG_INFINITY {
            return Err(CarveError::RareEventUnderflow {
                log_prob: f64::NEG_INFINITY,
            });
        }
        let nf = n as f64;
        let a: Vec<f64> = log_num.iter().map(|v| (v - top).exp()).collect();
        let b: Vec<f64> = log_den.iter().map(|v| (v - top).exp()).collect();
        let sa: f64 = a.iter().sum();
        let sb: f64 = b.iter().sum();
        let value = (sa / sb).clamp(0.0, 1.0);
        let resid: f64 = a.iter().zip(&b).map(|(x, y)| (x - value * y).powi(2)).sum();
        let std_error = (resid / (nf - 1.0) / nf).sqrt() / (sb / nf);
        let log_mean_den = top + (sb / nf).ln();
        if !(log_mean_den >= MIN_SELECTION_PROB.ln()) {
            return Err(CarveError::RareEventUnderflow {
                log_prob: log_mean_den,
            });
        }
        let denominator = log_mean_den.exp();
        Ok(PivotResult {
            value,
            numerator: value * denominator,
            denominator,
            quadrature_error: 0.0,
            std_error,
        })
    }
}

fn check_mc(opts: &MvPivotOptions) -> Result<()> {
    if opts.n_mc < 1000 {
        return Err(CarveError::Domain(format!(
            "pivot Monte Carlo needs at least 1000 draws, got {}",
            opts.n_mc
        )));
    }
    Ok(())
}

/// Exact carved pivot `P(Z_j > z_obs | selection, nuisance)` for the mean
/// `mu_j` of coordinate `j`; increasing in `mu_j`.
#[allow(clippy::too_many_arguments)]
pub fn mv_pivot(
    z_obs: f64,
    j: usize,
    geom: &CarveGeometry,
    mu_j: f64,
    nuisance: &DVector<f64>,
    opts: &MvPivotOptions,
    cfg: &QuadratureConfig,
    rng: &RngStream,
) -> Result<PivotResult> {
    ensure_finite(z_obs, "observed statistic")?;
    ensure_finite(mu_j, "mean")?;
    cfg.validate()?;
    let law = ConditionalLaw::new(geom, j, nuisance)?;
    if law.k == 1 && !opts.force_mc {
        return law.exact_pivot(z_obs, mu_j, cfg);
    }
    check_mc(opts)?;
    let draws = law.draws(opts.n_mc, rng);
    law.mc_pivot(z_obs, mu_j, &draws)
}

/// Equal-tailed interval for `mu_j`, reusing one set of draws for every
/// pivot evaluation.
#[allow(clippy::too_many_arguments)]
pub fn mv_confidence_interval(
    z_obs: f64,
    j: usize,
    geom: &CarveGeometry,
    nuisance: &DVector<f64>,
    level: f64,
    opts: &MvPivotOptions,
    cfg: &QuadratureConfig,
    rng: &RngStream,
) -> Result<ConfidenceInterval> {
    ensure_finite(z_obs, "observed statistic")?;
    cfg.validate()?;
    let law = ConditionalLaw::new(geom, j, nuisance)?;
    if law.k == 1 && !opts.force_mc {
        return invert_pivot(
            |mu| law.exact_pivot(z_obs, mu, cfg).map(|p| p.value),
            z_obs,
            level,
        );
    }
    check_mc(opts)?;
    let draws = law.draws(opts.n_mc, rng);
    invert_pivot(
        |mu| law.mc_pivot(z_obs, mu, &draws).map(|p| p.value),
        z_obs,
        level,
    )
}

/// Carving geometry of an elastic-net fit on the full data.
///
/// The statistic is `Z = (sqrt(n) b_E, X_{-E}'(y - X_E b_E) / sqrt(n))` with
/// `b_E` the least-squares refit on the active set, ordered as
/// `order = (active, inactive)`. The randomization `W` is the gap between the
/// full-data and the carved stationarity conditions, with covariance
/// `rho^2 sigma^2 X'X / n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElasticNetCarving {
    pub geometry: CarveGeometry,
    pub statistic: DVector<f64>,
    pub order: Vec<usize>,
}

pub fn elastic_net_geometry(
    fit: &ElasticNetFit,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_sd: f64,
    rho: f64,
) -> Result<ElasticNetCarving> {
    let (n, p) = x.shape();
    let k = fit.active.len();
    if k == 0 {
        return Err(CarveError::Domain(
            "elastic-net fit selected no variables".into(),
        ));
    }
    if y.len() != n || fit.beta_hat.len() != p || !(noise_sd > 0.0) {
        return Err(CarveError::Domain(
            "elastic-net geometry: dimension or noise mismatch".into(),
        ));
    }
    let inactive: Vec<usize> = (0..p)
        .filter(|j| fit.active.binary_search(j).is_err())
        .collect();
    let order: Vec<usize> = fit.active.iter().chain(&inactive).copied().collect();
    let xo = x.select_columns(&order);
    let nf = n as f64;
    let gram = xo.tr_mul(&xo) / nf;
    let u = gram.view((0, 0), (k, k)).into_owned();
    let v = gram.view((k, 0), (p - k, k)).into_owned();
    let u_inv = spd_inverse(&u, "active Gram block")?;
    let xe = xo.columns(0, k).into_owned();
    let refit = &u_inv * xe.tr_mul(y) / nf;
    let mut statistic = DVector::zeros(p);
    statistic.rows_mut(0, k).copy_from(&(&refit * nf.sqrt()));
    if p > k {
        let xr = xo.columns(k, p - k).into_owned();
        let resid = y - &xe * &refit;
        statistic
            .rows_mut(k, p - k)
            .copy_from(&(xr.tr_mul(&resid) / nf.sqrt()));
    }
    let s2 = noise_sd * noise_sd;
    let mut sigma = DMatrix::zeros(p, p);
    sigma.view_mut((0, 0), (k, k)).copy_from(&(&u_inv * s2));
    if p > k {
        let g_rr = gram.view((k, k), (p - k, p - k)).into_owned();
        let schur = g_rr - &v * &u_inv * v.transpose();
        sigma
            .view_mut((k, k), (p - k, p - k))
            .copy_from(&(schur * s2));
    }
    sigma = 0.5 * (&sigma + sigma.transpose());
    let omega = &gram * s2;
    let mut p_e = DMatrix::zeros(p, p);
    p_e.view_mut((0, 0), (k, k)).copy_from(&(-&u));
    p_e.view_mut((k, 0), (p - k, k)).copy_from(&(-&v));
    for i in k..p {
        p_e[(i, i)] = -1.0;
    }
    // T holds sqrt(n) |b_E|; the ridge term enters as eta b = eta / sqrt(n) * sqrt(n) b.
    let mut q_e = DMatrix::zeros(p, k);
    q_e.view_mut((0, 0), (k, k))
        .copy_from(&(&u + DMatrix::identity(k, k) * (fit.eta / nf.sqrt())));
    q_e.view_mut((k, 0), (p - k, k)).copy_from(&v);
    for (c, &s) in fit.active_signs.iter().enumerate() {
        q_e.column_mut(c).scale_mut(s);
    }
    let mut r_e = DVector::zeros(p);
    for (i, &s) in fit.active_signs.iter().enumerate() {
        r_e[i] = fit.lambda * s;
    }
    for (i, &g) in fit.inactive_subgradient.iter().enumerate() {
        r_e[k + i] = g;
    }
    let geometry = CarveGeometry::new(sigma, omega, q_e, r_e, p_e, rho)?;
    Ok(ElasticNetCarving {
        geometry,
        statistic,
        order,
    })
}
