//! Leading-order approximations of rare selection probabilities and their
//! numerical certification.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CarveError, Result};
use crate::gauss::{
    gauss_expectation, log_phi_bar, mills_lower_unchecked, mills_upper_unchecked, mvn_orthant_is,
    phi_bar, phi_cdf, psd_factor, QuadratureConfig, RngStream, LN_SQRT_2PI,
};
use crate::mv::{product_form_law, sym_sqrt, QAlpha};
use crate::sim::GenerativeSpec;

const LN_2PI: f64 = 2.0 * LN_SQRT_2PI;

fn check_rare_mean(m: f64, rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(CarveError::Domain(format!(
            "rho must be positive, got {rho}"
        )));
    }
    if !(m <= -2.0 && m.is_finite()) {
        return Err(CarveError::Domain(format!(
            "the rare side needs m <= -2, got {m}"
        )));
    }
    Ok(())
}

/// `log( |m|^-1 exp(-m^2 / (2 (1 + rho^2))) sqrt(1 + rho^2) / sqrt(2 pi) )`.
pub fn log_seq_selprob_asymptotic(m: f64, rho: f64) -> Result<f64> {
    check_rare_mean(m, rho)?;
    let s2 = 1.0 + rho * rho;
    Ok(-m * m / (2.0 * s2) - m.abs().ln() + 0.5 * s2.ln() - LN_SQRT_2PI)
}

pub fn seq_selprob_asymptotic(m: f64, rho: f64) -> Result<f64> {
    log_seq_selprob_asymptotic(m, rho).map(f64::exp)
}

/// `log Phi(m / sqrt(1 + rho^2))`, the exact univariate selection probability.
pub fn log_seq_selprob_exact(m: f64, rho: f64) -> f64 {
    log_phi_bar(-m / (1.0 + rho * rho).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeqDecayRow {
    pub m: f64,
    pub rho: f64,
    pub exact: f64,
    pub approx: f64,
    pub rel_error: f64,
}

pub fn seq_decay_table(ms: &[f64], rho: f64) -> Result<Vec<SeqDecayRow>> {
    ms.iter()
        .map(|&m| {
            let le = log_seq_selprob_exact(m, rho);
            let la = log_seq_selprob_asymptotic(m, rho)?;
            Ok(SeqDecayRow {
                m,
                rho,
                exact: le.exp(),
                approx: la.exp(),
                rel_error: (la - le).exp_m1().abs(),
            })
        })
        .collect()
}

/// `ratios[(k, j)] = alpha_k / alpha_j`.
pub fn alpha_ratios(alpha: &DVector<f64>) -> DMatrix<f64> {
    let k = alpha.len();
    DMatrix::from_fn(k, k, |r, c| alpha[r] / alpha[c])
}

/// `[ (prod_j sum_k (I + QQ')^-1_{jk} abar_{kj}) (2 pi)^{|E|/2} sqrt(det(I + Q'Q)) ]^-1`.
pub fn l_constant(
    qqt: &DMatrix<f64>,
    qtq: &DMatrix<f64>,
    alpha_bar_ratios: &DMatrix<f64>,
) -> Result<f64> {
    let k = qqt.nrows();
    if !qqt.is_square() || !qtq.is_square() || alpha_bar_ratios.shape() != (k, k) || k == 0 {
        return Err(CarveError::Domain("l_constant: dimension mismatch".into()));
    }
    let m_inv = (DMatrix::identity(k, k) + qqt)
        .try_inverse()
        .ok_or_else(|| CarveError::Numeric("I + QQ' is singular".into()))?;
    let prod: f64 = (0..k)
        .map(|j| {
            (0..k)
                .map(|c| m_inv[(j, c)] * alpha_bar_ratios[(c, j)])
                .sum::<f64>()
        })
        .product();
    let det = (DMatrix::identity(qtq.nrows(), qtq.nrows()) + qtq).determinant();
    if !(det > 0.0) {
        return Err(CarveError::Numeric(format!("det(I + Q'Q) = {det}")));
    }
    if !(prod > 0.0) {
        return Err(CarveError::Domain(format!(
            "the tilted mean is not interior to the orthant (product {prod})"
        )));
    }
    Ok(1.0 / (prod * (0.5 * k as f64 * LN_2PI).exp() * det.sqrt()))
}

/// `log[ exp(-a'(I + QQ')^-1 a / 2) (prod_j |a_j|)^-1 L ]` with `a = sqrt(n) alpha`.
pub fn log_mv_selprob_asymptotic(qa: &QAlpha) -> Result<f64> {
    let a = qa.alpha();
    if a.iter().any(|v| v.abs() < 2.0) {
        return Err(CarveError::Domain(
            "every |sqrt(n) alpha_j| must be at least 2".into(),
        ));
    }
    let q = qa.q_matrix();
    let k = qa.k();
    let qqt = &q * q.transpose();
    let m_inv = (DMatrix::identity(k, k) + &qqt)
        .try_inverse()
        .ok_or_else(|| CarveError::Numeric("I + QQ' is singular".into()))?;
    let expo = 0.5 * a.dot(&(&m_inv * &a));
    let l = l_constant(&qqt, &(q.transpose() * &q), &alpha_ratios(&a))?;
    Ok(-expo - a.iter().map(|v| v.abs().ln()).sum::<f64>() + l.ln())
}

pub fn mv_selprob_asymptotic(qa: &QAlpha) -> Result<f64> {
    log_mv_selprob_asymptotic(qa).map(f64::exp)
}

/// `sqrt(n) alpha = a (I + QQ')^{1/2} abar`.
pub fn rare_alpha(q: &DMatrix<f64>, alpha_bar: &DVector<f64>, a: f64) -> Result<QAlpha> {
    let k = q.nrows();
    if alpha_bar.len() != k || alpha_bar.iter().any(|v| !(*v > 0.0)) {
        return Err(CarveError::Domain(
            "alpha_bar must be positive with one entry per row of Q".into(),
        ));
    }
    let m = DMatrix::identity(k, k) + q * q.transpose();
    QAlpha::new(q.clone(), sym_sqrt(&m) * alpha_bar * a)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MvDecayRow {
    pub a: f64,
    pub log_exact: f64,
    pub exact_rel_se: f64,
    pub log_approx: f64,
    pub ratio: f64,
    pub ratio_se: f64,
}

/// Exact/approximate ratio along `a`, the exact value by importance sampling.
pub fn mv_decay_table(
    q: &DMatrix<f64>,
    alpha_bar: &DVector<f64>,
    a_list: &[f64],
    n_mc: usize,
    rng: &RngStream,
) -> Result<Vec<MvDecayRow>> {
    a_list
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let qa = rare_alpha(q, alpha_bar, a)?;
            let est = mvn_orthant_is(&product_form_law(&qa)?, n_mc, &rng.derive(i as u64))?;
            let log_approx = log_mv_selprob_asymptotic(&qa)?;
            let ratio = (est.log_estimate - log_approx).exp();
            Ok(MvDecayRow {
                a,
                log_exact: est.log_estimate,
                exact_rel_se: est.rel_std_error,
                log_approx,
                ratio,
                ratio_se: ratio * est.rel_std_error,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SandwichConsistency {
    pub q_level: f64,
    pub log_lower: f64,
    pub lower_rel_se: f64,
    pub log_upper: f64,
    pub upper_rel_se: f64,
    pub log_chernoff: f64,
    pub log_upper_bound: f64,
    pub log_exact: f64,
    pub exact_rel_se: f64,
    pub log_approx: f64,
    pub exact_inside: bool,
    pub approx_inside: bool,
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Brackets the selection probability by `E[L 1{|QZ| < q a}]` below and
/// `E[U 1{|QZ| < q a}] + 2 exp(-q^2 a'(QQ')^-1 a / 2)` above, with
/// `q = sqrt(lambda_max(QQ'(I + QQ')^-1))`. Both expectations are sampled
/// from the Gaussian tilted to the dominating point, where `L` and `U`
/// reduce to bounded factors.
pub fn sandwich_consistency(
    qa: &QAlpha,
    n_mc: usize,
    rng: &RngStream,
) -> Result<SandwichConsistency> {
    if n_mc < 1000 {
        return Err(CarveError::Domain("need at least 1000 draws".into()));
    }
    let a = qa.alpha();
    if a.iter().any(|v| !(*v > 0.0)) {
        return Err(CarveError::Domain(
            "the bracket needs sqrt(n) alpha > 0".into(),
        ));
    }
    let q = qa.q_matrix();
    let (k, d) = q.shape();
    let qqt = &q * q.transpose();
    let m_inv = (DMatrix::identity(k, k) + &qqt)
        .try_inverse()
        .ok_or_else(|| CarveError::Numeric("I + QQ' is singular".into()))?;
    let qqt_inv = qqt
        .clone()
        .try_inverse()
        .ok_or_else(|| CarveError::Domain("QQ' must be invertible for the Chernoff term".into()))?;
    let lam = (&qqt * &m_inv).symmetric_eigenvalues().max();
    let q_level = lam.max(0.0).sqrt();
    let b = DMatrix::identity(d, d) + q.transpose() * &q;
    let b_inv = b
        .clone()
        .try_inverse()
        .ok_or_else(|| CarveError::Numeric("I + Q'Q is singular".into()))?;
    let center = -(&b_inv * q.transpose() * &a);
    let (chol, _) = psd_factor(&(0.5 * (&b_inv + b_inv.transpose())))?;
    let log_base =
        -0.5 * a.dot(&(&m_inv * &a)) - 0.5 * k as f64 * LN_2PI - 0.5 * b.determinant().ln();

    let mut r = rng.rng();
    let (mut sl, mut sl2, mut su, mut su2) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..n_mc {
        let g = DVector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal));
        let z = &center + &chol * g;
        let qz = &q * z;
        if (0..k).any(|j| qz[j].abs() >= q_level * a[j]) {
            continue;
        }
        let (mut fl, mut fu) = (1.0, 1.0);
        for j in 0..k {
            let u = qz[j] + a[j];
            fl *= 2.0 / ((4.0 + u * u).sqrt() + u);
            fu *= 2.0 / ((2.0 + u * u).sqrt() + u);
        }
        sl += fl;
        sl2 += fl * fl;
        su += fu;
        su2 += fu * fu;
    }
    if sl == 0.0 {
        return Err(CarveError::Numeric(
            "no tilted draw fell inside the bracket region".into(),
        ));
    }
    let nf = n_mc as f64;
    let rel_se = |s: f64, s2: f64| {
        let mean = s / nf;
        ((s2 / nf - mean * mean).max(0.0) / (nf - 1.0)).sqrt() / mean
    };
    let log_lower = log_base + (sl / nf).ln();
    let log_upper = log_base + (su / nf).ln();
    let log_chernoff = 2f64.ln() - 0.5 * q_level * q_level * a.dot(&(&qqt_inv * &a));
    let log_upper_bound = log_add(log_upper, log_chernoff);
    let lower_rel_se = rel_se(sl, sl2);
    let upper_rel_se = rel_se(su, su2);

    let exact = mvn_orthant_is(&product_form_law(qa)?, n_mc, &rng.derive(1))?;
    let log_approx = log_mv_selprob_asymptotic(qa)?;
    let lo_band = log_lower + (1.0 - 3.0 * lower_rel_se).max(1e-300).ln();
    let hi_band = log_add(log_upper + (1.0 + 3.0 * upper_rel_se).ln(), log_chernoff);
    let exact_lo = exact.log_estimate + (1.0 + 3.0 * exact.rel_std_error).ln();
    let exact_hi = exact.log_estimate + (1.0 - 3.0 * exact.rel_std_error).max(1e-300).ln();
    Ok(SandwichConsistency {
        q_level,
        log_lower,
        lower_rel_se,
        log_upper,
        upper_rel_se,
        log_chernoff,
        log_upper_bound,
        log_exact: exact.log_estimate,
        exact_rel_se: exact.rel_std_error,
        log_approx,
        exact_inside: exact_lo >= lo_band && exact_hi <= hi_band,
        approx_inside: log_approx >= lo_band && log_approx <= hi_band,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionCheck {
    pub m: f64,
    pub rho: f64,
    pub quadrature: f64,
    pub closed_form: f64,
    pub abs_error: f64,
}

/// `E[Phibar(-(Z + m) / rho)]` by quadrature against `Phi(m / sqrt(1 + rho^2))`.
pub fn convolution_identity(m: f64, rho: f64, cfg: &QuadratureConfig) -> Result<ConvolutionCheck> {
    if !(rho > 0.0) || !m.is_finite() {
        return Err(CarveError::Domain(
            "convolution identity needs rho > 0 and finite m".into(),
        ));
    }
    let quadrature = gauss_expectation(|z| phi_bar(-(z + m) / rho), cfg)?;
    let closed_form = phi_cdf(m / (1.0 + rho * rho).sqrt());
    Ok(ConvolutionCheck {
        m,
        rho,
        quadrature,
        closed_form,
        abs_error: (quadrature - closed_form).abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub estimate: f64,
    pub target: f64,
    pub std_error: f64,
    /// `None` when the standard error vanishes but the estimate misses the target.
    pub z_score: Option<f64>,
}

impl Moment {
    fn new(estimate: f64, target: f64, std_error: f64) -> Self {
        let diff = estimate - target;
        let z_score = if std_error > 0.0 {
            Some(diff / std_error)
        } else if diff.abs() <= 1e-12 {
            Some(0.0)
        } else {
            None
        };
        Self {
            estimate,
            target,
            std_error,
            z_score,
        }
    }

    pub fn within(&self, k: f64) -> bool {
        self.z_score.is_some_and(|z| z.abs() <= k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentsReport {
    pub n1: usize,
    pub n2: usize,
    pub rho2: f64,
    pub n_mc: usize,
    pub mean: Vec<Moment>,
    pub cov: Vec<Vec<Moment>>,
    pub cross_cov: Vec<Vec<Moment>>,
    pub mean_within_3se: bool,
    pub cov_within_3se: bool,
    pub cross_cov_within_3se: bool,
}

fn sample_cov(a: &[DVector<f64>], b: &[DVector<f64>], i: usize, j: usize) -> (f64, f64) {
    let n = a.len() as f64;
    let ma = a.iter().map(|v| v[i]).sum::<f64>() / n;
    let mb = b.iter().map(|v| v[j]).sum::<f64>() / n;
    let prods: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x[i] - ma) * (y[j] - mb))
        .collect();
    let c = prods.iter().sum::<f64>() / n;
    let v = prods.iter().map(|p| (p - c).powi(2)).sum::<f64>() / (n - 1.0);
    (c * n / (n - 1.0), (v / n).sqrt())
}

/// Simulates `W = sqrt(n) mean_{n1} - sqrt(n) mean_n` against `Z = sqrt(n) mean_n`
/// and compares its moments with `E W = 0`, `Cov W = rho^2 Sigma` and
/// `Cov(W, Z) = 0`, which hold for every finite `n`.
pub fn randomization_moments_check(
    n1: usize,
    n2: usize,
    spec: &GenerativeSpec,
    n_mc: usize,
    rng: &RngStream,
) -> Result<MomentsReport> {
    if n1 < 2 {
        return Err(CarveError::Domain(format!("need n1 >= 2, got {n1}")));
    }
    if n_mc < 2 {
        return Err(CarveError::Domain("need at least two replications".into()));
    }
    let n = n1 + n2;
    let sqrt_n = (n as f64).sqrt();
    let rho2 = n2 as f64 / n1 as f64;
    let d = spec.dim();
    let mut r = rng.rng();
    let mut ws = Vec::with_capacity(n_mc);
    let mut zs = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let s1 = spec.sample_stage_sum(n1, &mut r);
        let s2 = spec.sample_stage_sum(n2, &mut r);
        let full = &s1 + s2;
        let z = &full * (sqrt_n / n as f64);
        let w = &s1 * (sqrt_n / n1 as f64) - &z;
        ws.push(w);
        zs.push(z);
    }
    let nf = n_mc as f64;
    let mean: Vec<Moment> = (0..d)
        .map(|i| {
            let m = ws.iter().map(|w| w[i]).sum::<f64>() / nf;
            let v = ws.iter().map(|w| (w[i] - m).powi(2)).sum::<f64>() / (nf - 1.0);
            Moment::new(m, 0.0, (v / nf).sqrt())
        })
        .collect();
    let grid = |b: &[DVector<f64>], target: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<Moment>> {
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        let (c, se) = sample_cov(&ws, b, i, j);
                        Moment::new(c, target(i, j), se)
                    })
                    .collect()
            })
            .collect()
    };
    let cov = grid(&ws, &|i, j| rho2 * spec.sigma[(i, j)]);
    let cross_cov = grid(&zs, &|_, _| 0.0);
    let all = |g: &Vec<Vec<Moment>>| g.iter().flatten().all(|m| m.within(3.0));
    Ok(MomentsReport {
        n1,
        n2,
        rho2,
        n_mc,
        mean_within_3se: mean.iter().all(|m| m.within(3.0)),
        cov_within_3se: all(&cov),
        cross_cov_within_3se: all(&cross_cov),
        mean,
        cov,
        cross_cov,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SandwichRow {
    pub x: f64,
    pub lower: f64,
    pub survival: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub rows: Vec<SandwichRow>,
    /// Grid points where `lower <= survival <= upper` fails.
    pub violations: Vec<f64>,
    pub max_rel_slack_lower: f64,
    pub max_rel_slack_upper: f64,
}

/// Tabulates the envelopes without judging them.
pub fn sandwich_table(
    grid: &[f64],
    lower: impl Fn(f64) -> f64,
    upper: impl Fn(f64) -> f64,
) -> Result<SandwichReport> {
    if grid.iter().any(|x| !x.is_finite()) {
        return Err(CarveError::Domain("sandwich grid must be finite".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    let mut violations = Vec::new();
    let (mut sl, mut su) = (0.0f64, 0.0f64);
    for &x in grid {
        let (l, s, u) = (lower(x), phi_bar(x), upper(x));
        if !(l <= s && s <= u) {
            violations.push(x);
        }
        sl = sl.max((s - l) / s);
        su = su.max((u - s) / s);
        rows.push(SandwichRow {
            x,
            lower: l,
            survival: s,
            upper: u,
        });
    }
    Ok(SandwichReport {
        rows,
        violations,
        max_rel_slack_lower: sl,
        max_rel_slack_upper: su,
    })
}

pub fn sandwich_report_with(
    grid: &[f64],
    lower: impl Fn(f64) -> f64,
    upper: impl Fn(f64) -> f64,
) -> Result<SandwichReport> {
    let report = sandwich_table(grid, lower, upper)?;
    if let Some(&x) = report.violations.first() {
        return Err(CarveError::InvariantFailure(format!(
            "Mills sandwich fails at {} grid points, first at x = {x}",
            report.violations.len()
        )));
    }
    Ok(report)
}

pub fn sandwich_report(grid: &[f64]) -> Result<SandwichReport> {
    sandwich_report_with(grid, mills_lower_unchecked, mills_upper_unchecked)
}

/// `start, start + step, ...` up to `end`, built from integer multiples.
pub fn uniform_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| start + step * i as f64).collect()
}
