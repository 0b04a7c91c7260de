use libm::erfc;

use crate::error::{ensure_finite, CarveError, Result};

pub const SQRT_2PI: f64 = 2.506_628_274_631_000_7;
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal density without input checks.
#[inline]
pub fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Upper tail `P(N(0,1) > x)` without input checks.
#[inline]
pub fn phi_bar(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Lower tail `P(N(0,1) <= x)`.
#[inline]
pub fn phi_cdf(x: f64) -> f64 {
    phi_bar(-x)
}

/// Natural log of the upper tail, accurate far beyond the range where
/// `phi_bar` underflows.
pub fn log_phi_bar(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < -5.0 {
        (-phi_bar(-x)).ln_1p()
    } else if x < 30.0 {
        phi_bar(x).ln()
    } else {
        // Laplace continued fraction for the Mills ratio, evaluated bottom-up.
        let mut t = x;
        for k in (1..=60).rev() {
            t = x + k as f64 / t;
        }
        -0.5 * x * x - LN_SQRT_2PI - t.ln()
    }
}

/// Natural log of the lower tail.
#[inline]
pub fn log_phi(x: f64) -> f64 {
    log_phi_bar(-x)
}

pub fn std_normal_pdf(x: f64) -> Result<f64> {
    ensure_finite(x, "x")?;
    Ok(phi(x))
}

pub fn std_normal_survival(x: f64) -> Result<f64> {
    ensure_finite(x, "x")?;
    Ok(phi_bar(x))
}

/// Inverse of the lower tail, polished with Newton steps on the tail that
/// does not cancel.
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(CarveError::Domain(format!(
            "quantile level must lie in (0, 1), got {p}"
        )));
    }
    if p > 0.5 {
        return Ok(-lower_quantile(1.0 - p));
    }
    Ok(lower_quantile(p))
}

/// `x` with `P(N(0,1) > x) = q`; keeps precision when `q` is tiny.
pub fn std_normal_upper_quantile(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(CarveError::Domain(format!(
            "tail probability must lie in (0, 1), got {q}"
        )));
    }
    if q > 0.5 {
        return Ok(lower_quantile(1.0 - q));
    }
    Ok(-lower_quantile(q))
}

fn lower_quantile(p: f64) -> f64 {
    let mut x = -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p);
    for _ in 0..3 {
        let f = phi_cdf(x);
        let d = phi(x);
        if d <= 0.0 {
            break;
        }
        // Newton on log Phi keeps the step well scaled deep in the tail.
        let step = if f > 0.0 && p < 1e-8 {
            (f.ln() - p.ln()) * f / d
        } else {
            (f - p) / d
        };
        if !step.is_finite() {
            break;
        }
        x -= step;
        if step.abs() < 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

/// `log P(lo < N(0,1) < hi)`, stable when the interval sits in a far tail.
pub fn log_normal_interval(lo: f64, hi: f64) -> f64 {
    if !(lo < hi) {
        return f64::NEG_INFINITY;
    }
    if lo >= 0.0 {
        let a = log_phi_bar(lo);
        let b = log_phi_bar(hi);
        a + (-(b - a).exp()).ln_1p()
    } else if hi <= 0.0 {
        log_normal_interval(-hi, -lo)
    } else {
        (-(phi_bar(hi) + phi_bar(-lo))).ln_1p()
    }
}

/// Lower envelope `2 phi(x) / (sqrt(4 + x^2) + x)` of the upper tail.
pub fn mills_lower_unchecked(x: f64) -> f64 {
    if x >= 0.0 {
        2.0 * phi(x) / ((4.0 + x * x).sqrt() + x)
    } else {
        phi(x) * ((4.0 + x * x).sqrt() - x) / 2.0
    }
}

/// Upper envelope `2 phi(x) / (sqrt(2 + x^2) + x)` of the upper tail.
pub fn mills_upper_unchecked(x: f64) -> f64 {
    if x >= 0.0 {
        2.0 * phi(x) / ((2.0 + x * x).sqrt() + x)
    } else {
        phi(x) * ((2.0 + x * x).sqrt() - x)
    }
}

pub fn mills_lower(x: f64) -> Result<f64> {
    ensure_finite(x, "x")?;
    Ok(mills_lower_unchecked(x))
}

pub fn mills_upper(x: f64) -> Result<f64> {
    ensure_finite(x, "x")?;
    Ok(mills_upper_unchecked(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    // Reference values computed with mpmath at 50 digits.
    const PDF_AT_1: f64 = 0.24197072451914334;
    const SURVIVAL_REF: [(f64, f64); 9] = [
        (-3.0, 0.9986501019683699),
        (0.5, 0.3085375387259869),
        (1.96, 0.024997895148220435),
        (5.0, 2.866515718791939e-07),
        (10.0, 7.619853024160525e-24),
        (20.0, 2.7536241186062337e-89),
        (30.0, 4.906713927148187e-198),
        (37.0, 5.725571222524577e-300),
        (-8.0, 0.9999999999999993),
    ];

    /// Continued-fraction oracle for the upper tail, independent of erfc.
    fn cf_survival(x: f64) -> f64 {
        if x < 2.0 {
            // Series for the lower tail near the center.
            let mut term = x;
            let mut sum = x;
            let mut k = 0.0;
            while term.abs() > 1e-20 * sum.abs().max(1e-300) {
                k += 1.0;
                term *= x * x / (2.0 * k + 1.0);
                sum += term;
            }
            0.5 - phi(x) * sum
        } else {
            let mut t = x;
            for k in (1..=400).rev() {
                t = x + k as f64 / t;
            }
            phi(x) / t
        }
    }

    #[test]
    fn pdf_values() {
        assert!((std_normal_pdf(0.0).unwrap() - 0.3989422804014327).abs() < 1e-16);
        assert!(rel(std_normal_pdf(1.0).unwrap(), PDF_AT_1) < 1e-14);
        assert_eq!(phi(2.3), phi(-2.3));
        assert!(std_normal_pdf(f64::NAN).is_err());
        assert!(std_normal_pdf(f64::INFINITY).is_err());
    }

    #[test]
    fn survival_reference_values() {
        assert_eq!(std_normal_survival(0.0).unwrap(), 0.5);
        for (x, v) in SURVIVAL_REF {
            assert!(rel(phi_bar(x), v) < 1e-12, "x={x}: {} vs {v}", phi_bar(x));
        }
        assert!(std_normal_survival(f64::NEG_INFINITY).is_err());
    }

    #[test]
    fn survival_matches_continued_fraction() {
        assert!(rel(phi_bar(1.96), cf_survival(1.96)) < 1e-12);
        for i in 0..=700 {
            let x = -0.5 + 0.05 * i as f64;
            assert!(rel(phi_bar(x), cf_survival(x)) < 1e-12, "x={x}");
        }
    }

    #[test]
    fn complement_identity() {
        for i in -80..=80 {
            let x = i as f64 * 0.1;
            assert!((phi_bar(x) + phi_bar(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn log_survival_tail() {
        for (x, v) in SURVIVAL_REF {
            assert!((log_phi_bar(x) - v.ln()).abs() < 1e-12 * v.ln().abs().max(1.0));
        }
        // Values far beyond the f64 range of the tail itself (mpmath).
        assert!((log_phi_bar(40.0) - (-804.6084420137538)).abs() < 1e-10);
        assert!((log_phi_bar(100.0) - (-5005.524208694205)).abs() < 1e-9);
        assert!((log_phi_bar(-40.0)).abs() < 1e-300);
        // Continuity across the branch points.
        for x in [-5.0f64, 30.0] {
            let a = log_phi_bar(x - 1e-9);
            let b = log_phi_bar(x + 1e-9);
            assert!((a - b).abs() < 1e-6 * a.abs().max(1e-3));
        }
    }

    #[test]
    fn quantile_inverts_survival() {
        assert_eq!(std_normal_quantile(0.5).unwrap(), 0.0);
        for i in -600..=600 {
            let x = i as f64 * 0.01;
            // Invert through the tail that is stored without rounding to 1.
            let back = if x <= 0.0 {
                std_normal_quantile(phi_cdf(x)).unwrap()
            } else {
                std_normal_upper_quantile(phi_bar(x)).unwrap()
            };
            assert!((back - x).abs() < 1e-10, "x={x}, back={back}");
            // Through the lower tail the error is set by the spacing of f64 near 1.
            let back = std_normal_quantile(phi_cdf(x)).unwrap();
            assert!((back - x).abs() < 1e-10 + 2.0 * f64::EPSILON / phi(x));
        }
        for p in [1e-300, 1e-20, 1e-5, 0.3, 0.7, 0.999999] {
            let x = std_normal_quantile(p).unwrap();
            assert!((phi_cdf(x) - p).abs() < 1e-12);
            assert!(rel(phi_cdf(x), p) < 1e-10);
        }
        assert!(std_normal_quantile(0.0).is_err());
        assert!(std_normal_quantile(1.0).is_err());
        assert!(std_normal_quantile(f64::NAN).is_err());
    }

    #[test]
    fn quantile_matches_bisection() {
        let target = 0.9975;
        let (mut lo, mut hi) = (0.0f64, 10.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if phi_bar(mid) > 1.0 - target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x = std_normal_quantile(target).unwrap();
        assert!((x - 0.5 * (lo + hi)).abs() < 1e-10);
        assert!((x - 2.8070337683438042).abs() < 1e-12);
        assert!((std_normal_upper_quantile(0.0025).unwrap() - x).abs() < 1e-12);
    }

    #[test]
    fn interval_probabilities() {
        assert_eq!(log_normal_interval(1.0, 1.0), f64::NEG_INFINITY);
        assert_eq!(log_normal_interval(f64::NEG_INFINITY, f64::INFINITY), 0.0);
        let v = log_normal_interval(-1.0, 2.0).exp();
        assert!((v - (phi_cdf(2.0) - phi_cdf(-1.0))).abs() < 1e-15);
        let v = log_normal_interval(40.0, f64::INFINITY);
        assert!((v - log_phi_bar(40.0)).abs() < 1e-12);
        let v = log_normal_interval(f64::NEG_INFINITY, -40.0);
        assert!((v - log_phi_bar(40.0)).abs() < 1e-12);
        // Narrow far-tail interval: phi(x) * width to first order.
        let v = log_normal_interval(30.0, 30.0 + 1e-6);
        assert!((v - ((-450.0f64) - LN_SQRT_2PI + (1e-6f64).ln())).abs() < 1e-4);
    }

    #[test]
    fn mills_envelopes() {
        assert!((mills_lower(0.0).unwrap() - 0.3989422804).abs() < 1e-10);
        assert!((mills_upper(0.0).unwrap() - 0.5641895835).abs() < 1e-10);
        let s = phi_bar(3.0);
        assert!(mills_lower(3.0).unwrap() < s && s < mills_upper(3.0).unwrap());
        for i in 0..=2000 {
            let x = i as f64 * 0.01;
            assert!(mills_lower_unchecked(x) <= phi_bar(x));
            assert!(phi_bar(x) <= mills_upper_unchecked(x));
        }
        assert!(mills_upper(f64::NAN).is_err());
    }

    #[test]
    fn mills_branches_agree() {
        for x in [-3.0f64, -0.7, -1e-3] {
            let naive_l = 2.0 * phi(x) / ((4.0 + x * x).sqrt() + x);
            let naive_u = 2.0 * phi(x) / ((2.0 + x * x).sqrt() + x);
            assert!(rel(mills_lower_unchecked(x), naive_l) < 1e-12);
            assert!(rel(mills_upper_unchecked(x), naive_u) < 1e-12);
        }
    }
}
