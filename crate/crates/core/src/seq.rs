//! Carved inference for a single coordinate of the sequence model.
//!
//! The full-data statistic is `Z ~ N(m, 1)` and the first stage saw
//! `Z + W` with `W ~ N(0, rho^2)` independent. A coordinate with sign `+1`
//! was selected when `Z + W > c`; with sign `-1` when `Z + W < c`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, CarveError, Result};
use crate::gauss::{
    integrate, log_phi, log_phi_bar, phi_bar, phi_cdf, QuadratureConfig, LN_SQRT_2PI,
};
use crate::inference::{invert_pivot, ConfidenceInterval, PivotResult};

/// Selection probabilities below this are treated as numerically unreachable.
pub const MIN_SELECTION_PROB: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeqCarveProblem {
    /// Mean of the full-data statistic.
    pub m: f64,
    pub rho: f64,
    /// Selection offset `c`, already scaled by `sqrt(1 + rho^2)`.
    pub offset: f64,
    pub sign: f64,
}

impl SeqCarveProblem {
    pub fn new(m: f64, rho: f64, offset: f64, sign: f64) -> Result<Self> {
        let p = Self {
            m,
            rho,
            offset,
            sign,
        };
        p.validate()?;
        Ok(p)
    }

    /// Problem for a coordinate selected when `sign * z1 > threshold`, with
    /// `z1 = (Z + W) / sqrt(1 + rho^2)`.
    pub fn from_threshold(m: f64, rho: f64, threshold: f64, sign: f64) -> Result<Self> {
        Self::new(m, rho, sign * (1.0 + rho * rho).sqrt() * threshold, sign)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite(self.m, "m")?;
        ensure_finite(self.offset, "offset")?;
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(CarveError::Domain(format!(
                "rho must be positive, got {}",
                self.rho
            )));
        }
        if self.sign != 1.0 && self.sign != -1.0 {
            return Err(CarveError::Domain(format!(
                "sign must be +1 or -1, got {}",
                self.sign
            )));
        }
        Ok(())
    }

    fn with_mean(&self, m: f64) -> Self {
        Self { m, ..*self }
    }

    /// `log P(selected | Z - m = z)`.
    fn log_factor(&self, z: f64) -> f64 {
        let t = (self.offset - z - self.m) / self.rho;
        if self.sign > 0.0 {
            log_phi_bar(t)
        } else {
            log_phi(t)
        }
    }

    /// `log P(selected)` in closed form: `Z + W ~ N(m, 1 + rho^2)`.
    pub fn log_selection_prob(&self) -> f64 {
        let t = (self.offset - self.m) / (1.0 + self.rho * self.rho).sqrt();
        if self.sign > 0.0 {
            log_phi_bar(t)
        } else {
            log_phi(t)
        }
    }

    /// Mean of the centered statistic given selection. The conditional law
    /// is log-concave with variance at most one, so a fixed window around
    /// this point holds all of its mass.
    fn conditional_center(&self) -> f64 {
        let v = 1.0 + self.rho * self.rho;
        let s = v.sqrt();
        let t = self.sign * (self.offset - self.m) / s;
        // E[S | S > t] for standard normal S, via the inverse Mills ratio.
        let mills = (-0.5 * t * t - LN_SQRT_2PI - log_phi_bar(t)).exp();
        self.sign * s * mills / v
    }
}

/// Conditional probability of selection given the centered statistic `z`.
pub fn seq_survival_factor(z: f64, prob: &SeqCarveProblem) -> f64 {
    let t = (prob.offset - z - prob.m) / prob.rho;
    if prob.sign > 0.0 {
        phi_bar(t)
    } else {
        phi_cdf(t)
    }
}

fn check_rare(prob: &SeqCarveProblem) -> Result<f64> {
    let log_den = prob.log_selection_prob();
    if !(log_den >= MIN_SELECTION_PROB.ln()) {
        return Err(CarveError::RareEventUnderflow { log_prob: log_den });
    }
    Ok(log_den)
}

/// `P(Z > z_obs | selected)` for the raw statistic `z_obs`; uniform under
/// the conditional law and increasing in `m`.
pub fn seq_pivot(
    z_obs: f64,
    prob: &SeqCarveProblem,
    cfg: &QuadratureConfig,
) -> Result<PivotResult> {
    ensure_finite(z_obs, "observed statistic")?;
    prob.validate()?;
    cfg.validate()?;
    let log_den = check_rare(prob)?;
    let center = prob.conditional_center();
    let r = cfg.truncation_radius;
    let (lo, hi) = (center - r, center + r);
    let a = (z_obs - prob.m).max(lo);
    let denominator = log_den.exp();
    if a >= hi {
        return Ok(PivotResult {
            value: 0.0,
            numerator: 0.0,
            denominator,
            quadrature_error: 0.0,
            std_error: 0.0,
        });
    }
    let log_density = |z: f64| -0.5 * z * z - LN_SQRT_2PI + prob.log_factor(z);
    let shift = log_density(center);
    let q = integrate(|z| (log_density(z) - shift).exp(), a, hi, cfg)?;
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

/// Density of the centered statistic given selection.
pub fn seq_carved_density(z: f64, prob: &SeqCarveProblem) -> Result<f64> {
    ensure_finite(z, "z")?;
    prob.validate()?;
    let log_den = check_rare(prob)?;
    Ok((-0.5 * z * z - LN_SQRT_2PI + prob.log_factor(z) - log_den).exp())
}

/// Equal-tailed interval for `m` by inverting `seq_pivot`.
pub fn seq_confidence_interval(
    z_obs: f64,
    rho: f64,
    offset: f64,
    sign: f64,
    level: f64,
    cfg: &QuadratureConfig,
) -> Result<ConfidenceInterval> {
    let base = SeqCarveProblem::new(0.0, rho, offset, sign)?;
    ensure_finite(z_obs, "observed statistic")?;
    invert_pivot(
        |m| seq_pivot(z_obs, &base.with_mean(m), cfg).map(|p| p.value),
        z_obs,
        level,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::{gauss_expectation, RngStream};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn cfg() -> QuadratureConfig {
        QuadratureConfig::default()
    }

    #[test]
    fn factor_values() {
        let p = SeqCarveProblem::new(0.0, 1.0, 0.0, 1.0).unwrap();
        assert_eq!(seq_survival_factor(0.0, &p), 0.5);
        assert!((seq_survival_factor(60.0, &p) - 1.0).abs() < 1e-15);
        let q = SeqCarveProblem::new(0.0, 1.0, 0.0, -1.0).unwrap();
        assert!((seq_survival_factor(-60.0, &q) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn factor_matches_simulation() {
        let p = SeqCarveProblem::new(-0.4, 0.7, 0.9, 1.0).unwrap();
        let z = 0.6;
        let mut rng = RngStream::new(12, 0).rng();
        let n = 200_000;
        let hits = (0..n)
            .filter(|_| p.rho * rng.sample::<f64, _>(StandardNormal) > p.offset - z - p.m)
            .count();
        let f = hits as f64 / n as f64;
        let want = seq_survival_factor(z, &p);
        assert!((f - want).abs() < 3.0 * (want * (1.0 - want) / n as f64).sqrt());
    }

    #[test]
    fn analytic_pivot_case() {
        let p = SeqCarveProblem::new(0.0, 1.0, 0.0, 1.0).unwrap();
        let r = seq_pivot(0.0, &p, &cfg()).unwrap();
        assert!((r.value - 0.75).abs() < 1e-10);
        assert!((r.denominator - 0.5).abs() < 1e-15);
        assert!((r.numerator - 0.375).abs() < 1e-10);
    }

    #[test]
    fn pivot_limits() {
        let p = SeqCarveProblem::new(0.3, 0.8, 1.0, 1.0).unwrap();
        assert!((seq_pivot(-50.0, &p, &cfg()).unwrap().value - 1.0).abs() < 1e-10);
        assert_eq!(seq_pivot(50.0, &p, &cfg()).unwrap().value, 0.0);
    }

    #[test]
    fn denominator_matches_quadrature() {
        for (m, rho, c, s) in [
            (0.5, 0.5, 1.0, 1.0),
            (-3.0, 2.0, 0.0, 1.0),
            (2.0, 1.0, -1.0, -1.0),
        ] {
            let p = SeqCarveProblem::new(m, rho, c, s).unwrap();
            let q = gauss_expectation(|z| seq_survival_factor(z, &p), &cfg()).unwrap();
            assert!((q - p.log_selection_prob().exp()).abs() < 1e-10);
            // Mass below the lowest observation equals one.
            assert!((seq_pivot(m - 30.0, &p, &cfg()).unwrap().value - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn reflection_symmetry() {
        for (z, m, c) in [(0.4, -0.2, 1.1), (2.5, 1.0, 2.0), (-1.0, 0.0, -0.5)] {
            let plus = SeqCarveProblem::new(m, 0.9, c, 1.0).unwrap();
            let minus = SeqCarveProblem::new(-m, 0.9, -c, -1.0).unwrap();
            let a = seq_pivot(z, &plus, &cfg()).unwrap().value;
            let b = seq_pivot(-z, &minus, &cfg()).unwrap().value;
            assert!((a - (1.0 - b)).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn monotone_in_observation_and_mean() {
        let p = SeqCarveProblem::new(0.5, 1.0, 1.2, 1.0).unwrap();
        let mut prev = 2.0;
        for i in 0..100 {
            let z = -2.0 + 0.06 * i as f64;
            let v = seq_pivot(z, &p, &cfg()).unwrap().value;
            assert!(v < prev);
            prev = v;
        }
        let mut prev = -1.0;
        for i in 0..100 {
            let m = -3.0 + 0.06 * i as f64;
            let v = seq_pivot(0.8, &p.with_mean(m), &cfg()).unwrap().value;
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn no_selection_limit() {
        let p = SeqCarveProblem::new(0.3, 1.0, -40.0, 1.0).unwrap();
        for z in [-1.0, 0.0, 0.7, 2.0] {
            let v = seq_pivot(z, &p, &cfg()).unwrap().value;
            assert!((v - phi_bar(z - 0.3)).abs() < 1e-6);
            assert!(
                (seq_carved_density(z - 0.3, &p).unwrap() - crate::gauss::phi(z - 0.3)).abs()
                    < 1e-9
            );
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let p = SeqCarveProblem::new(-2.0, 1.0, 1.5, 1.0).unwrap();
        let c = p.conditional_center();
        let q = integrate(
            |z| seq_carved_density(z, &p).unwrap(),
            c - 12.0,
            c + 12.0,
            &cfg(),
        )
        .unwrap();
        assert!((q.value - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rare_selection_is_reported() {
        let p = SeqCarveProblem::new(-60.0, 1.0, 0.0, 1.0).unwrap();
        assert!(matches!(
            seq_pivot(0.0, &p, &cfg()),
            Err(CarveError::RareEventUnderflow { .. })
        ));
        // Deep but representable: still finite and in range.
        let p = SeqCarveProblem::new(-40.0, 1.0, 0.0, 1.0).unwrap();
        let v = seq_pivot(-20.0, &p, &cfg()).unwrap().value;
        assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn pivot_matches_rejection_sampling() {
        let p = SeqCarveProblem::new(-2.0, 1.0, 1.5, 1.0).unwrap();
        let z_obs = 0.8;
        let want = seq_pivot(z_obs, &p, &cfg()).unwrap().value;
        let mut rng = RngStream::new(77, 0).rng();
        let (mut kept, mut above) = (0usize, 0usize);
        while kept < 100_000 {
            let z = p.m + rng.sample::<f64, _>(StandardNormal);
            let w = p.rho * rng.sample::<f64, _>(StandardNormal);
            if z + w > p.offset {
                kept += 1;
                if z > z_obs {
                    above += 1;
                }
            }
        }
        let f = above as f64 / kept as f64;
        assert!((f - want).abs() < 3.0 * (want * (1.0 - want) / kept as f64).sqrt());
    }

    #[test]
    fn interval_solves_pivot_equations() {
        let (z, rho, c) = (1.8, 1.0, 2f64.sqrt());
        let ci = seq_confidence_interval(z, rho, c, 1.0, 0.9, &cfg()).unwrap();
        let piv = |m: f64| {
            seq_pivot(z, &SeqCarveProblem::new(m, rho, c, 1.0).unwrap(), &cfg())
                .unwrap()
                .value
        };
        assert!((piv(ci.lower) - 0.05).abs() < 1e-8);
        assert!((piv(ci.upper) - 0.95).abs() < 1e-8);
        assert!(ci.lower < ci.upper);
        let wide = seq_confidence_interval(z, rho, c, 1.0, 0.99, &cfg()).unwrap();
        assert!(wide.lower <= ci.lower && ci.upper <= wide.upper);
        assert!(seq_confidence_interval(z, rho, c, 1.0, 1.5, &cfg()).is_err());
    }
}
