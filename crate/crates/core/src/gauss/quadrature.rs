use std::num::NonZeroUsize;
use std::sync::OnceLock;

use gauss_quad::GaussLegendre;
use serde::{Deserialize, Serialize};

use super::special::phi;
use crate::error::{CarveError, Result};

const PANEL_DEGREE: usize = 20;
const INITIAL_PANELS: usize = 4;

fn rule() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(NonZeroUsize::new(PANEL_DEGREE).unwrap()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_refinements: u32,
    /// Half-width of the integration window, in standard deviations.
    pub truncation_radius: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-13,
            rel_tol: 1e-11,
            max_refinements: 12,
            truncation_radius: 10.0,
        }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0) || !(self.rel_tol > 0.0) {
            return Err(CarveError::Config(
                "quadrature tolerances must be positive".into(),
            ));
        }
        if !(self.truncation_radius >= 8.0) || !self.truncation_radius.is_finite() {
            return Err(CarveError::Config(format!(
                "truncation_radius must be at least 8, got {}",
                self.truncation_radius
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadEstimate {
    pub value: f64,
    /// Difference between the last two refinements.
    pub error: f64,
    pub panels: usize,
}

fn composite<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64, panels: usize) -> f64 {
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let lo = a + h * i as f64;
            let hi = if i + 1 == panels { b } else { lo + h };
            rule().integrate(lo, hi, &mut *f)
        })
        .sum()
}

/// Composite Gauss-Legendre on `[a, b]`, doubling the panel count until two
/// successive estimates agree to `max(abs_tol, rel_tol * |estimate|)`.
pub fn integrate<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    cfg: &QuadratureConfig,
) -> Result<QuadEstimate> {
    cfg.validate()?;
    if !(a.is_finite() && b.is_finite()) {
        return Err(CarveError::Domain(format!(
            "integration limits must be finite, got [{a}, {b}]"
        )));
    }
    if a == b {
        return Ok(QuadEstimate {
            value: 0.0,
            error: 0.0,
            panels: 0,
        });
    }
    let mut panels = INITIAL_PANELS;
    let mut prev = composite(&mut f, a, b, panels);
    let mut gap = f64::INFINITY;
    for _ in 0..cfg.max_refinements {
        panels *= 2;
        let next = composite(&mut f, a, b, panels);
        if !next.is_finite() {
            return Err(CarveError::Numeric(format!(
                "integrand produced a non-finite value on [{a}, {b}]"
            )));
        }
        gap = (next - prev).abs();
        if gap < cfg.abs_tol.max(cfg.rel_tol * next.abs()) {
            return Ok(QuadEstimate {
                value: next,
                error: gap,
                panels,
            });
        }
        prev = next;
    }
    Err(CarveError::Convergence {
        estimate: prev,
        gap,
    })
}

/// `E[f(Z)]` for `Z ~ N(0, 1)`, truncated to `|z| <= truncation_radius`.
pub fn gauss_expectation<F: FnMut(f64) -> f64>(mut f: F, cfg: &QuadratureConfig) -> Result<f64> {
    let r = cfg.truncation_radius;
    integrate(|z| f(z) * phi(z), -r, r, cfg).map(|q| q.value)
}
