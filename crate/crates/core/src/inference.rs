//! Result types shared by the carved pivots, and pivot inversion.

use serde::{Deserialize, Serialize};

use crate::error::{CarveError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PivotResult {
    pub value: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub quadrature_error: f64,
    /// Monte Carlo standard error of `value`; zero for deterministic pivots.
    pub std_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub iterations: usize,
}

impl ConfidenceInterval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }
}

const MAX_DOUBLINGS: usize = 60;
const PIVOT_TOL: f64 = 1e-8;
const MAX_BISECTIONS: usize = 200;

/// Finds `x` with `pivot(x) = target` for a pivot increasing in `x`,
/// expanding a bracket geometrically from `[start - 1, start + 1]` and then
/// bisecting. Returns the root and the number of pivot evaluations.
pub fn solve_increasing<F>(pivot: &mut F, start: f64, target: f64) -> Result<(f64, usize)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut evals = 0usize;
    let mut eval = |x: f64, evals: &mut usize| -> Result<f64> {
        *evals += 1;
        pivot(x)
    };
    let mut lo = start - 1.0;
    let mut hi = start + 1.0;
    let mut step = 1.0;
    let mut f_lo = eval(lo, &mut evals)?;
    let mut doublings = 0;
    while f_lo > target {
        if doublings == MAX_DOUBLINGS {
            return Err(CarveError::Inversion(format!(
                "no lower bracket for target {target} after {MAX_DOUBLINGS} doublings"
            )));
        }
        hi = lo;
        step *= 2.0;
        lo -= step;
        f_lo = eval(lo, &mut evals)?;
        doublings += 1;
    }
    let mut f_hi = if hi == lo {
        f_lo
    } else {
        eval(hi, &mut evals)?
    };
    step = 1.0;
    doublings = 0;
    while f_hi < target {
        if doublings == MAX_DOUBLINGS {
            return Err(CarveError::Inversion(format!(
                "no upper bracket for target {target} after {MAX_DOUBLINGS} doublings"
            )));
        }
        lo = hi;
        step *= 2.0;
        hi += step;
        f_hi = eval(hi, &mut evals)?;
        doublings += 1;
    }
    if (f_lo - target).abs() < PIVOT_TOL {
        return Ok((lo, evals));
    }
    if (f_hi - target).abs() < PIVOT_TOL {
        return Ok((hi, evals));
    }
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let f = eval(mid, &mut evals)?;
        if (f - target).abs() < PIVOT_TOL || hi - lo < 1e-12 * (1.0 + mid.abs()) {
            return Ok((mid, evals));
        }
        if f < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi), evals))
}

/// Equal-tailed interval from a pivot increasing in the parameter.
pub fn invert_pivot<F>(mut pivot: F, start: f64, level: f64) -> Result<ConfidenceInterval>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(level > 0.0 && level < 1.0) {
        return Err(CarveError::Domain(format!(
            "level must lie in (0, 1), got {level}"
        )));
    }
    let (lower, a) = solve_increasing(&mut pivot, start, 0.5 * (1.0 - level))?;
    let (upper, b) = solve_increasing(&mut pivot, start, 0.5 * (1.0 + level))?;
    Ok(ConfidenceInterval {
        lower,
        upper,
        level,
        iterations: a + b,
    })
}
