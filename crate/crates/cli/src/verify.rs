use carve_core::asymptotics::{
    convolution_identity, mv_decay_table, randomization_moments_check, sandwich_table,
    seq_decay_table, uniform_grid, MvDecayRow, SandwichReport, SeqDecayRow,
};
use carve_core::gauss::{
    mills_lower_unchecked, mills_upper_unchecked, QuadratureConfig, RngStream,
};
use carve_core::sim::{Family, GenerativeSpec};
use carve_core::CarveError;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::{json, Value};

use crate::commands::print_json;
use crate::config::{load, Check, Fault, VerifyConfig};
use crate::{Common, Failure, Format};

const CONVOLUTION_TOL: f64 = 1e-8;
const MOMENT_Z_BOUND: f64 = 4.0;

#[derive(Debug, Serialize)]
pub struct CheckResult {
    pub check: Check,
    pub passed: bool,
    pub detail: String,
    pub data: Value,
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub failures: Vec<Check>,
    pub checks: Vec<CheckResult>,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn sandwich(cfg: &VerifyConfig) -> Result<CheckResult, CarveError> {
    let g = &cfg.sandwich_grid;
    if !(g.step > 0.0 && g.end >= g.start) {
        return Err(CarveError::Config(
            "sandwich grid needs step > 0 and end >= start".into(),
        ));
    }
    let grid = uniform_grid(g.start, g.end, g.step);
    let scale = match cfg.inject_fault {
        Some(Fault::MillsLower) => 1.5,
        None => 1.0,
    };
    let r: SandwichReport = sandwich_table(
        &grid,
        |x| scale * mills_lower_unchecked(x),
        mills_upper_unchecked,
    )?;
    let passed = r.violations.is_empty();
    let detail = match r.violations.first() {
        Some(x) => format!(
            "{} of {} grid points violate L <= Phibar <= U, first at x = {x}",
            r.violations.len(),
            grid.len()
        ),
        None => format!("no violations on {} grid points", grid.len()),
    };
    let data = json!({
        "grid_points": grid.len(),
        "violations": r.violations,
        "max_rel_slack_lower": r.max_rel_slack_lower,
        "max_rel_slack_upper": r.max_rel_slack_upper,
    });
    Ok(CheckResult {
        check: Check::Sandwich,
        passed,
        detail,
        data,
    })
}

fn convolution() -> Result<CheckResult, CarveError> {
    let cfg = QuadratureConfig::default();
    let mut rows = Vec::new();
    for m in [-6.0, -3.0, 0.0, 2.0, 6.0] {
        for rho in [0.5, 1.0, 2.0] {
            rows.push(convolution_identity(m, rho, &cfg)?);
        }
    }
    let worst = rows.iter().fold(0.0f64, |a, r| a.max(r.abs_error));
    Ok(CheckResult {
        check: Check::Convolution,
        passed: worst < CONVOLUTION_TOL,
        detail: format!("max abs error {worst:.3e} (bound {CONVOLUTION_TOL:e})"),
        data: to_value(&rows),
    })
}

pub fn seq_decay_rows(cfg: &VerifyConfig) -> Result<Vec<SeqDecayRow>, CarveError> {
    seq_decay_table(&cfg.seq_decay_m, cfg.seq_decay_rho)
}

fn seq_decay(cfg: &VerifyConfig) -> Result<CheckResult, CarveError> {
    let mut ms = cfg.seq_decay_m.clone();
    ms.sort_by(|a, b| b.total_cmp(a));
    if ms != cfg.seq_decay_m {
        return Err(CarveError::Config("seq_decay_m must be decreasing".into()));
    }
    let rows = seq_decay_rows(cfg)?;
    let errs: Vec<f64> = rows.iter().map(|r| r.rel_error).collect();
    let passed = errs.iter().all(|e| e.is_finite()) && errs.windows(2).all(|w| w[1] < w[0]);
    Ok(CheckResult {
        check: Check::SeqDecay,
        passed,
        detail: format!("relative errors {errs:.5?}, must decrease as m -> -inf"),
        data: to_value(&rows),
    })
}

pub fn mv_decay_rows(cfg: &VerifyConfig) -> Result<Vec<MvDecayRow>, CarveError> {
    let k = cfg.mv_q.len();
    let d = cfg.mv_q.first().map_or(0, Vec::len);
    if k == 0 || d == 0 || cfg.mv_q.iter().any(|r| r.len() != d) {
        return Err(CarveError::Config(
            "mv_q must be a non-empty rectangular matrix".into(),
        ));
    }
    let q = DMatrix::from_fn(k, d, |i, j| cfg.mv_q[i][j]);
    let ab = DVector::from_column_slice(&cfg.mv_alpha_bar);
    mv_decay_table(
        &q,
        &ab,
        &cfg.mv_decay_a,
        cfg.mv_decay_n_mc,
        &RngStream::new(cfg.seed, 1),
    )
}

fn mv_decay(cfg: &VerifyConfig) -> Result<CheckResult, CarveError> {
    if cfg.mv_decay_a.len() < 2 || cfg.mv_decay_a.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CarveError::Config(
            "mv_decay_a needs at least two increasing values".into(),
        ));
    }
    let rows = mv_decay_rows(cfg)?;
    let (first, last) = (&rows[0], &rows[rows.len() - 1]);
    let band = 3.0 * (first.ratio_se.powi(2) + last.ratio_se.powi(2)).sqrt();
    let passed = rows.iter().all(|r| r.ratio.is_finite())
        && (last.ratio - 1.0).abs() + band < (first.ratio - 1.0).abs();
    let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    Ok(CheckResult {
        check: Check::MvDecay,
        passed,
        detail: format!(
            "exact/approx ratios {ratios:.4?}, |ratio - 1| must shrink beyond 3 standard errors"
        ),
        data: to_value(&rows),
    })
}

fn w_moments(cfg: &VerifyConfig) -> Result<CheckResult, CarveError> {
    let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]);
    let spec = GenerativeSpec::new(Family::CenteredExponential, DVector::zeros(2), Some(sigma))?;
    let r = randomization_moments_check(
        50,
        50,
        &spec,
        cfg.moments_n_mc,
        &RngStream::new(cfg.seed, 2),
    )?;
    let all = r
        .mean
        .iter()
        .chain(r.cov.iter().flatten())
        .chain(r.cross_cov.iter().flatten());
    let worst = all
        .clone()
        .filter_map(|m| m.z_score)
        .fold(0.0f64, |a, z| a.max(z.abs()));
    let passed = all.clone().all(|m| m.within(MOMENT_Z_BOUND));
    Ok(CheckResult {
        check: Check::WMoments,
        passed,
        detail: format!("max |z| over mean, covariance and cross-covariance = {worst:.3} (bound {MOMENT_Z_BOUND})"),
        data: to_value(&r),
    })
}

pub fn run(c: &Common) -> Result<(), Failure> {
    let mut cfg: VerifyConfig = load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let mut checks = Vec::new();
    for check in &cfg.checks {
        log::info!("running {check:?}");
        checks.push(match check {
            Check::Sandwich => sandwich(&cfg)?,
            Check::Convolution => convolution()?,
            Check::SeqDecay => seq_decay(&cfg)?,
            Check::MvDecay => mv_decay(&cfg)?,
            Check::WMoments => w_moments(&cfg)?,
        });
    }
    let failures: Vec<Check> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.check)
        .collect();
    let report = VerifyReport {
        passed: failures.is_empty(),
        failures: failures.clone(),
        checks,
    };
    match c.format {
        Format::Json => print_json(&report)?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            w.write_record(["check", "passed", "detail"])
                .map_err(|e| Failure::Io(e.to_string()))?;
            for r in &report.checks {
                let name = serde_json::to_value(r.check)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default();
                w.write_record([name, r.passed.to_string(), r.detail.clone()])
                    .map_err(|e| Failure::Io(e.to_string()))?;
            }
            w.flush()?;
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verify(format!(
            "hard invariants failed: {failures:?}"
        )))
    }
}
