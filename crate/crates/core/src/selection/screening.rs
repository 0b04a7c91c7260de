use serde::{Deserialize, Serialize};

use crate::error::{CarveError, Result};
use crate::gauss::{phi_bar, std_normal_upper_quantile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScreeningRule {
    FixedThreshold { lambda: Vec<f64> },
    TopD { d: usize },
    BhStepUp { alpha: f64 },
    ElasticNet { lambda: f64, eta: f64 },
}

impl ScreeningRule {
    pub fn validate(&self) -> Result<()> {
        match self {
            ScreeningRule::FixedThreshold { lambda } => {
                if lambda.is_empty() || lambda.iter().any(|l| !l.is_finite()) {
                    return Err(CarveError::Config(
                        "threshold vector must be non-empty and finite".into(),
                    ));
                }
            }
            ScreeningRule::TopD { d } => {
                if *d < 1 {
                    return Err(CarveError::Config("top-D needs D >= 1".into()));
                }
            }
            ScreeningRule::BhStepUp { alpha } => {
                if !(*alpha > 0.0 && *alpha < 1.0) {
                    return Err(CarveError::Config(format!(
                        "BH level must lie in (0, 1), got {alpha}"
                    )));
                }
            }
            ScreeningRule::ElasticNet { lambda, eta } => {
                if !(*lambda > 0.0 && lambda.is_finite()) || !(*eta >= 0.0 && eta.is_finite()) {
                    return Err(CarveError::Config(
                        "elastic net needs lambda > 0 and eta >= 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdInfo {
    LambdaVector { lambda: Vec<f64> },
    AbsDplus1Stat { value: f64 },
    BhPair { d0: usize, tau: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    /// Selected coordinates, zero-based, in ascending order.
    pub selected: Vec<usize>,
    pub signs: Vec<f64>,
    /// First-stage statistics of the coordinates that were not selected.
    pub dropped_values: Vec<f64>,
    pub threshold_info: ThresholdInfo,
    pub rule: ScreeningRule,
}

impl SelectionOutcome {
    /// Magnitude `t_j` such that, given the side information, coordinate
    /// `selected[i]` stays selected iff `signs[i] * z1_j > t_j`.
    pub fn event_threshold(&self, i: usize) -> f64 {
        match &self.threshold_info {
            ThresholdInfo::LambdaVector { lambda } => lambda[self.selected[i]],
            ThresholdInfo::AbsDplus1Stat { value } => *value,
            ThresholdInfo::BhPair { tau, .. } => *tau,
        }
    }

    pub fn complement(&self, d: usize) -> Vec<usize> {
        (0..d)
            .filter(|j| self.selected.binary_search(j).is_err())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Selection {
    Selected(SelectionOutcome),
    Empty { rule: ScreeningRule },
}

impl Selection {
    pub fn outcome(&self) -> Option<&SelectionOutcome> {
        match self {
            Selection::Selected(o) => Some(o),
            Selection::Empty { .. } => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, Selection::Empty { .. })
    }
}

fn sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

fn check_finite(z1: &[f64]) -> Result<()> {
    if z1.is_empty() {
        return Err(CarveError::Domain("statistic vector is empty".into()));
    }
    if z1.iter().any(|v| !v.is_finite()) {
        return Err(CarveError::Domain(
            "statistic vector has non-finite entries".into(),
        ));
    }
    Ok(())
}

/// Indices ordered by decreasing `|z1|`, ties by ascending index.
fn rank_by_magnitude(z1: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..z1.len()).collect();
    idx.sort_by(|&a, &b| z1[b].abs().total_cmp(&z1[a].abs()).then(a.cmp(&b)));
    idx
}

fn finish(
    z1: &[f64],
    mut selected: Vec<usize>,
    signed: bool,
    info: ThresholdInfo,
    rule: ScreeningRule,
) -> Selection {
    if selected.is_empty() {
        return Selection::Empty { rule };
    }
    selected.sort_unstable();
    let signs = selected
        .iter()
        .map(|&j| if signed { sign(z1[j]) } else { 1.0 })
        .collect();
    let dropped_values = (0..z1.len())
        .filter(|j| selected.binary_search(j).is_err())
        .map(|j| z1[j])
        .collect();
    Selection::Selected(SelectionOutcome {
        selected,
        signs,
        dropped_values,
        threshold_info: info,
        rule,
    })
}

pub fn screen_threshold(z1: &[f64], lambda: &[f64]) -> Result<Selection> {
    check_finite(z1)?;
    if z1.len() != lambda.len() {
        return Err(CarveError::Domain(format!(
            "statistic has {} entries but threshold has {}",
            z1.len(),
            lambda.len()
        )));
    }
    let rule = ScreeningRule::FixedThreshold {
        lambda: lambda.to_vec(),
    };
    rule.validate()
        .map_err(|e| CarveError::Domain(e.to_string()))?;
    let selected = (0..z1.len()).filter(|&j| z1[j] > lambda[j]).collect();
    Ok(finish(
        z1,
        selected,
        false,
        ThresholdInfo::LambdaVector {
            lambda: lambda.to_vec(),
        },
        rule,
    ))
}

pub fn screen_top_d(z1: &[f64], d: usize) -> Result<Selection> {
    check_finite(z1)?;
    if d < 1 || d >= z1.len() {
        return Err(CarveError::Domain(format!(
            "top-D needs 1 <= D < {}, got {d}",
            z1.len()
        )));
    }
    let order = rank_by_magnitude(z1);
    let info = ThresholdInfo::AbsDplus1Stat {
        value: z1[order[d]].abs(),
    };
    Ok(finish(
        z1,
        order[..d].to_vec(),
        true,
        info,
        ScreeningRule::TopD { d },
    ))
}

pub fn screen_bh(z1: &[f64], alpha: f64) -> Result<Selection> {
    check_finite(z1)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CarveError::Domain(format!(
            "BH level must lie in (0, 1), got {alpha}"
        )));
    }
    let d = z1.len();
    let order = rank_by_magnitude(z1);
    let dn = d as f64;
    let d0 = (1..=d)
        .rev()
        .find(|&k| 2.0 * phi_bar(z1[order[k - 1]].abs()) <= k as f64 * alpha / dn)
        .unwrap_or(0);
    let rule = ScreeningRule::BhStepUp { alpha };
    if d0 == 0 {
        return Ok(Selection::Empty { rule });
    }
    let tau = std_normal_upper_quantile(d0 as f64 * alpha / (2.0 * dn))?;
    Ok(finish(
        z1,
        order[..d0].to_vec(),
        true,
        ThresholdInfo::BhPair { d0, tau },
        rule,
    ))
}

/// Applies a screening rule to first-stage statistics. Elastic-net selection
/// needs the design matrix and goes through `elastic_net_fit` instead.
pub fn apply_rule(rule: &ScreeningRule, z1: &[f64]) -> Result<Selection> {
    match rule {
        ScreeningRule::FixedThreshold { lambda } => screen_threshold(z1, lambda),
        ScreeningRule::TopD { d } => screen_top_d(z1, *d),
        ScreeningRule::BhStepUp { alpha } => screen_bh(z1, *alpha),
        ScreeningRule::ElasticNet { .. } => Err(CarveError::Config(
            "elastic-net selection needs a regression design, not a statistic vector".into(),
        )),
    }
}
