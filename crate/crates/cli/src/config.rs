use std::path::{Path, PathBuf};

use carve_core::gauss::QuadratureConfig;
use carve_core::mv::MvPivotOptions;
use carve_core::selection::ScreeningRule;
use carve_core::CarveError;
use serde::de::DeserializeOwned;
use serde::Deserialize;

/// Reads and validates a JSON config; every failure is a config error.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CarveError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CarveError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CarveError::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreenConfig {
    pub rule: ScreeningRule,
    /// First-stage statistics, inline.
    #[serde(default)]
    pub z1: Option<Vec<f64>>,
    /// First-stage statistics from a CSV file, one value per cell.
    #[serde(default)]
    pub data_csv: Option<PathBuf>,
    /// Design and response for the elastic net.
    #[serde(default)]
    pub x: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub y: Option<Vec<f64>>,
    #[serde(default)]
    pub rho: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeqModel {
    pub z_obs: f64,
    /// Mean of the full-data statistic, for `pivot`.
    #[serde(default)]
    pub m: Option<f64>,
    #[serde(default)]
    pub level: Option<f64>,
    pub rho: f64,
    /// Selection magnitude on the first-stage scale; the offset is derived.
    #[serde(default)]
    pub threshold: Option<f64>,
    /// Selection offset on the `Z + W` scale.
    #[serde(default)]
    pub offset: Option<f64>,
    #[serde(default = "plus_one")]
    pub sign: f64,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
}

fn plus_one() -> f64 {
    1.0
}

pub fn required(v: Option<f64>, name: &str, cmd: &str) -> Result<f64, CarveError> {
    v.ok_or_else(|| CarveError::Config(format!("{cmd} needs `{name}`")))
}

impl SeqModel {
    pub fn offset(&self) -> Result<f64, CarveError> {
        match (self.threshold, self.offset) {
            (Some(t), None) => Ok(self.sign * (1.0 + self.rho * self.rho).sqrt() * t),
            (None, Some(c)) => Ok(c),
            _ => Err(CarveError::Config(
                "give exactly one of threshold and offset".into(),
            )),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MvModel {
    /// Full-data statistic.
    pub z: Vec<f64>,
    /// First-stage statistic the rule was applied to.
    pub z1: Vec<f64>,
    pub rule: ScreeningRule,
    #[serde(default)]
    pub sigma: Option<Vec<Vec<f64>>>,
    pub rho: f64,
    /// Zero-based coordinate of interest; must be selected.
    pub j: usize,
    /// Mean of `z[j]`, for `pivot`.
    #[serde(default)]
    pub mu_j: Option<f64>,
    #[serde(default)]
    pub level: Option<f64>,
    #[serde(default)]
    pub mv: MvPivotOptions,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(default)]
    pub seed: u64,
}

/// Model description shared by `pivot` (which needs the mean) and `ci`
/// (which needs the level).
#[derive(Debug, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelConfig {
    Seq(SeqModel),
    Mv(MvModel),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Sandwich,
    Convolution,
    SeqDecay,
    MvDecay,
    WMoments,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Inflates the lower Mills envelope so the sandwich must fail.
    MillsLower,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub checks: Vec<Check>,
    pub sandwich_grid: GridSpec,
    pub seq_decay_m: Vec<f64>,
    pub seq_decay_rho: f64,
    /// Rows of `Q` for the multivariate decay instance.
    pub mv_q: Vec<Vec<f64>>,
    pub mv_alpha_bar: Vec<f64>,
    pub mv_decay_a: Vec<f64>,
    pub mv_decay_n_mc: usize,
    pub moments_n_mc: usize,
    pub seed: u64,
    pub inject_fault: Option<Fault>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            checks: vec![
                Check::Sandwich,
                Check::Convolution,
                Check::SeqDecay,
                Check::MvDecay,
                Check::WMoments,
            ],
            sandwich_grid: GridSpec {
                start: 0.0,
                end: 10.0,
                step: 0.01,
            },
            seq_decay_m: vec![-6.0, -8.0, -10.0, -12.0],
            seq_decay_rho: 1.0,
            mv_q: vec![vec![-1.0, 0.3, 0.0], vec![0.2, -0.9, 0.1]],
            mv_alpha_bar: vec![0.8, 0.6],
            mv_decay_a: vec![6.0, 8.0, 10.0, 12.0],
            mv_decay_n_mc: 1_000_000,
            moments_n_mc: 20_000,
            seed: 1,
            inject_fault: None,
        }
    }
}
