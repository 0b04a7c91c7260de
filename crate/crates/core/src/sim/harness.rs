use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::family::{Family, GenerativeSpec};
use crate::error::{CarveError, Result};
use crate::gauss::{std_normal_upper_quantile, QuadratureConfig, RngStream};
use crate::inference::ConfidenceInterval;
use crate::mv::{
    mv_confidence_interval, mv_pivot, nuisance_statistic, CarveGeometry, MvPivotOptions,
};
use crate::selection::{apply_rule, ScreeningRule, Selection, SelectionOutcome};
use crate::seq::{seq_confidence_interval, seq_pivot, SeqCarveProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomizationMode {
    /// `W = sqrt(n) mean_{n1} - sqrt(n) mean_n`, computed from the data.
    ImplicitCarving,
    /// Fresh `W ~ N(0, rho^2 Sigma)` independent of the data.
    Gaussian,
}

/// How the per-sample mean `beta_n` depends on `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegimeSpec {
    /// `beta_n = beta` for every `n`.
    Fixed { beta: Vec<f64> },
    /// `sqrt(n) beta_n = -n^gamma |beta_bar|`; local alternatives at `gamma = 0`,
    /// rare ones for `0 < gamma < 1/2`.
    Schedule { gamma: f64, beta_bar: Vec<f64> },
}

impl RegimeSpec {
    pub fn validate(&self) -> Result<()> {
        let v = match self {
            RegimeSpec::Fixed { beta } => beta,
            RegimeSpec::Schedule { gamma, beta_bar } => {
                if !(*gamma >= 0.0 && *gamma < 0.5) {
                    return Err(CarveError::Config(format!(
                        "gamma must lie in [0, 1/2), got {gamma}"
                    )));
                }
                beta_bar
            }
        };
        if v.is_empty() || v.iter().any(|b| !b.is_finite()) {
            return Err(CarveError::Config(
                "regime vector must be non-empty and finite".into(),
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            RegimeSpec::Fixed { beta } => beta.len(),
            RegimeSpec::Schedule { beta_bar, .. } => beta_bar.len(),
        }
    }

    pub fn is_rare(&self) -> bool {
        matches!(self, RegimeSpec::Schedule { gamma, .. } if *gamma > 0.0)
    }

    /// `sqrt(n) beta_n`, the mean of the full-data statistic.
    pub fn scaled_mean(&self, n: usize) -> DVector<f64> {
        let nf = n as f64;
        match self {
            RegimeSpec::Fixed { beta } => DVector::from_column_slice(beta) * nf.sqrt(),
            RegimeSpec::Schedule { gamma, beta_bar } => DVector::from_iterator(
                beta_bar.len(),
                beta_bar.iter().map(|b| -nf.powf(*gamma) * b.abs()),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n1: usize,
    pub n2: usize,
    pub family: Family,
    /// Covariance of one observation; identity when absent.
    #[serde(default)]
    pub sigma: Option<Vec<Vec<f64>>>,
    pub regime: RegimeSpec,
    pub rule: ScreeningRule,
    pub randomization_mode: RandomizationMode,
    pub replications: usize,
    pub master_seed: u64,
    /// Confidence level; intervals are skipped when absent.
    #[serde(default)]
    pub level: Option<f64>,
    #[serde(default)]
    pub mv: MvPivotOptions,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n1 < 2 {
            return Err(CarveError::Config(format!(
                "n1 must be at least 2, got {}",
                self.n1
            )));
        }
        if self.replications < 100 {
            return Err(CarveError::Config(format!(
                "replications must be at least 100, got {}",
                self.replications
            )));
        }
        if let Some(l) = self.level {
            if !(l > 0.0 && l < 1.0) {
                return Err(CarveError::Config(format!(
                    "level must lie in (0, 1), got {l}"
                )));
            }
        }
        self.regime.validate()?;
        self.rule.validate()?;
        self.quadrature
            .validate()
            .map_err(|e| CarveError::Config(e.to_string()))?;
        let d = self.regime.dim();
        match &self.rule {
            ScreeningRule::FixedThreshold { lambda } if lambda.len() != d => {
                return Err(CarveError::Config(format!(
                    "threshold vector has {} entries for {d} coordinates",
                    lambda.len()
                )))
            }
            ScreeningRule::TopD { d: top } if *top >= d => {
                return Err(CarveError::Config(format!(
                    "top-D needs D < {d}, got {top}"
                )))
            }
            ScreeningRule::ElasticNet { .. } => {
                return Err(CarveError::Config(
                    "simulate runs screening rules; the elastic net needs a design matrix".into(),
                ))
            }
            _ => {}
        }
        self.sigma_matrix()?;
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n1 + self.n2
    }

    pub fn rho(&self) -> f64 {
        (self.n2 as f64 / self.n1 as f64).sqrt()
    }

    pub fn sigma_matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.regime.dim();
        let s = match &self.sigma {
            None => DMatrix::identity(d, d),
            Some(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(CarveError::Config(format!("sigma must be {d} x {d}")));
                }
                DMatrix::from_fn(d, d, |i, j| rows[i][j])
            }
        };
        GenerativeSpec::new(self.family, DVector::zeros(d), Some(s.clone()))?;
        Ok(s)
    }

    pub fn generative_spec(&self) -> Result<GenerativeSpec> {
        let beta = self.regime.scaled_mean(self.n()) / (self.n() as f64).sqrt();
        GenerativeSpec::new(self.family, beta, Some(self.sigma_matrix()?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateRecord {
    pub j: usize,
    pub sign: f64,
    /// First-stage (randomized) statistic.
    pub z1: f64,
    /// Full-data statistic `sqrt(n) mean_n`.
    pub z_obs: f64,
    /// `sqrt(n) beta_n`.
    pub truth: f64,
    pub pivot: Option<f64>,
    pub pivot_se: Option<f64>,
    pub carved: Option<ConfidenceInterval>,
    pub split: Option<ConfidenceInterval>,
    pub error: Option<String>,
    pub underflow: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub rho2: f64,
    pub selection: Option<Selection>,
    pub coordinates: Vec<CoordinateRecord>,
    pub error: Option<String>,
}

impl ReplicationRecord {
    pub fn is_empty_selection(&self) -> bool {
        self.selection.as_ref().is_some_and(|s| s.is_empty())
    }
}

struct Prepared {
    spec: GenerativeSpec,
    sigma: DMatrix<f64>,
    chol: DMatrix<f64>,
    truth: DVector<f64>,
    diagonal: bool,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let spec = cfg.generative_spec()?;
    let sigma = spec.sigma.clone();
    let diagonal = spec.is_diagonal();
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| CarveError::Config("Sigma must be positive definite".into()))?
        .l();
    Ok(Prepared {
        chol,
        truth: cfg.regime.scaled_mean(cfg.n()),
        sigma,
        spec,
        diagonal,
    })
}

/// Runs every replication; the output is ordered by replication index and
/// does not depend on the thread count.
pub fn run_two_stage(cfg: &ExperimentConfig) -> Result<Vec<ReplicationRecord>> {
    let prep = prepare(cfg)?;
    Ok((0..cfg.replications)
        .into_par_iter()
        .map(|r| replicate(cfg, &prep, r))
        .collect())
}

/// `run_two_stage` on a dedicated pool of `jobs` threads.
pub fn run_two_stage_with_jobs(
    cfg: &ExperimentConfig,
    jobs: usize,
) -> Result<Vec<ReplicationRecord>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CarveError::Config(format!("cannot build thread pool: {e}")))?;
    pool.install(|| run_two_stage(cfg))
}

fn replicate(cfg: &ExperimentConfig, prep: &Prepared, r: usize) -> ReplicationRecord {
    let stream = RngStream::new(cfg.master_seed, r as u64);
    let rho = cfg.rho();
    let mut rec = ReplicationRecord {
        replication: r,
        rho2: cfg.n2 as f64 / cfg.n1 as f64,
        selection: None,
        coordinates: Vec::new(),
        error: None,
    };
    let mut rng = stream.rng();
    let n = cfg.n() as f64;
    let s1 = prep.spec.sample_stage_sum(cfg.n1, &mut rng);
    let s2 = prep.spec.sample_stage_sum(cfg.n2, &mut rng);
    let z = (&s1 + &s2) / n.sqrt();
    let w = match cfg.randomization_mode {
        RandomizationMode::ImplicitCarving => &s1 * (n.sqrt() / cfg.n1 as f64) - &z,
        RandomizationMode::Gaussian => {
            let g = DVector::from_fn(z.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
            &prep.chol * g * rho
        }
    };
    let z1 = (&z + &w) / (1.0 + rho * rho).sqrt();
    let selection = match apply_rule(&cfg.rule, z1.as_slice()) {
        Ok(s) => s,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    if let Some(outcome) = selection.outcome() {
        let geom = if prep.diagonal {
            None
        } else {
            match CarveGeometry::screening(&prep.sigma, outcome, rho) {
                Ok(g) => Some(g),
                Err(e) => {
                    rec.error = Some(e.to_string());
                    rec.selection = Some(selection);
                    return rec;
                }
            }
        };
        for (i, &j) in outcome.selected.iter().enumerate() {
            let mut c = CoordinateRecord {
                j,
                sign: outcome.signs[i],
                z1: z1[j],
                z_obs: z[j],
                truth: prep.truth[j],
                pivot: None,
                pivot_se: None,
                carved: None,
                split: split_interval(cfg, &s2, prep.sigma[(j, j)], j),
                error: None,
                underflow: false,
            };
            let res = match &geom {
                None => seq_coordinate(cfg, outcome, i, prep.sigma[(j, j)], &mut c),
                Some(g) => {
                    mv_coordinate(cfg, g, &prep.sigma, &z, j, &stream.derive(j as u64), &mut c)
                }
            };
            if let Err(e) = res {
                c.underflow = matches!(e, CarveError::RareEventUnderflow { .. });
                c.error = Some(e.to_string());
            }
            rec.coordinates.push(c);
        }
    }
    rec.selection = Some(selection);
    rec
}

fn seq_coordinate(
    cfg: &ExperimentConfig,
    outcome: &SelectionOutcome,
    i: usize,
    var: f64,
    c: &mut CoordinateRecord,
) -> Result<()> {
    let sd = var.sqrt();
    let rho = cfg.rho();
    let prob = SeqCarveProblem::from_threshold(
        c.truth / sd,
        rho,
        outcome.event_threshold(i) / sd,
        c.sign,
    )?;
    let p = seq_pivot(c.z_obs / sd, &prob, &cfg.quadrature)?;
    c.pivot = Some(p.value);
    c.pivot_se = Some(0.0);
    if let Some(level) = cfg.level {
        let ci = seq_confidence_interval(
            c.z_obs / sd,
            rho,
            prob.offset,
            c.sign,
            level,
            &cfg.quadrature,
        )?;
        c.carved = Some(ConfidenceInterval {
            lower: ci.lower * sd,
            upper: ci.upper * sd,
            ..ci
        });
    }
    Ok(())
}

fn mv_coordinate(
    cfg: &ExperimentConfig,
    geom: &CarveGeometry,
    sigma: &DMatrix<f64>,
    z: &DVector<f64>,
    j: usize,
    stream: &RngStream,
    c: &mut CoordinateRecord,
) -> Result<()> {
    let nuis = nuisance_statistic(z, sigma, j)?;
    let p = mv_pivot(
        c.z_obs,
        j,
        geom,
        c.truth,
        &nuis,
        &cfg.mv,
        &cfg.quadrature,
        stream,
    )?;
    c.pivot = Some(p.value);
    c.pivot_se = Some(p.std_error);
    if let Some(level) = cfg.level {
        c.carved = Some(mv_confidence_interval(
            c.z_obs,
            j,
            geom,
            &nuis,
            level,
            &cfg.mv,
            &cfg.quadrature,
            stream,
        )?);
    }
    Ok(())
}

/// Classical z-interval for `sqrt(n) beta_j` from the second-stage data alone.
fn split_interval(
    cfg: &ExperimentConfig,
    s2: &DVector<f64>,
    var: f64,
    j: usize,
) -> Option<ConfidenceInterval> {
    let level = cfg.level?;
    if cfg.n2 == 0 {
        return None;
    }
    let (n, n2) = (cfg.n() as f64, cfg.n2 as f64);
    let center = n.sqrt() * s2[j] / n2;
    let half = std_normal_upper_quantile((1.0 - level) / 2.0).ok()? * (var * n / n2).sqrt();
    Some(ConfidenceInterval {
        lower: center - half,
        upper: center + half,
        level,
        iterations: 0,
    })
}
