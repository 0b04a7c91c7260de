use std::io::Write;

use serde::{Deserialize, Serialize};

use super::family::Family;
use super::harness::{
    run_two_stage, ExperimentConfig, RandomizationMode, RegimeSpec, ReplicationRecord,
};
use crate::error::{CarveError, Result};

pub const CSV_VERSION_LINE: &str = "# carve-csv v1";

pub const CSV_COLUMNS: [&str; 15] = [
    "replication",
    "status",
    "n_selected",
    "j",
    "sign",
    "z1",
    "z_obs",
    "truth",
    "pivot",
    "pivot_se",
    "carved_lower",
    "carved_upper",
    "split_lower",
    "split_upper",
    "error",
];

const MIN_POOL: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformityReport {
    pub ks_distance: f64,
    pub n_pivots: usize,
}

/// Kolmogorov-Smirnov distance of the sample from Unif(0, 1).
pub fn ks_distance_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

pub fn uniformity_report(pivots: &[f64]) -> Result<UniformityReport> {
    if pivots.len() < MIN_POOL {
        return Err(CarveError::InsufficientData {
            needed: MIN_POOL,
            got: pivots.len(),
        });
    }
    Ok(UniformityReport {
        ks_distance: ks_distance_uniform(pivots),
        n_pivots: pivots.len(),
    })
}

/// Two-sample Kolmogorov-Smirnov distance.
pub fn two_sample_ks(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(CarveError::InsufficientData { needed: 1, got: 0 });
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Pivots of every selected coordinate, in replication order.
pub fn pooled_pivots(records: &[ReplicationRecord]) -> Vec<f64> {
    records
        .iter()
        .flat_map(|r| r.coordinates.iter().filter_map(|c| c.pivot))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub level: f64,
    pub n_intervals: usize,
    pub carved_coverage: f64,
    pub carved_se: f64,
    pub n_split: usize,
    pub split_coverage: f64,
    pub split_se: f64,
    pub median_length_carved: f64,
    pub median_length_split: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn binomial(hits: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let p = hits as f64 / n as f64;
    (p, (p * (1.0 - p) / n as f64).sqrt())
}

/// Coverage of `truth` by the carved and split intervals at `level`.
pub fn coverage_report(records: &[ReplicationRecord], level: f64) -> Result<CoverageReport> {
    let coords = records.iter().flat_map(|r| &r.coordinates);
    let carved: Vec<_> = coords
        .clone()
        .filter_map(|c| {
            c.carved
                .filter(|ci| ci.level == level)
                .map(|ci| (ci, c.truth))
        })
        .collect();
    if carved.len() < MIN_POOL {
        return Err(CarveError::InsufficientData {
            needed: MIN_POOL,
            got: carved.len(),
        });
    }
    let split: Vec<_> = coords
        .filter_map(|c| {
            c.split
                .filter(|ci| ci.level == level)
                .map(|ci| (ci, c.truth))
        })
        .collect();
    let (carved_coverage, carved_se) = binomial(
        carved.iter().filter(|(ci, t)| ci.contains(*t)).count(),
        carved.len(),
    );
    let (split_coverage, split_se) = binomial(
        split.iter().filter(|(ci, t)| ci.contains(*t)).count(),
        split.len(),
    );
    Ok(CoverageReport {
        level,
        n_intervals: carved.len(),
        carved_coverage,
        carved_se,
        n_split: split.len(),
        split_coverage,
        split_se,
        median_length_carved: median(carved.iter().map(|(ci, _)| ci.length()).collect()),
        median_length_split: median(split.iter().map(|(ci, _)| ci.length()).collect()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub replications: usize,
    pub empty_selections: usize,
    pub failed_replications: usize,
    pub coordinate_errors: usize,
    pub underflow_count: usize,
    pub n_pivots: usize,
    pub ks_distance: Option<f64>,
    pub ks_reason: Option<String>,
    pub coverage: Option<CoverageReport>,
    pub coverage_reason: Option<String>,
    pub config: ExperimentConfig,
}

pub fn summarize(cfg: &ExperimentConfig, records: &[ReplicationRecord]) -> ExperimentSummary {
    let pivots = pooled_pivots(records);
    let (ks_distance, ks_reason) = match uniformity_report(&pivots) {
        Ok(u) => (Some(u.ks_distance), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let (coverage, coverage_reason) = match cfg.level {
        None => (None, Some("no confidence level configured".to_string())),
        Some(l) => match coverage_report(records, l) {
            Ok(c) if c.n_split > 0 => (Some(c), None),
            Ok(c) => (
                Some(CoverageReport {
                    split_coverage: 0.0,
                    split_se: 0.0,
                    median_length_split: 0.0,
                    ..c
                }),
                Some("no second-stage data; split fields are zero".to_string()),
            ),
            Err(e) => (None, Some(e.to_string())),
        },
    };
    let coords = || records.iter().flat_map(|r| &r.coordinates);
    ExperimentSummary {
        replications: records.len(),
        empty_selections: records.iter().filter(|r| r.is_empty_selection()).count(),
        failed_replications: records.iter().filter(|r| r.error.is_some()).count(),
        coordinate_errors: coords().filter(|c| c.error.is_some()).count(),
        underflow_count: coords().filter(|c| c.underflow).count(),
        n_pivots: pivots.len(),
        ks_distance,
        ks_reason,
        coverage,
        coverage_reason,
        config: cfg.clone(),
    }
}

fn fmt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per selected coordinate; replications without pivots get one row
/// with `status` `empty` or `error`.
pub fn write_records_csv<W: Write>(records: &[ReplicationRecord], mut out: W) -> Result<()> {
    let io = |e: std::io::Error| CarveError::Config(format!("cannot write CSV: {e}"));
    writeln!(out, "{CSV_VERSION_LINE}").map_err(io)?;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| CarveError::Config(format!("cannot write CSV: {e}"));
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in records {
        let rep = r.replication.to_string();
        if r.coordinates.is_empty() {
            let status = if r.error.is_some() { "error" } else { "empty" };
            let mut row = vec![rep, status.to_string(), "0".into()];
            row.extend(std::iter::repeat_n(String::new(), 11));
            row.push(r.error.clone().unwrap_or_default());
            w.write_record(&row).map_err(csv_err)?;
            continue;
        }
        let k = r.coordinates.len().to_string();
        for c in &r.coordinates {
            let status = if c.error.is_some() {
                "error"
            } else {
                "selected"
            };
            w.write_record([
                rep.clone(),
                status.to_string(),
                k.clone(),
                c.j.to_string(),
                c.sign.to_string(),
                c.z1.to_string(),
                c.z_obs.to_string(),
                c.truth.to_string(),
                fmt(c.pivot),
                fmt(c.pivot_se),
                fmt(c.carved.map(|ci| ci.lower)),
                fmt(c.carved.map(|ci| ci.upper)),
                fmt(c.split.map(|ci| ci.lower)),
                fmt(c.split.map(|ci| ci.upper)),
                c.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()
        .map_err(|e| CarveError::Config(format!("cannot write CSV: {e}")))?;
    Ok(())
}

/// Reads the `pivot` column back from a CSV written by `write_records_csv`.
pub fn read_pivots_csv<R: std::io::BufRead>(mut input: R) -> Result<Vec<f64>> {
    let mut first = String::new();
    input
        .read_line(&mut first)
        .map_err(|e| CarveError::Config(format!("cannot read CSV: {e}")))?;
    if first.trim_end() != CSV_VERSION_LINE {
        return Err(CarveError::Config(format!(
            "unexpected CSV version line {first:?}"
        )));
    }
    let mut rdr = csv::Reader::from_reader(input);
    let idx = CSV_COLUMNS
        .iter()
        .position(|c| *c == "pivot")
        .expect("pivot column");
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| CarveError::Config(format!("bad CSV row: {e}")))?;
        let cell = &row[idx];
        if !cell.is_empty() {
            out.push(
                cell.parse()
                    .map_err(|e| CarveError::Config(format!("bad pivot {cell:?}: {e}")))?,
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub n: usize,
    pub n1: usize,
    pub n2: usize,
    pub mode: RandomizationMode,
    pub family: Family,
    pub n_pivots: usize,
    pub ks_distance: Option<f64>,
    pub empty_selections: usize,
    pub underflow_count: usize,
}

/// KS distance of pooled pivots along `sqrt(n) beta_n = -n^gamma |beta_bar|`,
/// splitting each `n` in the base ratio `n1 : n2`.
pub fn regime_sweep(
    base: &ExperimentConfig,
    gammas: &[f64],
    ns: &[usize],
) -> Result<Vec<SweepRow>> {
    let beta_bar = match &base.regime {
        RegimeSpec::Schedule { beta_bar, .. } => beta_bar.clone(),
        RegimeSpec::Fixed { .. } => {
            return Err(CarveError::Config(
                "regime sweep needs a schedule regime".into(),
            ))
        }
    };
    let frac = base.n1 as f64 / base.n() as f64;
    let mut rows = Vec::new();
    for &gamma in gammas {
        for &n in ns {
            let n1 = ((n as f64 * frac).round() as usize).max(2);
            if n1 > n {
                return Err(CarveError::Config(format!("n = {n} is too small to split")));
            }
            let cfg = ExperimentConfig {
                n1,
                n2: n - n1,
                regime: RegimeSpec::Schedule {
                    gamma,
                    beta_bar: beta_bar.clone(),
                },
                ..base.clone()
            };
            let recs = run_two_stage(&cfg)?;
            let s = summarize(&cfg, &recs);
            rows.push(SweepRow {
                gamma,
                n,
                n1,
                n2: n - n1,
                mode: cfg.randomization_mode,
                family: cfg.family,
                n_pivots: s.n_pivots,
                ks_distance: s.ks_distance,
                empty_selections: s.empty_selections,
                underflow_count: s.underflow_count,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::RngStream;
    use crate::inference::ConfidenceInterval;
    use crate::sim::harness::CoordinateRecord;
    use rand::Rng;

    #[test]
    fn ks_special_cases() {
        let r = 999;
        let eq: Vec<f64> = (1..=r).map(|k| k as f64 / (r + 1) as f64).collect();
        assert!(uniformity_report(&eq).unwrap().ks_distance <= 1.0 / (r + 1) as f64 + 1e-15);
        assert_eq!(uniformity_report(&[0.5; 200]).unwrap().ks_distance, 0.5);
        assert!(matches!(
            uniformity_report(&[0.5; 99]),
            Err(CarveError::InsufficientData { .. })
        ));
    }

    #[test]
    fn ks_of_uniform_draws() {
        let mut rng = RngStream::new(4, 0).rng();
        let u: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        assert!(ks_distance_uniform(&u) < 0.0136 * 2.0);
    }

    #[test]
    fn two_sample_matches_brute_force() {
        let mut rng = RngStream::new(5, 0).rng();
        for _ in 0..20 {
            let a: Vec<f64> = (0..37)
                .map(|_| (rng.random::<f64>() * 10.0).floor())
                .collect();
            let b: Vec<f64> = (0..23)
                .map(|_| (rng.random::<f64>() * 10.0).floor() + 0.5 * rng.random::<f64>())
                .collect();
            let ecdf =
                |s: &[f64], x: f64| s.iter().filter(|v| **v <= x).count() as f64 / s.len() as f64;
            let brute = a
                .iter()
                .chain(&b)
                .map(|&x| (ecdf(&a, x) - ecdf(&b, x)).abs())
                .fold(0.0, f64::max);
            assert!((two_sample_ks(&a, &b).unwrap() - brute).abs() < 1e-15);
        }
    }

    fn record(truth: f64, carved: (f64, f64)) -> ReplicationRecord {
        let ci = |(l, u): (f64, f64)| {
            Some(ConfidenceInterval {
                lower: l,
                upper: u,
                level: 0.9,
                iterations: 0,
            })
        };
        ReplicationRecord {
            replication: 0,
            rho2: 1.0,
            selection: None,
            coordinates: vec![CoordinateRecord {
                j: 0,
                sign: 1.0,
                z1: 0.0,
                z_obs: 0.0,
                truth,
                pivot: Some(0.5),
                pivot_se: Some(0.0),
                carved: ci(carved),
                split: ci((1.0, 0.0)),
                error: None,
                underflow: false,
            }],
            error: None,
        }
    }

    #[test]
    fn coverage_extremes() {
        let whole: Vec<_> = (0..100)
            .map(|i| record(i as f64, (f64::NEG_INFINITY, f64::INFINITY)))
            .collect();
        let c = coverage_report(&whole, 0.9).unwrap();
        assert_eq!(c.carved_coverage, 1.0);
        assert_eq!(c.split_coverage, 0.0);
        let empty: Vec<_> = (0..100).map(|i| record(i as f64, (1.0, 0.0))).collect();
        assert_eq!(coverage_report(&empty, 0.9).unwrap().carved_coverage, 0.0);
        assert!(coverage_report(&empty[..50], 0.9).is_err());
    }

    #[test]
    fn csv_round_trips_pivots() {
        let mut recs: Vec<_> = (0..3).map(|i| record(0.1 * i as f64, (0.0, 1.0))).collect();
        recs[1].coordinates.clear();
        recs[1].coordinates.shrink_to_fit();
        recs[0].coordinates[0].pivot = Some(0.1 + 0.2);
        recs[2].coordinates[0].error = Some("needs, \"quoting\"".into());
        let mut buf = Vec::new();
        write_records_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# carve-csv v1\nreplication,status,"));
        assert!(text.contains(",empty,0,"));
        let back = read_pivots_csv(&buf[..]).unwrap();
        assert_eq!(back, pooled_pivots(&recs));
    }
}
