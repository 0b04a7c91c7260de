use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use carve_core::gauss::RngStream;
use carve_core::mv::{mv_confidence_interval, mv_pivot, nuisance_statistic, CarveGeometry};
use carve_core::selection::{apply_rule, elastic_net_fit, ScreeningRule, Selection};
use carve_core::seq::{seq_confidence_interval, seq_pivot, SeqCarveProblem};
use carve_core::sim::{run_two_stage_with_jobs, summarize, write_records_csv, ExperimentConfig};
use carve_core::CarveError;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::config::{load, required, ModelConfig, MvModel, ScreenConfig};
use crate::{Common, Failure, Format};

pub fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    let s = serde_json::to_string(value).map_err(|e| Failure::Io(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn print_csv<T: Serialize>(rows: &[T]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_writer(std::io::stdout());
    for r in rows {
        w.serialize(r).map_err(|e| Failure::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv_values(path: &Path) -> Result<Vec<f64>, CarveError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| CarveError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CarveError::Config(format!("{}: {e}", path.display())))?;
        for cell in rec.iter().map(str::trim).filter(|c| !c.is_empty()) {
            let v = cell.parse::<f64>().map_err(|_| {
                CarveError::Config(format!("{}: not a number: {cell:?}", path.display()))
            })?;
            out.push(v);
        }
    }
    Ok(out)
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, CarveError> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if n == 0 || p == 0 || rows.iter().any(|r| r.len() != p) {
        return Err(CarveError::Config(format!(
            "{what} must be a non-empty rectangular matrix"
        )));
    }
    Ok(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
}

#[derive(Serialize)]
struct SelectionRow {
    j: usize,
    sign: f64,
    threshold: f64,
}

pub fn screen(c: &Common) -> Result<(), Failure> {
    let cfg: ScreenConfig = load(&c.config)?;
    cfg.rule.validate()?;
    if let ScreeningRule::ElasticNet { lambda, eta } = cfg.rule {
        let (x, y) = match (&cfg.x, &cfg.y) {
            (Some(x), Some(y)) => (matrix(x, "x")?, DVector::from_column_slice(y)),
            _ => return Err(CarveError::Config("elastic net needs `x` and `y`".into()).into()),
        };
        let rho = required(cfg.rho, "rho", "screen")?;
        let fit = elastic_net_fit(&y, &x, lambda, eta, rho)?;
        return match c.format {
            Format::Json => print_json(&fit),
            Format::Csv => {
                let rows: Vec<SelectionRow> = fit
                    .active
                    .iter()
                    .zip(&fit.active_signs)
                    .map(|(&j, &sign)| SelectionRow {
                        j,
                        sign,
                        threshold: lambda,
                    })
                    .collect();
                print_csv(&rows)
            }
        };
    }
    let z1 = match (&cfg.z1, &cfg.data_csv) {
        (Some(z), None) => z.clone(),
        (None, Some(p)) => read_csv_values(p)?,
        _ => {
            return Err(CarveError::Config("give exactly one of `z1` and `data_csv`".into()).into())
        }
    };
    let sel = apply_rule(&cfg.rule, &z1)?;
    match c.format {
        Format::Json => print_json(&sel),
        Format::Csv => {
            let rows: Vec<SelectionRow> = match &sel {
                Selection::Selected(o) => (0..o.selected.len())
                    .map(|i| SelectionRow {
                        j: o.selected[i],
                        sign: o.signs[i],
                        threshold: o.event_threshold(i),
                    })
                    .collect(),
                Selection::Empty { .. } => Vec::new(),
            };
            print_csv(&rows)
        }
    }
}

struct MvSetup {
    geom: CarveGeometry,
    nuisance: DVector<f64>,
    z_obs: f64,
    stream: RngStream,
}

/// Screens `z1`, builds the carving geometry and checks that `j` was selected.
/// `Ok(None)` is an empty selection.
fn mv_setup(m: &MvModel, seed: Option<u64>) -> Result<Option<MvSetup>, Failure> {
    let d = m.z.len();
    if m.z1.len() != d {
        return Err(CarveError::Config("`z` and `z1` must have the same length".into()).into());
    }
    if m.j >= d {
        return Err(CarveError::Config(format!("coordinate j = {} out of range", m.j)).into());
    }
    let sigma = match &m.sigma {
        Some(s) => matrix(s, "sigma")?,
        None => DMatrix::identity(d, d),
    };
    if sigma.shape() != (d, d) {
        return Err(CarveError::Config("`sigma` must be d x d".into()).into());
    }
    m.rule.validate()?;
    let sel = apply_rule(&m.rule, &m.z1)?;
    let Some(outcome) = sel.outcome() else {
        return Ok(None);
    };
    if outcome.selected.binary_search(&m.j).is_err() {
        return Err(CarveError::Config(format!("coordinate {} was not selected", m.j)).into());
    }
    let geom = CarveGeometry::screening(&sigma, outcome, m.rho)?;
    let z = DVector::from_column_slice(&m.z);
    let nuisance = nuisance_statistic(&z, &sigma, m.j)?;
    Ok(Some(MvSetup {
        geom,
        nuisance,
        z_obs: m.z[m.j],
        stream: RngStream::new(seed.unwrap_or(m.seed), 0),
    }))
}

fn print_empty(rule: &ScreeningRule) -> Result<(), Failure> {
    print_json(&Selection::Empty { rule: rule.clone() })
}

fn emit<T: Serialize>(value: &T, format: Format) -> Result<(), Failure> {
    match format {
        Format::Json => print_json(value),
        Format::Csv => print_csv(std::slice::from_ref(value)),
    }
}

pub fn pivot(c: &Common) -> Result<(), Failure> {
    match load::<ModelConfig>(&c.config)? {
        ModelConfig::Seq(s) => {
            let m = required(s.m, "m", "pivot")?;
            let prob = SeqCarveProblem::new(m, s.rho, s.offset()?, s.sign)?;
            emit(&seq_pivot(s.z_obs, &prob, &s.quadrature)?, c.format)
        }
        ModelConfig::Mv(m) => {
            let mu = required(m.mu_j, "mu_j", "pivot")?;
            let Some(st) = mv_setup(&m, c.seed)? else {
                return print_empty(&m.rule);
            };
            let p = mv_pivot(
                st.z_obs,
                m.j,
                &st.geom,
                mu,
                &st.nuisance,
                &m.mv,
                &m.quadrature,
                &st.stream,
            )?;
            emit(&p, c.format)
        }
    }
}

pub fn ci(c: &Common) -> Result<(), Failure> {
    match load::<ModelConfig>(&c.config)? {
        ModelConfig::Seq(s) => {
            let level = required(s.level, "level", "ci")?;
            let ci =
                seq_confidence_interval(s.z_obs, s.rho, s.offset()?, s.sign, level, &s.quadrature)?;
            emit(&ci, c.format)
        }
        ModelConfig::Mv(m) => {
            let level = required(m.level, "level", "ci")?;
            let Some(st) = mv_setup(&m, c.seed)? else {
                return print_empty(&m.rule);
            };
            let ci = mv_confidence_interval(
                st.z_obs,
                m.j,
                &st.geom,
                &st.nuisance,
                level,
                &m.mv,
                &m.quadrature,
                &st.stream,
            )?;
            emit(&ci, c.format)
        }
    }
}

pub fn simulate(c: &Common) -> Result<(), Failure> {
    let mut cfg: ExperimentConfig = load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.master_seed = s;
    }
    cfg.validate()?;
    let jobs = c.jobs.unwrap_or(1).max(1);
    let records = run_two_stage_with_jobs(&cfg, jobs)?;
    let summary = summarize(&cfg, &records);
    std::fs::create_dir_all(&c.out)?;
    let mut w = BufWriter::new(File::create(c.out.join("records.csv"))?);
    write_records_csv(&records, &mut w)?;
    w.flush()?;
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Failure::Io(e.to_string()))?;
    std::fs::write(c.out.join("summary.json"), format!("{json}\n"))?;
    log::info!(
        "wrote {} replications to {}",
        records.len(),
        c.out.display()
    );
    match c.format {
        Format::Json => print_json(&summary),
        Format::Csv => {
            write_records_csv(&records, std::io::stdout().lock())?;
            Ok(())
        }
    }
}
