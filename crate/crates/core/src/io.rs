//! CSV formats for panels, chain draws and report tables.
//!
//! Floats are written in Rust's shortest round-trip form, so identical runs
//! produce byte-identical files. Missing values are empty fields.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{IncomeCoefficients, PanelData, PanelRecord, SigmaPair, SimulatedPanel};
use crate::moments::{CohortTable, MomentTable, Trend};
use crate::posterior::{PosteriorSummary, VolatilityTable};
use crate::sampler::Snapshot;

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

/// Header lookup that names the file and column on failure.
struct Columns {
    path: String,
    index: BTreeMap<String, usize>,
}

impl Columns {
    fn new(path: &Path, headers: &csv::StringRecord) -> Self {
        Columns {
            path: path_str(path),
            index: headers
                .iter()
                .enumerate()
                .map(|(k, h)| (h.trim().to_string(), k))
                .collect(),
        }
    }

    fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| Error::MissingColumn {
            path: self.path.clone(),
            column: name.to_string(),
        })
    }

    fn parse<T: std::str::FromStr>(&self, rec: &csv::StringRecord, k: usize) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        let field = rec.get(k).unwrap_or("").trim();
        if field.is_empty() {
            return Ok(None);
        }
        field.parse().map(Some).map_err(|e: T::Err| Error::Parse {
            path: self.path.clone(),
            line: rec.position().map_or(0, |p| p.line()),
            message: format!("field `{field}`: {e}"),
        })
    }

    fn parse_req<T: std::str::FromStr>(&self, rec: &csv::StringRecord, k: usize, name: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.parse(rec, k)?.ok_or_else(|| Error::Parse {
            path: self.path.clone(),
            line: rec.position().map_or(0, |p| p.line()),
            message: format!("empty `{name}`"),
        })
    }
}

fn parse_flag(c: &Columns, rec: &csv::StringRecord, k: usize) -> Result<bool> {
    match rec.get(k).unwrap_or("").trim() {
        "" | "0" | "false" => Ok(false),
        "1" | "true" => Ok(true),
        other => Err(Error::Parse {
            path: c.path.clone(),
            line: rec.position().map_or(0, |p| p.line()),
            message: format!("`{other}` is not a flag (use 0/1)"),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IncomeScale {
    Log,
    Level,
}

/// One row of an input panel before any preparation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub person_id: u64,
    pub year: i32,
    pub income: Option<f64>,
    pub weight: f64,
    pub imputed: bool,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawPanel {
    pub scale: IncomeScale,
    pub covariate_names: Vec<String>,
    pub rows: Vec<RawRow>,
}

const RESERVED: [&str; 6] = ["person_id", "year", "log_income", "income", "weight", "imputed"];

/// Reads `person_id, year, log_income | income[, weight][, imputed]`; any
/// other column is a numeric covariate. Weight defaults to 1.
pub fn read_raw_panel(path: &Path) -> Result<RawPanel> {
    let mut rdr = csv::Reader::from_path(path)?;
    let cols = Columns::new(path, rdr.headers()?);
    let pid = cols.require("person_id")?;
    let year = cols.require("year")?;
    let (scale, inc) = if cols.has("log_income") {
        (IncomeScale::Log, cols.require("log_income")?)
    } else if cols.has("income") {
        (IncomeScale::Level, cols.require("income")?)
    } else {
        return Err(cols.require("log_income").unwrap_err());
    };
    let weight = cols.has("weight").then(|| cols.require("weight")).transpose()?;
    let imputed = cols.has("imputed").then(|| cols.require("imputed")).transpose()?;
    let mut covariate_names = Vec::new();
    let mut cov_idx = Vec::new();
    for (k, h) in rdr.headers()?.iter().enumerate() {
        let h = h.trim();
        if !RESERVED.contains(&h) {
            covariate_names.push(h.to_string());
            cov_idx.push(k);
        }
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let covariates = cov_idx
            .iter()
            .zip(&covariate_names)
            .map(|(&k, n)| cols.parse_req(&rec, k, n))
            .collect::<Result<_>>()?;
        rows.push(RawRow {
            person_id: cols.parse_req(&rec, pid, "person_id")?,
            year: cols.parse_req(&rec, year, "year")?,
            income: cols.parse(&rec, inc)?,
            weight: match weight {
                Some(k) => cols.parse(&rec, k)?.unwrap_or(1.0),
                None => 1.0,
            },
            imputed: match imputed {
                Some(k) => parse_flag(&cols, &rec, k)?,
                None => false,
            },
            covariates,
        });
    }
    Ok(RawPanel {
        scale,
        covariate_names,
        rows,
    })
}

/// Reads `year, deflator` price-index rows.
pub fn read_deflator(path: &Path) -> Result<BTreeMap<i32, f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let cols = Columns::new(path, rdr.headers()?);
    let ky = cols.require("year")?;
    let kd = cols.require("deflator")?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.insert(
            cols.parse_req(&rec, ky, "year")?,
            cols.parse_req(&rec, kd, "deflator")?,
        );
    }
    Ok(out)
}

/// Reads a prepared panel; income must be on the log scale.
pub fn read_panel(path: &Path) -> Result<PanelData> {
    let raw = read_raw_panel(path)?;
    if raw.scale != IncomeScale::Log {
        return Err(Error::MissingColumn {
            path: path_str(path),
            column: "log_income".into(),
        });
    }
    PanelData::from_records(
        raw.rows
            .into_iter()
            .map(|r| PanelRecord {
                person_id: r.person_id,
                year: r.year,
                y: r.income,
                weight: r.weight,
                imputed: r.imputed,
            })
            .collect(),
    )
}

/// Writes `person_id, year, log_income, weight, imputed`.
pub fn write_panel(path: &Path, panel: &PanelData) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["person_id", "year", "log_income", "weight", "imputed"])?;
    for r in panel.records() {
        w.write_record([
            r.person_id.to_string(),
            r.year.to_string(),
            fmt_opt(r.y),
            fmt(r.weight),
            u8::from(r.imputed).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the simulated shocks and variances behind a synthetic panel.
pub fn write_truth(path: &Path, sim: &SimulatedPanel) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "person_id",
        "year",
        "p0",
        "omega",
        "epsilon",
        "sigma_omega_sq",
        "sigma_epsilon_sq",
        "label",
    ])?;
    for (i, (ind, sh)) in sim.panel.individuals.iter().zip(&sim.shocks.individuals).enumerate() {
        for t in 0..ind.len() {
            let s = sim.truth.sigma(i, t);
            w.write_record([
                ind.person_id.to_string(),
                ind.year(t).to_string(),
                fmt(sh.p0),
                fmt(sh.omega[t]),
                fmt(sh.epsilon[t]),
                fmt(s.omega),
                fmt(s.epsilon),
                sim.truth.labels[i][t].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub const COEFFICIENT_COLUMNS: [&str; 8] = [
    "iteration",
    "theta_omega_0",
    "theta_omega_1",
    "theta_omega_2",
    "theta_epsilon_0",
    "theta_epsilon_1",
    "theta_epsilon_2",
    "gamma_sq",
];

/// Streams one chain's snapshots to a volatility file and a coefficient
/// file.
pub struct ChainWriter {
    sigma: csv::Writer<BufWriter<File>>,
    coeffs: csv::Writer<BufWriter<File>>,
    keys: Vec<(String, String)>,
}

impl ChainWriter {
    pub fn create(sigma_path: &Path, coeff_path: &Path, panel: &PanelData) -> Result<Self> {
        let mut sigma = writer(sigma_path)?;
        sigma.write_record([
            "iteration",
            "person_id",
            "year",
            "sigma_omega_sq",
            "sigma_epsilon_sq",
        ])?;
        let mut coeffs = writer(coeff_path)?;
        coeffs.write_record(COEFFICIENT_COLUMNS)?;
        let keys = panel
            .individuals
            .iter()
            .flat_map(|ind| (0..ind.len()).map(move |t| (ind.person_id.to_string(), ind.year(t).to_string())))
            .collect();
        Ok(ChainWriter { sigma, coeffs, keys })
    }

    pub fn write(&mut self, s: &Snapshot) -> Result<()> {
        if s.values.len() != self.keys.len() {
            return Err(Error::InvalidInput("snapshot does not match the panel".into()));
        }
        let it = s.iteration.to_string();
        for ((pid, year), v) in self.keys.iter().zip(&s.values) {
            self.sigma
                .write_record([it.as_str(), pid, year, &fmt(v.omega), &fmt(v.epsilon)])?;
        }
        let c = &s.coeffs;
        let mut rec = vec![it];
        rec.extend(c.theta_omega.iter().chain(&c.theta_epsilon).map(|&x| fmt(x)));
        rec.push(fmt(c.gamma_sq));
        self.coeffs.write_record(&rec)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.sigma.flush()?;
        self.coeffs.flush()?;
        Ok(())
    }
}

/// Reads a volatility draw file, calling `f(iteration, values)` once per
/// iteration with values in panel order. Rows of an iteration must be
/// contiguous and cover every person-year of `panel`.
pub fn for_each_sigma_draw<F>(path: &Path, panel: &PanelData, mut f: F) -> Result<usize>
where
    F: FnMut(usize, &[SigmaPair]) -> Result<()>,
{
    let mut slot: BTreeMap<(u64, i32), usize> = BTreeMap::new();
    for ind in &panel.individuals {
        for t in 0..ind.len() {
            slot.insert((ind.person_id, ind.year(t)), slot.len());
        }
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let cols = Columns::new(path, rdr.headers()?);
    let k_it = cols.require("iteration")?;
    let k_pid = cols.require("person_id")?;
    let k_year = cols.require("year")?;
    let k_w = cols.require("sigma_omega_sq")?;
    let k_e = cols.require("sigma_epsilon_sq")?;
    let n = slot.len();
    let mut current: Option<usize> = None;
    let mut values = vec![SigmaPair::new(f64::NAN, f64::NAN); n];
    let mut filled = 0usize;
    let mut draws = 0usize;
    let mut flush = |it: usize, values: &mut Vec<SigmaPair>, filled: &mut usize| -> Result<()> {
        if *filled != n {
            return Err(Error::InvalidInput(format!(
                "{}: iteration {it} covers {filled} of {n} person-years",
                path_str(path)
            )));
        }
        f(it, values)?;
        *filled = 0;
        Ok(())
    };
    for rec in rdr.records() {
        let rec = rec?;
        let it: usize = cols.parse_req(&rec, k_it, "iteration")?;
        if current.is_some_and(|c| c != it) {
            flush(current.unwrap(), &mut values, &mut filled)?;
            draws += 1;
        }
        current = Some(it);
        let pid: u64 = cols.parse_req(&rec, k_pid, "person_id")?;
        let year: i32 = cols.parse_req(&rec, k_year, "year")?;
        let k = *slot.get(&(pid, year)).ok_or_else(|| Error::Parse {
            path: path_str(path),
            line: rec.position().map_or(0, |p| p.line()),
            message: format!("person {pid}, year {year} is not in the panel"),
        })?;
        values[k] = SigmaPair::new(
            cols.parse_req(&rec, k_w, "sigma_omega_sq")?,
            cols.parse_req(&rec, k_e, "sigma_epsilon_sq")?,
        );
        filled += 1;
    }
    if let Some(it) = current {
        flush(it, &mut values, &mut filled)?;
        draws += 1;
    }
    Ok(draws)
}

/// Reads a coefficient draw file as `(iteration, coefficients)`.
pub fn read_coefficients(path: &Path) -> Result<Vec<(usize, IncomeCoefficients)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let cols = Columns::new(path, rdr.headers()?);
    let idx: Vec<usize> = COEFFICIENT_COLUMNS
        .iter()
        .map(|c| cols.require(c))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let it: usize = cols.parse_req(&rec, idx[0], "iteration")?;
        let v: Vec<f64> = idx[1..]
            .iter()
            .zip(&COEFFICIENT_COLUMNS[1..])
            .map(|(&k, n)| cols.parse_req(&rec, k, n))
            .collect::<Result<_>>()?;
        out.push((
            it,
            IncomeCoefficients {
                theta_omega: [v[0], v[1], v[2]],
                theta_epsilon: [v[3], v[4], v[5]],
                gamma_sq: v[6],
            },
        ));
    }
    Ok(out)
}

/// `key=value` lines in the given order.
pub fn write_manifest(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for (k, v) in entries {
        writeln!(f, "{k}={v}")?;
    }
    f.flush()?;
    Ok(())
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_string(),
            line: n as u64 + 1,
            message: format!("expected key=value, got `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn trend_rows(trends: &[Option<&Trend>]) -> [Vec<String>; 3] {
    let pick = |f: fn(&Trend) -> Option<f64>| trends.iter().map(|t| fmt_opt(t.and_then(f))).collect();
    [
        pick(|t| Some(t.slope)),
        pick(|t| t.t_stat),
        pick(|t| t.pct_change),
    ]
}

/// Year rows of mean / median / p95 for each named table, then `average`
/// (full sample), `slope`, `t_stat` and `pct_change` rows.
pub fn write_moment_tables(path: &Path, tables: &[(&str, &MomentTable)]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["row".to_string()];
    for (name, _) in tables {
        for stat in ["mean", "median", "p95"] {
            header.push(format!("{name}_{stat}"));
        }
    }
    w.write_record(&header)?;
    let years: std::collections::BTreeSet<i32> = tables
        .iter()
        .flat_map(|(_, t)| t.yearly.iter().map(|y| y.year))
        .collect();
    for year in years {
        let mut rec = vec![year.to_string()];
        for (_, t) in tables {
            let s = t.yearly.iter().find(|y| y.year == year).and_then(|y| y.summary);
            rec.push(fmt_opt(s.map(|s| s.mean)));
            rec.push(fmt_opt(s.map(|s| s.median)));
            rec.push(fmt_opt(s.map(|s| s.p95)));
        }
        w.write_record(&rec)?;
    }
    let mut avg = vec!["average".to_string()];
    for (_, t) in tables {
        avg.push(fmt_opt(t.full.map(|s| s.mean)));
        avg.push(fmt_opt(t.full.map(|s| s.median)));
        avg.push(fmt_opt(t.full.map(|s| s.p95)));
    }
    w.write_record(&avg)?;
    let trends: Vec<Option<&Trend>> = tables
        .iter()
        .flat_map(|(_, t)| [t.mean_trend.as_ref(), t.median_trend.as_ref(), t.p95_trend.as_ref()])
        .collect();
    for (label, row) in ["slope", "t_stat", "pct_change"].into_iter().zip(trend_rows(&trends)) {
        let mut rec = vec![label.to_string()];
        rec.extend(row);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Year rows of the low- and high-cohort means, then summary rows; the
/// relative gap sits on the `average` row.
pub fn write_cohort_table(path: &Path, table: &CohortTable) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["row", "low", "high", "pct_difference"])?;
    for r in &table.rows {
        w.write_record([
            r.year.to_string(),
            fmt_opt(r.low.map(|s| s.mean)),
            fmt_opt(r.high.map(|s| s.mean)),
            String::new(),
        ])?;
    }
    w.write_record([
        "average".to_string(),
        fmt_opt(table.low_average),
        fmt_opt(table.high_average),
        fmt_opt(table.pct_difference),
    ])?;
    let trends = [table.low_trend.as_ref(), table.high_trend.as_ref()];
    for (label, row) in ["slope", "t_stat", "pct_change"].into_iter().zip(trend_rows(&trends)) {
        let mut rec = vec![label.to_string()];
        rec.extend(row);
        rec.push(String::new());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `permanent_*` and `transitory_*` columns in the moment-table layout.
pub fn write_volatility_table(path: &Path, table: &VolatilityTable) -> Result<()> {
    write_moment_tables(
        path,
        &[("permanent", &table.permanent), ("transitory", &table.transitory)],
    )
}

/// Long format for charting: `year, quantile, value, variance_kind`.
pub fn write_volatility_long(path: &Path, table: &VolatilityTable) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["year", "quantile", "value", "variance_kind"])?;
    for (kind, t) in [("permanent", &table.permanent), ("transitory", &table.transitory)] {
        for y in &t.yearly {
            let Some(s) = y.summary else { continue };
            for (q, v) in [("mean", s.mean), ("median", s.median), ("p95", s.p95)] {
                w.write_record([y.year.to_string(), q.to_string(), fmt(v), kind.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-person-year posterior means.
pub fn write_posterior_means(path: &Path, panel: &PanelData, summary: &PosteriorSummary) -> Result<()> {
    if panel.shape() != summary.shape {
        return Err(Error::InvalidInput("posterior summary does not match the panel".into()));
    }
    let mut w = writer(path)?;
    w.write_record(["person_id", "year", "sigma_omega_sq", "sigma_epsilon_sq"])?;
    let mut k = 0;
    for ind in &panel.individuals {
        for t in 0..ind.len() {
            let m = summary.mean[k];
            k += 1;
            w.write_record([
                ind.person_id.to_string(),
                ind.year(t).to_string(),
                fmt(m.omega),
                fmt(m.epsilon),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Generic header-plus-rows CSV used for small report files.
pub fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}
