//! `incvol`: simulate, prepare, describe and fit income panels.

mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use incvol_core::io;
use incvol_core::model::{
    impulse_response, simulate_panel, HyperParams, IncomeCoefficients, PanelData, PanelRecord,
    ShockKind, SigmaPair, SimulationConfig, VolatilityTruth,
};
use incvol_core::moments::{
    cohort_table, moment_table, permanent_variance_moment, squared_change, CohortRule,
    TrendOptions, TrendWeighting,
};
use incvol_core::posterior::{
    convergence_diagnostic, yearly_distribution, PosteriorAccumulator, Psrf,
};
use incvol_core::preprocess::{
    apply_income_codes, drop_long_gaps, impute_missing, residualize, CodeTable, Design,
    BOTTOM_CODE_ANCHOR, DEFAULT_NEIGHBORHOOD, TOP_CODE_ANCHOR,
};
use incvol_core::sampler::{run_chain_with, ChainConfig};

#[derive(Parser, Debug)]
#[command(name = "incvol", version, about = "Income volatility estimation pipeline")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic panel and the shocks and variances behind it.
    Simulate(SimulateArgs),
    /// Code, log, residualize and gap-fill a raw income panel.
    Preprocess(PreprocessArgs),
    /// Squared-change and permanent-variance moment tables.
    Moments(MomentsArgs),
    /// Run Gibbs chains and write their draws.
    Fit(FitArgs),
    /// Posterior means, yearly volatility tables and chain diagnostics.
    Summarize(SummarizeArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key=value` file; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct Hypers {
    /// Population-level concentration.
    #[arg(long, default_value_t = 1.0)]
    population_concentration: f64,
    /// Individual-level concentration.
    #[arg(long, default_value_t = 1.0)]
    individual_concentration: f64,
    /// Propensity to change from last year's value.
    #[arg(long, default_value_t = 1.0)]
    change_propensity: f64,
    #[arg(long, default_value_t = 3.0)]
    proposal_shape: f64,
    #[arg(long, default_value_t = 0.1)]
    proposal_scale: f64,
}

impl Hypers {
    fn get(&self) -> HyperParams {
        HyperParams {
            population_concentration: self.population_concentration,
            individual_concentration: self.individual_concentration,
            change_propensity: self.change_propensity,
            proposal_shape: self.proposal_shape,
            proposal_scale: self.proposal_scale,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Weighting {
    Equal,
    ByWeight,
}

#[derive(Args, Debug, Clone)]
struct Trends {
    /// How yearly points are weighted in trend regressions.
    #[arg(long, value_enum, default_value_t = Weighting::Equal)]
    trend_weighting: Weighting,
    /// First year of the span used to express trends as a percent change.
    #[arg(long, default_value_t = 1968)]
    span_start: i32,
    #[arg(long, default_value_t = 2005)]
    span_end: i32,
}

impl Trends {
    fn get(&self) -> TrendOptions {
        TrendOptions {
            span_years: (self.span_start, self.span_end),
            weighting: match self.trend_weighting {
                Weighting::Equal => TrendWeighting::Equal,
                Weighting::ByWeight => TrendWeighting::ByWeight,
            },
            full_sample: None,
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 300)]
    n_individuals: usize,
    #[arg(long, default_value_t = 30)]
    n_years: usize,
    #[arg(long, default_value_t = 1968)]
    first_year: i32,
    /// Permanent pass-through at lags 0, 1, 2.
    #[arg(long, value_delimiter = ',', default_value = "0.381,0.865,0.951")]
    theta_omega: Vec<f64>,
    /// Transitory weights at lags 0, 1, 2; rescaled to sum to one.
    #[arg(long, value_delimiter = ',', default_value = "0.784,0.180,0.037")]
    theta_epsilon: Vec<f64>,
    #[arg(long, default_value_t = 0.01)]
    gamma_sq: f64,
    /// Standard deviation of the initial permanent level.
    #[arg(long, default_value_t = 0.5)]
    p0_sd: f64,
    /// Permanent variance of each volatility type (one value is shared).
    #[arg(long, value_delimiter = ',', default_value = "0.02")]
    sigma_omega: Vec<f64>,
    /// Transitory variance of each volatility type; person `i` has type
    /// `i mod k`.
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.25,1.2")]
    sigma_epsilon: Vec<f64>,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[command(flatten)]
    common: Common,
    /// Raw panel CSV.
    #[arg(long)]
    input: PathBuf,
    /// `year, deflator` CSV; needed to top- and bottom-code level income.
    #[arg(long)]
    deflator: Option<PathBuf>,
    #[arg(long, default_value_t = TOP_CODE_ANCHOR.0)]
    top_code_year: i32,
    #[arg(long, default_value_t = TOP_CODE_ANCHOR.1)]
    top_code_amount: f64,
    #[arg(long, default_value_t = BOTTOM_CODE_ANCHOR.0)]
    bottom_code_year: i32,
    #[arg(long, default_value_t = BOTTOM_CODE_ANCHOR.1)]
    bottom_code_amount: f64,
    /// Regress log income on covariates and year effects.
    #[arg(long, action = ArgAction::Set, default_value_t = true, num_args = 0..=1, default_missing_value = "true")]
    residualize: bool,
    /// Half-width of the donor window for single-year gaps, in log points.
    #[arg(long, default_value_t = DEFAULT_NEIGHBORHOOD)]
    neighborhood: f64,
}

#[derive(Args, Debug)]
struct MomentsArgs {
    #[command(flatten)]
    common: Common,
    /// Prepared panel CSV (log income).
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    trends: Trends,
    /// Years between the cohort-defining year and the reported year.
    #[arg(long, default_value_t = 4)]
    cohort_lag: usize,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    /// Prepared panel CSV (log income).
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    hypers: Hypers,
    #[arg(long, default_value_t = 10_000)]
    n_iter: usize,
    #[arg(long, default_value_t = 5_000)]
    burn_in: usize,
    #[arg(long, default_value_t = 2)]
    n_chains: usize,
    #[arg(long, default_value_t = 1)]
    thin: usize,
    /// Check volatility bookkeeping after every sweep.
    #[arg(long, action = ArgAction::Set, default_value_t = false, num_args = 0..=1, default_missing_value = "true")]
    debug_checks: bool,
}

#[derive(Args, Debug)]
struct SummarizeArgs {
    #[command(flatten)]
    common: Common,
    /// Prepared panel CSV the chains were fit to.
    #[arg(long)]
    input: PathBuf,
    /// Directory holding `chain_<k>_sigma.csv` and
    /// `chain_<k>_coefficients.csv`.
    #[arg(long)]
    chains: PathBuf,
    /// Additionally drop draws at or before this iteration.
    #[arg(long, default_value_t = 0)]
    burn_in: usize,
    #[command(flatten)]
    trends: Trends,
    /// Years of impulse response to report.
    #[arg(long, default_value_t = 8)]
    horizon: usize,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let args = config::expand_config(std::env::args_os().collect())?;
    let cli = Cli::parse_from(args);
    let common = match &cli.command {
        Command::Simulate(a) => &a.common,
        Command::Preprocess(a) => &a.common,
        Command::Moments(a) => &a.common,
        Command::Fit(a) => &a.common,
        Command::Summarize(a) => &a.common,
    };
    let threads = common
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring worker threads")?;
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating output directory {}", common.out.display()))?;
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Moments(a) => cmd_moments(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Summarize(a) => cmd_summarize(a),
    }
}

fn three(v: &[f64], name: &str) -> Result<[f64; 3]> {
    v.try_into()
        .map_err(|_| anyhow::anyhow!("--{name} needs 3 comma-separated values, got {}", v.len()))
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let coeffs = IncomeCoefficients::normalized(
        three(&a.theta_omega, "theta-omega")?,
        three(&a.theta_epsilon, "theta-epsilon")?,
        a.gamma_sq,
    )?;
    let k = a.sigma_omega.len().max(a.sigma_epsilon.len());
    let pick = |v: &[f64], j: usize, name: &str| -> Result<f64> {
        match v.len() {
            1 => Ok(v[0]),
            n if n == k => Ok(v[j]),
            n => bail!("--{name} has {n} values; expected 1 or {k}"),
        }
    };
    let values = (0..k)
        .map(|j| {
            Ok(SigmaPair::new(
                pick(&a.sigma_omega, j, "sigma-omega")?,
                pick(&a.sigma_epsilon, j, "sigma-epsilon")?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let truth = VolatilityTruth {
        values,
        labels: (0..a.n_individuals).map(|i| vec![i % k; a.n_years]).collect(),
    };
    let cfg = SimulationConfig {
        coeffs,
        n_individuals: a.n_individuals,
        n_years: a.n_years,
        first_year: a.first_year,
        p0_sd: a.p0_sd,
        seed: a.common.seed,
    };
    let sim = simulate_panel(&cfg, &truth)?;
    let out = &a.common.out;
    io::write_panel(&out.join("panel.csv"), &sim.panel)?;
    io::write_truth(&out.join("truth.csv"), &sim)?;
    log::info!(
        "wrote {} person-years to {}",
        sim.panel.n_person_years(),
        out.display()
    );
    Ok(())
}

fn cmd_preprocess(a: &PreprocessArgs) -> Result<()> {
    let raw = io::read_raw_panel(&a.input)?;
    let table = match &a.deflator {
        Some(p) => Some(CodeTable::new(
            io::read_deflator(p)?,
            (a.top_code_year, a.top_code_amount),
            (a.bottom_code_year, a.bottom_code_amount),
        )?),
        None => None,
    };
    if raw.scale == io::IncomeScale::Level && table.is_none() {
        log::warn!("no deflator given; level income is logged without top- or bottom-coding");
    }
    // observed rows feed the regression; missing rows pass through
    let mut rows = Vec::with_capacity(raw.rows.len());
    for r in &raw.rows {
        let y = match (r.income, raw.scale) {
            (None, _) => None,
            (Some(v), io::IncomeScale::Log) => Some(v),
            (Some(v), io::IncomeScale::Level) => {
                let coded = match &table {
                    Some(t) => apply_income_codes(v, r.year, t)
                        .with_context(|| format!("person {}, year {}", r.person_id, r.year))?,
                    None => v,
                };
                if !(coded > 0.0) {
                    bail!(
                        "person {}, year {}: income {v} has no logarithm; supply --deflator to bottom-code",
                        r.person_id,
                        r.year
                    );
                }
                Some(coded.ln())
            }
        };
        rows.push((r, y));
    }
    let obs: Vec<usize> = (0..rows.len()).filter(|&k| rows[k].1.is_some()).collect();
    let mut value: Vec<Option<f64>> = rows.iter().map(|(_, y)| *y).collect();
    let mut weight: Vec<f64> = rows.iter().map(|(r, _)| r.weight).collect();
    if a.residualize && !obs.is_empty() {
        let y: Vec<f64> = obs.iter().map(|&k| value[k].unwrap()).collect();
        let years: Vec<i32> = obs.iter().map(|&k| rows[k].0.year).collect();
        let w: Vec<f64> = obs.iter().map(|&k| rows[k].0.weight).collect();
        let covariates: Vec<(String, Vec<f64>)> = raw
            .covariate_names
            .iter()
            .enumerate()
            .map(|(j, n)| (n.clone(), obs.iter().map(|&k| rows[k].0.covariates[j]).collect()))
            .collect();
        let design = Design::with_year_effects(&covariates, &years)?;
        let res = residualize(&y, &design, &w, &years)?;
        for (n, &k) in obs.iter().enumerate() {
            value[k] = Some(res.residuals[n]);
            weight[k] = res.weights[n];
        }
    }
    let records = rows
        .iter()
        .enumerate()
        .map(|(k, (r, _))| PanelRecord {
            person_id: r.person_id,
            year: r.year,
            y: value[k],
            weight: weight[k],
            imputed: r.imputed,
        })
        .collect();
    let panel = PanelData::from_records(records)?;
    let (panel, dropped) = drop_long_gaps(&panel);
    if !dropped.is_empty() {
        log::warn!(
            "dropped {} individuals with gaps longer than one year",
            dropped.len()
        );
    }
    let panel = impute_missing(&panel, a.common.seed, a.neighborhood)?;
    io::write_panel(&a.common.out.join("panel.csv"), &panel)?;
    log::info!(
        "{} individuals, {} person-years",
        panel.n_individuals(),
        panel.n_person_years()
    );
    Ok(())
}

fn cmd_moments(a: &MomentsArgs) -> Result<()> {
    let panel = io::read_panel(&a.input)?;
    let opts = a.trends.get();
    let pv = permanent_variance_moment(&panel);
    let sq = squared_change(&panel, 2)?;
    let out = &a.common.out;
    io::write_moment_tables(
        &out.join("moments.csv"),
        &[
            ("pv", &moment_table(&pv, &opts)),
            ("sq", &moment_table(&sq, &opts)),
        ],
    )?;
    let rule = CohortRule {
        lag: a.cohort_lag,
        ..CohortRule::default()
    };
    io::write_cohort_table(&out.join("cohort_pv.csv"), &cohort_table(&pv, &rule, &opts))?;
    io::write_cohort_table(&out.join("cohort_sq.csv"), &cohort_table(&sq, &rule, &opts))?;
    Ok(())
}

fn chain_paths(dir: &Path, k: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("chain_{k}_sigma.csv")),
        dir.join(format!("chain_{k}_coefficients.csv")),
    )
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let panel = io::read_panel(&a.input)?;
    let hypers = a.hypers.get();
    let base = ChainConfig {
        n_iter: a.n_iter,
        burn_in: a.burn_in,
        thin: a.thin,
        hypers,
        seed: a.common.seed,
        chain_index: 0,
        debug_checks: a.debug_checks,
        keep_full_state: false,
    };
    base.validate()?;
    let out = &a.common.out;
    (0..a.n_chains)
        .into_par_iter()
        .map(|k| -> Result<()> {
            let cfg = ChainConfig {
                chain_index: k,
                ..base.clone()
            };
            let (ps, pc) = chain_paths(out, k);
            let mut w = io::ChainWriter::create(&ps, &pc, &panel)?;
            let last = run_chain_with(&panel, &cfg, |s| w.write(&s))
                .with_context(|| format!("chain {k}"))?;
            w.finish()?;
            log::info!(
                "chain {k}: {} iterations, {} clusters at the end",
                last.iteration,
                last.vol.n_clusters()
            );
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    let entries: Vec<(String, String)> = [
        ("version", env!("CARGO_PKG_VERSION").to_string()),
        ("input", a.input.display().to_string()),
        ("seed", a.common.seed.to_string()),
        ("n_chains", a.n_chains.to_string()),
        ("n_iter", a.n_iter.to_string()),
        ("burn_in", a.burn_in.to_string()),
        ("thin", a.thin.to_string()),
        ("population_concentration", hypers.population_concentration.to_string()),
        ("individual_concentration", hypers.individual_concentration.to_string()),
        ("change_propensity", hypers.change_propensity.to_string()),
        ("proposal_shape", hypers.proposal_shape.to_string()),
        ("proposal_scale", hypers.proposal_scale.to_string()),
        ("n_individuals", panel.n_individuals().to_string()),
        ("n_person_years", panel.n_person_years().to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    io::write_manifest(&out.join("manifest.txt"), &entries)?;
    Ok(())
}

fn coefficient_vector(c: &IncomeCoefficients) -> [f64; 7] {
    let (w, e) = (c.theta_omega, c.theta_epsilon);
    [w[0], w[1], w[2], e[0], e[1], e[2], c.gamma_sq]
}

fn cmd_summarize(a: &SummarizeArgs) -> Result<()> {
    let panel = io::read_panel(&a.input)?;
    let mut chains = Vec::new();
    while chain_paths(&a.chains, chains.len()).0.exists() {
        chains.push(chain_paths(&a.chains, chains.len()));
    }
    if chains.is_empty() {
        bail!("no chain_0_sigma.csv in {}", a.chains.display());
    }
    let mut acc = PosteriorAccumulator::new(panel.shape());
    for (k, (ps, _)) in chains.iter().enumerate() {
        io::for_each_sigma_draw(ps, &panel, |it, v| {
            if it > a.burn_in {
                acc.add_values(k, v)?;
            }
            Ok(())
        })
        .with_context(|| format!("reading {}", ps.display()))?;
    }
    let summary = acc.finish()?;
    let out = &a.common.out;
    io::write_posterior_means(&out.join("posterior_means.csv"), &panel, &summary)?;
    let table = yearly_distribution(&summary, &panel, &a.trends.get())?;
    io::write_volatility_table(&out.join("volatility.csv"), &table)?;
    io::write_volatility_long(&out.join("volatility_long.csv"), &table)?;

    let traces: Vec<Vec<[f64; 7]>> = chains
        .iter()
        .map(|(_, pc)| {
            Ok(io::read_coefficients(pc)?
                .into_iter()
                .filter(|(it, _)| *it > a.burn_in)
                .map(|(_, c)| coefficient_vector(&c))
                .collect())
        })
        .collect::<Result<_>>()?;
    let pooled: Vec<&[f64; 7]> = traces.iter().flatten().collect();
    if pooled.is_empty() {
        bail!("no coefficient draws after burn-in");
    }
    let n = pooled.len() as f64;
    let len = traces.iter().map(Vec::len).min().unwrap_or(0);
    let names = io::COEFFICIENT_COLUMNS[1..].to_vec();
    let mut rows = Vec::new();
    let mut means = [0.0; 7];
    for (j, name) in names.iter().enumerate() {
        let mean = pooled.iter().map(|c| c[j]).sum::<f64>() / n;
        let var = pooled.iter().map(|c| (c[j] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        means[j] = mean;
        let per_chain: Vec<Vec<f64>> = traces.iter().map(|t| t[..len].iter().map(|c| c[j]).collect()).collect();
        let psrf = match convergence_diagnostic(&per_chain) {
            Ok(Psrf::Value(r)) => r.to_string(),
            Ok(Psrf::Degenerate) => "degenerate".to_string(),
            Err(_) => String::new(),
        };
        rows.push(vec![name.to_string(), mean.to_string(), var.sqrt().to_string(), psrf]);
    }
    io::write_rows(&out.join("coefficients.csv"), &["parameter", "mean", "sd", "psrf"], &rows)?;

    let coeffs = IncomeCoefficients::normalized(
        [means[0], means[1], means[2]],
        [means[3], means[4], means[5]],
        means[6],
    )?;
    let mut rows = Vec::new();
    for (label, kind) in [("permanent", ShockKind::Permanent), ("transitory", ShockKind::Transitory)] {
        for (lag, r) in impulse_response(&coeffs, kind, 1.0, a.horizon)?.into_iter().enumerate() {
            rows.push(vec![label.to_string(), lag.to_string(), r.to_string()]);
        }
    }
    io::write_rows(&out.join("impulse_response.csv"), &["shock", "lag", "response"], &rows)?;
    Ok(())
}
