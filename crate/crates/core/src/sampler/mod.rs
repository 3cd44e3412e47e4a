//! The three-step Gibbs sampler and chain driver.

pub mod ffbs;
pub mod mhdp;
pub mod regression;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{HyperParams, IncomeCoefficients, PanelData, ShockPanel, SigmaPair};
use crate::rng::{stream_rng, Stream};
use crate::volatility::VolatilityState;

pub use ffbs::sample_individual_shocks;
pub use mhdp::{propose_sigma, sample_cell, step3_sample_volatility, sweep_volatility, VolatilityMove};
pub use regression::{build_regression, step1_sample_coefficients, RegressionData};

/// Full sampler state for one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    pub coeffs: IncomeCoefficients,
    pub shocks: ShockPanel,
    pub vol: VolatilityState,
    /// Completed iterations; 0 right after initialization.
    pub iteration: usize,
    pub rng_seed: u64,
    pub chain: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub hypers: HyperParams,
    pub seed: u64,
    pub chain_index: usize,
    /// Verify volatility bookkeeping after every sweep.
    pub debug_checks: bool,
    /// Attach the whole state to each snapshot.
    pub keep_full_state: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            n_iter: 10_000,
            burn_in: 5_000,
            thin: 1,
            hypers: HyperParams::default(),
            seed: 0,
            chain_index: 0,
            debug_checks: false,
            keep_full_state: false,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hypers.validate()?;
        if self.burn_in >= self.n_iter {
            return Err(Error::InvalidInput(format!(
                "burn_in ({}) must be below n_iter ({})",
                self.burn_in, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidInput("thin must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether draws from `iteration` (1-based) are kept.
    pub fn retains(&self, iteration: usize) -> bool {
        iteration > self.burn_in && (iteration - self.burn_in) % self.thin == 0
    }
}

/// Retained draw: coefficients plus every person-year's variance pair in
/// panel order (individual-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub coeffs: IncomeCoefficients,
    pub values: Vec<SigmaPair>,
    /// Cluster labels renumbered by first appearance.
    pub labels: Vec<u32>,
    pub n_clusters: usize,
    pub full: Option<Box<GibbsState>>,
}

impl Snapshot {
    pub fn from_state(state: &GibbsState, keep_full: bool) -> Self {
        let mut relabel: Vec<(crate::volatility::ClusterId, u32)> = Vec::new();
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for i in 0..state.vol.n_individuals() {
            for t in 0..state.vol.len_of(i) {
                let c = state.vol.assignment(i, t).expect("all person-years assigned");
                let l = match relabel.iter().find(|(k, _)| *k == c) {
                    Some((_, l)) => *l,
                    None => {
                        let l = relabel.len() as u32;
                        relabel.push((c, l));
                        l
                    }
                };
                values.push(state.vol.cluster(c).sigma);
                labels.push(l);
            }
        }
        Snapshot {
            iteration: state.iteration,
            coeffs: state.coeffs,
            values,
            labels,
            n_clusters: relabel.len(),
            full: keep_full.then(|| Box::new(state.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub chain_index: usize,
    pub shape: Vec<usize>,
    pub snapshots: Vec<Snapshot>,
}

fn one_year_change_variance(panel: &PanelData) -> Result<f64> {
    let mut n = 0usize;
    let (mut s, mut ss) = (0.0, 0.0);
    for ind in &panel.individuals {
        for t in 1..ind.len() {
            if let (Some(a), Some(b)) = (ind.obs[t - 1].y, ind.obs[t].y) {
                let d = b - a;
                s += d;
                ss += d * d;
                n += 1;
            }
        }
    }
    if n < 2 {
        return Err(Error::InvalidInput("panel has fewer than two one-year changes".into()));
    }
    let mean = s / n as f64;
    Ok((ss / n as f64 - mean * mean).max(0.0))
}

fn draw_shocks(
    panel: &PanelData,
    coeffs: &IncomeCoefficients,
    vol: &VolatilityState,
    seed: u64,
    stream: Stream,
    path: [u64; 2],
) -> Result<ShockPanel> {
    let individuals = panel
        .individuals
        .par_iter()
        .enumerate()
        .map(|(i, ind)| {
            let y: Vec<f64> = ind
                .obs
                .iter()
                .enumerate()
                .map(|(t, o)| {
                    o.y.ok_or(Error::MissingValue {
                        person: ind.person_id,
                        year: ind.year(t),
                    })
                })
                .collect::<Result<_>>()?;
            let sigmas: Vec<SigmaPair> = (0..ind.len())
                .map(|t| {
                    vol.sigma(i, t).ok_or_else(|| {
                        Error::InvariantViolation("person-year without volatility".into())
                            .at(ind.person_id, ind.year(t))
                    })
                })
                .collect::<Result<_>>()?;
            let mut rng = stream_rng(seed, stream, &[path[0], path[1], i as u64]);
            sample_individual_shocks(&y, ind.first_year, coeffs, &sigmas, &mut rng).map_err(|e| {
                let year = match &e {
                    Error::FilterDivergence { year } => *year,
                    _ => ind.first_year,
                };
                e.at(ind.person_id, year)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShockPanel { individuals })
}

/// Random starting point: pass-through weights scattered around full
/// pass-through with most transitory weight on the current year, noise
/// variance a random fraction of the one-year change variance `v`, all
/// person-years in one cluster at `(v, v)`, and one shock draw given those.
pub fn initialize(panel: &PanelData, cfg: &ChainConfig) -> Result<GibbsState> {
    panel.require_complete()?;
    cfg.validate()?;
    let v = one_year_change_variance(panel)?.max(1e-6);
    let chain = cfg.chain_index as u64;
    let mut rng = stream_rng(cfg.seed, Stream::Init, &[chain, 0]);
    let mut z = || 0.1 * rng.sample::<f64, _>(StandardNormal);
    let theta_omega = [1.0 + z(), 1.0 + z(), 1.0 + z()];
    let theta_epsilon = [(1.0 + z()).abs(), z().abs(), z().abs()];
    let u = Uniform::new(0.05, 0.2).map_err(|e| Error::Domain(e.to_string()))?;
    let gamma_sq = v * u.sample(&mut rng);
    let coeffs = IncomeCoefficients::normalized(theta_omega, theta_epsilon, gamma_sq)?;
    let vol = VolatilityState::single_cluster(&panel.shape(), SigmaPair::new(v, v));
    let shocks = draw_shocks(panel, &coeffs, &vol, cfg.seed, Stream::Init, [chain, 1])?;
    Ok(GibbsState {
        coeffs,
        shocks,
        vol,
        iteration: 0,
        rng_seed: cfg.seed,
        chain: cfg.chain_index,
    })
}

/// One full sweep: coefficients, then every individual's shocks, then
/// every person-year's volatility.
pub fn gibbs_iterate(
    state: &mut GibbsState,
    panel: &PanelData,
    hypers: &HyperParams,
    debug_checks: bool,
) -> Result<()> {
    let iter = (state.iteration + 1) as u64;
    let chain = state.chain as u64;
    let seed = state.rng_seed;

    let data = build_regression(panel, &state.shocks)?;
    let mut rng = stream_rng(seed, Stream::Coefficients, &[chain, iter]);
    state.coeffs = step1_sample_coefficients(&data, &mut rng)?;

    state.shocks = draw_shocks(panel, &state.coeffs, &state.vol, seed, Stream::Shocks, [chain, iter])?;

    let mut rng = stream_rng(seed, Stream::Volatility, &[chain, iter]);
    for (i, (ind, sh)) in panel.individuals.iter().zip(&state.shocks.individuals).enumerate() {
        for t in 0..ind.len() {
            step3_sample_volatility(sh.omega[t], sh.epsilon[t], &mut state.vol, i, t, hypers, &mut rng)
                .map_err(|e| e.at(ind.person_id, ind.year(t)))?;
        }
    }

    if debug_checks {
        state.vol.check_invariants()?;
        state.coeffs.validate()?;
        if !(state.coeffs.gamma_sq > 0.0) {
            return Err(Error::InvariantViolation("noise variance is not positive".into()));
        }
    }
    state.iteration += 1;
    Ok(())
}

/// Runs one chain, handing every retained snapshot to `sink` as it is
/// produced.
pub fn run_chain_with<F>(panel: &PanelData, cfg: &ChainConfig, mut sink: F) -> Result<GibbsState>
where
    F: FnMut(Snapshot) -> Result<()>,
{
    let mut state = initialize(panel, cfg)?;
    for _ in 0..cfg.n_iter {
        gibbs_iterate(&mut state, panel, &cfg.hypers, cfg.debug_checks)?;
        if cfg.retains(state.iteration) {
            sink(Snapshot::from_state(&state, cfg.keep_full_state))?;
        }
        if state.iteration % 100 == 0 {
            log::debug!(
                "chain {} iteration {}: {} clusters",
                cfg.chain_index,
                state.iteration,
                state.vol.n_clusters()
            );
        }
    }
    Ok(state)
}

pub fn run_chain(panel: &PanelData, cfg: &ChainConfig) -> Result<Chain> {
    let mut snapshots = Vec::new();
    run_chain_with(panel, cfg, |s| {
        snapshots.push(s);
        Ok(())
    })?;
    Ok(Chain {
        chain_index: cfg.chain_index,
        shape: panel.shape(),
        snapshots,
    })
}

/// Runs `n_chains` chains in parallel, chain `k` with `chain_index = k`.
pub fn run_chains(panel: &PanelData, cfg: &ChainConfig, n_chains: usize) -> Result<Vec<Chain>> {
    (0..n_chains)
        .into_par_iter()
        .map(|k| {
            let cfg = ChainConfig {
                chain_index: k,
                ..cfg.clone()
            };
            run_chain(panel, &cfg)
        })
        .collect()
}
