//! Domain types for the permanent/transitory income process, the forward
//! simulator, the per-cell shock likelihood, and impulse responses.
//!
//! Excess log income for person `i` in local year index `t` is
//!
//! ```text
//! y[t] = p0 + sum_{k <= t-3} w[k]
//!           + th_w[0] w[t] + th_w[1] w[t-1] + th_w[2] w[t-2]
//!           + th_e[0] e[t] + th_e[1] e[t-1] + th_e[2] e[t-2]
//!           + noise[t]
//! ```
//!
//! where `w` are permanent shocks, `e` transitory shocks, and `noise` has
//! variance `gamma_sq`. Shocks dated before an individual's first year are
//! zero.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Number of lags through which a shock is still phasing in (permanent) or
/// out (transitory).
pub const LAGS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// Excess log income; `None` when the year is missing.
    pub y: Option<f64>,
    pub weight: f64,
    /// `false` for missing and for imputed years.
    pub observed: bool,
}

impl Observation {
    pub fn observed(y: f64, weight: f64) -> Self {
        Observation {
            y: Some(y),
            weight,
            observed: true,
        }
    }

    pub fn missing() -> Self {
        Observation {
            y: None,
            weight: 0.0,
            observed: false,
        }
    }

    /// Value usable for descriptive moments: present and not imputed.
    pub fn observed_value(&self) -> Option<f64> {
        if self.observed {
            self.y
        } else {
            None
        }
    }
}

/// One person's contiguous, year-indexed series.
#[derive(Debug, Clone, PartialEq)]
pub struct IndividualSeries {
    pub person_id: u64,
    pub first_year: i32,
    pub obs: Vec<Observation>,
}

impl IndividualSeries {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn year(&self, t: usize) -> i32 {
        self.first_year + t as i32
    }

    pub fn last_year(&self) -> i32 {
        self.first_year + self.obs.len() as i32 - 1
    }

    pub fn index_of(&self, year: i32) -> Option<usize> {
        let t = year - self.first_year;
        (t >= 0 && (t as usize) < self.obs.len()).then_some(t as usize)
    }
}

/// Ragged panel of excess log income.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PanelData {
    pub individuals: Vec<IndividualSeries>,
}

/// One raw person-year record, as read from a file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanelRecord {
    pub person_id: u64,
    pub year: i32,
    pub y: Option<f64>,
    pub weight: f64,
    pub imputed: bool,
}

impl PanelData {
    pub fn new(individuals: Vec<IndividualSeries>) -> Result<Self> {
        for ind in &individuals {
            if ind.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "person {} has no years",
                    ind.person_id
                )));
            }
            for (t, o) in ind.obs.iter().enumerate() {
                if !(o.weight >= 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "person {}, year {}: negative weight {}",
                        ind.person_id,
                        ind.year(t),
                        o.weight
                    )));
                }
                if let Some(y) = o.y {
                    if !y.is_finite() {
                        return Err(Error::InvalidInput(format!(
                            "person {}, year {}: non-finite income",
                            ind.person_id,
                            ind.year(t)
                        )));
                    }
                }
            }
        }
        Ok(PanelData { individuals })
    }

    /// Groups records by person into contiguous series. Interior years
    /// without a record (or with an empty value) become missing; leading and
    /// trailing missing years are trimmed.
    pub fn from_records(mut records: Vec<PanelRecord>) -> Result<Self> {
        records.sort_by_key(|r| (r.person_id, r.year));
        let mut by_person: BTreeMap<u64, Vec<PanelRecord>> = BTreeMap::new();
        for r in records {
            let v = by_person.entry(r.person_id).or_default();
            if v.last().is_some_and(|p| p.year == r.year) {
                return Err(Error::InvalidInput(format!(
                    "duplicate record for person {} year {}",
                    r.person_id, r.year
                )));
            }
            v.push(r);
        }
        let mut individuals = Vec::with_capacity(by_person.len());
        for (person_id, recs) in by_person {
            let present: Vec<&PanelRecord> = recs.iter().filter(|r| r.y.is_some()).collect();
            let (Some(first), Some(last)) = (present.first(), present.last()) else {
                continue;
            };
            let (first_year, last_year) = (first.year, last.year);
            let mut obs = vec![Observation::missing(); (last_year - first_year + 1) as usize];
            for r in recs.iter().filter(|r| r.year >= first_year && r.year <= last_year) {
                let slot = &mut obs[(r.year - first_year) as usize];
                *slot = match r.y {
                    Some(y) => Observation {
                        y: Some(y),
                        weight: r.weight,
                        observed: !r.imputed,
                    },
                    None => Observation::missing(),
                };
            }
            individuals.push(IndividualSeries {
                person_id,
                first_year,
                obs,
            });
        }
        PanelData::new(individuals)
    }

    pub fn n_individuals(&self) -> usize {
        self.individuals.len()
    }

    pub fn n_person_years(&self) -> usize {
        self.individuals.iter().map(|s| s.len()).sum()
    }

    /// Series lengths, in individual order.
    pub fn shape(&self) -> Vec<usize> {
        self.individuals.iter().map(|s| s.len()).collect()
    }

    pub fn year_range(&self) -> Option<(i32, i32)> {
        let first = self.individuals.iter().map(|s| s.first_year).min()?;
        let last = self.individuals.iter().map(|s| s.last_year()).max()?;
        Some((first, last))
    }

    /// Fails on the first missing value; the sampler needs every year filled.
    pub fn require_complete(&self) -> Result<()> {
        for ind in &self.individuals {
            if let Some(t) = ind.obs.iter().position(|o| o.y.is_none()) {
                return Err(Error::MissingValue {
                    person: ind.person_id,
                    year: ind.year(t),
                });
            }
        }
        Ok(())
    }

    pub fn records(&self) -> impl Iterator<Item = PanelRecord> + '_ {
        self.individuals.iter().flat_map(|ind| {
            ind.obs.iter().enumerate().map(move |(t, o)| PanelRecord {
                person_id: ind.person_id,
                year: ind.year(t),
                y: o.y,
                weight: o.weight,
                imputed: o.y.is_some() && !o.observed,
            })
        })
    }
}

/// Pass-through weights of shocks into income, by lag, plus the measurement
/// noise variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IncomeCoefficients {
    pub theta_omega: [f64; LAGS],
    pub theta_epsilon: [f64; LAGS],
    pub gamma_sq: f64,
}

impl IncomeCoefficients {
    pub const EPSILON_SUM_TOL: f64 = 1e-12;

    pub fn new(theta_omega: [f64; LAGS], theta_epsilon: [f64; LAGS], gamma_sq: f64) -> Result<Self> {
        let c = IncomeCoefficients {
            theta_omega,
            theta_epsilon,
            gamma_sq,
        };
        c.validate()?;
        Ok(c)
    }

    /// Like [`IncomeCoefficients::new`] but rescales `theta_epsilon` to sum
    /// to one first.
    pub fn normalized(theta_omega: [f64; LAGS], theta_epsilon: [f64; LAGS], gamma_sq: f64) -> Result<Self> {
        let s: f64 = theta_epsilon.iter().sum();
        if !(s.abs() > 1e-12) || !s.is_finite() {
            return Err(Error::Domain(format!(
                "transitory weights sum to {s}; cannot normalize"
            )));
        }
        Self::new(theta_omega, theta_epsilon.map(|x| x / s), gamma_sq)
    }

    /// Accepts `gamma_sq == 0` for noiseless simulation; the sampler
    /// always produces a strictly positive value.
    pub fn validate(&self) -> Result<()> {
        if self
            .theta_omega
            .iter()
            .chain(&self.theta_epsilon)
            .any(|x| !x.is_finite())
        {
            return Err(Error::Domain("non-finite pass-through weight".into()));
        }
        let s: f64 = self.theta_epsilon.iter().sum();
        if (s - 1.0).abs() > Self::EPSILON_SUM_TOL {
            return Err(Error::Domain(format!(
                "transitory weights must sum to 1, got {s}"
            )));
        }
        if !(self.gamma_sq >= 0.0) || !self.gamma_sq.is_finite() {
            return Err(Error::Domain(format!(
                "noise variance must be nonnegative, got {}",
                self.gamma_sq
            )));
        }
        Ok(())
    }

    /// Regression ordering `(th_w2, th_w1, th_w0, th_e2, th_e1, th_e0)`,
    /// matching regressor rows `(w[t-2], w[t-1], w[t], e[t-2], e[t-1], e[t])`.
    pub fn beta(&self) -> [f64; 6] {
        let (w, e) = (self.theta_omega, self.theta_epsilon);
        [w[2], w[1], w[0], e[2], e[1], e[0]]
    }

    pub fn from_beta(beta: &[f64; 6], gamma_sq: f64) -> Self {
        IncomeCoefficients {
            theta_omega: [beta[2], beta[1], beta[0]],
            theta_epsilon: [beta[5], beta[4], beta[3]],
            gamma_sq,
        }
    }
}

/// Latent shock draws aligned with a [`PanelData`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ShockPanel {
    pub individuals: Vec<IndividualShocks>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IndividualShocks {
    pub p0: f64,
    pub omega: Vec<f64>,
    pub epsilon: Vec<f64>,
}

impl IndividualShocks {
    pub fn zeros(len: usize) -> Self {
        IndividualShocks {
            p0: 0.0,
            omega: vec![0.0; len],
            epsilon: vec![0.0; len],
        }
    }

    fn lagged(v: &[f64], t: usize, k: usize) -> f64 {
        if t >= k {
            v[t - k]
        } else {
            0.0
        }
    }

    pub fn omega_lag(&self, t: usize, k: usize) -> f64 {
        Self::lagged(&self.omega, t, k)
    }

    pub fn epsilon_lag(&self, t: usize, k: usize) -> f64 {
        Self::lagged(&self.epsilon, t, k)
    }

    /// `p0` plus all permanent shocks that have fully phased in by `t`.
    pub fn settled_level(&self, t: usize) -> f64 {
        let upto = (t + 1).saturating_sub(LAGS);
        self.p0 + self.omega[..upto].iter().sum::<f64>()
    }

    /// Noise-free income implied by the shocks.
    pub fn reconstruct(&self, coeffs: &IncomeCoefficients) -> Vec<f64> {
        (0..self.omega.len())
            .map(|t| {
                let mut y = self.settled_level(t);
                for k in 0..LAGS {
                    y += coeffs.theta_omega[k] * self.omega_lag(t, k);
                    y += coeffs.theta_epsilon[k] * self.epsilon_lag(t, k);
                }
                y
            })
            .collect()
    }
}

impl ShockPanel {
    pub fn zeros(shape: &[usize]) -> Self {
        ShockPanel {
            individuals: shape.iter().map(|&n| IndividualShocks::zeros(n)).collect(),
        }
    }
}

/// A (permanent, transitory) variance pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaPair {
    pub omega: f64,
    pub epsilon: f64,
}

impl SigmaPair {
    pub fn new(omega: f64, epsilon: f64) -> Self {
        SigmaPair { omega, epsilon }
    }
}

/// Concentration parameters of the three prior levels and the inverse-Gamma
/// proposal used for new variance values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    /// Population-level concentration.
    pub population_concentration: f64,
    /// Individual-level concentration.
    pub individual_concentration: f64,
    /// Propensity to leave the previous year's value.
    pub change_propensity: f64,
    pub proposal_shape: f64,
    pub proposal_scale: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            population_concentration: 1.0,
            individual_concentration: 1.0,
            change_propensity: 1.0,
            proposal_shape: 3.0,
            proposal_scale: 0.1,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("population_concentration", self.population_concentration),
            ("individual_concentration", self.individual_concentration),
            ("change_propensity", self.change_propensity),
            ("proposal_shape", self.proposal_shape),
            ("proposal_scale", self.proposal_scale),
        ];
        for (name, v) in all {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Log of the unnormalized bivariate shock density.
pub fn log_shock_likelihood(omega: f64, epsilon: f64, sigma: SigmaPair) -> f64 {
    -0.5 * (sigma.omega.ln() + sigma.epsilon.ln())
        - 0.5 * omega * omega / sigma.omega
        - 0.5 * epsilon * epsilon / sigma.epsilon
}

/// `(s_w s_e)^(-1/2) exp(-w^2 / (2 s_w) - e^2 / (2 s_e))`.
pub fn shock_likelihood(omega: f64, epsilon: f64, sigma: SigmaPair) -> Result<f64> {
    if !(sigma.omega > 0.0) || !(sigma.epsilon > 0.0) {
        return Err(Error::Domain(format!(
            "variances must be positive, got ({}, {})",
            sigma.omega, sigma.epsilon
        )));
    }
    Ok(log_shock_likelihood(omega, epsilon, sigma).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShockKind {
    Permanent,
    Transitory,
}

/// Response of income to a unit-time shock of size `magnitude`, indexed by
/// years since the shock (lag 0 is the contemporaneous effect).
pub fn impulse_response(
    coeffs: &IncomeCoefficients,
    kind: ShockKind,
    magnitude: f64,
    horizon: usize,
) -> Result<Vec<f64>> {
    coeffs.validate()?;
    if horizon < LAGS {
        return Err(Error::InvalidInput(format!(
            "horizon must be at least {LAGS}, got {horizon}"
        )));
    }
    let (weights, tail) = match kind {
        ShockKind::Permanent => (coeffs.theta_omega, 1.0),
        ShockKind::Transitory => (coeffs.theta_epsilon, 0.0),
    };
    Ok((0..horizon)
        .map(|k| magnitude * if k < LAGS { weights[k] } else { tail })
        .collect())
}

/// Ground-truth volatility for the simulator: a table of variance pairs and
/// a per-person-year label into it.
#[derive(Debug, Clone, PartialEq)]
pub struct VolatilityTruth {
    pub values: Vec<SigmaPair>,
    pub labels: Vec<Vec<usize>>,
}

impl VolatilityTruth {
    pub fn constant(sigma: SigmaPair, n_individuals: usize, n_years: usize) -> Self {
        VolatilityTruth {
            values: vec![sigma],
            labels: vec![vec![0; n_years]; n_individuals],
        }
    }

    pub fn sigma(&self, i: usize, t: usize) -> SigmaPair {
        self.values[self.labels[i][t]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub coeffs: IncomeCoefficients,
    pub n_individuals: usize,
    pub n_years: usize,
    pub first_year: i32,
    /// Standard deviation of the initial permanent level.
    pub p0_sd: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel {
    pub panel: PanelData,
    pub shocks: ShockPanel,
    pub truth: VolatilityTruth,
}

/// Forward-simulates the income process. Person `i` draws from its own
/// stream, so the result depends only on the seed.
pub fn simulate_panel(cfg: &SimulationConfig, truth: &VolatilityTruth) -> Result<SimulatedPanel> {
    if cfg.n_years < 7 {
        return Err(Error::TooFewYears(cfg.n_years));
    }
    cfg.coeffs.validate()?;
    if truth.labels.len() != cfg.n_individuals
        || truth.labels.iter().any(|l| l.len() != cfg.n_years)
    {
        return Err(Error::InvalidInput(
            "volatility truth does not match the panel shape".into(),
        ));
    }
    if let Some(bad) = truth
        .labels
        .iter()
        .flatten()
        .find(|&&l| l >= truth.values.len())
    {
        return Err(Error::InvalidInput(format!("volatility label {bad} out of range")));
    }
    if truth
        .values
        .iter()
        .any(|s| !(s.omega >= 0.0 && s.epsilon >= 0.0))
    {
        return Err(Error::Domain("truth variances must be nonnegative".into()));
    }
    if !(cfg.p0_sd >= 0.0) {
        return Err(Error::Domain("p0_sd must be nonnegative".into()));
    }

    let (individuals, shocks): (Vec<_>, Vec<_>) = (0..cfg.n_individuals)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, Stream::Simulate, &[i as u64]);
            let mut s = IndividualShocks::zeros(cfg.n_years);
            s.p0 = cfg.p0_sd * rng.sample::<f64, _>(StandardNormal);
            for t in 0..cfg.n_years {
                let sig = truth.sigma(i, t);
                let z1: f64 = rng.sample(StandardNormal);
                let z2: f64 = rng.sample(StandardNormal);
                s.omega[t] = sig.omega.sqrt() * z1;
                s.epsilon[t] = sig.epsilon.sqrt() * z2;
            }
            let noise = Normal::new(0.0, cfg.coeffs.gamma_sq.sqrt()).expect("validated variance");
            let obs = s
                .reconstruct(&cfg.coeffs)
                .into_iter()
                .map(|y| Observation::observed(y + noise.sample(&mut rng), 1.0))
                .collect();
            let series = IndividualSeries {
                person_id: i as u64 + 1,
                first_year: cfg.first_year,
                obs,
            };
            (series, s)
        })
        .unzip();

    Ok(SimulatedPanel {
        panel: PanelData::new(individuals)?,
        shocks: ShockPanel { individuals: shocks },
        truth: truth.clone(),
    })
}
