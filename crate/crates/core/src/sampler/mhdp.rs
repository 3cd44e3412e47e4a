//! Step 3: per-person-year volatility under the Markovian hierarchical
//! Dirichlet process prior.
//!
//! Each person-year walks down three levels, stopping at the first level
//! whose coin flip picks an existing value:
//!
//! 1. keep last year's value (weight `Q * lik(prev)`) or change
//!    (`theta * lik(proposal)`);
//! 2. reuse another of the individual's values (`n_li * lik`) or take a
//!    value new to the individual (`Theta_i * lik(proposal)`);
//! 3. reuse a population value not held by the individual (`n_l * lik`) or
//!    open a new cluster at the proposal (`Theta * lik(proposal)`).
//!
//! A fresh proposal is drawn for each level.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::model::{log_shock_likelihood, HyperParams, ShockPanel, SigmaPair};
use crate::volatility::{ClusterId, VolatilityState};

/// Inverse-Gamma draw for each variance component.
pub fn propose_sigma<R: Rng + ?Sized>(hypers: &HyperParams, rng: &mut R) -> SigmaPair {
    let g = Gamma::new(hypers.proposal_shape, 1.0).expect("validated proposal shape");
    let mut one = || {
        // a Gamma draw of exactly zero would give an infinite variance
        loop {
            let v = hypers.proposal_scale / g.sample(rng);
            if v.is_finite() && v > 0.0 {
                return v;
            }
        }
    };
    let omega = one();
    let epsilon = one();
    SigmaPair { omega, epsilon }
}

/// Where a person-year's value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolatilityMove {
    /// Level 1: same value as the previous year.
    Kept(ClusterId),
    /// Level 2: another value already held by the individual.
    Individual(ClusterId),
    /// Level 3: a value held only by other individuals.
    Population(ClusterId),
    /// Level 3: a new cluster at the proposal.
    New(ClusterId),
}

impl VolatilityMove {
    pub fn cluster(self) -> ClusterId {
        match self {
            VolatilityMove::Kept(c)
            | VolatilityMove::Individual(c)
            | VolatilityMove::Population(c)
            | VolatilityMove::New(c) => c,
        }
    }
}

/// Index drawn with probability proportional to `exp(log_w[k])`.
fn categorical<R: Rng + ?Sized>(log_w: &[f64], rng: &mut R) -> usize {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        // nothing has positive weight; fall back to the last (proposal) option
        return log_w.len() - 1;
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, wk) in w.iter().enumerate() {
        if u < *wk {
            return k;
        }
        u -= wk;
    }
    log_w.len() - 1
}

/// Resamples the value of person-year `(i, t)` given every other
/// assignment. `log_lik` is the log-likelihood of the cell's data under a
/// candidate variance pair; the cell may start unassigned.
pub fn sample_cell<R, F>(
    vol: &mut VolatilityState,
    i: usize,
    t: usize,
    log_lik: F,
    hypers: &HyperParams,
    rng: &mut R,
) -> Result<VolatilityMove>
where
    R: Rng + ?Sized,
    F: Fn(SigmaPair) -> f64,
{
    let before = vol.assigned() - usize::from(vol.assignment(i, t).is_some());
    vol.unassign(i, t);
    let prev = if t > 0 { vol.assignment(i, t - 1) } else { None };

    let mv = 'levels: {
        if let Some(prev) = prev {
            let q = vol.run_length(i, t);
            if q == 0 {
                return Err(Error::InvariantViolation(format!(
                    "({i}, {t}): previous year assigned but run length is 0"
                )));
            }
            let proposal = propose_sigma(hypers, rng);
            let keep = (q as f64).ln() + log_lik(vol.cluster(prev).sigma);
            let change = hypers.change_propensity.ln() + log_lik(proposal);
            if categorical(&[keep, change], rng) == 0 {
                break 'levels VolatilityMove::Kept(prev);
            }
        }

        let own: Vec<(ClusterId, usize)> = vol
            .local_counts(i)
            .iter()
            .copied()
            .filter(|(c, _)| Some(*c) != prev)
            .collect();
        if !own.is_empty() {
            let proposal = propose_sigma(hypers, rng);
            let mut lw: Vec<f64> = own
                .iter()
                .map(|(c, n)| (*n as f64).ln() + log_lik(vol.cluster(*c).sigma))
                .collect();
            lw.push(hypers.individual_concentration.ln() + log_lik(proposal));
            let k = categorical(&lw, rng);
            if k < own.len() {
                break 'levels VolatilityMove::Individual(own[k].0);
            }
        }

        let others: Vec<(ClusterId, usize, SigmaPair)> = vol
            .clusters()
            .filter(|(c, _)| vol.local_count(i, *c) == 0)
            .map(|(c, cl)| (c, cl.count, cl.sigma))
            .collect();
        let proposal = propose_sigma(hypers, rng);
        let mut lw: Vec<f64> = others
            .iter()
            .map(|(_, n, s)| (*n as f64).ln() + log_lik(*s))
            .collect();
        lw.push(hypers.population_concentration.ln() + log_lik(proposal));
        let k = categorical(&lw, rng);
        if k < others.len() {
            VolatilityMove::Population(others[k].0)
        } else {
            VolatilityMove::New(vol.create_cluster(proposal))
        }
    };

    vol.assign(i, t, mv.cluster());
    if vol.assigned() != before + 1 {
        return Err(Error::InvariantViolation(format!(
            "({i}, {t}): assigned count {} after move, expected {}",
            vol.assigned(),
            before + 1
        )));
    }
    Ok(mv)
}

/// Step 3 for one person-year, with the bivariate shock likelihood.
pub fn step3_sample_volatility<R: Rng + ?Sized>(
    omega: f64,
    epsilon: f64,
    vol: &mut VolatilityState,
    i: usize,
    t: usize,
    hypers: &HyperParams,
    rng: &mut R,
) -> Result<VolatilityMove> {
    sample_cell(
        vol,
        i,
        t,
        |s| log_shock_likelihood(omega, epsilon, s),
        hypers,
        rng,
    )
}

/// One pass over every person-year: years in increasing order within an
/// individual, individuals in panel order.
pub fn sweep_volatility<R: Rng + ?Sized>(
    shocks: &ShockPanel,
    vol: &mut VolatilityState,
    hypers: &HyperParams,
    rng: &mut R,
) -> Result<()> {
    for (i, sh) in shocks.individuals.iter().enumerate() {
        for t in 0..sh.omega.len() {
            step3_sample_volatility(sh.omega[t], sh.epsilon[t], vol, i, t, hypers, rng)?;
        }
    }
    Ok(())
}

/// Sequential draw of assignments from the prior alone (flat likelihood),
/// filling an empty state cell by cell in sweep order.
pub fn simulate_prior<R: Rng + ?Sized>(
    shape: &[usize],
    hypers: &HyperParams,
    rng: &mut R,
) -> Result<VolatilityState> {
    let mut vol = VolatilityState::empty(shape);
    for (i, &n) in shape.iter().enumerate() {
        for t in 0..n {
            sample_cell(&mut vol, i, t, |_| 0.0, hypers, rng)?;
        }
    }
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn proposal_mean_and_positivity() {
        let h = HyperParams::default();
        let mut rng = stream_rng(1, Stream::Volatility, &[]);
        let n = 200_000;
        let draws: Vec<SigmaPair> = (0..n).map(|_| propose_sigma(&h, &mut rng)).collect();
        assert!(draws.iter().all(|s| s.omega > 0.0 && s.epsilon > 0.0));
        // InvGamma(3, 0.1): mean 0.05, variance 0.1^2 / (2^2 * 1) = 0.0025
        let mean = draws.iter().map(|s| s.omega).sum::<f64>() / n as f64;
        let se = (0.0025f64 / n as f64).sqrt();
        assert!((mean - 0.05).abs() < 3.0 * se, "{mean}");
        let mean_e = draws.iter().map(|s| s.epsilon).sum::<f64>() / n as f64;
        assert!((mean_e - 0.05).abs() < 3.0 * se, "{mean_e}");
    }

    #[test]
    fn distinct_seeds_distinct_proposals() {
        let h = HyperParams::default();
        let mut seen: Vec<(u64, u64)> = (0..100)
            .map(|s| {
                let p = propose_sigma(&h, &mut stream_rng(s, Stream::Volatility, &[]));
                (p.omega.to_bits(), p.epsilon.to_bits())
            })
            .collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 100);
    }

    #[test]
    fn lone_cell_opens_a_cluster() {
        let h = HyperParams::default();
        let mut rng = stream_rng(2, Stream::Volatility, &[]);
        for _ in 0..100 {
            let mut vol = VolatilityState::empty(&[1]);
            let mv = step3_sample_volatility(0.3, -0.1, &mut vol, 0, 0, &h, &mut rng).unwrap();
            assert!(matches!(mv, VolatilityMove::New(_)));
            assert_eq!(vol.n_clusters(), 1);
        }
    }

    #[test]
    fn categorical_enumeration() {
        let w = [0.2f64, 0.5, 0.3];
        let lw: Vec<f64> = w.iter().map(|x| x.ln()).collect();
        let mut rng = stream_rng(3, Stream::Volatility, &[]);
        let n = 100_000;
        let mut c = [0usize; 3];
        for _ in 0..n {
            c[categorical(&lw, &mut rng)] += 1;
        }
        for k in 0..3 {
            let p = c[k] as f64 / n as f64;
            let se = (w[k] * (1.0 - w[k]) / n as f64).sqrt();
            assert!((p - w[k]).abs() < 3.0 * se);
        }
        assert_eq!(categorical(&[f64::NEG_INFINITY, f64::NEG_INFINITY], &mut rng), 1);
    }

    #[test]
    fn keep_frequency_with_flat_likelihood() {
        let h = HyperParams { change_propensity: 1.5, ..HyperParams::default() };
        let mut rng = stream_rng(5, Stream::Volatility, &[]);
        let n = 40_000;
        for q in [1usize, 3] {
            // years 0..q share one value; year q is resampled
            let labels = vec![vec![0; q + 1], vec![1; 2]];
            let start = VolatilityState::from_labels(
                &[SigmaPair::new(0.1, 0.1), SigmaPair::new(0.2, 0.2)],
                &labels,
            )
            .unwrap();
            let mut kept = 0;
            for _ in 0..n {
                let mut vol = start.clone();
                if let VolatilityMove::Kept(_) = sample_cell(&mut vol, 0, q, |_| 0.0, &h, &mut rng).unwrap() {
                    kept += 1;
                }
            }
            let p = q as f64 / (h.change_propensity + q as f64);
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let got = kept as f64 / n as f64;
            assert!((got - p).abs() < 3.0 * se, "q={q}: {got} vs {p}");
        }
    }

    #[test]
    fn population_level_matches_enumeration() {
        // person 0 holds nothing else; clusters a (n=3) and b (n=1) belong to others
        let (sa, sb) = (SigmaPair::new(0.1, 0.1), SigmaPair::new(0.7, 0.7));
        let start = VolatilityState::from_labels(&[sa, sb], &[vec![0], vec![0, 0, 0], vec![1]]).unwrap();
        let (la, lb, lp) = (0.5f64, 2.0f64, 1.0f64);
        let log_lik = |s: SigmaPair| {
            if s == sa {
                la.ln()
            } else if s == sb {
                lb.ln()
            } else {
                lp.ln()
            }
        };
        let h = HyperParams { population_concentration: 0.8, ..HyperParams::default() };
        let w = [3.0 * la, 1.0 * lb, h.population_concentration * lp];
        let total: f64 = w.iter().sum();
        let mut rng = stream_rng(6, Stream::Volatility, &[]);
        let n = 100_000;
        let mut c = [0usize; 3];
        for _ in 0..n {
            let mut vol = start.clone();
            match sample_cell(&mut vol, 0, 0, log_lik, &h, &mut rng).unwrap() {
                VolatilityMove::Population(id) if vol.cluster(id).sigma == sa => c[0] += 1,
                VolatilityMove::Population(_) => c[1] += 1,
                VolatilityMove::New(_) => c[2] += 1,
                other => panic!("unexpected {other:?}"),
            }
        }
        for k in 0..3 {
            let p = w[k] / total;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let got = c[k] as f64 / n as f64;
            assert!((got - p).abs() < 3.0 * se, "{k}: {got} vs {p}");
        }
    }

    #[test]
    fn sweeps_preserve_invariants() {
        let h = HyperParams::default();
        let mut rng = stream_rng(4, Stream::Volatility, &[]);
        let shape = [6, 4, 7];
        let mut vol = VolatilityState::single_cluster(&shape, SigmaPair::new(0.05, 0.05));
        let mut shocks = ShockPanel::zeros(&shape);
        for (i, s) in shocks.individuals.iter_mut().enumerate() {
            for t in 0..s.omega.len() {
                s.omega[t] = 0.1 * (i as f64 - 1.0) * t as f64;
                s.epsilon[t] = if t % 3 == 0 { 1.5 } else { -0.05 };
            }
        }
        for _ in 0..200 {
            sweep_volatility(&shocks, &mut vol, &h, &mut rng).unwrap();
            vol.check_invariants().unwrap();
            assert_eq!(vol.assigned(), 17);
        }
    }
}
