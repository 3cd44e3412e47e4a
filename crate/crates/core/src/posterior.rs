//! Reporting objects built from retained draws: per-person-year posterior
//! means, their yearly distribution, and a multi-chain mixing diagnostic.

use crate::error::{Error, Result};
use crate::model::{PanelData, SigmaPair};
use crate::moments::{moment_table, MomentCell, MomentSeries, MomentTable, TrendOptions};
use crate::sampler::{Chain, Snapshot};

/// Cellwise posterior means, individual-major in panel order.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub shape: Vec<usize>,
    pub mean: Vec<SigmaPair>,
    pub n_chains: usize,
    /// Retained draws pooled over chains.
    pub n_draws: usize,
}

impl PosteriorSummary {
    pub fn get(&self, i: usize, t: usize) -> SigmaPair {
        let offset: usize = self.shape[..i].iter().sum();
        self.mean[offset + t]
    }
}

/// Running sums for building a [`PosteriorSummary`] one snapshot at a time.
#[derive(Debug, Clone)]
pub struct PosteriorAccumulator {
    shape: Vec<usize>,
    sum: Vec<(f64, f64)>,
    n_draws: usize,
    chains: Vec<usize>,
}

impl PosteriorAccumulator {
    pub fn new(shape: Vec<usize>) -> Self {
        let cells = shape.iter().sum();
        PosteriorAccumulator {
            shape,
            sum: vec![(0.0, 0.0); cells],
            n_draws: 0,
            chains: Vec::new(),
        }
    }

    pub fn add_values(&mut self, chain: usize, values: &[SigmaPair]) -> Result<()> {
        if values.len() != self.sum.len() {
            return Err(Error::InvalidInput(format!(
                "draw has {} person-years, expected {}",
                values.len(),
                self.sum.len()
            )));
        }
        for (s, v) in self.sum.iter_mut().zip(values) {
            s.0 += v.omega;
            s.1 += v.epsilon;
        }
        self.n_draws += 1;
        if !self.chains.contains(&chain) {
            self.chains.push(chain);
        }
        Ok(())
    }

    pub fn add(&mut self, chain: usize, snapshot: &Snapshot) -> Result<()> {
        self.add_values(chain, &snapshot.values)
    }

    pub fn finish(self) -> Result<PosteriorSummary> {
        if self.n_draws == 0 {
            return Err(Error::InvalidInput("no retained draws".into()));
        }
        let n = self.n_draws as f64;
        Ok(PosteriorSummary {
            mean: self
                .sum
                .iter()
                .map(|&(w, e)| SigmaPair::new(w / n, e / n))
                .collect(),
            shape: self.shape,
            n_chains: self.chains.len(),
            n_draws: self.n_draws,
        })
    }
}

/// Pools snapshots after `burn_in` across chains and averages each cell.
pub fn posterior_means(chains: &[Chain], burn_in: usize) -> Result<PosteriorSummary> {
    let shape = chains
        .first()
        .map(|c| c.shape.clone())
        .ok_or_else(|| Error::InvalidInput("no chains".into()))?;
    let mut acc = PosteriorAccumulator::new(shape.clone());
    for chain in chains {
        if chain.shape != shape {
            return Err(Error::InvalidInput(format!(
                "chain {} has a different panel shape",
                chain.chain_index
            )));
        }
        for s in chain.snapshots.iter().filter(|s| s.iteration > burn_in) {
            acc.add(chain.chain_index, s)?;
        }
    }
    acc.finish()
}

/// Yearly mean, median and 95th percentile of each variance kind with
/// their trends.
#[derive(Debug, Clone, PartialEq)]
pub struct VolatilityTable {
    pub permanent: MomentTable,
    pub transitory: MomentTable,
}

/// Weighted yearly distribution of posterior means over person-years. Years
/// with no positive weight have no summary.
pub fn yearly_distribution(
    summary: &PosteriorSummary,
    panel: &PanelData,
    opts: &TrendOptions,
) -> Result<VolatilityTable> {
    if panel.shape() != summary.shape {
        return Err(Error::InvalidInput(
            "posterior summary does not match the panel".into(),
        ));
    }
    let mut perm = Vec::with_capacity(summary.mean.len());
    let mut trans = Vec::with_capacity(summary.mean.len());
    let mut k = 0;
    for (i, ind) in panel.individuals.iter().enumerate() {
        for (t, o) in ind.obs.iter().enumerate() {
            let m = summary.mean[k];
            k += 1;
            let cell = |value| MomentCell {
                person: i,
                year: ind.year(t),
                value,
                weight: o.weight,
            };
            perm.push(cell(m.omega));
            trans.push(cell(m.epsilon));
        }
    }
    Ok(VolatilityTable {
        permanent: moment_table(&MomentSeries { cells: perm }, opts),
        transitory: moment_table(&MomentSeries { cells: trans }, opts),
    })
}

/// Potential scale reduction factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psrf {
    Value(f64),
    /// Every chain is constant, so the ratio is undefined.
    Degenerate,
}

/// Between/within-chain variance ratio for equal-length scalar traces.
pub fn convergence_diagnostic(traces: &[Vec<f64>]) -> Result<Psrf> {
    if traces.len() < 2 {
        return Err(Error::InvalidInput("need at least two chains".into()));
    }
    let n = traces[0].len();
    if n < 2 || traces.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidInput(
            "chains must have equal length of at least two".into(),
        ));
    }
    let m = traces.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = traces.iter().map(|c| c.iter().sum::<f64>() / nf).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = nf / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = traces
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m;
    if !(w > 0.0) {
        return Ok(Psrf::Degenerate);
    }
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    Ok(Psrf::Value((var_plus / w).sqrt()))
}

/// Diagnostic for a scalar picked out of each snapshot. Chains are cut to
/// the shortest retained length.
pub fn chain_diagnostic<F>(chains: &[Chain], select: F) -> Result<Psrf>
where
    F: Fn(&Snapshot) -> f64,
{
    let n = chains.iter().map(|c| c.snapshots.len()).min().unwrap_or(0);
    let traces: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| c.snapshots[..n].iter().map(&select).collect())
        .collect();
    convergence_diagnostic(&traces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{IncomeCoefficients, IndividualSeries, Observation};
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn chain_of(index: usize, shape: &[usize], draws: Vec<Vec<SigmaPair>>) -> Chain {
        let coeffs = IncomeCoefficients::new([1.0; 3], [1.0, 0.0, 0.0], 0.1).unwrap();
        Chain {
            chain_index: index,
            shape: shape.to_vec(),
            snapshots: draws
                .into_iter()
                .enumerate()
                .map(|(k, values)| Snapshot {
                    iteration: k + 1,
                    coeffs,
                    labels: vec![0; values.len()],
                    n_clusters: 1,
                    values,
                    full: None,
                })
                .collect(),
        }
    }

    fn flat(v: f64, cells: usize, draws: usize) -> Vec<Vec<SigmaPair>> {
        vec![vec![SigmaPair::new(v, v); cells]; draws]
    }

    #[test]
    fn constant_and_two_level_chains() {
        let c = chain_of(0, &[2, 1], flat(0.3, 3, 4));
        let s = posterior_means(&[c.clone()], 0).unwrap();
        assert!(s.mean.iter().all(|m| (m.omega - 0.3).abs() < 1e-15));
        let d = chain_of(1, &[2, 1], flat(3.0, 3, 4));
        let c = chain_of(0, &[2, 1], flat(1.0, 3, 4));
        let s = posterior_means(&[c, d], 0).unwrap();
        assert!(s.mean.iter().all(|m| m.omega == 2.0 && m.epsilon == 2.0));
        assert_eq!((s.n_chains, s.n_draws), (2, 8));
    }

    #[test]
    fn burn_in_filter_and_empty_error() {
        let c = chain_of(0, &[1], flat(1.0, 1, 3));
        assert_eq!(posterior_means(&[c.clone()], 1).unwrap().n_draws, 2);
        assert!(posterior_means(&[c], 3).is_err());
        assert!(posterior_means(&[], 0).is_err());
    }

    #[test]
    fn homogeneous_population_has_equal_statistics() {
        let panel = PanelData::new(
            (0..4)
                .map(|p| IndividualSeries {
                    person_id: p,
                    first_year: 2000,
                    obs: vec![Observation::observed(0.0, 1.0 + p as f64); 5],
                })
                .collect(),
        )
        .unwrap();
        let s = PosteriorSummary {
            shape: panel.shape(),
            mean: vec![SigmaPair::new(0.03, 0.05); 20],
            n_chains: 1,
            n_draws: 1,
        };
        let opts = TrendOptions {
            span_years: (2000, 2004),
            ..TrendOptions::default()
        };
        let t = yearly_distribution(&s, &panel, &opts).unwrap();
        for y in &t.permanent.yearly {
            let m = y.summary.unwrap();
            assert!((m.mean - 0.03).abs() < 1e-15 && m.median == 0.03 && m.p95 == 0.03);
        }
        assert_eq!(t.transitory.yearly.len(), 5);
        assert!(t.permanent.mean_trend.unwrap().slope.abs() < 1e-12);
    }

    #[test]
    fn mixture_p95_at_boundary() {
        // 95% of the weight at 0.03, 5% at 0.9
        let panel = PanelData::new(
            (0..20)
                .map(|p| IndividualSeries {
                    person_id: p,
                    first_year: 1990,
                    obs: vec![Observation::observed(0.0, 1.0)],
                })
                .collect(),
        )
        .unwrap();
        let mean = (0..20)
            .map(|p| if p == 0 { SigmaPair::new(0.9, 0.9) } else { SigmaPair::new(0.03, 0.03) })
            .collect();
        let s = PosteriorSummary { shape: panel.shape(), mean, n_chains: 1, n_draws: 1 };
        let t = yearly_distribution(&s, &panel, &TrendOptions::default()).unwrap();
        assert_eq!(t.permanent.yearly[0].summary.unwrap().p95, 0.03);
    }

    #[test]
    fn two_modes_separate() {
        let shape = [6usize];
        let truth = [0.05, 0.05, 1.2, 1.2, 0.05, 1.2];
        let mut rng = stream_rng(9, Stream::Simulate, &[]);
        let draws: Vec<Vec<SigmaPair>> = (0..200)
            .map(|_| {
                truth
                    .iter()
                    .map(|&v| {
                        let e = v * (1.0 + 0.2 * rng.sample::<f64, _>(StandardNormal)).abs();
                        SigmaPair::new(0.03, e)
                    })
                    .collect()
            })
            .collect();
        let s = posterior_means(&[chain_of(0, &shape, draws)], 0).unwrap();
        for (m, &v) in s.mean.iter().zip(&truth) {
            let nearest = if (m.epsilon.ln() - 0.05f64.ln()).abs() < (m.epsilon.ln() - 1.2f64.ln()).abs() {
                0.05
            } else {
                1.2
            };
            assert_eq!(nearest, v);
        }
    }

    #[test]
    fn identical_and_separated_chains() {
        let mut rng = stream_rng(1, Stream::Simulate, &[]);
        let a: Vec<f64> = (0..1000).map(|_| rng.sample(StandardNormal)).collect();
        match convergence_diagnostic(&[a.clone(), a.clone()]).unwrap() {
            Psrf::Value(r) => assert!((r - 1.0).abs() < 1e-3),
            Psrf::Degenerate => panic!(),
        }
        let b: Vec<f64> = a.iter().map(|x| x + 10.0).collect();
        match convergence_diagnostic(&[a, b]).unwrap() {
            Psrf::Value(r) => assert!(r > 5.0),
            Psrf::Degenerate => panic!(),
        }
        assert_eq!(
            convergence_diagnostic(&[vec![1.0; 5], vec![1.0; 5]]).unwrap(),
            Psrf::Degenerate
        );
        assert!(convergence_diagnostic(&[vec![1.0, 2.0]]).is_err());
        assert!(convergence_diagnostic(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    #[test]
    fn iid_chains_calibrate_near_one() {
        let mut rng = stream_rng(2, Stream::Simulate, &[]);
        for _ in 0..20 {
            let traces: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..5000).map(|_| rng.sample(StandardNormal)).collect())
                .collect();
            match convergence_diagnostic(&traces).unwrap() {
                Psrf::Value(r) => assert!((0.98..=1.05).contains(&r), "{r}"),
                Psrf::Degenerate => panic!(),
            }
        }
    }

    proptest! {
        #[test]
        fn pooling_equals_averaging(a in prop::collection::vec(0.01f64..5.0, 12), b in prop::collection::vec(0.01f64..5.0, 12)) {
            // two chains of 4 draws over 3 cells
            let to_draws = |v: &[f64]| -> Vec<Vec<SigmaPair>> {
                v.chunks(3).map(|c| c.iter().map(|&x| SigmaPair::new(x, 2.0 * x)).collect()).collect()
            };
            let (ca, cb) = (chain_of(0, &[3], to_draws(&a)), chain_of(1, &[3], to_draws(&b)));
            let pooled = posterior_means(&[ca.clone(), cb.clone()], 0).unwrap();
            let ma = posterior_means(&[ca], 0).unwrap();
            let mb = posterior_means(&[cb], 0).unwrap();
            for k in 0..3 {
                let avg = 0.5 * (ma.mean[k].omega + mb.mean[k].omega);
                prop_assert!((pooled.mean[k].omega - avg).abs() < 1e-12);
                let lo = a.iter().chain(&b).skip(k).step_by(3).cloned().fold(f64::INFINITY, f64::min);
                let hi = a.iter().chain(&b).skip(k).step_by(3).cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(pooled.mean[k].omega >= lo - 1e-12 && pooled.mean[k].omega <= hi + 1e-12);
            }
        }
    }
}
