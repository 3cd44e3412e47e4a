//! Step 1: pass-through weights and noise variance given the shocks.
//!
//! With shocks fixed, income net of fully phased-in permanent shocks is
//! linear in the six pass-through weights, so under flat priors the
//! conditional is the usual conjugate regression posterior.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{IncomeCoefficients, PanelData, ShockPanel, LAGS};

pub const GAMMA_SQ_FLOOR: f64 = 1e-12;

pub const BETA_NAMES: [&str; 6] = [
    "theta_omega_2",
    "theta_omega_1",
    "theta_omega_0",
    "theta_epsilon_2",
    "theta_epsilon_1",
    "theta_epsilon_0",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionData {
    pub y_star: DVector<f64>,
    /// Rows `(w[t-2], w[t-1], w[t], e[t-2], e[t-1], e[t])`.
    pub x: DMatrix<f64>,
}

/// One row per person-year with two years of lag history.
pub fn build_regression(panel: &PanelData, shocks: &ShockPanel) -> Result<RegressionData> {
    if panel.n_individuals() != shocks.individuals.len() {
        return Err(Error::InvalidInput("shocks do not match the panel".into()));
    }
    let mut ys = Vec::new();
    let mut rows: Vec<[f64; 6]> = Vec::new();
    for (ind, sh) in panel.individuals.iter().zip(&shocks.individuals) {
        if sh.omega.len() != ind.len() || sh.epsilon.len() != ind.len() {
            return Err(Error::InvalidInput(format!(
                "person {}: shock series length mismatch",
                ind.person_id
            )));
        }
        for t in (LAGS - 1)..ind.len() {
            let y = ind.obs[t].y.ok_or(Error::MissingValue {
                person: ind.person_id,
                year: ind.year(t),
            })?;
            ys.push(y - sh.settled_level(t));
            rows.push([
                sh.omega[t - 2],
                sh.omega[t - 1],
                sh.omega[t],
                sh.epsilon[t - 2],
                sh.epsilon[t - 1],
                sh.epsilon[t],
            ]);
        }
    }
    if rows.len() < 7 {
        return Err(Error::TooFewRows { rows: rows.len() });
    }
    Ok(RegressionData {
        y_star: DVector::from_vec(ys),
        x: DMatrix::from_fn(rows.len(), 6, |r, c| rows[r][c]),
    })
}

/// Least-squares fit: `beta_hat`, residual sum of squares, and the
/// Cholesky factor of `X'X`.
pub struct OlsFit {
    pub beta_hat: DVector<f64>,
    pub rss: f64,
    pub xtx_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

pub fn ols(data: &RegressionData) -> Result<OlsFit> {
    let xt = data.x.transpose();
    let xtx = &xt * &data.x;
    let chol = xtx.clone().cholesky().ok_or_else(|| rank_error(&data.x))?;
    let beta_hat = chol.solve(&(&xt * &data.y_star));
    let resid = &data.y_star - &data.x * &beta_hat;
    Ok(OlsFit {
        beta_hat,
        rss: resid.norm_squared(),
        xtx_chol: chol,
    })
}

fn rank_error(x: &DMatrix<f64>) -> Error {
    let r = x.clone().qr().r();
    let columns = (0..x.ncols())
        .filter(|&j| {
            let norm = x.column(j).norm();
            norm == 0.0 || r[(j, j)].abs() <= 1e-9 * norm
        })
        .map(|j| BETA_NAMES[j].to_string())
        .collect();
    Error::RankDeficient { columns }
}

/// Draws `gamma_sq ~ InvGamma(n/2, RSS/2)`, then
/// `beta ~ Normal(beta_hat, gamma_sq (X'X)^-1)`, then rescales the
/// transitory weights to sum to one.
pub fn step1_sample_coefficients<R: Rng + ?Sized>(
    data: &RegressionData,
    rng: &mut R,
) -> Result<IncomeCoefficients> {
    let fit = ols(data)?;
    let n = data.y_star.len() as f64;
    // residuals at rounding level count as an exact fit
    let exact = fit.rss <= 1e-20 * data.y_star.norm_squared();
    let beta = if !exact && fit.rss.is_finite() {
        let g = Gamma::new(0.5 * n, 1.0).map_err(|e| Error::Domain(e.to_string()))?;
        let gamma_sq = 0.5 * fit.rss / g.sample(rng);
        // beta_hat + sqrt(gamma_sq) L^-T z has covariance gamma_sq (L L^T)^-1
        let z = DVector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lt = fit.xtx_chol.l().transpose();
        let step = lt
            .solve_upper_triangular(&z)
            .ok_or_else(|| rank_error(&data.x))?;
        (fit.beta_hat + step * gamma_sq.sqrt(), gamma_sq.max(GAMMA_SQ_FLOOR))
    } else {
        log::warn!("regression residual is zero; using the OLS solution and the variance floor");
        (fit.beta_hat, GAMMA_SQ_FLOOR)
    };
    let (b, gamma_sq) = beta;
    let arr: [f64; 6] = std::array::from_fn(|k| b[k]);
    let raw = IncomeCoefficients::from_beta(&arr, gamma_sq);
    IncomeCoefficients::normalized(raw.theta_omega, raw.theta_epsilon, gamma_sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{IndividualSeries, IndividualShocks, Observation};
    use crate::rng::{stream_rng, Stream};

    fn panel_from(ys: Vec<Vec<f64>>) -> PanelData {
        PanelData::new(
            ys.into_iter()
                .enumerate()
                .map(|(i, y)| IndividualSeries {
                    person_id: i as u64,
                    first_year: 2000,
                    obs: y.into_iter().map(|v| Observation::observed(v, 1.0)).collect(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_shock_row() {
        let panel = panel_from(vec![vec![0.0; 9]]);
        let mut sh = IndividualShocks::zeros(9);
        sh.omega[2] = 1.0;
        let shocks = ShockPanel { individuals: vec![sh] };
        let data = build_regression(&panel, &shocks).unwrap();
        assert_eq!(data.x.nrows(), 7);
        assert_eq!(data.x.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let short = panel_from(vec![vec![0.0; 3]]);
        let err = build_regression(&short, &ShockPanel::zeros(&[3])).unwrap_err();
        assert!(matches!(err, Error::TooFewRows { rows: 1 }));
    }

    #[test]
    fn row_count_by_enumeration() {
        // 3 x 10 toy panel: rows are person-years with t >= 2
        let panel = panel_from(vec![vec![0.0; 10], vec![0.0; 10], vec![0.0; 10]]);
        let shocks = ShockPanel::zeros(&panel.shape());
        let data = build_regression(&panel, &shocks).unwrap();
        let mut expected = 0;
        for ind in &panel.individuals {
            for t in 0..ind.len() {
                if t >= 2 {
                    expected += 1;
                }
            }
        }
        assert_eq!(data.y_star.len(), expected);
        assert_eq!(expected, 24);
    }

    #[test]
    fn noiseless_panel_has_zero_residual() {
        let c = IncomeCoefficients::normalized([0.381, 0.865, 0.951], [0.784, 0.180, 0.037], 0.0).unwrap();
        let mut rng = stream_rng(1, Stream::Simulate, &[]);
        let mut ys = Vec::new();
        let mut shocks = Vec::new();
        for _ in 0..4 {
            let mut s = IndividualShocks::zeros(9);
            s.p0 = rng.random::<f64>() - 0.5;
            for t in 0..9 {
                s.omega[t] = rng.sample::<f64, _>(StandardNormal) * 0.2;
                s.epsilon[t] = rng.sample::<f64, _>(StandardNormal) * 0.3;
            }
            ys.push(s.reconstruct(&c));
            shocks.push(s);
        }
        let panel = panel_from(ys);
        let data = build_regression(&panel, &ShockPanel { individuals: shocks }).unwrap();
        let b = DVector::from_row_slice(&c.beta());
        let r = &data.y_star - &data.x * b;
        assert!(r.amax() < 1e-12);
    }

    #[test]
    fn transitory_weights_sum_to_one() {
        let mut rng = stream_rng(2, Stream::Coefficients, &[]);
        let n = 40;
        let x = DMatrix::from_fn(n, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |r, _| x.row(r).sum() + 0.3 * rng.sample::<f64, _>(StandardNormal));
        let data = RegressionData { y_star: y, x };
        for _ in 0..200 {
            let c = step1_sample_coefficients(&data, &mut rng).unwrap();
            assert!((c.theta_epsilon.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(c.gamma_sq > 0.0);
        }
    }

    #[test]
    fn exact_zero_residual_uses_floor() {
        let x = DMatrix::from_fn(8, 6, |r, c| if r == c { 1.0 } else { 0.0 } + if r >= 6 { 1.0 } else { 0.0 });
        let beta = DVector::from_row_slice(&[0.9, 0.8, 0.4, 0.25, 0.25, 0.5]);
        let data = RegressionData { y_star: &x * &beta, x };
        let c = step1_sample_coefficients(&data, &mut stream_rng(0, Stream::Coefficients, &[])).unwrap();
        assert!(c.gamma_sq >= GAMMA_SQ_FLOOR);
        for (a, b) in c.beta().iter().zip(beta.iter()) {
            assert!((a - b).abs() < 1e-6, "{:?} vs {beta}", c.beta());
        }
    }

    #[test]
    fn collinear_regressors_are_named() {
        let x = DMatrix::from_fn(10, 6, |r, c| if c == 5 { 0.0 } else { ((r * 7 + c * 3) % 5) as f64 + c as f64 * 0.1 * r as f64 });
        let data = RegressionData { y_star: DVector::from_element(10, 1.0), x };
        match step1_sample_coefficients(&data, &mut stream_rng(0, Stream::Coefficients, &[])) {
            Err(Error::RankDeficient { columns }) => assert!(columns.contains(&"theta_epsilon_0".to_string())),
            other => panic!("expected rank error, got {other:?}"),
        }
    }
}
