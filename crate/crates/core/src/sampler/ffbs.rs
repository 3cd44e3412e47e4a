//! Exact joint draw of one individual's shocks given income, coefficients
//! and volatility: Kalman forward filter, then backward sampling.
//!
//! State at year `t`:
//!
//! ```text
//! x[t] = (level, w[t], w[t-1], w[t-2], e[t], e[t-1], e[t-2])
//! level[t] = p0 + sum_{k <= t-3} w[k]
//! y[t] = h . x[t] + noise,  h = (1, th_w0, th_w1, th_w2, th_e0, th_e1, th_e2)
//! ```
//!
//! The level starts diffuse; shocks dated before the first year are zero.

use nalgebra::{SMatrix, SVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{IncomeCoefficients, IndividualShocks, SigmaPair};

pub const DIFFUSE_LEVEL_VARIANCE: f64 = 1e7;

const N: usize = 7;
type Vec7 = SVector<f64, N>;
type Mat7 = SMatrix<f64, N, N>;

/// Slots of `x[t]` copied from `x[t-1]`: (destination, source). The level
/// row additionally adds the old `w[t-3]` slot.
const SHIFTS: [(usize, usize); 4] = [(2, 1), (3, 2), (5, 4), (6, 5)];

fn transition() -> Mat7 {
    let mut f = Mat7::zeros();
    f[(0, 0)] = 1.0;
    f[(0, 3)] = 1.0;
    for (dst, src) in SHIFTS {
        f[(dst, src)] = 1.0;
    }
    f
}

fn observation(coeffs: &IncomeCoefficients) -> Vec7 {
    let (w, e) = (coeffs.theta_omega, coeffs.theta_epsilon);
    Vec7::from_column_slice(&[1.0, w[0], w[1], w[2], e[0], e[1], e[2]])
}

fn shock_cov(s: SigmaPair) -> Mat7 {
    let mut q = Mat7::zeros();
    q[(1, 1)] = s.omega;
    q[(4, 4)] = s.epsilon;
    q
}

/// Filtered moments `(m[t], P[t])` of `x[t] | y[0..=t]`.
#[derive(Debug, Clone)]
pub struct Filtered {
    pub mean: Vec<Vec7>,
    pub cov: Vec<Mat7>,
}

pub fn kalman_filter(
    y: &[f64],
    first_year: i32,
    coeffs: &IncomeCoefficients,
    sigmas: &[SigmaPair],
) -> Result<Filtered> {
    if y.len() != sigmas.len() {
        return Err(Error::InvalidInput("income and volatility lengths differ".into()));
    }
    let f = transition();
    let h = observation(coeffs);
    let mut mean = Vec::with_capacity(y.len());
    let mut cov = Vec::with_capacity(y.len());
    let mut m = Vec7::zeros();
    let mut p = Mat7::zeros();
    for (t, (&yt, &sig)) in y.iter().zip(sigmas).enumerate() {
        let (a, mut r) = if t == 0 {
            let mut r = shock_cov(sig);
            r[(0, 0)] = DIFFUSE_LEVEL_VARIANCE;
            (Vec7::zeros(), r)
        } else {
            (f * m, f * p * f.transpose() + shock_cov(sig))
        };
        r = 0.5 * (r + r.transpose());
        let rh = r * h;
        let s = h.dot(&rh) + coeffs.gamma_sq;
        let year = first_year + t as i32;
        if !s.is_finite() || s < 0.0 {
            return Err(Error::FilterDivergence { year });
        }
        if s > 0.0 {
            let k = rh / s;
            m = a + k * (yt - h.dot(&a));
            p = r - k * rh.transpose();
            p = 0.5 * (p + p.transpose());
        } else {
            m = a;
            p = r;
        }
        if m.iter().chain(p.iter()).any(|v| !v.is_finite()) {
            return Err(Error::FilterDivergence { year });
        }
        mean.push(m);
        cov.push(p);
    }
    Ok(Filtered { mean, cov })
}

/// Lower factor `L` with `L L^T = P` for a positive semidefinite `P`;
/// directions with (numerically) zero variance get a zero column.
fn psd_factor(p: &Mat7) -> Mat7 {
    let max_diag = (0..N).map(|j| p[(j, j)]).fold(0.0f64, f64::max);
    let tol = 1e-13 * max_diag.max(f64::MIN_POSITIVE);
    let mut l = Mat7::zeros();
    for j in 0..N {
        let d = p[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if d <= tol {
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..N {
            let s = p[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = s / ljj;
        }
    }
    l
}

fn draw<R: Rng + ?Sized>(m: &Vec7, p: &Mat7, rng: &mut R) -> Vec7 {
    let z = Vec7::from_fn(|_, _| rng.sample(StandardNormal));
    m + psd_factor(p) * z
}

/// Conditions `N(m, P)` on `d . x = value` one scalar constraint at a time.
/// Constraints the distribution already pins down are skipped.
fn condition(m: &mut Vec7, p: &mut Mat7, d: &Vec7, value: f64) {
    let pd = *p * d;
    let s = d.dot(&pd);
    let scale: f64 = d.iter().enumerate().map(|(j, dj)| dj * dj * p[(j, j)]).sum();
    if !(s > 1e-11 * scale) || s <= 0.0 {
        return;
    }
    *m += pd * ((value - d.dot(m)) / s);
    *p -= pd * pd.transpose() / s;
    *p = 0.5 * (*p + p.transpose());
}

/// Draws `(p0, w[..], e[..])` jointly from their full conditional.
pub fn sample_individual_shocks<R: Rng + ?Sized>(
    y: &[f64],
    first_year: i32,
    coeffs: &IncomeCoefficients,
    sigmas: &[SigmaPair],
    rng: &mut R,
) -> Result<IndividualShocks> {
    let n = y.len();
    let mut out = IndividualShocks::zeros(n);
    if n == 0 {
        return Ok(out);
    }
    let filt = kalman_filter(y, first_year, coeffs, sigmas)?;
    let f = transition();
    let mut x = draw(&filt.mean[n - 1], &filt.cov[n - 1], rng);
    out.omega[n - 1] = x[1];
    out.epsilon[n - 1] = x[4];
    for t in (0..n - 1).rev() {
        let mut m = filt.mean[t];
        let mut p = filt.cov[t];
        // x[t+1] rows that are deterministic in x[t]
        for row in [0, 2, 3, 5, 6] {
            let d: Vec7 = f.row(row).transpose();
            condition(&mut m, &mut p, &d, x[row]);
        }
        x = draw(&m, &p, rng);
        out.omega[t] = x[1];
        out.epsilon[t] = x[4];
    }
    out.p0 = x[0];
    if out.omega.iter().chain(&out.epsilon).any(|v| !v.is_finite()) || !out.p0.is_finite() {
        return Err(Error::FilterDivergence { year: first_year });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn psd_factor_reproduces_matrix() {
        let a = Mat7::from_fn(|i, j| ((i * 3 + j * 5) % 7) as f64 - 3.0);
        // rank-deficient PSD: A A^T with two zeroed columns of A
        let mut b = a;
        b.column_mut(2).fill(0.0);
        b.column_mut(5).fill(0.0);
        let p = b * b.transpose();
        let l = psd_factor(&p);
        assert!((l * l.transpose() - p).norm() < 1e-9 * p.norm());
    }

    #[test]
    fn backward_draws_are_consistent_with_state_shifts() {
        let c = IncomeCoefficients::new([0.4, 0.8, 0.95], [0.7, 0.2, 0.1], 0.01).unwrap();
        let y = [0.1, 0.3, -0.2, 0.5, 0.4, 0.9, 1.0];
        let s = vec![SigmaPair::new(0.03, 0.1); y.len()];
        let mut rng = stream_rng(3, Stream::Shocks, &[]);
        let draw = sample_individual_shocks(&y, 2000, &c, &s, &mut rng).unwrap();
        // noise-free reconstruction stays close to y when gamma_sq is small
        let fit = draw.reconstruct(&c);
        for (a, b) in fit.iter().zip(&y) {
            assert!((a - b).abs() < 0.6, "{a} vs {b}");
        }
    }

    #[test]
    fn noiseless_identified_limit() {
        // y[t] = p0 + sum_{k<=t} w[k] + e[t] with e nearly degenerate: w[t] = y[t] - y[t-1]
        let c = IncomeCoefficients::new([1.0, 1.0, 1.0], [1.0, 0.0, 0.0], 0.0).unwrap();
        let y = [0.2, 0.5, 0.1, 0.4, 0.4, 1.0];
        let s = vec![SigmaPair::new(0.5, 1e-12); y.len()];
        let mut rng = stream_rng(4, Stream::Shocks, &[]);
        for _ in 0..20 {
            let d = sample_individual_shocks(&y, 1990, &c, &s, &mut rng).unwrap();
            for t in 1..y.len() {
                assert!((d.omega[t] - (y[t] - y[t - 1])).abs() < 1e-3, "t={t}: {}", d.omega[t]);
            }
            assert!((d.p0 + d.omega[0] - y[0]).abs() < 1e-3);
        }
    }

    #[test]
    fn uninformative_data_returns_prior() {
        // huge noise, one year: both shocks are drawn from their prior
        let c = IncomeCoefficients::new([0.5, 0.9, 1.0], [0.8, 0.15, 0.05], 1e12).unwrap();
        let s = [SigmaPair::new(0.3, 2.0)];
        let mut rng = stream_rng(5, Stream::Shocks, &[]);
        let n = 20_000;
        let (mut sw, mut se, mut mw) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let d = sample_individual_shocks(&[0.7], 2000, &c, &s, &mut rng).unwrap();
            sw += d.omega[0] * d.omega[0];
            se += d.epsilon[0] * d.epsilon[0];
            mw += d.omega[0];
        }
        let n = n as f64;
        // variance of a chi-square(1)-scaled mean: 2 s^2 / n
        assert!((sw / n - 0.3).abs() < 3.0 * (2.0 * 0.09 / n).sqrt());
        assert!((se / n - 2.0).abs() < 3.0 * (2.0 * 4.0 / n).sqrt());
        assert!((mw / n).abs() < 3.0 * (0.3 / n).sqrt());
    }

    #[test]
    fn diverging_inputs_are_reported() {
        let c = IncomeCoefficients::new([0.5, 0.9, 1.0], [0.8, 0.15, 0.05], 0.1).unwrap();
        let s = [SigmaPair::new(f64::INFINITY, 1.0), SigmaPair::new(1.0, 1.0)];
        let e = sample_individual_shocks(&[0.0, 0.1], 1977, &c, &s, &mut stream_rng(0, Stream::Shocks, &[]));
        assert!(matches!(e, Err(Error::FilterDivergence { year: 1977 })));
    }
}
