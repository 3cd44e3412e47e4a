//! Raw income to excess log income: top/bottom coding, weighted
//! residualization, and donor-based imputation of single missing years.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{IndividualSeries, Observation, PanelData};
use crate::rng::{stream_rng, Stream};

/// Lowest nominal top-code, 1982.
pub const TOP_CODE_ANCHOR: (i32, f64) = (1982, 99_999.0);
/// Half-time work at the federal minimum wage, 2005.
pub const BOTTOM_CODE_ANCHOR: (i32, f64) = (2005, 5_150.0);
pub const DEFAULT_NEIGHBORHOOD: f64 = 0.05;

/// Year-specific top and bottom codes, both fixed in real terms so that the
/// log distance between them never changes.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeTable {
    deflator: BTreeMap<i32, f64>,
    top_anchor: (i32, f64),
    bottom_anchor: (i32, f64),
}

impl CodeTable {
    /// `deflator` maps calendar years to a price index (any base); both
    /// anchor years must be present.
    pub fn new(
        deflator: BTreeMap<i32, f64>,
        top_anchor: (i32, f64),
        bottom_anchor: (i32, f64),
    ) -> Result<Self> {
        if let Some((y, p)) = deflator.iter().find(|(_, p)| !(**p > 0.0 && p.is_finite())) {
            return Err(Error::Domain(format!("price index for {y} must be positive, got {p}")));
        }
        for (year, amount) in [top_anchor, bottom_anchor] {
            if !deflator.contains_key(&year) {
                return Err(Error::YearOutOfRange { year });
            }
            if !(amount > 0.0) {
                return Err(Error::Domain(format!("anchor amount must be positive, got {amount}")));
            }
        }
        let t = CodeTable {
            deflator,
            top_anchor,
            bottom_anchor,
        };
        let any_year = *t.deflator.keys().next().expect("anchors present");
        if t.bottom_code(any_year)? > t.top_code(any_year)? {
            return Err(Error::Domain("bottom code exceeds top code".into()));
        }
        Ok(t)
    }

    pub fn with_default_anchors(deflator: BTreeMap<i32, f64>) -> Result<Self> {
        Self::new(deflator, TOP_CODE_ANCHOR, BOTTOM_CODE_ANCHOR)
    }

    fn index(&self, year: i32) -> Result<f64> {
        self.deflator
            .get(&year)
            .copied()
            .ok_or(Error::YearOutOfRange { year })
    }

    fn rescale(&self, (anchor_year, amount): (i32, f64), year: i32) -> Result<f64> {
        Ok(amount * self.index(year)? / self.index(anchor_year)?)
    }

    pub fn top_code(&self, year: i32) -> Result<f64> {
        self.rescale(self.top_anchor, year)
    }

    pub fn bottom_code(&self, year: i32) -> Result<f64> {
        self.rescale(self.bottom_anchor, year)
    }

    pub fn years(&self) -> impl Iterator<Item = i32> + '_ {
        self.deflator.keys().copied()
    }
}

/// Clamps nominal income into `[bottom_code(year), top_code(year)]`.
pub fn apply_income_codes(income: f64, year: i32, table: &CodeTable) -> Result<f64> {
    if !(income >= 0.0) {
        return Err(Error::Domain(format!("income must be nonnegative, got {income}")));
    }
    Ok(income.clamp(table.bottom_code(year)?, table.top_code(year)?))
}

/// Regression design with named columns; one row per person-year.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub names: Vec<String>,
    pub matrix: DMatrix<f64>,
}

impl Design {
    pub fn new(names: Vec<String>, matrix: DMatrix<f64>) -> Result<Self> {
        if names.len() != matrix.ncols() {
            return Err(Error::InvalidInput(format!(
                "{} column names for {} columns",
                names.len(),
                matrix.ncols()
            )));
        }
        Ok(Design { names, matrix })
    }

    pub fn intercept(n: usize) -> Self {
        Design {
            names: vec!["intercept".into()],
            matrix: DMatrix::from_element(n, 1, 1.0),
        }
    }

    /// Intercept, the given covariate columns, and one dummy per calendar
    /// year after the first.
    pub fn with_year_effects(covariates: &[(String, Vec<f64>)], years: &[i32]) -> Result<Self> {
        let n = years.len();
        let mut distinct: Vec<i32> = years.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        let mut names = vec!["intercept".to_string()];
        let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
        for (name, col) in covariates {
            if col.len() != n {
                return Err(Error::InvalidInput(format!("covariate {name} has wrong length")));
            }
            names.push(name.clone());
            cols.push(col.clone());
        }
        for &y in distinct.iter().skip(1) {
            names.push(format!("year_{y}"));
            cols.push(years.iter().map(|&v| f64::from(u8::from(v == y))).collect());
        }
        let matrix = DMatrix::from_fn(n, cols.len(), |r, c| cols[c][r]);
        Design::new(names, matrix)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residualized {
    pub residuals: Vec<f64>,
    pub coefficients: Vec<f64>,
    /// Input weights rescaled so every year's average weight is one.
    pub weights: Vec<f64>,
}

/// Rescales weights so that each calendar year's average weight is 1.
pub fn normalize_weights_by_year(weights: &[f64], years: &[i32]) -> Result<Vec<f64>> {
    if weights.len() != years.len() {
        return Err(Error::InvalidInput("weights and years differ in length".into()));
    }
    let mut sums: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    for (&w, &y) in weights.iter().zip(years) {
        if !(w >= 0.0) {
            return Err(Error::Domain(format!("negative weight {w}")));
        }
        let e = sums.entry(y).or_default();
        e.0 += w;
        e.1 += 1;
    }
    Ok(weights
        .iter()
        .zip(years)
        .map(|(&w, y)| {
            let (s, n) = sums[y];
            if s > 0.0 {
                w * n as f64 / s
            } else {
                0.0
            }
        })
        .collect())
}

/// Weighted least-squares residuals of `log_income` on `design`.
///
/// Weights are first normalized to a common per-year average. With an
/// intercept (or a full set of year dummies) in the design, the weighted
/// mean of the residuals is zero.
pub fn residualize(
    log_income: &[f64],
    design: &Design,
    weights: &[f64],
    years: &[i32],
) -> Result<Residualized> {
    let n = log_income.len();
    let k = design.matrix.ncols();
    if design.matrix.nrows() != n || weights.len() != n || years.len() != n {
        return Err(Error::InvalidInput("residualize inputs differ in length".into()));
    }
    if log_income.iter().any(|y| !y.is_finite()) {
        return Err(Error::InvalidInput("non-finite log income".into()));
    }
    let w = normalize_weights_by_year(weights, years)?;
    let sw = DVector::from_iterator(n, w.iter().map(|w| w.sqrt()));
    let mut a = design.matrix.clone();
    for (r, s) in sw.iter().enumerate() {
        a.row_mut(r).scale_mut(*s);
    }
    let b = DVector::from_iterator(n, log_income.iter().zip(sw.iter()).map(|(y, s)| y * s));

    if n < k {
        return Err(Error::RankDeficient {
            columns: design.names[n..].to_vec(),
        });
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let collinear: Vec<String> = (0..k)
        .filter(|&j| {
            let norm = a.column(j).norm();
            norm == 0.0 || r[(j, j)].abs() <= 1e-9 * norm
        })
        .map(|j| design.names[j].clone())
        .collect();
    if !collinear.is_empty() {
        return Err(Error::RankDeficient { columns: collinear });
    }
    let qtb = qr.q().transpose() * &b;
    let beta = r
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::RankDeficient {
            columns: design.names.clone(),
        })?;
    let fitted = &design.matrix * &beta;
    Ok(Residualized {
        residuals: log_income.iter().zip(fitted.iter()).map(|(y, f)| y - f).collect(),
        coefficients: beta.iter().copied().collect(),
        weights: w,
    })
}

/// Drops individuals with two or more consecutive missing years.
pub fn drop_long_gaps(panel: &PanelData) -> (PanelData, Vec<u64>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for ind in &panel.individuals {
        let long = ind
            .obs
            .windows(2)
            .any(|w| w[0].y.is_none() && w[1].y.is_none());
        if long {
            dropped.push(ind.person_id);
        } else {
            kept.push(ind.clone());
        }
    }
    (PanelData { individuals: kept }, dropped)
}

#[derive(Debug, Clone, Copy)]
struct Donor {
    change: f64,
    increment: f64,
}

/// Observed two-year changes and their first-year increments, sorted by
/// change.
fn donor_pool(panel: &PanelData) -> Vec<Donor> {
    let mut pool: Vec<Donor> = panel
        .individuals
        .iter()
        .flat_map(|ind| {
            ind.obs.windows(3).filter_map(|w| {
                let (a, b, c) = (
                    w[0].observed_value()?,
                    w[1].observed_value()?,
                    w[2].observed_value()?,
                );
                Some(Donor {
                    change: c - a,
                    increment: b - a,
                })
            })
        })
        .collect();
    pool.sort_by(|x, y| x.change.total_cmp(&y.change).then(x.increment.total_cmp(&y.increment)));
    pool
}

fn donors_within(pool: &[Donor], change: f64, h: f64) -> &[Donor] {
    let lo = pool.partition_point(|d| d.change < change - h);
    let hi = pool.partition_point(|d| d.change <= change + h);
    &pool[lo..hi.max(lo)]
}

/// Fills each single-year gap with the previous value plus the intermediate
/// increment of a randomly chosen donor whose two-year change lies within
/// `neighborhood` of the gap's two-year change. The window doubles up to
/// four times when empty.
///
/// Filled years are flagged `observed = false`; their weight is the mean of
/// the flanking weights.
pub fn impute_missing(panel: &PanelData, seed: u64, neighborhood: f64) -> Result<PanelData> {
    if !(neighborhood > 0.0) {
        return Err(Error::Domain(format!("neighborhood must be positive, got {neighborhood}")));
    }
    let pool = donor_pool(panel);
    let mut out = Vec::with_capacity(panel.n_individuals());
    for (i, ind) in panel.individuals.iter().enumerate() {
        let mut obs = ind.obs.clone();
        for t in 0..obs.len() {
            if obs[t].y.is_some() {
                continue;
            }
            let year = ind.year(t);
            let flank = |k: Option<usize>| k.and_then(|k| ind.obs.get(k)).and_then(|o| o.y.map(|y| (y, o.weight)));
            let (Some((prev, w0)), Some((next, w1))) = (flank(t.checked_sub(1)), flank(Some(t + 1))) else {
                return Err(Error::GapTooLong {
                    person: ind.person_id,
                    year,
                });
            };
            let change = next - prev;
            let mut h = neighborhood;
            let mut found = donors_within(&pool, change, h);
            for _ in 0..4 {
                if !found.is_empty() {
                    break;
                }
                h *= 2.0;
                found = donors_within(&pool, change, h);
            }
            if found.is_empty() {
                return Err(Error::NoDonor {
                    person: ind.person_id,
                    year,
                    change,
                    neighborhood: h,
                });
            }
            let mut rng = stream_rng(seed, Stream::Impute, &[i as u64, t as u64]);
            let donor = found[rng.random_range(0..found.len())];
            obs[t] = Observation {
                y: Some(prev + donor.increment),
                weight: 0.5 * (w0 + w1),
                observed: false,
            };
        }
        out.push(IndividualSeries {
            person_id: ind.person_id,
            first_year: ind.first_year,
            obs,
        });
    }
    PanelData::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn anchor_deflator() -> BTreeMap<i32, f64> {
        // 1982 dollars to 2005 dollars per the anchor pair 99,999 -> 202,281
        BTreeMap::from([(1982, 1.0), (1995, 1.6), (2005, 202_281.0 / 99_999.0)])
    }

    #[test]
    fn codes_match_anchor_dollars() {
        let t = CodeTable::with_default_anchors(anchor_deflator()).unwrap();
        let top = apply_income_codes(3_714_946.0, 2005, &t).unwrap();
        assert!((top - 202_281.0).abs() < 1e-6, "{top}");
        assert_eq!(apply_income_codes(0.0, 2005, &t).unwrap(), 5_150.0);
        // bottom code in 1982 dollars rounds to $2,546
        assert_eq!(t.bottom_code(1982).unwrap().round(), 2_546.0);
        assert_eq!(apply_income_codes(42_887.0, 1995, &t).unwrap(), 42_887.0);
        assert!(matches!(
            apply_income_codes(1.0, 1970, &t),
            Err(Error::YearOutOfRange { year: 1970 })
        ));
        assert!(apply_income_codes(-1.0, 1982, &t).is_err());
    }

    #[test]
    fn log_code_range_is_constant() {
        let t = CodeTable::with_default_anchors(anchor_deflator()).unwrap();
        let gaps: Vec<f64> = t
            .years()
            .map(|y| t.top_code(y).unwrap().ln() - t.bottom_code(y).unwrap().ln())
            .collect();
        for g in &gaps {
            assert!((g - gaps[0]).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn coding_is_idempotent(income in 0.0f64..5e6, pick in 0usize..3) {
            let t = CodeTable::with_default_anchors(anchor_deflator()).unwrap();
            let year = [1982, 1995, 2005][pick];
            let once = apply_income_codes(income, year, &t).unwrap();
            prop_assert_eq!(apply_income_codes(once, year, &t).unwrap(), once);
        }
    }

    #[test]
    fn intercept_only_demeans() {
        let y = [1.0, 2.0, 4.0, 5.0];
        let r = residualize(&y, &Design::intercept(4), &[1.0; 4], &[2000; 4]).unwrap();
        for (a, b) in r.residuals.iter().zip([-2.0, -1.0, 1.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Independent oracle: explicit normal equations solved by Gaussian
    /// elimination with partial pivoting.
    fn normal_equations(x: &[[f64; 2]], y: &[f64], w: &[f64]) -> [f64; 2] {
        let mut m = [[0.0; 3]; 2];
        for ((row, &yi), &wi) in x.iter().zip(y).zip(w) {
            for a in 0..2 {
                for b in 0..2 {
                    m[a][b] += wi * row[a] * row[b];
                }
                m[a][2] += wi * row[a] * yi;
            }
        }
        if m[1][0].abs() > m[0][0].abs() {
            m.swap(0, 1);
        }
        let f = m[1][0] / m[0][0];
        for c in 0..3 {
            m[1][c] -= f * m[0][c];
        }
        let b1 = m[1][2] / m[1][1];
        let b0 = (m[0][2] - m[0][1] * b1) / m[0][0];
        [b0, b1]
    }

    #[test]
    fn matches_normal_equations_on_five_points() {
        let x = [[1.0, 0.5], [1.0, 1.5], [1.0, 2.0], [1.0, 3.5], [1.0, 4.0]];
        let y = [0.3, 0.9, 1.1, 2.4, 2.2];
        let w = [1.0, 2.0, 0.5, 1.5, 1.0];
        // one year, so normalization scales all weights by the same factor
        let years = [1990; 5];
        let design = Design::new(
            vec!["intercept".into(), "x".into()],
            DMatrix::from_fn(5, 2, |r, c| x[r][c]),
        )
        .unwrap();
        let r = residualize(&y, &design, &w, &years).unwrap();
        let b = normal_equations(&x, &y, &w);
        for k in 0..5 {
            let expect = y[k] - b[0] - b[1] * x[k][1];
            assert!((r.residuals[k] - expect).abs() < 1e-12);
        }
        let mean: f64 = r.residuals.iter().zip(&r.weights).map(|(e, w)| e * w).sum::<f64>()
            / r.weights.iter().sum::<f64>();
        assert!(mean.abs() < 1e-8);
    }

    #[test]
    fn rank_deficiency_names_columns() {
        let m = DMatrix::from_row_slice(4, 3, &[1.0, 1.0, 2.0, 1.0, 2.0, 4.0, 1.0, 3.0, 6.0, 1.0, 4.0, 8.0]);
        let d = Design::new(vec!["intercept".into(), "age".into(), "age_x2".into()], m).unwrap();
        match residualize(&[1.0, 2.0, 3.0, 4.0], &d, &[1.0; 4], &[2000; 4]) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns, vec!["age_x2".to_string()]),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn year_normalization_equalizes_average_weight() {
        let w = normalize_weights_by_year(&[1.0, 3.0, 10.0, 10.0, 40.0], &[1, 1, 2, 2, 2]).unwrap();
        assert!((w[0] + w[1] - 2.0).abs() < 1e-12);
        assert!((w[2] + w[3] + w[4] - 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn residuals_invariant_to_weight_scale(scale in 0.01f64..100.0, seed in 0u64..50) {
            let n = 12;
            let years: Vec<i32> = (0..n).map(|k| 2000 + (k % 3) as i32).collect();
            let x: Vec<f64> = (0..n).map(|k| ((k as u64 * 7 + seed) % 11) as f64).collect();
            let y: Vec<f64> = (0..n).map(|k| ((k as u64 * 5 + seed * 3) % 13) as f64 / 3.0).collect();
            let w: Vec<f64> = (0..n).map(|k| 0.5 + ((k as u64 + seed) % 4) as f64).collect();
            let d = Design::with_year_effects(&[("x".into(), x)], &years).unwrap();
            let a = residualize(&y, &d, &w, &years).unwrap();
            let ws: Vec<f64> = w.iter().map(|v| v * scale).collect();
            let b = residualize(&y, &d, &ws, &years).unwrap();
            for (p, q) in a.residuals.iter().zip(&b.residuals) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }
    }

    fn series(id: u64, first_year: i32, ys: &[Option<f64>]) -> IndividualSeries {
        IndividualSeries {
            person_id: id,
            first_year,
            obs: ys
                .iter()
                .map(|y| match y {
                    Some(v) => Observation::observed(*v, 1.0),
                    None => Observation::missing(),
                })
                .collect(),
        }
    }

    #[test]
    fn fills_gap_with_donor_increment() {
        // the only two-year change near 0.4 is the donor path 0.6, 0.7, 1.0
        let panel = PanelData::new(vec![
            series(1, 1999, &[Some(0.1), None, Some(0.5)]),
            series(2, 1972, &[Some(0.6), Some(0.7), Some(1.0)]),
        ])
        .unwrap();
        let out = impute_missing(&panel, 1, DEFAULT_NEIGHBORHOOD).unwrap();
        let filled = out.individuals[0].obs[1];
        assert!((filled.y.unwrap() - 0.2).abs() < 1e-12);
        assert!(!filled.observed);
        assert_eq!(out.individuals[1], panel.individuals[1]);
    }

    #[test]
    fn flat_gap_with_flat_donors() {
        let panel = PanelData::new(vec![
            series(1, 2000, &[Some(0.3), None, Some(0.3)]),
            series(2, 2000, &[Some(1.0), Some(1.0), Some(1.0), Some(1.0)]),
        ])
        .unwrap();
        let out = impute_missing(&panel, 9, 0.05).unwrap();
        assert_eq!(out.individuals[0].obs[1].y, Some(0.3));
    }

    #[test]
    fn widening_then_failure() {
        // donor change 0.5 is 0.5 away from the gap's change of 0: reached at 0.05 * 16 = 0.8
        let panel = PanelData::new(vec![
            series(1, 2000, &[Some(0.0), None, Some(0.0)]),
            series(2, 2000, &[Some(0.0), Some(0.2), Some(0.5)]),
        ])
        .unwrap();
        let out = impute_missing(&panel, 0, 0.05).unwrap();
        assert!((out.individuals[0].obs[1].y.unwrap() - 0.2).abs() < 1e-12);
        let far = PanelData::new(vec![
            series(1, 2000, &[Some(0.0), None, Some(0.0)]),
            series(2, 2000, &[Some(0.0), Some(0.2), Some(2.0)]),
        ])
        .unwrap();
        assert!(matches!(impute_missing(&far, 0, 0.05), Err(Error::NoDonor { .. })));
    }

    #[test]
    fn long_gaps_are_rejected_and_droppable() {
        let panel = PanelData::new(vec![
            series(1, 2000, &[Some(0.0), None, None, Some(0.0)]),
            series(2, 2000, &[Some(0.0), Some(0.1), Some(0.2)]),
        ])
        .unwrap();
        assert!(matches!(impute_missing(&panel, 0, 0.05), Err(Error::GapTooLong { person: 1, .. })));
        let (kept, dropped) = drop_long_gaps(&panel);
        assert_eq!(dropped, vec![1]);
        assert_eq!(kept.n_individuals(), 1);
    }

    #[test]
    fn fill_frequencies_follow_donor_distribution() {
        // five donors with change 0.4 (one duplicated increment) -> four
        // distinct fills with probabilities 2/5, 1/5, 1/5, 1/5
        let panel = PanelData::new(vec![
            series(1, 1999, &[Some(0.1), None, Some(0.5)]),
            series(2, 1970, &[Some(0.0), Some(0.1), Some(0.4)]),
            series(3, 1970, &[Some(0.0), Some(0.1), Some(0.4)]),
            series(4, 1970, &[Some(0.0), Some(0.3), Some(0.4)]),
            series(5, 1970, &[Some(0.0), Some(-0.2), Some(0.4)]),
            series(6, 1970, &[Some(1.0), Some(1.6), Some(1.4)]),
        ])
        .unwrap();
        let increments = [0.1, 0.3, -0.2, 0.6];
        let probs = [0.4, 0.2, 0.2, 0.2];
        let mut counts = [0usize; 4];
        let n = 10_000;
        for seed in 0..n {
            let out = impute_missing(&panel, seed, 0.05).unwrap();
            let inc = out.individuals[0].obs[1].y.unwrap() - 0.1;
            let k = increments
                .iter()
                .position(|d| (d - inc).abs() < 1e-9)
                .expect("fill comes from a donor");
            counts[k] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(probs)
            .map(|(&c, p)| {
                let e = p * n as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        // chi-square, 3 degrees of freedom, 1% critical value
        assert!(chi2 < 11.345, "chi2 = {chi2}, counts {counts:?}");
    }

    proptest! {
        #[test]
        fn imputation_preserves_observed_values(ys in prop::collection::vec(-1.0f64..1.0, 8), gap in 1usize..7, seed in 0u64..100) {
            let mut obs: Vec<Option<f64>> = ys.iter().copied().map(Some).collect();
            obs[gap] = None;
            let donor: Vec<Option<f64>> = ys.iter().map(|y| Some(y * 0.5)).collect();
            let panel = PanelData::new(vec![series(1, 2000, &obs), series(2, 2000, &donor)]).unwrap();
            if let Ok(out) = impute_missing(&panel, seed, 0.05) {
                for (a, b) in panel.individuals.iter().zip(&out.individuals) {
                    for (x, y) in a.obs.iter().zip(&b.obs) {
                        if x.y.is_some() {
                            prop_assert_eq!(x, y);
                        }
                    }
                }
                let o = &out.individuals[0].obs;
                prop_assert!(((o[gap + 1].y.unwrap() - o[gap - 1].y.unwrap()) - (ys[gap + 1] - ys[gap - 1])).abs() < 1e-12);
            }
        }
    }
}
