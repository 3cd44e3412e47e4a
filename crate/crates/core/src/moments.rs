//! Reduced-form volatility moments: two-year squared changes, the
//! permanent-variance product moment, cohort splits on lagged moments, and
//! weighted trend regressions on yearly aggregates.
//!
//! Only observed (non-imputed) years enter any moment.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::model::PanelData;
use crate::stats::{self, Summary};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentCell {
    /// Index into the panel's individuals.
    pub person: usize,
    pub year: i32,
    pub value: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MomentSeries {
    pub cells: Vec<MomentCell>,
}

impl MomentSeries {
    pub fn by_year(&self) -> BTreeMap<i32, Vec<&MomentCell>> {
        let mut m: BTreeMap<i32, Vec<&MomentCell>> = BTreeMap::new();
        for c in &self.cells {
            m.entry(c.year).or_default().push(c);
        }
        m
    }

    pub fn values_and_weights(&self) -> (Vec<f64>, Vec<f64>) {
        self.cells.iter().map(|c| (c.value, c.weight)).unzip()
    }
}

/// `(y[t] - y[t-span])^2` wherever both years are observed; weight is the
/// year-`t` weight.
pub fn squared_change(panel: &PanelData, span: usize) -> Result<MomentSeries> {
    if span == 0 {
        return Err(Error::InvalidInput("span must be at least 1".into()));
    }
    let mut cells = Vec::new();
    for (p, ind) in panel.individuals.iter().enumerate() {
        for t in span..ind.len() {
            let (Some(a), Some(b)) = (ind.obs[t].observed_value(), ind.obs[t - span].observed_value()) else {
                continue;
            };
            cells.push(MomentCell {
                person: p,
                year: ind.year(t),
                value: (a - b).powi(2),
                weight: ind.obs[t].weight,
            });
        }
    }
    Ok(MomentSeries { cells })
}

/// `(y[t] - y[t-2]) * (y[t+2] - y[t-4])`: a two-year change times the
/// six-year change spanning it. Its expectation is the variance of the two
/// permanent shocks between `t-2` and `t` when transitory income has at
/// most one lag.
pub fn permanent_variance_moment(panel: &PanelData) -> MomentSeries {
    let mut cells = Vec::new();
    for (p, ind) in panel.individuals.iter().enumerate() {
        let v = |t: usize| ind.obs[t].observed_value();
        for t in 4..ind.len().saturating_sub(2) {
            let (Some(y0), Some(y2), Some(y4), Some(y6)) = (v(t - 4), v(t - 2), v(t), v(t + 2)) else {
                continue;
            };
            cells.push(MomentCell {
                person: p,
                year: ind.year(t),
                value: (y4 - y2) * (y6 - y0),
                weight: ind.obs[t].weight,
            });
        }
    }
    MomentSeries { cells }
}

/// Yearly weighted mean, median and 95th percentile.
#[derive(Debug, Clone, PartialEq)]
pub struct YearlySummary {
    pub year: i32,
    pub summary: Option<Summary>,
}

pub fn yearly_summaries(series: &MomentSeries) -> Vec<YearlySummary> {
    series
        .by_year()
        .into_iter()
        .map(|(year, cells)| {
            let (v, w): (Vec<f64>, Vec<f64>) = cells.iter().map(|c| (c.value, c.weight)).unzip();
            YearlySummary {
                year,
                summary: stats::summarize(&v, &w),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortRule {
    pub lag: usize,
    /// Cohort "low": lagged value strictly below this quantile.
    pub low_quantile: f64,
    /// Cohort "high": lagged value at or above this quantile.
    pub high_quantile: f64,
}

impl Default for CohortRule {
    fn default() -> Self {
        CohortRule {
            lag: 4,
            low_quantile: 0.5,
            high_quantile: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortStat {
    pub mean: f64,
    pub weight: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortRow {
    pub year: i32,
    pub low: Option<CohortStat>,
    pub high: Option<CohortStat>,
}

/// Person indices in the low and high cohorts defined by values in
/// `lag_year`.
pub fn cohort_membership(series: &MomentSeries, lag_year: i32, rule: &CohortRule) -> (Vec<usize>, Vec<usize>) {
    let cells: Vec<&MomentCell> = series.cells.iter().filter(|c| c.year == lag_year).collect();
    let (v, w): (Vec<f64>, Vec<f64>) = cells.iter().map(|c| (c.value, c.weight)).unzip();
    let (Some(lo), Some(hi)) = (
        stats::weighted_quantile(&v, &w, rule.low_quantile),
        stats::weighted_quantile(&v, &w, rule.high_quantile),
    ) else {
        return (Vec::new(), Vec::new());
    };
    let low = cells.iter().filter(|c| c.value < lo).map(|c| c.person).collect();
    let high = cells.iter().filter(|c| c.value >= hi).map(|c| c.person).collect();
    (low, high)
}

/// For every year with data, the weighted mean moment among people whose
/// own moment `rule.lag` years earlier fell below the median (low) or at
/// or above the 95th percentile (high).
pub fn cohort_split(series: &MomentSeries, rule: &CohortRule) -> Vec<CohortRow> {
    let by_year = series.by_year();
    by_year
        .iter()
        .map(|(&year, cells)| {
            let (low, high) = cohort_membership(series, year - rule.lag as i32, rule);
            let stat = |members: &[usize]| -> Option<CohortStat> {
                let set: HashMap<usize, ()> = members.iter().map(|&p| (p, ())).collect();
                let (v, w): (Vec<f64>, Vec<f64>) = cells
                    .iter()
                    .filter(|c| set.contains_key(&c.person))
                    .map(|c| (c.value, c.weight))
                    .unzip();
                Some(CohortStat {
                    mean: stats::weighted_mean(&v, &w)?,
                    weight: w.iter().sum(),
                    count: v.len(),
                })
            };
            CohortRow {
                year,
                low: stat(&low),
                high: stat(&high),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YearPoint {
    pub year: i32,
    pub value: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrendWeighting {
    /// Every year counts once.
    #[default]
    Equal,
    /// Years weighted by their total sample weight.
    ByWeight,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendOptions {
    /// The percent change is the slope times `span.1 - span.0`.
    pub span_years: (i32, i32),
    pub weighting: TrendWeighting,
    /// Full-sample moment the percent change is relative to. Defaults to the
    /// weight-weighted mean of the yearly values.
    pub full_sample: Option<f64>,
}

impl Default for TrendOptions {
    fn default() -> Self {
        TrendOptions {
            span_years: (1968, 2005),
            weighting: TrendWeighting::Equal,
            full_sample: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trend {
    pub slope: f64,
    pub intercept: f64,
    /// Missing when the residual variance is zero.
    pub t_stat: Option<f64>,
    /// Missing when the full-sample moment is zero.
    pub pct_change: Option<f64>,
    pub n_years: usize,
}

/// Weighted OLS of yearly values on calendar year.
pub fn trend_stats(points: &[YearPoint], opts: &TrendOptions) -> Result<Trend> {
    if points.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "trend needs at least 3 years, got {}",
            points.len()
        )));
    }
    if points.iter().any(|p| !p.value.is_finite()) {
        return Err(Error::InvalidInput("non-finite yearly value".into()));
    }
    let rw: Vec<f64> = match opts.weighting {
        TrendWeighting::Equal => vec![1.0; points.len()],
        TrendWeighting::ByWeight => points.iter().map(|p| p.weight).collect(),
    };
    let sw: f64 = rw.iter().sum();
    if !(sw > 0.0) {
        return Err(Error::InvalidInput("trend weights sum to zero".into()));
    }
    // center on the first year so large calendar years do not cost precision
    let x0 = points[0].year as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.year as f64 - x0).collect();
    let xbar = xs.iter().zip(&rw).map(|(x, w)| x * w).sum::<f64>() / sw;
    let ybar = points.iter().zip(&rw).map(|(p, w)| p.value * w).sum::<f64>() / sw;
    let sxx: f64 = xs.iter().zip(&rw).map(|(x, w)| w * (x - xbar).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::InvalidInput("trend needs at least two distinct years".into()));
    }
    let sxy: f64 = xs
        .iter()
        .zip(points)
        .zip(&rw)
        .map(|((x, p), w)| w * (x - xbar) * (p.value - ybar))
        .sum();
    let slope = sxy / sxx;
    let icpt_centered = ybar - slope * xbar;
    let rss: f64 = xs
        .iter()
        .zip(points)
        .zip(&rw)
        .map(|((x, p), w)| w * (p.value - icpt_centered - slope * x).powi(2))
        .sum();
    let dof = (points.len() - 2) as f64;
    let scale: f64 = points.iter().zip(&rw).map(|(p, w)| w * p.value * p.value).sum();
    // residuals at rounding level count as an exact fit: no t-statistic
    let se = if rss <= 1e-24 * scale { 0.0 } else { (rss / dof / sxx).sqrt() };
    let t_stat = (se > 0.0 && se.is_finite()).then(|| slope / se);

    let full = match opts.full_sample {
        Some(v) => Some(v),
        None => {
            let (v, w): (Vec<f64>, Vec<f64>) = points.iter().map(|p| (p.value, p.weight)).unzip();
            stats::weighted_mean(&v, &w)
        }
    };
    let span = (opts.span_years.1 - opts.span_years.0) as f64;
    let pct_change = full.filter(|m| *m != 0.0).map(|m| slope * span / m * 100.0);
    Ok(Trend {
        slope,
        intercept: icpt_centered - slope * x0,
        t_stat,
        pct_change,
        n_years: points.len(),
    })
}

/// Yearly summaries plus trends of the mean, median and 95th percentile.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTable {
    pub full: Option<Summary>,
    pub yearly: Vec<YearlySummary>,
    pub mean_trend: Option<Trend>,
    pub median_trend: Option<Trend>,
    pub p95_trend: Option<Trend>,
}

pub fn moment_table(series: &MomentSeries, opts: &TrendOptions) -> MomentTable {
    let (v, w) = series.values_and_weights();
    let full = stats::summarize(&v, &w);
    let yearly = yearly_summaries(series);
    let trend = |pick: fn(&Summary) -> f64| {
        let pts: Vec<YearPoint> = yearly
            .iter()
            .filter_map(|y| {
                y.summary.as_ref().map(|s| YearPoint {
                    year: y.year,
                    value: pick(s),
                    weight: s.total_weight,
                })
            })
            .collect();
        let o = TrendOptions {
            full_sample: full.as_ref().map(pick),
            ..*opts
        };
        trend_stats(&pts, &o).ok()
    };
    MomentTable {
        mean_trend: trend(|s| s.mean),
        median_trend: trend(|s| s.median),
        p95_trend: trend(|s| s.p95),
        full,
        yearly,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortTable {
    pub rows: Vec<CohortRow>,
    pub low_average: Option<f64>,
    pub high_average: Option<f64>,
    pub low_trend: Option<Trend>,
    pub high_trend: Option<Trend>,
    /// `(high slope - low slope) / (high slope + low slope) * 100`.
    pub pct_difference: Option<f64>,
}

pub fn cohort_table(series: &MomentSeries, rule: &CohortRule, opts: &TrendOptions) -> CohortTable {
    let rows = cohort_split(series, rule);
    let side = |pick: fn(&CohortRow) -> Option<CohortStat>| {
        let pts: Vec<YearPoint> = rows
            .iter()
            .filter_map(|r| {
                pick(r).map(|s| YearPoint {
                    year: r.year,
                    value: s.mean,
                    weight: s.weight,
                })
            })
            .collect();
        let (v, w): (Vec<f64>, Vec<f64>) = pts.iter().map(|p| (p.value, p.weight)).unzip();
        let avg = stats::weighted_mean(&v, &w);
        let trend = trend_stats(
            &pts,
            &TrendOptions {
                full_sample: avg,
                ..*opts
            },
        )
        .ok();
        (avg, trend)
    };
    let (low_average, low_trend) = side(|r| r.low);
    let (high_average, high_trend) = side(|r| r.high);
    let pct_difference = match (low_trend, high_trend) {
        (Some(l), Some(h)) if l.slope + h.slope != 0.0 => {
            Some((h.slope - l.slope) / (h.slope + l.slope) * 100.0)
        }
        _ => None,
    };
    CohortTable {
        rows,
        low_average,
        high_average,
        low_trend,
        high_trend,
        pct_difference,
    }
}
