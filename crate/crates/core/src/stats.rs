//! Weighted descriptive statistics shared by the moment and posterior tables.

/// Weighted mean; `None` when the total weight is not positive.
pub fn weighted_mean(values: &[f64], weights: &[f64]) -> Option<f64> {
    debug_assert_eq!(values.len(), weights.len());
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let s: f64 = values.iter().zip(weights).map(|(v, w)| v * w).sum();
    Some(s / total)
}

/// Weighted quantile as the left-continuous inverse of the weighted
/// empirical CDF: the smallest observed `x` with `F(x) >= p`.
///
/// Zero-weight points never become the answer. Returns `None` when the
/// total weight is not positive.
pub fn weighted_quantile(values: &[f64], weights: &[f64], p: f64) -> Option<f64> {
    debug_assert_eq!(values.len(), weights.len());
    let mut pts: Vec<(f64, f64)> = values
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&v, &w)| (v, w))
        .collect();
    if pts.is_empty() {
        return None;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pts.iter().map(|p| p.1).sum();
    let target = p.clamp(0.0, 1.0) * total;
    // relative slack so that e.g. 0.95 of the weight sitting on one value
    // reaches the 0.95 quantile despite summation error
    let slack = 1e-12 * total;
    let mut cum = 0.0;
    for (v, w) in &pts {
        cum += w;
        if cum >= target - slack {
            return Some(*v);
        }
    }
    pts.last().map(|p| p.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub total_weight: f64,
    pub count: usize,
}

pub fn summarize(values: &[f64], weights: &[f64]) -> Option<Summary> {
    Some(Summary {
        mean: weighted_mean(values, weights)?,
        median: weighted_quantile(values, weights, 0.5)?,
        p95: weighted_quantile(values, weights, 0.95)?,
        total_weight: weights.iter().sum(),
        count: values.len(),
    })
}
