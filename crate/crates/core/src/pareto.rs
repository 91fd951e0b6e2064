//! Accuracy/latency Pareto fronts.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParetoPoint {
    pub label: String,
    /// Lower is better, e.g. RMSE.
    pub error: f64,
    /// Lower is better.
    pub time_ms: f64,
}

impl ParetoPoint {
    pub fn new(label: impl Into<String>, error: f64, time_ms: f64) -> Self {
        ParetoPoint {
            label: label.into(),
            error,
            time_ms,
        }
    }
}

/// `p` is no worse than `q` on both axes and strictly better on one.
pub fn dominates(p: &ParetoPoint, q: &ParetoPoint) -> bool {
    p.error <= q.error && p.time_ms <= q.time_ms && (p.error < q.error || p.time_ms < q.time_ms)
}

/// Splits `points` into the non-dominated front, ordered by time (ties by
/// error, then input order), and the dominated rest in input order. Exact
/// duplicates do not dominate each other.
pub fn pareto_front(points: &[ParetoPoint]) -> Result<(Vec<ParetoPoint>, Vec<ParetoPoint>)> {
    if points.is_empty() {
        return Err(Error::InvalidData("no points given".into()));
    }
    if let Some(p) = points
        .iter()
        .find(|p| !(p.error.is_finite() && p.time_ms.is_finite() && p.error > 0.0 && p.time_ms > 0.0))
    {
        return Err(Error::InvalidData(format!(
            "point `{}` needs finite positive values, got error {} and time {}",
            p.label, p.error, p.time_ms
        )));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (&points[a], &points[b]);
        p.time_ms
            .total_cmp(&q.time_ms)
            .then(p.error.total_cmp(&q.error))
            .then(a.cmp(&b))
    });
    let mut on_front = vec![false; points.len()];
    // Smallest error among strictly faster points.
    let mut best_faster = f64::INFINITY;
    let mut k = 0;
    while k < order.len() {
        let t = points[order[k]].time_ms;
        let group_end = order[k..]
            .iter()
            .position(|&i| points[i].time_ms != t)
            .map_or(order.len(), |n| k + n);
        // sorted by error within the group
        let group_min = points[order[k]].error;
        for &i in &order[k..group_end] {
            on_front[i] = points[i].error == group_min && group_min < best_faster;
        }
        best_faster = best_faster.min(group_min);
        k = group_end;
    }
    let front = order
        .iter()
        .filter(|&&i| on_front[i])
        .map(|&i| points[i].clone())
        .collect();
    let rest = (0..points.len())
        .filter(|&i| !on_front[i])
        .map(|i| points[i].clone())
        .collect();
    Ok((front, rest))
}
