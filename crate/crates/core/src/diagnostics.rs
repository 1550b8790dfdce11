//! Error norms and per-run method statistics.

use serde::{Deserialize, Serialize};

use crate::error::{DtqError, Result};

/// Discrete error norms between a reference `p` and an approximation `q`
/// sampled at the same `s` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// `sqrt(sum p (p - q)^2 / sum p)`
    pub l2p: f64,
    /// `sqrt(sum (p - q)^2 / s)`
    pub l2: f64,
    /// `sum |p - q| / s`
    pub l1: f64,
    pub linf: f64,
    pub samples: usize,
    pub time: f64,
}

pub fn error_norms(exact: &[f64], computed: &[f64], time: f64) -> Result<ErrorReport> {
    assert_eq!(
        exact.len(),
        computed.len(),
        "sample vectors differ in length"
    );
    let total: f64 = exact.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(DtqError::DegenerateReference);
    }
    let s = exact.len() as f64;
    let mut weighted = 0.0;
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut max: f64 = 0.0;
    for (&p, &q) in exact.iter().zip(computed) {
        let e = p - q;
        weighted += e * e * p;
        sq += e * e;
        abs += e.abs();
        max = max.max(e.abs());
    }
    Ok(ErrorReport {
        l2p: (weighted / total).sqrt(),
        l2: (sq / s).sqrt(),
        l1: abs / s,
        linf: max,
        samples: exact.len(),
        time,
    })
}

/// Per-step method counts as needed for the averages.
pub trait MethodCounts {
    fn step_index(&self) -> usize;
    fn mesh_size(&self) -> usize;
    fn reuse_count(&self) -> usize;
    fn alt_count(&self) -> usize;
}

/// Average percentage of points reusing their quadrature nodes (steps `>= 3`)
/// and using the fallback update (steps `>= 2`). `None` when no step falls in
/// the respective range.
pub fn reuse_and_alt_averages<S: MethodCounts>(stats: &[S]) -> (Option<f64>, Option<f64>) {
    let avg = |from: usize, count: &dyn Fn(&S) -> usize| {
        let fracs: Vec<f64> = stats
            .iter()
            .filter(|s| s.step_index() >= from && s.mesh_size() > 0)
            .map(|s| count(s) as f64 / s.mesh_size() as f64)
            .collect();
        (!fracs.is_empty()).then(|| 100.0 * fracs.iter().sum::<f64>() / fracs.len() as f64)
    };
    (avg(3, &|s| s.reuse_count()), avg(2, &|s| s.alt_count()))
}
