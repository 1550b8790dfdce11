//! Orthonormal Hermite bases, interpolatory quadrature weights and weighted
//! Leja node selection.
//!
//! The weight is `W(z) = pi^{-N/2} exp(-|z|^2)` (no `1/2` in the exponent), so
//! the univariate orthonormal family is `H_d / sqrt(2^d d!)` with `H_d` the
//! physicists' Hermite polynomials.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{DtqError, Result};

/// Graded list of multi-indices `alpha in N_0^N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiIndexSet {
    dim: usize,
    indices: Vec<Vec<u32>>,
}

impl MultiIndexSet {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn get(&self, i: usize) -> &[u32] {
        &self.indices[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u32]> {
        self.indices.iter().map(Vec::as_slice)
    }

    pub fn max_degree(&self) -> u32 {
        self.indices.iter().flatten().copied().max().unwrap_or(0)
    }

    /// Position of `alpha` in the enumeration.
    pub fn position(&self, alpha: &[u32]) -> Option<usize> {
        self.indices.iter().position(|a| a == alpha)
    }
}

/// The first `m` multi-indices in graded order, lexicographic (largest first
/// component first) within each total degree.
pub fn graded_multi_indices(dim: usize, m: usize) -> MultiIndexSet {
    assert!(dim >= 1, "dimension must be positive");
    let mut indices = Vec::with_capacity(m);
    let mut degree = 0u32;
    while indices.len() < m {
        let mut current = vec![0u32; dim];
        push_compositions(degree, 0, &mut current, &mut indices, m);
        degree += 1;
    }
    MultiIndexSet { dim, indices }
}

fn push_compositions(
    remaining: u32,
    pos: usize,
    current: &mut Vec<u32>,
    out: &mut Vec<Vec<u32>>,
    cap: usize,
) {
    if out.len() >= cap {
        return;
    }
    if pos == current.len() - 1 {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for first in (0..=remaining).rev() {
        current[pos] = first;
        push_compositions(remaining - first, pos + 1, current, out, cap);
    }
    current[pos] = 0;
}

/// `|Upsilon_k| = C(N + k, N)`, the size of the total-degree-`k` space.
pub fn total_degree_count(dim: usize, degree: usize) -> usize {
    let mut c = 1usize;
    for i in 1..=dim {
        c = c * (degree + i) / i;
    }
    c
}

/// Normalized Hermite polynomial of degree `d`.
pub fn hermite_eval(d: u32, z: f64) -> f64 {
    let mut prev = 0.0;
    let mut cur = 1.0;
    for n in 0..d {
        let n = n as f64;
        let next = z * (2.0 / (n + 1.0)).sqrt() * cur - (n / (n + 1.0)).sqrt() * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Fills `out[d] = h_d(z)` for `d = 0..out.len()`.
fn hermite_table(z: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = std::f64::consts::SQRT_2 * z;
    }
    for n in 1..out.len().saturating_sub(1) {
        let nf = n as f64;
        out[n + 1] = z * (2.0 / (nf + 1.0)).sqrt() * out[n] - (nf / (nf + 1.0)).sqrt() * out[n - 1];
    }
}

/// Evaluates the tensorized basis `phi_i(zeta) = prod_l h_{alpha_l}(zeta_l)`.
pub fn basis_eval(idx: &MultiIndexSet, zeta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; idx.len()];
    BasisEvaluator::new(idx).eval_into(zeta, &mut out);
    out
}

/// Reusable scratch space for repeated basis evaluation.
pub(crate) struct BasisEvaluator<'a> {
    idx: &'a MultiIndexSet,
    stride: usize,
    table: Vec<f64>,
}

impl<'a> BasisEvaluator<'a> {
    pub(crate) fn new(idx: &'a MultiIndexSet) -> Self {
        let stride = idx.max_degree() as usize + 1;
        Self {
            idx,
            stride,
            table: vec![0.0; stride * idx.dim()],
        }
    }

    pub(crate) fn eval_into(&mut self, zeta: &[f64], out: &mut [f64]) {
        let dim = self.idx.dim();
        for (l, &z) in zeta.iter().enumerate().take(dim) {
            hermite_table(z, &mut self.table[l * self.stride..(l + 1) * self.stride]);
        }
        for (o, alpha) in out.iter_mut().zip(self.idx.iter()) {
            *o = alpha
                .iter()
                .enumerate()
                .map(|(l, &a)| self.table[l * self.stride + a as usize])
                .product();
        }
    }
}

/// `W(z; 0, I) = pi^{-N/2} exp(-|z|^2)`.
pub fn standard_weight(zeta: &[f64]) -> f64 {
    let r2: f64 = zeta.iter().map(|z| z * z).sum();
    PI.powf(-(zeta.len() as f64) / 2.0) * (-r2).exp()
}

/// Interpolatory quadrature weights for nodes `nodes_zeta` (flattened,
/// `m * N` values) and the condition number `Gamma = |w|_1`.
///
/// The weights are the first row of `V^{-1}`, `V[i][v] = phi_v(zeta_i)`,
/// obtained by solving `V^T w = e_1`.
pub fn interpolatory_weights(nodes_zeta: &[f64], idx: &MultiIndexSet) -> Result<(Vec<f64>, f64)> {
    let dim = idx.dim();
    let m = idx.len();
    assert_eq!(nodes_zeta.len(), m * dim, "need exactly |idx| nodes");
    let mut vt = DMatrix::zeros(m, m);
    let mut row = vec![0.0; m];
    let mut eval = BasisEvaluator::new(idx);
    for i in 0..m {
        eval.eval_into(&nodes_zeta[i * dim..(i + 1) * dim], &mut row);
        for (v, &phi) in row.iter().enumerate() {
            vt[(v, i)] = phi;
        }
    }
    let scale = vt.amax();
    if !scale.is_finite() || scale == 0.0 {
        return Err(DtqError::IllConditioned);
    }
    let lu = vt.lu();
    let u = lu.u();
    let min_pivot = u
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b.abs()));
    if min_pivot <= 1e-13 * scale {
        return Err(DtqError::IllConditioned);
    }
    let mut e1 = DVector::zeros(m);
    e1[0] = 1.0;
    let w = lu.solve(&e1).ok_or(DtqError::IllConditioned)?;
    if !w.iter().all(|x| x.is_finite()) {
        return Err(DtqError::IllConditioned);
    }
    let gamma = w.iter().map(|x| x.abs()).sum();
    Ok((w.as_slice().to_vec(), gamma))
}

/// Discrete weighted Leja selection: the first `m` row pivots of the
/// partially pivoted LU factorization of `V~[l][i] = sqrt(W(zeta_l)) phi_i(zeta_l)`.
///
/// Returns indices into the candidate list in selection order. Equal-magnitude
/// pivots resolve to the smallest candidate index.
pub fn leja_select(candidates_zeta: &[f64], idx: &MultiIndexSet, m: usize) -> Result<Vec<usize>> {
    let dim = idx.dim();
    assert_eq!(m, idx.len(), "m must equal the basis size");
    assert_eq!(candidates_zeta.len() % dim, 0);
    let n = candidates_zeta.len() / dim;
    if n < m {
        return Err(DtqError::DegenerateCandidates { needed: m });
    }
    // Row-major n x m weighted Vandermonde-like matrix.
    let mut a = vec![0.0; n * m];
    let mut eval = BasisEvaluator::new(idx);
    for r in 0..n {
        let z = &candidates_zeta[r * dim..(r + 1) * dim];
        let sw = standard_weight(z).sqrt();
        let row = &mut a[r * m..(r + 1) * m];
        eval.eval_into(z, row);
        for x in row.iter_mut() {
            *x *= sw;
        }
    }
    let scale = a.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(DtqError::DegenerateCandidates { needed: m });
    }
    let tol = 1e-12 * scale;
    // perm[k] = original candidate index currently in row position k
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..m {
        let mut best = k;
        let mut best_mag = a[k * m + k].abs();
        for r in k + 1..n {
            let mag = a[r * m + k].abs();
            if mag > best_mag || (mag == best_mag && perm[r] < perm[best]) {
                best = r;
                best_mag = mag;
            }
        }
        if best_mag <= tol {
            return Err(DtqError::DegenerateCandidates { needed: m });
        }
        if best != k {
            perm.swap(k, best);
            for j in 0..m {
                a.swap(k * m + j, best * m + j);
            }
        }
        let pivot = a[k * m + k];
        let (head, tail) = a.split_at_mut((k + 1) * m);
        let pivot_row = &head[k * m..];
        for row in tail.chunks_exact_mut(m) {
            let l = row[k] / pivot;
            if l != 0.0 {
                for j in k + 1..m {
                    row[j] -= l * pivot_row[j];
                }
            }
            row[k] = 0.0;
        }
    }
    perm.truncate(m);
    Ok(perm)
}

type NodeCache = Mutex<HashMap<(usize, usize), Arc<Vec<f64>>>>;

/// Fixed Leja nodes for the standard weight, used by the fallback update.
///
/// Selected from an equispaced grid over `[-3.5, 3.5]^N` for `N <= 2`, and
/// from a Halton cloud (origin first) of at least `20 m` points otherwise.
/// Results are memoized per `(N, m)`.
pub fn standard_leja_nodes(dim: usize, m: usize) -> Arc<Vec<f64>> {
    static CACHE: OnceLock<NodeCache> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(nodes) = cache.lock().unwrap().get(&(dim, m)) {
        return Arc::clone(nodes);
    }
    let nodes = Arc::new(compute_standard_leja_nodes(dim, m));
    cache
        .lock()
        .unwrap()
        .entry((dim, m))
        .or_insert(nodes)
        .clone()
}

fn compute_standard_leja_nodes(dim: usize, m: usize) -> Vec<f64> {
    const HALF_WIDTH: f64 = 3.5;
    let cloud: Vec<f64> = match dim {
        1 => {
            let half = 350i32;
            let step = HALF_WIDTH / half as f64;
            (-half..=half).map(|i| i as f64 * step).collect()
        }
        2 => {
            let half = 70i32;
            let step = HALF_WIDTH / half as f64;
            let mut pts = Vec::new();
            for i in -half..=half {
                for j in -half..=half {
                    pts.push(i as f64 * step);
                    pts.push(j as f64 * step);
                }
            }
            pts
        }
        _ => {
            let count = (20 * m).max(2000);
            let mut pts = vec![0.0; dim];
            for k in 1..=count {
                for &base in &PRIMES[..dim] {
                    pts.push(HALF_WIDTH * (2.0 * radical_inverse(k as u64, base) - 1.0));
                }
            }
            pts
        }
    };
    let idx = graded_multi_indices(dim, m);
    let picks = leja_select(&cloud, &idx, m).expect("standard candidate cloud is unisolvent");
    picks
        .iter()
        .flat_map(|&p| cloud[p * dim..(p + 1) * dim].iter().copied())
        .collect()
}

const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

fn radical_inverse(mut k: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while k > 0 {
        r += f * (k % base) as f64;
        k /= base;
        f *= inv;
    }
    r
}
