//! Tensor-grid trapezoidal baseline: `p_{n+1} = kappa^N G p_n`.

use std::time::Instant;

use rayon::prelude::*;

use crate::diagnostics::{error_norms, ErrorReport};
use crate::engine::StepStats;
use crate::error::{DtqError, Result};
use crate::sde::{kernel_params, FactoredKernel, SdeProblem};

/// Operators up to this size are stored as a dense matrix.
pub const DENSE_BUDGET_BYTES: u128 = 2 << 30;
/// Grids whose full operator would exceed this are refused.
pub const HARD_LIMIT_BYTES: u128 = 32 << 30;

/// Equispaced tensor grid, row-major (last coordinate fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGrid {
    lo: Vec<f64>,
    kappa: f64,
    counts: Vec<usize>,
}

impl TensorGrid {
    /// Grid starting at `lo` with spacing `kappa`, covering up to `hi`.
    pub fn new(lo: &[f64], hi: &[f64], kappa: f64) -> Self {
        assert!(kappa > 0.0 && lo.len() == hi.len());
        let counts = lo
            .iter()
            .zip(hi)
            .map(|(&a, &b)| ((b - a).max(0.0) / kappa + 1e-9).floor() as usize + 1)
            .collect();
        Self {
            lo: lo.to_vec(),
            kappa,
            counts,
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn lower(&self) -> &[f64] {
        &self.lo
    }

    pub fn upper(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.counts)
            .map(|(&a, &n)| a + (n - 1) as f64 * self.kappa)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinates of the point with flat index `k`.
    pub fn point(&self, mut k: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        for c in (0..self.dim()).rev() {
            let i = k % self.counts[c];
            k /= self.counts[c];
            x[c] = self.lo[c] + i as f64 * self.kappa;
        }
        x
    }

    /// Multilinear interpolation of grid values; `None` outside the grid.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> Option<f64> {
        let dim = self.dim();
        let mut base = vec![0usize; dim];
        let mut frac = vec![0.0; dim];
        for c in 0..dim {
            let u = (x[c] - self.lo[c]) / self.kappa;
            let n = self.counts[c];
            if !(u >= -1e-9 && u <= (n - 1) as f64 + 1e-9) {
                return None;
            }
            let u = u.clamp(0.0, (n - 1) as f64);
            let i = (u.floor() as usize).min(n.saturating_sub(2));
            base[c] = i;
            frac[c] = if n == 1 { 0.0 } else { u - i as f64 };
        }
        let mut total = 0.0;
        for corner in 0..(1usize << dim) {
            let mut w = 1.0;
            let mut k = 0;
            for c in 0..dim {
                let bit = (corner >> c) & 1;
                if bit == 1 && self.counts[c] == 1 {
                    w = 0.0;
                    break;
                }
                w *= if bit == 1 { frac[c] } else { 1.0 - frac[c] };
                k = k * self.counts[c] + base[c] + bit;
            }
            if w != 0.0 {
                total += w * values[k];
            }
        }
        Some(total)
    }
}

/// Grid over the box `[min, max]` padded by `buffer / 2` of its width on
/// each side.
pub fn tensor_mesh_from_adaptive(min: &[f64], max: &[f64], buffer: f64, kappa: f64) -> TensorGrid {
    let lo: Vec<f64> = min
        .iter()
        .zip(max)
        .map(|(&a, &b)| a - buffer / 2.0 * (b - a))
        .collect();
    let hi: Vec<f64> = min
        .iter()
        .zip(max)
        .map(|(&a, &b)| b + buffer / 2.0 * (b - a))
        .collect();
    TensorGrid::new(&lo, &hi, kappa)
}

/// The scaled transition operator `kappa^N G` on a grid.
pub struct TrapezoidOperator {
    size: usize,
    scale: f64,
    targets: Vec<f64>,
    kernels: Vec<FactoredKernel>,
    dense: Option<Vec<f64>>,
}

impl TrapezoidOperator {
    pub fn new(grid: &TensorGrid, problem: &SdeProblem, h: f64) -> Result<Self> {
        Self::with_budget(grid, problem, h, DENSE_BUDGET_BYTES)
    }

    pub fn with_budget(
        grid: &TensorGrid,
        problem: &SdeProblem,
        h: f64,
        dense_budget: u128,
    ) -> Result<Self> {
        let s = grid.len();
        let bytes = (s as u128) * (s as u128) * 8;
        if bytes > HARD_LIMIT_BYTES {
            return Err(DtqError::ResourceLimit { points: s, bytes });
        }
        let dim = grid.dim();
        let targets: Vec<f64> = (0..s).flat_map(|k| grid.point(k)).collect();
        let kernels = (0..s)
            .into_par_iter()
            .map(|k| kernel_params(problem, &targets[k * dim..(k + 1) * dim], h).factor())
            .collect::<Result<Vec<_>>>()?;
        let scale = grid.kappa().powi(dim as i32);
        let mut op = Self {
            size: s,
            scale,
            targets,
            kernels,
            dense: None,
        };
        if bytes <= dense_budget {
            let mut m = vec![0.0; s * s];
            m.par_chunks_mut(s.max(1)).enumerate().for_each(|(j, row)| {
                op.fill_row(j, row);
            });
            op.dense = Some(m);
        }
        Ok(op)
    }

    pub fn is_dense(&self) -> bool {
        self.dense.is_some()
    }

    fn fill_row(&self, j: usize, row: &mut [f64]) {
        let dim = self.targets.len() / self.size.max(1);
        let y = &self.targets[j * dim..(j + 1) * dim];
        for (i, r) in row.iter_mut().enumerate() {
            *r = self.scale * self.kernels[i].density(y);
        }
    }

    /// `new_j = kappa^N sum_i G(y_j, y_i) p_i`.
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        assert_eq!(p.len(), self.size);
        let s = self.size;
        let dim = self.targets.len() / s.max(1);
        match &self.dense {
            Some(m) => m
                .par_chunks(s.max(1))
                .map(|row| row.iter().zip(p).map(|(a, b)| a * b).sum())
                .collect(),
            None => (0..s)
                .into_par_iter()
                .map(|j| {
                    let y = &self.targets[j * dim..(j + 1) * dim];
                    self.scale
                        * p.iter()
                            .enumerate()
                            .filter(|(_, &v)| v != 0.0)
                            .map(|(i, &v)| self.kernels[i].density(y) * v)
                            .sum::<f64>()
                })
                .collect(),
        }
    }
}

/// One trapezoidal step on `grid`.
pub fn trapezoid_step(
    grid: &TensorGrid,
    densities: &[f64],
    problem: &SdeProblem,
    h: f64,
) -> Result<Vec<f64>> {
    Ok(TrapezoidOperator::new(grid, problem, h)?.apply(densities))
}

/// Summary of a trapezoidal run, shaped like the adaptive one.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TrapezoidSummary {
    pub steps: Vec<StepStats>,
    pub final_time: f64,
    pub errors_final: Option<ErrorReport>,
    pub grid_size: usize,
}

/// First step from a point mass at the origin, then trapezoidal steps to
/// `end_time`. `observe` sees `(step index, time, densities)` after every step.
pub fn run_trapezoid(
    grid: &TensorGrid,
    problem: &SdeProblem,
    h: f64,
    end_time: f64,
    mut observe: impl FnMut(usize, f64, &[f64]) -> Result<()>,
) -> Result<(Vec<f64>, TrapezoidSummary)> {
    let op = TrapezoidOperator::new(grid, problem, h)?;
    let origin = vec![0.0; grid.dim()];
    let k0 = kernel_params(problem, &origin, h).factor()?;
    let dim = grid.dim();
    let mut p: Vec<f64> = op
        .targets
        .chunks_exact(dim)
        .map(|y| k0.density(y))
        .collect();
    observe(1, h, &p)?;
    let steps = ((end_time / h - 1e-9).ceil() as usize).max(1);
    let mut stats = Vec::with_capacity(steps);
    for n in 2..=steps {
        let started = Instant::now();
        p = op.apply(&p);
        stats.push(StepStats {
            step: n,
            time: n as f64 * h,
            mesh_size: grid.len(),
            reuse: 0,
            fresh: 0,
            alt: 0,
            added: 0,
            removed: 0,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        observe(n, n as f64 * h, &p)?;
    }
    let t = steps as f64 * h;
    let errors_final = if problem.has_exact_solution() {
        let exact = op
            .targets
            .chunks_exact(dim)
            .map(|y| problem.exact_density(y, t))
            .collect::<Result<Vec<_>>>()?;
        Some(error_norms(&exact, &p, t)?)
    } else {
        None
    };
    Ok((
        p,
        TrapezoidSummary {
            steps: stats,
            final_time: t,
            errors_final,
            grid_size: grid.len(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::builtin_problem;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use std::f64::consts::PI;

    fn heat() -> SdeProblem {
        SdeProblem::new(
            "heat",
            1,
            |_| DVector::zeros(1),
            |_| DMatrix::identity(1, 1),
        )
        .unwrap()
    }

    #[test]
    fn padded_extents() {
        let g = tensor_mesh_from_adaptive(&[0.0, 0.0], &[2.0, 4.0], 0.5, 0.5);
        assert_eq!(g.lower(), &[-0.5, -1.0]);
        let up = g.upper();
        assert_relative_eq!(up[0], 2.5, epsilon = 1e-12);
        assert_relative_eq!(up[1], 5.0, epsilon = 1e-12);
        assert_eq!(g.counts(), &[7, 13]);
        let g0 = tensor_mesh_from_adaptive(&[0.0, 0.0], &[2.0, 4.0], 0.0, 0.5);
        assert_eq!(g0.lower(), &[0.0, 0.0]);
        assert_relative_eq!(g0.upper()[1], 4.0, epsilon = 1e-12);
        let g1 = tensor_mesh_from_adaptive(&[-1.0], &[1.0], 1.0, 0.1);
        assert_eq!(g1.lower(), &[-2.0]);
        assert_relative_eq!(g1.upper()[0], 2.0, epsilon = 1e-12);
        assert_eq!(g1.len(), 41);
    }

    #[test]
    fn erf_grid_size_estimate() {
        let g = TensorGrid::new(&[-13.0, -13.0], &[13.0, 13.0], 0.25);
        assert_eq!(g.len(), 105 * 105);
        assert!((g.len() as f64 - 11_000.0).abs() < 0.05 * 11_000.0);
    }

    #[test]
    fn row_major_order() {
        let g = TensorGrid::new(&[0.0, 10.0], &[1.0, 12.0], 1.0);
        let pts: Vec<Vec<f64>> = (0..g.len()).map(|k| g.point(k)).collect();
        assert_eq!(
            pts,
            vec![
                vec![0.0, 10.0],
                vec![0.0, 11.0],
                vec![0.0, 12.0],
                vec![1.0, 10.0],
                vec![1.0, 11.0],
                vec![1.0, 12.0]
            ]
        );
    }

    #[test]
    fn single_point_grid() {
        let g = TensorGrid::new(&[0.3], &[0.3], 1.0);
        let p = builtin_problem("const1d").unwrap();
        let out = trapezoid_step(&g, &[2.0], &p, 0.05).unwrap();
        let gyy = kernel_params(&p, &[0.3], 0.05)
            .factor()
            .unwrap()
            .density(&[0.3]);
        assert_relative_eq!(out[0], gyy * 2.0, max_relative = 1e-15);
    }

    #[test]
    fn heat_convolution_and_mass() {
        let g = TensorGrid::new(&[-8.0], &[8.0], 0.01);
        let p0: Vec<f64> = (0..g.len())
            .map(|k| {
                let x = g.point(k)[0];
                (-x * x / 2.0).exp() / (2.0 * PI).sqrt()
            })
            .collect();
        let out = trapezoid_step(&g, &p0, &heat(), 0.1).unwrap();
        let peak = out[g.len() / 2];
        let want = 1.0 / (2.0 * PI * 1.1).sqrt();
        assert!(((peak - want) / want).abs() < 1e-4);
        let mass: f64 = out.iter().sum::<f64>() * 0.01;
        assert!((mass - 1.0).abs() < 1e-3);
    }

    #[test]
    fn const1d_accuracy() {
        let p = builtin_problem("const1d").unwrap();
        let g = TensorGrid::new(&[-6.0], &[10.0], 0.1);
        let (_, summary) = run_trapezoid(&g, &p, 0.05, 1.0, |_, _, _| Ok(())).unwrap();
        let e = summary.errors_final.unwrap();
        assert!(e.l2p < 1e-3, "{e:?}");
        assert_eq!(summary.steps.len(), 19);
    }

    #[test]
    fn linear_and_symmetric() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let g = TensorGrid::new(&[-2.0, -2.0], &[2.0, 2.0], 0.25);
        let prob = builtin_problem("movinghill2d(0,1)").unwrap();
        let op = TrapezoidOperator::new(&g, &prob, 0.05).unwrap();
        let p: Vec<f64> = (0..g.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let q: Vec<f64> = (0..g.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let (a, b) = (0.7, -1.3);
        let mix: Vec<f64> = p.iter().zip(&q).map(|(x, y)| a * x + b * y).collect();
        let lhs = op.apply(&mix);
        let (sp, sq) = (op.apply(&p), op.apply(&q));
        for k in 0..g.len() {
            assert!((lhs[k] - (a * sp[k] + b * sq[k])).abs() < 1e-12);
        }
        // blockwise evaluation agrees with the dense matrix
        let lazy = TrapezoidOperator::with_budget(&g, &prob, 0.05, 0).unwrap();
        assert!(!lazy.is_dense() && op.is_dense());
        for (x, y) in lazy.apply(&p).iter().zip(&sp) {
            assert!((x - y).abs() < 1e-14);
        }
        // even input under zero drift stays even
        let even: Vec<f64> = (0..g.len())
            .map(|k| {
                let x = g.point(k);
                (-(x[0] * x[0] + 2.0 * x[1] * x[1])).exp()
            })
            .collect();
        let out = op.apply(&even);
        let n = g.len();
        for k in 0..n {
            assert!((out[k] - out[n - 1 - k]).abs() < 1e-12);
        }
    }

    #[test]
    fn oversized_grid_is_refused() {
        let g = TensorGrid::new(&[0.0, 0.0], &[100.0, 100.0], 0.1);
        match TrapezoidOperator::new(&g, &builtin_problem("movinghill2d").unwrap(), 0.01) {
            Err(DtqError::ResourceLimit { points, bytes }) => {
                assert_eq!(points, 1001 * 1001);
                assert_eq!(bytes, 8 * (1001u128 * 1001).pow(2));
            }
            _ => panic!("expected a resource limit"),
        }
    }

    #[test]
    fn multilinear_interpolation() {
        let g = TensorGrid::new(&[0.0, 0.0], &[2.0, 3.0], 0.5);
        let f = |x: &[f64]| 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[0] * x[1];
        let v: Vec<f64> = (0..g.len()).map(|k| f(&g.point(k))).collect();
        for x in [[0.3, 0.7], [1.99, 2.2], [0.0, 3.0], [2.0, 0.0]] {
            assert_relative_eq!(g.interpolate(&v, &x).unwrap(), f(&x), epsilon = 1e-12);
        }
        assert!(g.interpolate(&v, &[-0.1, 1.0]).is_none());
        assert!(g.interpolate(&v, &[1.0, 3.2]).is_none());
    }
}
