//! SDE problems and the Euler–Maruyama Gaussian transition kernel.
//!
//! One Euler–Maruyama step from state `y` lands in `x` with density
//! `G(x, y) = N(x; y + f(y) h, h g(y) g(y)^T)` (standard normal convention,
//! with the `1/2` in the exponent and the `(2 pi)^N` normalizer).

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{DtqError, Result};
use crate::MAX_DIM;

pub type DriftFn = dyn Fn(&[f64]) -> DVector<f64> + Send + Sync;
pub type DiffusionFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;
pub type ExactFn = dyn Fn(&[f64], f64) -> f64 + Send + Sync;

/// An autonomous Itô SDE `dX = f(X) dt + g(X) dW` in `dim` dimensions.
#[derive(Clone)]
pub struct SdeProblem {
    name: String,
    dim: usize,
    drift: Arc<DriftFn>,
    diffusion: Arc<DiffusionFn>,
    exact: Option<Arc<ExactFn>>,
}

impl fmt::Debug for SdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeProblem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("exact_solution", &self.exact.is_some())
            .finish()
    }
}

impl SdeProblem {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        drift: impl Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
        diffusion: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(DtqError::Unsupported(format!(
                "dimension {dim} outside 1..={MAX_DIM}"
            )));
        }
        Ok(Self {
            name: name.into(),
            dim,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            exact: None,
        })
    }

    pub fn with_exact_solution(
        mut self,
        exact: impl Fn(&[f64], f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.exact = Some(Arc::new(exact));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn drift(&self, x: &[f64]) -> DVector<f64> {
        (self.drift)(x)
    }

    pub fn diffusion(&self, x: &[f64]) -> DMatrix<f64> {
        (self.diffusion)(x)
    }

    pub fn has_exact_solution(&self) -> bool {
        self.exact.is_some()
    }

    /// Closed-form density `p(x, t)`, for problems that have one.
    pub fn exact_density(&self, x: &[f64], t: f64) -> Result<f64> {
        match &self.exact {
            Some(p) => Ok(p(x, t)),
            None => Err(DtqError::Unsupported(format!(
                "problem `{}` has no exact solution",
                self.name
            ))),
        }
    }
}

/// Looks up a built-in problem by name.
///
/// Accepted names: `const1d`, `movinghill2d`, `movinghill2d(C1,C2)`, `erf2d`,
/// `spiral2d`, `nonconstdiff2d`, `constNd(N,C1,C2)`, `erf3d`.
pub fn builtin_problem(name: &str) -> Result<SdeProblem> {
    let trimmed = name.trim();
    let (base, args) = split_args(trimmed).ok_or_else(|| DtqError::NotFound(name.to_string()))?;
    let arity = |n: usize| -> Result<()> {
        if args.len() == n {
            Ok(())
        } else {
            Err(DtqError::NotFound(name.to_string()))
        }
    };
    let problem = match base {
        "const1d" => {
            arity(0)?;
            constant_drift(trimmed, 1, 2.0, 1.0)?
        }
        "movinghill2d" => {
            let (c1, c2) = match args.len() {
                0 => (1.0, 1.0),
                2 => (args[0], args[1]),
                _ => return Err(DtqError::NotFound(name.to_string())),
            };
            constant_drift(trimmed, 2, c1, c2)?
        }
        "constNd" => {
            arity(3)?;
            let n = args[0];
            if n < 1.0 || n.fract() != 0.0 {
                return Err(DtqError::NotFound(name.to_string()));
            }
            constant_drift(trimmed, n as usize, args[1], args[2])?
        }
        "erf2d" => {
            arity(0)?;
            erf_drift(trimmed, 2)?
        }
        "erf3d" => {
            arity(0)?;
            erf_drift(trimmed, 3)?
        }
        "spiral2d" => {
            arity(0)?;
            SdeProblem::new(
                trimmed,
                2,
                |x| {
                    let scale = 5.0 / ((x[0] * x[0] + x[1] * x[1]).sqrt() + 10.0);
                    DVector::from_vec(vec![
                        scale * (4.0 * erf(5.0 * x[0]) + 2.0 * x[1]),
                        scale * (-2.0 * x[0] + x[1]),
                    ])
                },
                |_| DMatrix::from_diagonal_element(2, 2, 0.6),
            )?
        }
        "nonconstdiff2d" => {
            arity(0)?;
            SdeProblem::new(
                trimmed,
                2,
                |x| DVector::from_vec(vec![2.0 * erf(10.0 * x[0]), 0.0]),
                |x| {
                    DMatrix::from_row_slice(
                        2,
                        2,
                        &[0.01 * x[0] * x[0] + 0.7, 0.2, 0.2, 0.01 * x[1] * x[1] + 0.7],
                    )
                },
            )?
        }
        _ => return Err(DtqError::NotFound(name.to_string())),
    };
    Ok(problem)
}

fn split_args(s: &str) -> Option<(&str, Vec<f64>)> {
    match s.find('(') {
        None => Some((s, Vec::new())),
        Some(open) => {
            let inner = s[open + 1..].strip_suffix(')')?;
            let args = inner
                .split(',')
                .map(|a| a.trim().parse::<f64>().ok())
                .collect::<Option<Vec<_>>>()?;
            Some((s[..open].trim(), args))
        }
    }
}

/// `f = c1 e_1`, `g = c2 I`; Gaussian exact solution with mean `c1 t e_1`
/// and per-coordinate variance `2 (c2^2 / 2) t`.
fn constant_drift(name: &str, dim: usize, c1: f64, c2: f64) -> Result<SdeProblem> {
    let problem = SdeProblem::new(
        name,
        dim,
        move |_| {
            let mut f = DVector::zeros(dim);
            f[0] = c1;
            f
        },
        move |_| DMatrix::from_diagonal_element(dim, dim, c2),
    )?;
    let diff = c2 * c2 / 2.0;
    Ok(problem.with_exact_solution(move |x, t| {
        let denom = 4.0 * diff * t;
        let mut r2 = (x[0] - c1 * t).powi(2);
        for xi in &x[1..] {
            r2 += xi * xi;
        }
        (1.0 / (PI * denom)).powf(dim as f64 / 2.0) * (-r2 / denom).exp()
    }))
}

fn erf_drift(name: &str, dim: usize) -> Result<SdeProblem> {
    SdeProblem::new(
        name,
        dim,
        |x| DVector::from_iterator(x.len(), x.iter().map(|&xi| 2.0 * erf(10.0 * xi))),
        move |_| DMatrix::from_diagonal_element(dim, dim, 0.75),
    )
}

/// Error function (rational approximation, ~1 ulp).
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Mean and covariance of the one-step Euler–Maruyama transition from `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

pub fn kernel_params(problem: &SdeProblem, y: &[f64], h: f64) -> KernelParams {
    let f = problem.drift(y);
    let g = problem.diffusion(y);
    let mean = DVector::from_column_slice(y) + f * h;
    let cov = (&g * g.transpose()) * h;
    KernelParams { mean, cov }
}

/// `G(x; mean, cov)`, the multivariate normal density.
pub fn kernel_eval(params: &KernelParams, x: &[f64]) -> Result<f64> {
    Ok(params.factor()?.density(x))
}

impl KernelParams {
    pub fn factor(&self) -> Result<FactoredKernel> {
        FactoredKernel::new(self.mean.as_slice(), &self.cov)
    }
}

/// A normal density with its covariance Cholesky factor cached, for repeated
/// evaluation in the per-point update loops.
#[derive(Debug, Clone)]
pub struct FactoredKernel {
    dim: usize,
    mean: [f64; MAX_DIM],
    /// Row-major lower-triangular factor of the covariance.
    chol: [f64; MAX_DIM * MAX_DIM],
    log_norm: f64,
}

impl FactoredKernel {
    pub fn new(mean: &[f64], cov: &DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        if dim == 0 || dim > MAX_DIM || cov.nrows() != dim || cov.ncols() != dim {
            return Err(DtqError::InvalidKernel);
        }
        if !cov.iter().all(|v| v.is_finite()) || (cov - cov.transpose()).amax() > 1e-12 * cov.amax()
        {
            return Err(DtqError::InvalidKernel);
        }
        let l = cov
            .clone()
            .cholesky()
            .ok_or(DtqError::InvalidKernel)?
            .unpack();
        let mut chol = [0.0; MAX_DIM * MAX_DIM];
        let mut log_det = 0.0;
        for i in 0..dim {
            for j in 0..=i {
                chol[i * MAX_DIM + j] = l[(i, j)];
            }
            if l[(i, i)] <= 0.0 {
                return Err(DtqError::InvalidKernel);
            }
            log_det += 2.0 * l[(i, i)].ln();
        }
        let mut m = [0.0; MAX_DIM];
        m[..dim].copy_from_slice(mean);
        Ok(Self {
            dim,
            mean: m,
            chol,
            log_norm: -0.5 * (dim as f64 * (2.0 * PI).ln() + log_det),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean[..self.dim]
    }

    /// Lower Cholesky factor entry `(i, j)` of the covariance.
    pub fn chol(&self, i: usize, j: usize) -> f64 {
        self.chol[i * MAX_DIM + j]
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut z = [0.0; MAX_DIM];
        let mut q = 0.0;
        for i in 0..self.dim {
            let mut s = x[i] - self.mean[i];
            for j in 0..i {
                s -= self.chol[i * MAX_DIM + j] * z[j];
            }
            z[i] = s / self.chol[i * MAX_DIM + i];
            q += z[i] * z[i];
        }
        self.log_norm - 0.5 * q
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    /// Maps a standard-normal coordinate to `mean + L zeta`.
    pub fn map_from_standard(&self, zeta: &[f64], out: &mut [f64]) {
        for i in 0..self.dim {
            let mut s = self.mean[i];
            for j in 0..=i {
                s += self.chol[i * MAX_DIM + j] * zeta[j];
            }
            out[i] = s;
        }
    }
}
