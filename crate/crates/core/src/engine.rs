//! Adaptive time stepper: per-point Laplace-weighted Leja quadrature with node
//! reuse and a kernel-weighted fallback, on a mesh that grows and shrinks with
//! the density.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::sync::OnceLock;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{
    graded_multi_indices, interpolatory_weights, leja_select, standard_leja_nodes,
    total_degree_count, MultiIndexSet,
};
use crate::diagnostics::{error_norms, reuse_and_alt_averages, ErrorReport, MethodCounts};
use crate::error::{DtqError, Result};
use crate::laplace::{fit_log_quadratic, to_gaussian, GaussianWeight};
use crate::mesh::{
    add_boundary_points, initial_mesh, mesh_boundary, remove_low_density_points, Mesh, PointId,
    Triangulation,
};
use crate::sde::{kernel_params, FactoredKernel, SdeProblem};
use crate::MAX_DIM;

/// Solver parameters.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub problem: SdeProblem,
    pub h: f64,
    pub end_time: f64,
    pub beta: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub radius: f64,
    pub epsilon: f64,
    pub cond_alt: f64,
    pub lp_q: usize,
    pub laplace_nn: usize,
    pub candidate_size: usize,
    pub step_ac: usize,
    pub step_a: usize,
    pub step_rc: usize,
    pub step_r: usize,
}

/// Per-dimension defaults for the quadrature and scheduling parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Defaults {
    pub epsilon: f64,
    pub cond_alt: f64,
    pub lp_q: usize,
    pub laplace_nn: usize,
    pub candidate_size: usize,
    pub step_ac: usize,
    pub step_a: usize,
    pub step_rc: usize,
    pub step_r: usize,
}

impl Defaults {
    pub fn for_dim(dim: usize) -> Self {
        let (lp_q, laplace_nn, candidate_size) = match dim {
            1 => (6, 20, 50),
            2 => (10, 20, 150),
            3 => (15, 150, 150),
            4 => (15, 200, 250),
            5 => (40, 300, 450),
            _ => {
                let q = total_degree_count(dim, 2).max(40);
                (q, 300.max(2 * q), 450.max(10 * q))
            }
        };
        Self {
            epsilon: 0.1,
            cond_alt: 5.0,
            lp_q,
            laplace_nn,
            candidate_size,
            step_ac: 1,
            step_a: 1,
            step_rc: 10,
            step_r: 10,
        }
    }
}

impl SolverConfig {
    /// Configuration with the per-dimension defaults filled in.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        problem: SdeProblem,
        h: f64,
        end_time: f64,
        beta: f64,
        delta_min: f64,
        delta_max: f64,
        radius: f64,
    ) -> Self {
        let d = Defaults::for_dim(problem.dim());
        Self {
            problem,
            h,
            end_time,
            beta,
            delta_min,
            delta_max,
            radius,
            epsilon: d.epsilon,
            cond_alt: d.cond_alt,
            lp_q: d.lp_q,
            laplace_nn: d.laplace_nn,
            candidate_size: d.candidate_size,
            step_ac: d.step_ac,
            step_a: d.step_a,
            step_rc: d.step_rc,
            step_r: d.step_r,
        }
    }

    pub fn dim(&self) -> usize {
        self.problem.dim()
    }

    /// Every violated constraint, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let positive = [
            ("h", self.h),
            ("end_time", self.end_time),
            ("beta", self.beta),
            ("delta_min", self.delta_min),
            ("delta_max", self.delta_max),
            ("radius", self.radius),
            ("epsilon", self.epsilon),
            ("cond_alt", self.cond_alt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("{name} must be positive and finite (got {v})"));
            }
        }
        let counts = [
            ("lp_q", self.lp_q),
            ("laplace_nn", self.laplace_nn),
            ("candidate_size", self.candidate_size),
            ("step_ac", self.step_ac),
            ("step_a", self.step_a),
            ("step_rc", self.step_rc),
            ("step_r", self.step_r),
        ];
        for (name, v) in counts {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        let quad = total_degree_count(self.dim(), 2);
        if self.lp_q < quad {
            out.push(format!(
                "lp_q = {} is below {quad}, the number of quadratic monomials in {} dimensions",
                self.lp_q,
                self.dim()
            ));
        }
        if self.laplace_nn < quad {
            out.push(format!("laplace_nn = {} is below {quad}", self.laplace_nn));
        }
        if self.candidate_size < self.lp_q {
            out.push(format!(
                "candidate_size = {} is below lp_q = {}",
                self.candidate_size, self.lp_q
            ));
        }
        if self.delta_max < self.delta_min {
            out.push(format!(
                "delta_max = {} is below delta_min = {}",
                self.delta_max, self.delta_min
            ));
        }
        if self.cond_alt < 1.0 {
            out.push(format!("cond_alt = {} is below 1", self.cond_alt));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(DtqError::Validation(v))
        }
    }

    /// Number of steps to reach `end_time` (at least one).
    pub fn num_steps(&self) -> usize {
        ((self.end_time / self.h - 1e-9).ceil() as usize).max(1)
    }

    fn adds_at(&self, n: usize) -> bool {
        n >= self.step_ac && (n - self.step_ac).is_multiple_of(self.step_a)
    }

    fn removes_at(&self, n: usize) -> bool {
        n >= self.step_rc && (n - self.step_rc).is_multiple_of(self.step_r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Reuse,
    Fresh,
    Alt,
}

/// Counters for one swept step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub time: f64,
    pub mesh_size: usize,
    pub reuse: usize,
    pub fresh: usize,
    pub alt: usize,
    pub added: usize,
    pub removed: usize,
    pub wall_seconds: f64,
}

impl MethodCounts for StepStats {
    fn step_index(&self) -> usize {
        self.step
    }
    fn mesh_size(&self) -> usize {
        self.mesh_size
    }
    fn reuse_count(&self) -> usize {
        self.reuse
    }
    fn alt_count(&self) -> usize {
        self.alt
    }
}

/// Quadrature nodes remembered for a point between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub nodes: Vec<PointId>,
    pub reuse: bool,
}

/// Fixed nodes and weights of the fallback rule in standard coordinates.
#[derive(Debug)]
struct AltRule {
    zeta: Vec<f64>,
    weights: Vec<f64>,
    zeta_sq: Vec<f64>,
}

impl AltRule {
    fn new(dim: usize, idx: &MultiIndexSet) -> Result<Self> {
        let zeta = standard_leja_nodes(dim, idx.len()).as_ref().clone();
        let (weights, _) = interpolatory_weights(&zeta, idx)?;
        let zeta_sq = zeta
            .chunks_exact(dim)
            .map(|z| z.iter().map(|v| v * v).sum())
            .collect();
        Ok(Self {
            zeta,
            weights,
            zeta_sq,
        })
    }
}

/// Direct first step from a point mass at the origin: `p(y, h) = G(y, 0)`.
pub fn first_step(mesh: &Mesh, problem: &SdeProblem, h: f64) -> Result<Vec<f64>> {
    let origin = vec![0.0; problem.dim()];
    let kernel = kernel_params(problem, &origin, h).factor()?;
    Ok((0..mesh.len())
        .map(|s| kernel.density(mesh.point(s)))
        .collect())
}

/// Result of updating one point.
#[derive(Debug, Clone)]
pub struct PointUpdate {
    pub density: f64,
    pub method: Method,
    pub cache: Option<CacheEntry>,
}

/// Read-only data shared by all point updates of one sweep.
pub struct Sweep<'a> {
    cfg: &'a SolverConfig,
    mesh: &'a Mesh,
    idx: &'a MultiIndexSet,
    alt: &'a AltRule,
    kernels: Vec<FactoredKernel>,
    log_density: Vec<f64>,
    min_density: f64,
    tri: OnceLock<Option<Triangulation>>,
    sorted: OnceLock<Vec<usize>>,
}

impl<'a> Sweep<'a> {
    fn new(
        cfg: &'a SolverConfig,
        mesh: &'a Mesh,
        idx: &'a MultiIndexSet,
        alt: &'a AltRule,
    ) -> Result<Self> {
        let kernels = (0..mesh.len())
            .into_par_iter()
            .map(|s| kernel_params(&cfg.problem, mesh.point(s), cfg.h).factor())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            mesh,
            idx,
            alt,
            kernels,
            log_density: mesh.densities().iter().map(|p| p.ln()).collect(),
            min_density: mesh.min_density(),
            tri: OnceLock::new(),
            sorted: OnceLock::new(),
        })
    }

    /// `log(G(y_j, eta_i) p(eta_i))` for mesh slot `i`.
    fn log_integrand(&self, y: &[f64], i: usize) -> f64 {
        self.kernels[i].log_density(y) + self.log_density[i]
    }

    /// Gaussian weight from a quadratic fit of the negative log-integrand over
    /// `nodes`, or `None` when the fit or its completion fails.
    fn laplace_weight(&self, y: &[f64], nodes: &[usize]) -> Option<GaussianWeight> {
        let mut pts = Vec::with_capacity(nodes.len());
        let mut psi = Vec::with_capacity(nodes.len());
        for &i in nodes {
            let x = self.mesh.point(i);
            pts.push(x.iter().zip(y).map(|(a, b)| a - b).collect::<Vec<f64>>());
            psi.push(-self.log_integrand(y, i));
        }
        let fit = fit_log_quadratic(&pts, &psi).ok()?;
        let mut w = to_gaussian(&fit).ok()?;
        for (m, &c) in w.mu.iter_mut().zip(y) {
            *m += c;
        }
        Some(w)
    }

    /// Quadrature rule for `nodes` under `w`: weights and condition number.
    fn rule(&self, w: &GaussianWeight, nodes: &[usize]) -> Option<(Vec<f64>, f64)> {
        let zeta: Vec<f64> = nodes
            .iter()
            .flat_map(|&i| w.to_standard(self.mesh.point(i)))
            .collect();
        interpolatory_weights(&zeta, self.idx).ok()
    }

    /// `sum_i w_i G p / N` over mesh nodes, evaluated with a common shift.
    fn apply(&self, y: &[f64], w: &GaussianWeight, nodes: &[usize], weights: &[f64]) -> f64 {
        let logs: Vec<f64> = nodes
            .iter()
            .map(|&i| self.log_integrand(y, i) - w.log_weight(self.mesh.point(i)))
            .collect();
        shifted_sum(&logs, weights)
    }

    /// Runs the reuse, fresh-Leja and fallback stages for mesh slot `j`.
    pub fn update_point(&self, j: usize, cached: Option<&CacheEntry>) -> Result<PointUpdate> {
        let y = self.mesh.point(j);
        let cached_slots: Option<Vec<usize>> = cached.and_then(|c| {
            c.nodes
                .iter()
                .map(|&id| self.mesh.slot_of(id))
                .collect::<Option<Vec<_>>>()
        });
        let fit_nodes: Vec<usize> = match &cached_slots {
            Some(s) => s.clone(),
            None => self
                .mesh
                .nearest_slots(y, self.cfg.laplace_nn)
                .into_iter()
                .map(|p| p.0)
                .collect(),
        };
        let Some(weight) = self.laplace_weight(y, &fit_nodes) else {
            return self.alternative(j).map(alt_result);
        };

        let threshold = 1.0 + self.cfg.epsilon;
        if let (Some(slots), Some(entry)) = (&cached_slots, cached) {
            if entry.reuse {
                if let Some((weights, gamma)) = self.rule(&weight, slots) {
                    if gamma < threshold {
                        return Ok(PointUpdate {
                            density: self.apply(y, &weight, slots, &weights).max(0.0),
                            method: Method::Reuse,
                            cache: Some(entry.clone()),
                        });
                    }
                }
            }
        }

        let candidates: Vec<usize> = self
            .mesh
            .nearest_slots(y, self.cfg.candidate_size)
            .into_iter()
            .map(|p| p.0)
            .collect();
        let zeta: Vec<f64> = candidates
            .iter()
            .flat_map(|&i| weight.to_standard(self.mesh.point(i)))
            .collect();
        if let Ok(picks) = leja_select(&zeta, self.idx, self.cfg.lp_q) {
            let nodes: Vec<usize> = picks.iter().map(|&p| candidates[p]).collect();
            let node_zeta: Vec<f64> = picks
                .iter()
                .flat_map(|&p| zeta[p * y.len()..(p + 1) * y.len()].iter().copied())
                .collect();
            if let Ok((weights, gamma)) = interpolatory_weights(&node_zeta, self.idx) {
                if gamma <= self.cfg.cond_alt {
                    return Ok(PointUpdate {
                        density: self.apply(y, &weight, &nodes, &weights).max(0.0),
                        method: Method::Fresh,
                        cache: Some(CacheEntry {
                            nodes: nodes.iter().map(|&i| self.mesh.ids()[i]).collect(),
                            reuse: gamma < threshold,
                        }),
                    });
                }
            }
        }
        self.alternative(j).map(alt_result)
    }

    /// Fallback update with the transition-kernel weight centred at
    /// `y + h f(y)` and interpolated densities at off-mesh nodes.
    pub fn alternative(&self, j: usize) -> Result<f64> {
        let y = self.mesh.point(j);
        let dim = y.len();
        let kj = &self.kernels[j];
        let log_det_l: f64 = (0..dim).map(|i| kj.chol(i, i).ln()).sum();
        let log_norm = -0.5 * dim as f64 * PI.ln() - log_det_l;
        let mut eta = [0.0; MAX_DIM];
        let mut logs = Vec::with_capacity(self.alt.weights.len());
        for (k, z) in self.alt.zeta.chunks_exact(dim).enumerate() {
            kj.map_from_standard(z, &mut eta[..dim]);
            let x = &eta[..dim];
            let p = self.interpolate(x, j);
            if p <= 0.0 {
                logs.push(f64::NEG_INFINITY);
                continue;
            }
            let g = kernel_params(&self.cfg.problem, x, self.cfg.h).factor()?;
            let log_weight = log_norm - self.alt.zeta_sq[k];
            logs.push(g.log_density(y) + p.ln() - log_weight);
        }
        Ok(shifted_sum(&logs, &self.alt.weights).max(0.0))
    }

    /// Density at an off-mesh location; the minimum mesh density outside the
    /// mesh.
    fn interpolate(&self, x: &[f64], hint: usize) -> f64 {
        let mesh = self.mesh;
        let dens = mesh.densities();
        match mesh.dim() {
            1 => {
                let sorted = self.sorted.get_or_init(|| {
                    let mut s: Vec<usize> = (0..mesh.len()).collect();
                    s.sort_by(|&a, &b| mesh.point(a)[0].total_cmp(&mesh.point(b)[0]));
                    s
                });
                let xs = |k: usize| mesh.point(sorted[k])[0];
                let n = sorted.len();
                if n == 0 || x[0] < xs(0) || x[0] > xs(n - 1) {
                    return self.min_density;
                }
                let k = sorted.partition_point(|&s| mesh.point(s)[0] <= x[0]);
                if k == n {
                    return dens[sorted[n - 1]];
                }
                let (a, b) = (k - 1, k);
                let t = (x[0] - xs(a)) / (xs(b) - xs(a));
                (1.0 - t) * dens[sorted[a]] + t * dens[sorted[b]]
            }
            2 | 3 => {
                let tri = self.tri.get_or_init(|| mesh.triangulate().ok());
                match tri {
                    Some(tri) => match tri.locate(x, Some(hint)) {
                        Some((vs, bary)) => vs
                            .iter()
                            .zip(&bary)
                            .map(|(&v, &b)| b.max(0.0) * dens[v])
                            .sum(),
                        None => self.min_density,
                    },
                    None => self.inverse_distance(x),
                }
            }
            _ => self.inverse_distance(x),
        }
    }

    fn inverse_distance(&self, x: &[f64]) -> f64 {
        let near = self.mesh.nearest_slots(x, self.cfg.laplace_nn);
        let dens = self.mesh.densities();
        match near.first() {
            None => self.min_density,
            Some(&(s, d2)) if d2 == 0.0 => dens[s],
            Some(&(_, d2)) if d2.sqrt() > self.cfg.delta_max => self.min_density,
            _ => {
                let (num, den) = near.iter().fold((0.0, 0.0), |(n, d), &(s, d2)| {
                    (n + dens[s] / d2, d + 1.0 / d2)
                });
                num / den
            }
        }
    }
}

fn alt_result(density: f64) -> PointUpdate {
    PointUpdate {
        density,
        method: Method::Alt,
        cache: None,
    }
}

/// `sum_i w_i exp(l_i)` with the largest exponent factored out.
fn shifted_sum(logs: &[f64], weights: &[f64]) -> f64 {
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return 0.0;
    }
    let s: f64 = logs
        .iter()
        .zip(weights)
        .map(|(&l, &w)| w * (l - m).exp())
        .sum();
    s * m.exp()
}

/// Solver state: mesh with densities at the current time plus node caches.
pub struct Solver {
    config: SolverConfig,
    mesh: Mesh,
    cache: HashMap<PointId, CacheEntry>,
    step: usize,
    stats: Vec<StepStats>,
    idx: MultiIndexSet,
    alt: AltRule,
    peak_mesh_size: usize,
}

impl Solver {
    /// Validates the configuration, builds the initial mesh and takes the
    /// direct first step.
    pub fn new(config: SolverConfig) -> Result<Self> {
        config.validate()?;
        let mesh = initial_mesh(config.dim(), config.delta_min, config.radius);
        Self::with_mesh(config, mesh)
    }

    /// Like [`Solver::new`] but starting from the given point set.
    pub fn with_mesh(config: SolverConfig, mut mesh: Mesh) -> Result<Self> {
        config.validate()?;
        let dens = first_step(&mesh, &config.problem, config.h)?;
        mesh.set_densities(dens);
        let idx = graded_multi_indices(config.dim(), config.lp_q);
        let alt = AltRule::new(config.dim(), &idx)?;
        let peak_mesh_size = mesh.len();
        Ok(Self {
            config,
            mesh,
            cache: HashMap::new(),
            step: 1,
            stats: Vec::new(),
            idx,
            alt,
            peak_mesh_size,
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    /// Index of the last completed step (1 after construction).
    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.config.h
    }

    pub fn stats(&self) -> &[StepStats] {
        &self.stats
    }

    pub fn peak_mesh_size(&self) -> usize {
        self.peak_mesh_size
    }

    pub fn cache(&self) -> &HashMap<PointId, CacheEntry> {
        &self.cache
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.num_steps()
    }

    /// Replaces the current densities (slot order).
    pub fn set_densities(&mut self, values: Vec<f64>) {
        self.mesh.set_densities(values);
    }

    /// Read-only sweep context over the current mesh.
    pub fn sweep(&self) -> Result<Sweep<'_>> {
        Sweep::new(&self.config, &self.mesh, &self.idx, &self.alt)
    }

    /// Adapts the mesh as scheduled and advances all densities by one step.
    pub fn advance(&mut self) -> Result<&StepStats> {
        let started = Instant::now();
        let n = self.step + 1;
        let cfg = &self.config;
        let mut added = 0;
        let mut removed = 0;
        if cfg.adds_at(n) {
            let alpha_hat = 1.5 * cfg.delta_max;
            let boundary = match mesh_boundary(&self.mesh, alpha_hat) {
                Ok(b) => b,
                Err(DtqError::DegenerateGeometry(_)) => self.mesh.ids().to_vec(),
                Err(e) => return Err(e),
            };
            added = add_boundary_points(
                &mut self.mesh,
                &boundary,
                cfg.beta,
                cfg.delta_min,
                cfg.delta_max,
            )
            .len();
        }
        if cfg.removes_at(n) {
            let gone: HashSet<PointId> = remove_low_density_points(&mut self.mesh, cfg.beta)?
                .into_iter()
                .collect();
            removed = gone.len();
            if !gone.is_empty() {
                self.cache.retain(|id, e| {
                    !gone.contains(id) && !e.nodes.iter().any(|n| gone.contains(n))
                });
            }
        }
        self.peak_mesh_size = self.peak_mesh_size.max(self.mesh.len());

        let sweep = Sweep::new(&self.config, &self.mesh, &self.idx, &self.alt)?;
        let ids = self.mesh.ids();
        let cache = &self.cache;
        let updates: Vec<PointUpdate> = (0..self.mesh.len())
            .into_par_iter()
            .map(|j| sweep.update_point(j, cache.get(&ids[j])))
            .collect::<Result<_>>()?;
        drop(sweep);

        let mut stats = StepStats {
            step: n,
            time: n as f64 * self.config.h,
            mesh_size: self.mesh.len(),
            reuse: 0,
            fresh: 0,
            alt: 0,
            added,
            removed,
            wall_seconds: 0.0,
        };
        let mut new_cache = HashMap::with_capacity(updates.len());
        let mut dens = Vec::with_capacity(updates.len());
        for (j, u) in updates.into_iter().enumerate() {
            match u.method {
                Method::Reuse => stats.reuse += 1,
                Method::Fresh => stats.fresh += 1,
                Method::Alt => stats.alt += 1,
            }
            if let Some(c) = u.cache {
                new_cache.insert(self.mesh.ids()[j], c);
            }
            dens.push(u.density);
        }
        self.mesh.set_densities(dens);
        self.cache = new_cache;
        self.step = n;
        stats.wall_seconds = started.elapsed().as_secs_f64();
        self.stats.push(stats);
        Ok(self.stats.last().unwrap())
    }

    /// Error norms against the exact solution at the current time, if known.
    pub fn exact_errors(&self) -> Result<Option<ErrorReport>> {
        if !self.config.problem.has_exact_solution() {
            return Ok(None);
        }
        let t = self.time();
        let exact = (0..self.mesh.len())
            .map(|s| self.config.problem.exact_density(self.mesh.point(s), t))
            .collect::<Result<Vec<_>>>()?;
        error_norms(&exact, self.mesh.densities(), t).map(Some)
    }

    pub fn averages(&self) -> (Option<f64>, Option<f64>) {
        reuse_and_alt_averages(&self.stats)
    }
}

/// Final state of a completed run.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub steps: Vec<StepStats>,
    pub final_time: f64,
    pub errors_final: Option<ErrorReport>,
    pub avg_leja_reuse_pct: Option<f64>,
    pub avg_alt_pct: Option<f64>,
    pub peak_mesh_size: usize,
}

impl Solver {
    pub fn summary(&self) -> Result<RunSummary> {
        let (reuse, alt) = self.averages();
        Ok(RunSummary {
            steps: self.stats.clone(),
            final_time: self.time(),
            errors_final: self.exact_errors()?,
            avg_leja_reuse_pct: reuse,
            avg_alt_pct: alt,
            peak_mesh_size: self.peak_mesh_size,
        })
    }
}

/// Runs to `end_time`, calling `observe` after the first step and after every
/// later step.
pub fn run(
    config: SolverConfig,
    mut observe: impl FnMut(&Solver) -> Result<()>,
) -> Result<(Solver, RunSummary)> {
    let mut solver = Solver::new(config)?;
    observe(&solver)?;
    while !solver.is_finished() {
        solver.advance()?;
        observe(&solver)?;
    }
    let summary = solver.summary()?;
    Ok((solver, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::builtin_problem;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn const1d_config() -> SolverConfig {
        SolverConfig::new(
            builtin_problem("const1d").unwrap(),
            0.05,
            1.0,
            4.0,
            0.4,
            0.4,
            2.0,
        )
    }

    #[test]
    fn defaults_by_dimension() {
        let d2 = Defaults::for_dim(2);
        assert_eq!(
            (
                d2.epsilon,
                d2.cond_alt,
                d2.lp_q,
                d2.candidate_size,
                d2.step_rc
            ),
            (0.1, 5.0, 10, 150, 10)
        );
        let d5 = Defaults::for_dim(5);
        assert_eq!((d5.lp_q, d5.candidate_size), (40, 450));
        for dim in 1..=MAX_DIM {
            let d = Defaults::for_dim(dim);
            assert!(d.lp_q >= total_degree_count(dim, 2));
            assert!(d.candidate_size >= d.lp_q && d.laplace_nn >= total_degree_count(dim, 2));
        }
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut c = SolverConfig::new(
            builtin_problem("movinghill2d").unwrap(),
            0.01,
            1.0,
            4.0,
            0.2,
            0.2,
            2.0,
        );
        assert!(c.validate().is_ok());
        c.lp_q = 3;
        c.h = -1.0;
        match c.validate() {
            Err(DtqError::Validation(v)) => {
                assert_eq!(v.len(), 2, "{v:?}");
                assert!(v.iter().any(|m| m.contains("lp_q")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schedule() {
        let c = const1d_config();
        let adds: Vec<usize> = (1..25).filter(|&n| c.adds_at(n)).collect();
        assert_eq!(adds, (1..25).collect::<Vec<_>>());
        let removes: Vec<usize> = (1..35).filter(|&n| c.removes_at(n)).collect();
        assert_eq!(removes, vec![10, 20, 30]);
        let mut c3 = c.clone();
        c3.step_a = 3;
        let adds: Vec<usize> = (1..12).filter(|&n| c3.adds_at(n)).collect();
        assert_eq!(adds, vec![1, 4, 7, 10]);
        assert_eq!(c.num_steps(), 20);
        let mut short = c.clone();
        short.end_time = 0.01;
        assert_eq!(short.num_steps(), 1);
    }

    #[test]
    fn first_step_values() {
        let c = const1d_config();
        let mut m = Mesh::new(1, 0.4);
        m.push(&[0.1], 0.0);
        m.push(&[40.0], 0.0);
        let d = first_step(&m, &c.problem, 0.05).unwrap();
        assert_relative_eq!(d[0], 1.784124116152771, max_relative = 1e-12);
        assert_eq!(d[1], 0.0);

        let p = builtin_problem("movinghill2d").unwrap();
        let mesh = initial_mesh(2, 0.02, 1.0);
        let d = first_step(&mesh, &p, 0.01).unwrap();
        let mass: f64 = d.iter().sum::<f64>() * 0.02 * 0.02;
        assert!((mass - 1.0).abs() < 0.05, "{mass}");
    }

    #[test]
    fn end_time_below_h_is_first_step_only() {
        let mut c = const1d_config();
        c.end_time = 0.01;
        let (solver, summary) = run(c.clone(), |_| Ok(())).unwrap();
        assert_eq!(solver.step_index(), 1);
        assert!(summary.steps.is_empty());
        let expected = first_step(solver.mesh(), &c.problem, c.h).unwrap();
        assert_eq!(solver.mesh().densities(), expected.as_slice());
    }

    /// Pure diffusion with the exact density at t_n on a fine mesh reproduces
    /// the exact density at t_{n+1} at the peak.
    #[test]
    fn heat_kernel_step() {
        let problem = SdeProblem::new(
            "heat",
            1,
            |_| DVector::zeros(1),
            |_| DMatrix::identity(1, 1),
        )
        .unwrap()
        .with_exact_solution(|x, t| (-x[0] * x[0] / (2.0 * t)).exp() / (2.0 * PI * t).sqrt());
        let mut c = SolverConfig::new(problem.clone(), 0.05, 1.0, 6.0, 0.05, 0.05, 4.0);
        c.step_ac = 1000;
        c.step_rc = 1000;
        let mut solver = Solver::new(c).unwrap();
        let t = 0.5;
        let exact: Vec<f64> = (0..solver.mesh().len())
            .map(|s| problem.exact_density(solver.mesh().point(s), t).unwrap())
            .collect();
        solver.set_densities(exact);
        let sweep = solver.sweep().unwrap();
        let origin = solver.mesh().nearest_slots(&[0.0], 1)[0].0;
        let u = sweep.update_point(origin, None).unwrap();
        let want = problem.exact_density(&[0.0], t + 0.05).unwrap();
        assert!(
            ((u.density - want) / want).abs() < 1e-3,
            "{} vs {want}",
            u.density
        );
        assert_eq!(u.method, Method::Fresh);
    }

    /// A Gaussian integrand makes `r` constant, so the update equals the
    /// completed-square constant exactly.
    #[test]
    fn gaussian_integrand_is_integrated_exactly() {
        let problem = SdeProblem::new(
            "drift",
            2,
            |_| DVector::from_vec(vec![0.5, -0.3]),
            |_| DMatrix::from_row_slice(2, 2, &[0.8, 0.1, 0.1, 0.6]),
        )
        .unwrap();
        let h = 0.05;
        let c = SolverConfig::new(problem.clone(), h, 1.0, 4.0, 0.1, 0.1, 1.5);
        let mut solver = Solver::new(c).unwrap();
        // density: N(0, 0.2 I) in standard convention
        let dens: Vec<f64> = (0..solver.mesh().len())
            .map(|s| {
                let x = solver.mesh().point(s);
                (-(x[0] * x[0] + x[1] * x[1]) / 0.4).exp() / (2.0 * PI * 0.2)
            })
            .collect();
        solver.set_densities(dens);
        let sweep = solver.sweep().unwrap();
        let j = solver.mesh().nearest_slots(&[0.2, 0.1], 1)[0].0;
        let y = solver.mesh().point(j).to_vec();
        let u = sweep.update_point(j, None).unwrap();
        // exact: N(y; f h, 0.2 I + h g g^T)
        let g = DMatrix::from_row_slice(2, 2, &[0.8, 0.1, 0.1, 0.6]);
        let cov = DMatrix::identity(2, 2) * 0.2 + &g * g.transpose() * h;
        let mean = [0.5 * h, -0.3 * h];
        let want = crate::sde::FactoredKernel::new(&mean, &cov)
            .unwrap()
            .density(&y);
        assert!(
            ((u.density - want) / want).abs() < 1e-9,
            "{} vs {want}",
            u.density
        );
    }

    #[test]
    fn counts_partition_the_mesh_and_reuse_dominates() {
        let mut c = const1d_config();
        c.end_time = 0.5;
        let (solver, summary) = run(c, |_| Ok(())).unwrap();
        for s in &summary.steps {
            assert_eq!(s.reuse + s.fresh + s.alt, s.mesh_size);
        }
        assert!(solver.mesh().densities().iter().all(|&p| p >= 0.0));
        let (reuse, _) = solver.averages();
        assert!(reuse.unwrap() > 80.0, "{reuse:?}");
    }

    #[test]
    fn jacobi_sweep_is_order_independent() {
        let mut c = const1d_config();
        c.end_time = 0.3;
        let (solver, _) = run(c, |_| Ok(())).unwrap();
        let sweep = solver.sweep().unwrap();
        let n = solver.mesh().len();
        let ids = solver.mesh().ids();
        let forward: Vec<f64> = (0..n)
            .map(|j| {
                sweep
                    .update_point(j, solver.cache().get(&ids[j]))
                    .unwrap()
                    .density
            })
            .collect();
        let backward: Vec<f64> = (0..n)
            .rev()
            .map(|j| {
                sweep
                    .update_point(j, solver.cache().get(&ids[j]))
                    .unwrap()
                    .density
            })
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        assert_eq!(forward, backward);
    }

    #[test]
    fn runs_are_deterministic() {
        let mut c = SolverConfig::new(
            builtin_problem("movinghill2d").unwrap(),
            0.01,
            0.1,
            3.0,
            0.2,
            0.2,
            1.0,
        );
        c.step_rc = 5;
        c.step_r = 5;
        let (a, sa) = run(c.clone(), |_| Ok(())).unwrap();
        let (b, sb) = run(c, |_| Ok(())).unwrap();
        assert_eq!(a.mesh().densities(), b.mesh().densities());
        assert_eq!(a.mesh().ids(), b.mesh().ids());
        let strip = |s: &RunSummary| {
            s.steps
                .iter()
                .map(|x| (x.mesh_size, x.reuse, x.fresh, x.alt))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&sa), strip(&sb));
    }

    #[test]
    fn cache_never_references_removed_points() {
        let mut c = SolverConfig::new(
            builtin_problem("movinghill2d").unwrap(),
            0.01,
            0.3,
            2.0,
            0.2,
            0.2,
            2.0,
        );
        c.step_rc = 2;
        c.step_r = 2;
        let (solver, summary) = run(c, |s| {
            for (id, e) in s.cache() {
                assert!(s.mesh().slot_of(*id).is_some());
                assert!(e.nodes.iter().all(|n| s.mesh().slot_of(*n).is_some()));
            }
            Ok(())
        })
        .unwrap();
        assert!(summary.steps.iter().any(|s| s.removed > 0));
        assert!(solver.mesh().len() > 0);
    }

    #[test]
    fn alternative_far_outside_is_small_and_finite() {
        let c = const1d_config();
        let mut mesh = initial_mesh(1, 0.4, 2.0);
        mesh.push(&[30.0], 0.0);
        let mut solver = Solver::with_mesh(c, mesh).unwrap();
        let n = solver.mesh().len();
        let mut dens = solver.mesh().densities().to_vec();
        dens[n - 1] = 1e-12;
        solver.set_densities(dens);
        let sweep = solver.sweep().unwrap();
        let v = sweep.alternative(n - 1).unwrap();
        assert!(v.is_finite() && (0.0..1e-6).contains(&v), "{v}");
    }

    #[test]
    fn shifted_sum_handles_extremes() {
        assert_eq!(shifted_sum(&[f64::NEG_INFINITY; 3], &[1.0, 1.0, 1.0]), 0.0);
        assert_relative_eq!(
            shifted_sum(&[0.0, 2f64.ln()], &[0.5, 0.25]),
            1.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            shifted_sum(&[-800.0, -800.0], &[0.5, 0.5]),
            (-800f64).exp(),
            max_relative = 1e-12
        );
    }
}
