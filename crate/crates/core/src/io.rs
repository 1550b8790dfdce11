//! Run configuration, snapshot and manifest files, and run orchestration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::diagnostics::{error_norms, ErrorReport};
use crate::engine::{Defaults, Solver, SolverConfig, StepStats};
use crate::error::{DtqError, Result};
use crate::mesh::Mesh;
use crate::sde::builtin_problem;
use crate::trapezoid::{run_trapezoid, tensor_mesh_from_adaptive, TensorGrid};

/// Reference densities below this are left out of the discrepancy norms.
pub const DISCREPANCY_CUTOFF: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Adaptive,
    Trapezoid,
    Compare,
}

/// Configuration file as written by the user; absent keys take the
/// per-dimension defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub problem: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    pub h: f64,
    pub end_time: f64,
    pub beta: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub radius: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cond_alt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lp_q: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub laplace_nn: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidate_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_ac: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_a: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_rc: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_r: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub snapshot_times: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buffer: Option<f64>,
}

/// Fully resolved configuration. Serializes back to a valid config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: String,
    pub dim: usize,
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
    pub snapshot_times: Vec<f64>,
    pub output_dir: PathBuf,
    pub mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buffer: Option<f64>,
}

impl RunConfig {
    /// Fills defaults and checks every constraint, reporting all violations.
    pub fn resolve(file: ConfigFile) -> Result<Self> {
        let mut errors = Vec::new();
        let problem = builtin_problem(&file.problem)?;
        let dim = problem.dim();
        if let Some(d) = file.dim {
            if d != dim {
                errors.push(format!(
                    "dim = {d} does not match problem `{}` of dimension {dim}",
                    file.problem
                ));
            }
        }
        let d = Defaults::for_dim(dim);
        let mode = file.mode.unwrap_or_default();
        if mode == Mode::Adaptive {
            if file.kappa.is_some() {
                errors.push("kappa is only allowed in trapezoid or compare mode".into());
            }
            if file.buffer.is_some() {
                errors.push("buffer is only allowed in trapezoid or compare mode".into());
            }
        }
        if mode == Mode::Trapezoid && file.kappa.is_none() {
            errors.push("trapezoid mode needs kappa".into());
        }
        if let Some(k) = file.kappa {
            if !(k > 0.0 && k.is_finite()) {
                errors.push(format!("kappa must be positive and finite (got {k})"));
            }
        }
        if let Some(b) = file.buffer {
            if !(b >= 0.0 && b.is_finite()) {
                errors.push(format!("buffer must be nonnegative and finite (got {b})"));
            }
        }
        if file.snapshot_times.iter().any(|t| !t.is_finite()) {
            errors.push("snapshot_times must be finite".into());
        }
        let cfg = Self {
            problem: file.problem,
            dim,
            h: file.h,
            end_time: file.end_time,
            beta: file.beta,
            delta_min: file.delta_min,
            delta_max: file.delta_max,
            radius: file.radius,
            epsilon: file.epsilon.unwrap_or(d.epsilon),
            cond_alt: file.cond_alt.unwrap_or(d.cond_alt),
            lp_q: file.lp_q.unwrap_or(d.lp_q),
            laplace_nn: file.laplace_nn.unwrap_or(d.laplace_nn),
            candidate_size: file.candidate_size.unwrap_or(d.candidate_size),
            step_ac: file.step_ac.unwrap_or(d.step_ac),
            step_a: file.step_a.unwrap_or(d.step_a),
            step_rc: file.step_rc.unwrap_or(d.step_rc),
            step_r: file.step_r.unwrap_or(d.step_r),
            snapshot_times: file.snapshot_times,
            output_dir: file.output_dir.unwrap_or_else(|| PathBuf::from("out")),
            mode,
            kappa: file.kappa,
            buffer: file.buffer,
        };
        errors.extend(cfg.solver_config()?.violations());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(DtqError::Validation(errors))
        }
    }

    pub fn solver_config(&self) -> Result<SolverConfig> {
        let problem = builtin_problem(&self.problem)?;
        let mut c = SolverConfig::new(
            problem,
            self.h,
            self.end_time,
            self.beta,
            self.delta_min,
            self.delta_max,
            self.radius,
        );
        c.epsilon = self.epsilon;
        c.cond_alt = self.cond_alt;
        c.lp_q = self.lp_q;
        c.laplace_nn = self.laplace_nn;
        c.candidate_size = self.candidate_size;
        c.step_ac = self.step_ac;
        c.step_a = self.step_a;
        c.step_rc = self.step_rc;
        c.step_r = self.step_r;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Maps each snapshot time to a step index; times outside `[0, end_time]`
    /// come back as warnings.
    pub fn snapshot_steps(&self) -> (Vec<(usize, f64)>, Vec<String>) {
        let mut steps = Vec::new();
        let mut warnings = Vec::new();
        let last = ((self.end_time / self.h - 1e-9).ceil() as usize).max(1);
        for &t in &self.snapshot_times {
            if !(0.0..=self.end_time).contains(&t) {
                warnings.push(format!(
                    "snapshot time {t} is outside [0, {}], skipped",
                    self.end_time
                ));
                continue;
            }
            let n = ((t / self.h).round() as usize).clamp(1, last);
            steps.push((n, t));
        }
        (steps, warnings)
    }
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| DtqError::Config(e.to_string()))?;
    RunConfig::resolve(file)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    parse_config_str(&fs::read_to_string(path)?)
}

pub fn snapshot_file_name(t: f64) -> String {
    format!("snapshot_{t:.6}.csv")
}

fn write_rows<'a>(
    path: &Path,
    dim: usize,
    t: f64,
    rows: impl Iterator<Item = (Vec<f64>, f64)> + 'a,
) -> Result<()> {
    let mut s = String::from("t");
    for c in 1..=dim {
        let _ = write!(s, ",x{c}");
    }
    s.push_str(",p\n");
    for (x, p) in rows {
        let _ = write!(s, "{t:.16e}");
        for v in x {
            let _ = write!(s, ",{v:.16e}");
        }
        let _ = writeln!(s, ",{p:.16e}");
    }
    fs::write(path, s)?;
    Ok(())
}

/// Writes the mesh as CSV rows in point-id order.
pub fn write_snapshot(mesh: &Mesh, t: f64, path: &Path) -> Result<()> {
    let rows = (0..mesh.len()).map(|s| (mesh.point(s).to_vec(), mesh.densities()[s]));
    write_rows(path, mesh.dim(), t, rows)
}

/// Writes grid values as CSV rows in row-major order.
pub fn write_grid_snapshot(grid: &TensorGrid, values: &[f64], t: f64, path: &Path) -> Result<()> {
    let rows = (0..grid.len()).map(|k| (grid.point(k), values[k]));
    write_rows(path, grid.dim(), t, rows)
}

/// Parsed snapshot: time, flattened coordinates and densities.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub dim: usize,
    pub coords: Vec<f64>,
    pub densities: Vec<f64>,
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| DtqError::Config("empty snapshot".into()))?;
    let dim = header.split(',').count().saturating_sub(2);
    let bad = |l: &str| DtqError::Config(format!("bad snapshot row `{l}`"));
    let mut snap = Snapshot {
        time: 0.0,
        dim,
        coords: Vec::new(),
        densities: Vec::new(),
    };
    for line in lines {
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(line))?;
        if vals.len() != dim + 2 {
            return Err(bad(line));
        }
        snap.time = vals[0];
        snap.coords.extend_from_slice(&vals[1..=dim]);
        snap.densities.push(vals[dim + 1]);
    }
    Ok(snap)
}

/// Baseline run attached to a compare manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReferenceBlock {
    pub kappa: f64,
    pub buffer: f64,
    pub grid_size: usize,
    pub grid_lower: Vec<f64>,
    pub grid_upper: Vec<f64>,
    pub errors_final: Option<ErrorReport>,
    pub wall_seconds: f64,
}

/// Everything recorded about a run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub config: RunConfig,
    pub started_at: f64,
    pub finished_at: f64,
    pub steps: Vec<StepStats>,
    pub errors_final: Option<ErrorReport>,
    pub avg_leja_reuse_pct: Option<f64>,
    pub avg_alt_pct: Option<f64>,
    pub peak_mesh_size: usize,
    pub wall_seconds: f64,
    pub snapshots: Vec<String>,
    pub warnings: Vec<String>,
    pub abort_reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reference: Option<ReferenceBlock>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub discrepancy: Option<ErrorReport>,
}

impl RunManifest {
    fn new(config: RunConfig) -> Self {
        Self {
            config,
            started_at: unix_now(),
            finished_at: 0.0,
            steps: Vec::new(),
            errors_final: None,
            avg_leja_reuse_pct: None,
            avg_alt_pct: None,
            peak_mesh_size: 0,
            wall_seconds: 0.0,
            snapshots: Vec::new(),
            warnings: Vec::new(),
            abort_reason: None,
            reference: None,
            discrepancy: None,
        }
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn write_manifest(manifest: &RunManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, text)?;
    Ok(())
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Norms of `computed - reference` over points where the reference exceeds
/// [`DISCREPANCY_CUTOFF`]; points outside the grid are skipped.
pub fn discrepancy(
    mesh: &Mesh,
    grid: &TensorGrid,
    reference: &[f64],
    t: f64,
) -> Result<ErrorReport> {
    let mut exact = Vec::new();
    let mut computed = Vec::new();
    for s in 0..mesh.len() {
        if let Some(r) = grid.interpolate(reference, mesh.point(s)) {
            if r > DISCREPANCY_CUTOFF {
                exact.push(r);
                computed.push(mesh.densities()[s]);
            }
        }
    }
    error_norms(&exact, &computed, t)
}

struct Extents {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Extents {
    fn new(dim: usize) -> Self {
        Self {
            lo: vec![f64::INFINITY; dim],
            hi: vec![f64::NEG_INFINITY; dim],
        }
    }

    fn include(&mut self, mesh: &Mesh) {
        for x in mesh.coords().chunks_exact(mesh.dim()) {
            for (c, &v) in x.iter().enumerate() {
                self.lo[c] = self.lo[c].min(v);
                self.hi[c] = self.hi[c].max(v);
            }
        }
    }
}

/// Runs whatever `config.mode` asks for, writing snapshots and the manifest
/// into `config.output_dir`. The manifest is written even when the run aborts;
/// the error is returned afterwards.
pub fn execute(config: &RunConfig) -> Result<RunManifest> {
    fs::create_dir_all(&config.output_dir)?;
    let started = Instant::now();
    let mut manifest = RunManifest::new(config.clone());
    let outcome = match config.mode {
        Mode::Adaptive => run_adaptive(config, &mut manifest).map(|_| ()),
        Mode::Trapezoid => run_grid(config, &mut manifest),
        Mode::Compare => run_compare(config, &mut manifest),
    };
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    manifest.finished_at = unix_now();
    if let Err(e) = &outcome {
        manifest.abort_reason = Some(e.to_string());
    }
    write_manifest(&manifest, &config.output_dir.join(MANIFEST_NAME))?;
    outcome.map(|_| manifest)
}

fn run_adaptive(config: &RunConfig, manifest: &mut RunManifest) -> Result<(Solver, Extents)> {
    let (wanted, warnings) = config.snapshot_steps();
    manifest.warnings.extend(warnings);
    let mut solver = Solver::new(config.solver_config()?)?;
    let mut extents = Extents::new(config.dim);
    let result = (|| -> Result<()> {
        loop {
            extents.include(solver.mesh());
            manifest.peak_mesh_size = solver.peak_mesh_size();
            for &(_, t) in wanted.iter().filter(|(n, _)| *n == solver.step_index()) {
                let name = snapshot_file_name(t);
                write_snapshot(solver.mesh(), t, &config.output_dir.join(&name))?;
                manifest.snapshots.push(name);
            }
            if solver.is_finished() {
                return Ok(());
            }
            solver.advance()?;
        }
    })();
    manifest.steps = solver.stats().to_vec();
    let (reuse, alt) = solver.averages();
    manifest.avg_leja_reuse_pct = reuse;
    manifest.avg_alt_pct = alt;
    result?;
    manifest.errors_final = solver.exact_errors()?;
    Ok((solver, extents))
}

fn run_grid(config: &RunConfig, manifest: &mut RunManifest) -> Result<()> {
    let kappa = config
        .kappa
        .ok_or_else(|| DtqError::Validation(vec!["trapezoid mode needs kappa".into()]))?;
    let r = config.radius;
    let grid = tensor_mesh_from_adaptive(
        &vec![-r; config.dim],
        &vec![r; config.dim],
        config.buffer.unwrap_or(0.0),
        kappa,
    );
    manifest.peak_mesh_size = grid.len();
    let (block, _) = grid_run(config, &grid, manifest, true)?;
    manifest.errors_final = block;
    Ok(())
}

/// Runs the trapezoid baseline on `grid`, optionally writing snapshots and
/// step stats into the manifest.
fn grid_run(
    config: &RunConfig,
    grid: &TensorGrid,
    manifest: &mut RunManifest,
    record: bool,
) -> Result<(Option<ErrorReport>, Vec<f64>)> {
    let (wanted, warnings) = config.snapshot_steps();
    if record {
        manifest.warnings.extend(warnings);
    }
    let problem = builtin_problem(&config.problem)?;
    let mut names = Vec::new();
    let (values, summary) = run_trapezoid(grid, &problem, config.h, config.end_time, |n, _, p| {
        if record {
            for &(_, t) in wanted.iter().filter(|(m, _)| *m == n) {
                let name = snapshot_file_name(t);
                write_grid_snapshot(grid, p, t, &config.output_dir.join(&name))?;
                names.push(name);
            }
        }
        Ok(())
    })?;
    if record {
        manifest.snapshots = names;
        manifest.steps = summary.steps;
    }
    Ok((summary.errors_final, values))
}

fn run_compare(config: &RunConfig, manifest: &mut RunManifest) -> Result<()> {
    let kappa = config
        .kappa
        .ok_or_else(|| DtqError::Validation(vec!["compare mode needs kappa".into()]))?;
    let buffer = config.buffer.unwrap_or(0.0);
    let (solver, extents) = run_adaptive(config, manifest)?;
    let grid = tensor_mesh_from_adaptive(&extents.lo, &extents.hi, buffer, kappa);
    let started = Instant::now();
    let (errors, values) = grid_run(config, &grid, manifest, false)?;
    manifest.reference = Some(ReferenceBlock {
        kappa,
        buffer,
        grid_size: grid.len(),
        grid_lower: grid.lower().to_vec(),
        grid_upper: grid.upper(),
        errors_final: errors,
        wall_seconds: started.elapsed().as_secs_f64(),
    });
    manifest.discrepancy = Some(discrepancy(solver.mesh(), &grid, &values, solver.time())?);
    Ok(())
}
