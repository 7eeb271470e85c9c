//! JSON run configuration and subcommand orchestration.
//!
//! A run is described by one JSON file; every omitted field falls back to a
//! default, and the fully resolved configuration is echoed into the output
//! directory as `resolved_config.json`, which is itself a valid input file.
//! Data files are CSV, reports are JSON, and neither contains wall-clock
//! content, so two runs of the same resolved config are byte-identical.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cellproblem::{solve_cell_problem, CellProblemError, CellSolution};
use crate::convergence::{
    compare, duality_diagnostic, CompareError, ConvergenceEntry, ConvergenceReport,
};
use crate::geometry::{
    build_perforated_grid, build_reference_cell, build_unperforated, DomainSpec, GeometryError,
    PerforatedGrid,
};
use crate::kernels::{
    build_builtin_kernels, validate_kernels, CoagulationFamily, DiffusionProfile,
    FragmentationFamily, KernelError, KernelSet,
};
use crate::macrosolver::{run_macro, HomogenizedCoefficients};
use crate::microsolver::{
    run_micro, run_zero_dimensional, BoundarySource, CellFactor, RunError, SpaceFactor,
    StepControls, TimeFactor, Trajectory,
};

pub const SCHEMA_VERSION: u64 = 1;

/// Spatial factor of the boundary source as written in the config; the
/// domain length is injected when the factor is resolved.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PsiSpace {
    One,
    Constant { value: f64 },
    SinPi { axis: usize, k: u32 },
    CosPi { axis: usize, k: u32 },
}

impl PsiSpace {
    fn resolve(&self, length: f64) -> SpaceFactor {
        match *self {
            PsiSpace::One => SpaceFactor::One,
            PsiSpace::Constant { value } => SpaceFactor::Constant { value },
            PsiSpace::SinPi { axis, k } => SpaceFactor::SinPi { axis, k, length },
            PsiSpace::CosPi { axis, k } => SpaceFactor::CosPi { axis, k, length },
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsiConfig {
    pub g: TimeFactor,
    pub p: PsiSpace,
    pub q: CellFactor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub coagulation: CoagulationFamily,
    pub fragmentation: FragmentationFamily,
    pub diffusion: DiffusionProfile,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub audit_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            cg_tol: 1e-10,
            cg_max_iter: 20_000,
            audit_tol: 1e-8,
        }
    }
}

/// Raw on-disk schema; every field optional except `version`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    version: Option<u64>,
    dim: Option<usize>,
    length: Option<f64>,
    epsilon: Option<f64>,
    epsilons: Option<Vec<f64>>,
    hole_radius: Option<f64>,
    m_cell: Option<usize>,
    h_macro: Option<f64>,
    n_max: Option<usize>,
    kernel: Option<KernelConfig>,
    initial_monomer: Option<f64>,
    psi: Option<PsiConfig>,
    t_end: Option<f64>,
    dt: Option<f64>,
    snapshot_stride: Option<usize>,
    tolerances: Option<Tolerances>,
    emit_correctors: Option<bool>,
    output_dir: Option<String>,
    seed: Option<u64>,
}

/// Fully resolved run configuration.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub version: u64,
    pub dim: usize,
    pub length: f64,
    /// Period used by the `micro` subcommand.
    pub epsilon: f64,
    /// Period sequence used by the `compare` subcommand.
    pub epsilons: Vec<f64>,
    pub hole_radius: f64,
    pub m_cell: usize,
    pub h_macro: f64,
    pub n_max: usize,
    pub kernel: KernelConfig,
    pub initial_monomer: f64,
    pub psi: PsiConfig,
    pub t_end: f64,
    pub dt: f64,
    pub snapshot_stride: usize,
    pub tolerances: Tolerances,
    pub emit_correctors: bool,
    pub output_dir: String,
    /// Seed for randomized property tests only; the solvers are
    /// deterministic and never draw random numbers.
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

impl RunConfig {
    fn from_raw(raw: RawConfig) -> Result<Self, ConfigError> {
        let mut errors = Vec::new();
        match raw.version {
            None => errors.push("version: required field is missing".to_string()),
            Some(v) if v != SCHEMA_VERSION => {
                errors.push(format!("version: expected {SCHEMA_VERSION}, got {v}"))
            }
            Some(_) => {}
        }

        let config = RunConfig {
            version: SCHEMA_VERSION,
            dim: raw.dim.unwrap_or(2),
            length: raw.length.unwrap_or(1.0),
            epsilon: raw.epsilon.unwrap_or(0.125),
            epsilons: raw.epsilons.unwrap_or_else(|| vec![0.25, 0.125, 0.0625]),
            hole_radius: raw.hole_radius.unwrap_or(0.25),
            m_cell: raw.m_cell.unwrap_or(16),
            h_macro: raw.h_macro.unwrap_or(1.0 / 64.0),
            n_max: raw.n_max.unwrap_or(32),
            kernel: raw.kernel.unwrap_or(KernelConfig {
                coagulation: CoagulationFamily::Constant { a0: 1.0 },
                fragmentation: FragmentationFamily::BinaryUniform { b: 0.5 },
                diffusion: DiffusionProfile::Uniform { d0: 1.0 },
            }),
            initial_monomer: raw.initial_monomer.unwrap_or(0.1),
            psi: raw.psi.unwrap_or(PsiConfig {
                g: TimeFactor::Linear { coef: 1.0 },
                p: PsiSpace::SinPi { axis: 0, k: 1 },
                q: CellFactor::One,
            }),
            t_end: raw.t_end.unwrap_or(0.5),
            dt: raw.dt.unwrap_or(2.5e-3),
            snapshot_stride: raw.snapshot_stride.unwrap_or(25),
            tolerances: raw.tolerances.unwrap_or_default(),
            emit_correctors: raw.emit_correctors.unwrap_or(false),
            output_dir: raw.output_dir.unwrap_or_else(|| "out".to_string()),
            seed: raw.seed.unwrap_or(0),
        };
        config.validate(&mut errors);
        if errors.is_empty() {
            Ok(config)
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    fn validate(&self, errors: &mut Vec<String>) {
        if self.dim != 2 && self.dim != 3 {
            errors.push(format!("dim: must be 2 or 3, got {}", self.dim));
        }
        if !(self.length > 0.0) {
            errors.push(format!("length: must be positive, got {}", self.length));
        }
        let conforming = |eps: f64| {
            if !(eps > 0.0 && eps < 1.0) {
                return false;
            }
            let ratio = self.length / eps;
            (ratio - ratio.round()).abs() <= 1e-9 * ratio.max(1.0) && ratio.round() >= 1.0
        };
        if !conforming(self.epsilon) {
            errors.push(format!(
                "epsilon: {} must lie in (0,1) and divide length {} exactly",
                self.epsilon, self.length
            ));
        }
        for &e in &self.epsilons {
            if !conforming(e) {
                errors.push(format!(
                    "epsilons: {e} must lie in (0,1) and divide length {} exactly",
                    self.length
                ));
            }
        }
        if !(0.0..0.5).contains(&self.hole_radius) {
            errors.push(format!(
                "hole_radius: must lie in [0, 0.5), got {}",
                self.hole_radius
            ));
        }
        if self.m_cell < 8 {
            errors.push(format!("m_cell: must be at least 8, got {}", self.m_cell));
        }
        let hm_ratio = self.length / self.h_macro;
        if !(self.h_macro > 0.0)
            || (hm_ratio - hm_ratio.round()).abs() > 1e-9 * hm_ratio.max(1.0)
            || hm_ratio.round() < 2.0
        {
            errors.push(format!(
                "h_macro: {} must divide length {} into at least 2 voxels",
                self.h_macro, self.length
            ));
        }
        if self.n_max < 1 {
            errors.push(format!("n_max: must be at least 1, got {}", self.n_max));
        }
        if let Err(e) = self.build_kernels() {
            errors.push(format!("kernel: {e}"));
        }
        if self.initial_monomer < 0.0 {
            errors.push(format!(
                "initial_monomer: must be nonnegative, got {}",
                self.initial_monomer
            ));
        }
        if self.psi.g.eval(0.0) != 0.0 {
            errors.push(
                "psi.g: boundary source must vanish at t = 0 (time factor g(0) != 0)".to_string(),
            );
        }
        if let PsiSpace::SinPi { axis, .. } | PsiSpace::CosPi { axis, .. } = self.psi.p {
            if axis >= self.dim {
                errors.push(format!(
                    "psi.p: axis {axis} out of range for dim {}",
                    self.dim
                ));
            }
        }
        if let CellFactor::CosLattice { axis, .. } | CellFactor::SinLattice { axis, .. } =
            self.psi.q
        {
            if axis >= self.dim {
                errors.push(format!(
                    "psi.q: axis {axis} out of range for dim {}",
                    self.dim
                ));
            }
        }
        if !(self.t_end > 0.0) {
            errors.push(format!("t_end: must be positive, got {}", self.t_end));
        }
        if !(self.dt > 0.0 && self.dt <= self.t_end) {
            errors.push(format!(
                "dt: must lie in (0, t_end], got {} with t_end {}",
                self.dt, self.t_end
            ));
        }
        if self.snapshot_stride < 1 {
            errors.push("snapshot_stride: must be at least 1".to_string());
        }
        if !(self.tolerances.cg_tol > 0.0) || !(self.tolerances.audit_tol > 0.0) {
            errors.push("tolerances: cg_tol and audit_tol must be positive".to_string());
        }
    }

    pub fn build_kernels(&self) -> Result<KernelSet, KernelError> {
        build_builtin_kernels(
            self.kernel.coagulation,
            self.kernel.fragmentation,
            self.n_max,
            self.kernel.diffusion.clone(),
        )
    }

    pub fn boundary_source(&self) -> BoundarySource {
        BoundarySource {
            g: self.psi.g,
            p: self.psi.p.resolve(self.length),
            q: self.psi.q,
        }
    }

    pub fn step_controls(&self) -> StepControls {
        StepControls {
            dt: self.dt,
            t_end: self.t_end,
            snapshot_stride: self.snapshot_stride,
            cg_tol: self.tolerances.cg_tol,
            cg_max_iter: self.tolerances.cg_max_iter,
            audit_tol: self.tolerances.audit_tol,
        }
    }

    pub fn domain_spec(&self, epsilon: f64) -> DomainSpec {
        DomainSpec {
            dim: self.dim,
            length: self.length,
            epsilon,
            hole_radius: self.hole_radius,
            m_cell: self.m_cell,
        }
    }

    /// Non-fatal advisories (printed unless `--quiet`).
    pub fn warnings(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        let bound = self.boundary_source().sup_bound(self.t_end);
        if self.initial_monomer > bound {
            warnings.push(format!(
                "initial_monomer {} exceeds the boundary-source bound {}; the run is \
                 well-defined but outside the standing smallness assumption",
                self.initial_monomer, bound
            ));
        }
        warnings
    }
}

/// Loads, resolves, and validates a run configuration.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let raw: RawConfig =
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    RunConfig::from_raw(raw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    ValidateKernels,
    Cell,
    Micro,
    Macro,
    Compare,
    Zerod,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("kernel construction failed: {0}")]
    Kernel(#[from] KernelError),
    #[error("geometry construction failed: {0}")]
    Geometry(#[from] GeometryError),
    #[error("cell problem failed: {0}")]
    Cell(#[from] CellProblemError),
    #[error("run failed: {0}")]
    Run(#[from] RunError),
    #[error("comparison failed: {0}")]
    Compare(#[from] CompareError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Exit codes: 2 config, 3 numerical failure, 4 non-convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_)
            | CliError::Kernel(_)
            | CliError::Geometry(_)
            | CliError::Io(_)
            | CliError::Json(_) => 2,
            CliError::Cell(_) => 4,
            CliError::Run(RunError::Solve { .. }) => 4,
            CliError::Run(_) | CliError::Compare(_) => 3,
        }
    }

    /// Machine-readable error payload for stderr.
    pub fn to_json(&self) -> String {
        let kind = match self.exit_code() {
            2 => "config",
            4 => "non_convergence",
            _ => "numerical",
        };
        serde_json::json!({ "kind": kind, "message": self.to_string() }).to_string()
    }
}

/// Runs one subcommand, writing all artifacts under `out_dir`.
pub fn orchestrate(
    command: Subcommand,
    config: &RunConfig,
    out_dir: &Path,
    quiet: bool,
) -> Result<(), CliError> {
    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join("resolved_config.json"),
        serde_json::to_string_pretty(config)? + "\n",
    )?;
    if !quiet {
        for w in config.warnings() {
            eprintln!("warning: {w}");
        }
    }

    match command {
        Subcommand::ValidateKernels => run_validate_kernels(config, out_dir),
        Subcommand::Cell => run_cell(config, out_dir, quiet).map(|_| ()),
        Subcommand::Micro => run_micro_command(config, out_dir, quiet),
        Subcommand::Macro => run_macro_command(config, out_dir, quiet),
        Subcommand::Compare => run_compare(config, out_dir, quiet),
        Subcommand::Zerod => run_zerod(config, out_dir, quiet),
    }
}

fn run_validate_kernels(config: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let kernels = config.build_kernels()?;
    let report = validate_kernels(&kernels);
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    fs::write(out_dir.join("validation_report.json"), json + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct CellReport {
    dim: usize,
    hole_radius: f64,
    m_cell: usize,
    theta: f64,
    /// Row-major `dim x dim` tensor entries.
    tensor: Vec<f64>,
    iterations: Vec<usize>,
    residuals: Vec<f64>,
}

fn tensor_rows(dim: usize, tensor: &[[f64; 3]; 3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim * dim);
    for j in 0..dim {
        for k in 0..dim {
            out.push(tensor[j][k]);
        }
    }
    out
}

fn run_cell(
    config: &RunConfig,
    out_dir: &Path,
    quiet: bool,
) -> Result<(PerforatedGrid, CellSolution), CliError> {
    let cell = build_reference_cell(config.dim, config.hole_radius, config.m_cell)?;
    let solution = solve_cell_problem(
        &cell,
        config.tolerances.cg_tol,
        config.tolerances.cg_max_iter,
    )?;
    let report = CellReport {
        dim: config.dim,
        hole_radius: config.hole_radius,
        m_cell: config.m_cell,
        theta: solution.theta,
        tensor: tensor_rows(config.dim, &solution.tensor),
        iterations: solution.iterations.clone(),
        residuals: solution.residuals.clone(),
    };
    fs::write(
        out_dir.join("cell_solution.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    if config.emit_correctors {
        let mut file = fs::File::create(out_dir.join("correctors.csv"))?;
        write_corrector_csv(&mut file, &cell, &solution)?;
    }
    if !quiet {
        println!(
            "cell: theta = {}, A11 = {}, iterations = {:?}",
            solution.theta, solution.tensor[0][0], solution.iterations
        );
    }
    Ok((cell, solution))
}

fn write_corrector_csv<W: Write>(
    out: &mut W,
    cell: &PerforatedGrid,
    solution: &CellSolution,
) -> std::io::Result<()> {
    let dim = cell.dim();
    let mut header = String::from("cell");
    for a in 0..dim {
        header.push_str(&format!(",y{a}"));
    }
    for j in 0..dim {
        header.push_str(&format!(",w_{}", j + 1));
    }
    writeln!(out, "{header}")?;
    for c in 0..cell.fluid_count() {
        let y = cell.voxel_center(cell.fluid_voxel(c));
        let mut row = format!("{c}");
        for a in 0..dim {
            row.push_str(&format!(",{}", y[a]));
        }
        for j in 0..dim {
            row.push_str(&format!(",{}", solution.correctors[j][c]));
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

fn write_snapshot_csv<W: Write>(
    out: &mut W,
    grid: &PerforatedGrid,
    fields: &[Vec<f64>],
) -> std::io::Result<()> {
    let dim = grid.dim();
    let mut header = String::from("cell");
    for a in 0..dim {
        header.push_str(&format!(",x{a}"));
    }
    for i in 1..=fields.len() {
        header.push_str(&format!(",u_{i}"));
    }
    writeln!(out, "{header}")?;
    for c in 0..grid.fluid_count() {
        let x = grid.voxel_center(grid.fluid_voxel(c));
        let mut row = format!("{c}");
        for a in 0..dim {
            row.push_str(&format!(",{}", x[a]));
        }
        for field in fields {
            row.push_str(&format!(",{}", field[c]));
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

fn write_trajectory(
    out_dir: &Path,
    grid: &PerforatedGrid,
    trajectory: &Trajectory,
) -> Result<(), CliError> {
    let mut audit = fs::File::create(out_dir.join("mass_audit.csv"))?;
    writeln!(audit, "t,total_mass,injected,lost,residual")?;
    for row in &trajectory.audit {
        writeln!(
            audit,
            "{},{},{},{},{}",
            row.t, row.total_mass, row.injected, row.lost, row.residual
        )?;
    }
    for (index, snapshot) in trajectory.snapshots.iter().enumerate() {
        let mut file = fs::File::create(out_dir.join(format!("snapshot_{index:04}.csv")))?;
        write_snapshot_csv(&mut file, grid, &snapshot.fields)?;
    }
    Ok(())
}

fn run_micro_command(config: &RunConfig, out_dir: &Path, quiet: bool) -> Result<(), CliError> {
    let kernels = config.build_kernels()?;
    let grid = build_perforated_grid(&config.domain_spec(config.epsilon))?;
    let psi = config.boundary_source();
    let trajectory = run_micro(
        &grid,
        &kernels,
        &psi,
        config.initial_monomer,
        &config.step_controls(),
    )?;
    let mut mask = fs::File::create(out_dir.join("grid_mask.csv"))?;
    grid.write_mask_csv(&mut mask)?;
    write_trajectory(out_dir, &grid, &trajectory)?;
    if !quiet {
        let last = trajectory.audit.last().unwrap();
        println!(
            "micro: {} steps, final mass {}, audit residual {}",
            trajectory.steps, last.total_mass, last.residual
        );
    }
    Ok(())
}

/// Shared by `macro` and `compare`: cell solve plus homogenized coefficients.
fn homogenized_setup(
    config: &RunConfig,
) -> Result<(HomogenizedCoefficients, CellSolution), CliError> {
    let cell = build_reference_cell(config.dim, config.hole_radius, config.m_cell)?;
    let solution = solve_cell_problem(
        &cell,
        config.tolerances.cg_tol,
        config.tolerances.cg_max_iter,
    )?;
    let psi = config.boundary_source();
    let coefficients = HomogenizedCoefficients::new(&solution, &cell, &psi);
    Ok((coefficients, solution))
}

fn macro_grid(config: &RunConfig) -> Result<PerforatedGrid, CliError> {
    let n_side = (config.length / config.h_macro).round() as usize;
    Ok(build_unperforated(config.dim, config.length, n_side)?)
}

fn run_macro_command(config: &RunConfig, out_dir: &Path, quiet: bool) -> Result<(), CliError> {
    let kernels = config.build_kernels()?;
    let (coefficients, _) = homogenized_setup(config)?;
    let grid = macro_grid(config)?;
    let psi = config.boundary_source();
    fs::write(
        out_dir.join("coefficients.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "theta": coefficients.theta,
            "tensor": tensor_rows(config.dim, &coefficients.tensor),
            "q_gamma": coefficients.q_gamma,
        }))? + "\n",
    )?;
    let trajectory = run_macro(
        &grid,
        &kernels,
        &psi,
        &coefficients,
        config.initial_monomer,
        &config.step_controls(),
    )?;
    write_trajectory(out_dir, &grid, &trajectory)?;
    if !quiet {
        let last = trajectory.audit.last().unwrap();
        println!(
            "macro: {} steps, final mass {}, audit residual {}",
            trajectory.steps, last.total_mass, last.residual
        );
    }
    Ok(())
}

fn run_compare(config: &RunConfig, out_dir: &Path, quiet: bool) -> Result<(), CliError> {
    let kernels = config.build_kernels()?;
    let psi = config.boundary_source();
    let controls = config.step_controls();
    let (coefficients, _) = homogenized_setup(config)?;
    let macro_domain = macro_grid(config)?;
    let macro_trajectory = run_macro(
        &macro_domain,
        &kernels,
        &psi,
        &coefficients,
        config.initial_monomer,
        &controls,
    )?;

    let mut report = ConvergenceReport {
        dim: config.dim,
        hole_radius: config.hole_radius,
        m_cell: config.m_cell,
        theta: coefficients.theta,
        tensor: tensor_rows(config.dim, &coefficients.tensor),
        dt: config.dt,
        t_end: config.t_end,
        epsilons: config.epsilons.clone(),
        entries: Vec::new(),
        steps: Vec::new(),
        cg_iterations: Vec::new(),
    };

    for &epsilon in &config.epsilons {
        let grid = build_perforated_grid(&config.domain_spec(epsilon))?;
        let trajectory = run_micro(&grid, &kernels, &psi, config.initial_monomer, &controls)?;
        let errors = compare(
            &trajectory,
            &grid,
            &macro_trajectory,
            &macro_domain,
            coefficients.theta,
        )?;
        let duality = duality_diagnostic(&trajectory, &grid);
        let mass_residual = trajectory
            .audit
            .iter()
            .map(|r| r.residual)
            .fold(0.0, f64::max);
        for (i, &error) in errors.iter().enumerate() {
            report.entries.push(ConvergenceEntry {
                epsilon,
                species: i + 1,
                error,
                duality,
                mass_residual,
            });
        }
        report.steps.push(trajectory.steps);
        report.cg_iterations.push(trajectory.cg_iterations);
        if !quiet {
            println!(
                "compare: epsilon = {epsilon}, e_1 = {}, duality = {duality}",
                errors[0]
            );
        }
    }

    fs::write(
        out_dir.join("convergence_report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    let mut csv = fs::File::create(out_dir.join("convergence.csv"))?;
    writeln!(csv, "epsilon,species,error,duality,mass_residual")?;
    for e in &report.entries {
        writeln!(
            csv,
            "{},{},{},{},{}",
            e.epsilon, e.species, e.error, e.duality, e.mass_residual
        )?;
    }
    Ok(())
}

fn run_zerod(config: &RunConfig, out_dir: &Path, quiet: bool) -> Result<(), CliError> {
    let kernels = config.build_kernels()?;
    let mut initial = vec![0.0; config.n_max];
    initial[0] = config.initial_monomer;
    let trajectory = run_zero_dimensional(
        &kernels,
        &initial,
        config.t_end,
        config.dt,
        config.snapshot_stride,
    )?;
    let mut csv = fs::File::create(out_dir.join("zerod.csv"))?;
    // The closed-form column is the constant-kernel pure-coagulation number
    // density N0 / (1 + a N0 t / 2); it is meaningful only for that family.
    writeln!(
        csv,
        "t,total_number,total_mass,lost_mass,closed_form_number"
    )?;
    let a0 = kernels.a(1, 1);
    let n0 = config.initial_monomer;
    for (idx, &t) in trajectory.times.iter().enumerate() {
        let closed = n0 / (1.0 + 0.5 * a0 * n0 * t);
        writeln!(
            csv,
            "{},{},{},{},{}",
            t,
            trajectory.total_number[idx],
            trajectory.total_mass[idx],
            trajectory.lost_mass[idx],
            closed
        )?;
    }
    if !quiet {
        println!(
            "zerod: {} steps, N(T) = {}",
            trajectory.steps,
            trajectory.total_number.last().unwrap()
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("config.json");
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn minimal_config_materializes_documented_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), r#"{"version": 1}"#);
        let config = load_config(&path).unwrap();
        assert_eq!(config.n_max, 32);
        assert_eq!(config.tolerances.cg_tol, 1e-10);
        assert_eq!(config.dim, 2);
        assert_eq!(config.epsilons, vec![0.25, 0.125, 0.0625]);
    }

    #[test]
    fn missing_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), r#"{"dim": 2}"#);
        match load_config(&path) {
            Err(ConfigError::Invalid(errors)) => {
                assert!(errors.iter().any(|e| e.starts_with("version")));
            }
            other => panic!("expected invalid config, got {other:?}"),
        }
    }

    #[test]
    fn nonconforming_epsilon_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), r#"{"version": 1, "epsilon": 0.3}"#);
        match load_config(&path) {
            Err(ConfigError::Invalid(errors)) => {
                assert!(
                    errors.iter().any(|e| e.starts_with("epsilon")),
                    "{errors:?}"
                );
            }
            other => panic!("expected invalid config, got {other:?}"),
        }
    }

    #[test]
    fn nonvanishing_source_start_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            r#"{"version": 1,
                "psi": {"g": {"kind": "constant", "value": 1.0},
                         "p": {"kind": "one"}, "q": {"kind": "one"}}}"#,
        );
        match load_config(&path) {
            Err(ConfigError::Invalid(errors)) => {
                assert!(errors.iter().any(|e| e.starts_with("psi.g")), "{errors:?}");
            }
            other => panic!("expected invalid config, got {other:?}"),
        }
        // A switched-off constant source is admissible.
        let path = write_config(
            dir.path(),
            r#"{"version": 1,
                "psi": {"g": {"kind": "constant", "value": 0.0},
                         "p": {"kind": "one"}, "q": {"kind": "one"}}}"#,
        );
        assert!(load_config(&path).is_ok());
    }

    #[test]
    fn unknown_keys_are_named_in_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), r#"{"version": 1, "epsilonn": 0.25}"#);
        match load_config(&path) {
            Err(ConfigError::Parse(msg)) => assert!(msg.contains("epsilonn"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn warnings_flag_oversized_initial_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            r#"{"version": 1, "initial_monomer": 10.0, "t_end": 0.5}"#,
        );
        let config = load_config(&path).unwrap();
        assert_eq!(config.warnings().len(), 1);
    }

    #[test]
    fn orchestrate_writes_resolved_config_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            r#"{"version": 1, "hole_radius": 0.0, "m_cell": 8, "n_max": 4}"#,
        );
        let config = load_config(&path).unwrap();
        let out = dir.path().join("out");
        orchestrate(Subcommand::Cell, &config, &out, true).unwrap();
        let resolved = fs::read_to_string(out.join("resolved_config.json")).unwrap();
        assert!(resolved.contains("\"n_max\": 4"));
        let cell: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("cell_solution.json")).unwrap())
                .unwrap();
        assert_eq!(cell["theta"], 1.0);
        let tensor = cell["tensor"].as_array().unwrap();
        assert_eq!(tensor.len(), 4);
        assert!((tensor[0].as_f64().unwrap() - 1.0).abs() <= 1e-10);
        assert!((tensor[1].as_f64().unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn zerod_runs_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            r#"{"version": 1, "n_max": 16, "initial_monomer": 1.0,
                "t_end": 0.5, "dt": 0.01, "snapshot_stride": 10,
                "kernel": {"coagulation": {"family": "constant", "a0": 1.0},
                            "fragmentation": {"family": "none"},
                            "diffusion": {"profile": "uniform", "d0": 1.0}}}"#,
        );
        let config = load_config(&path).unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        orchestrate(Subcommand::Zerod, &config, &out_a, true).unwrap();
        orchestrate(Subcommand::Zerod, &config, &out_b, true).unwrap();
        let a = fs::read(out_a.join("zerod.csv")).unwrap();
        let b = fs::read(out_b.join("zerod.csv")).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("t,total_number,total_mass,lost_mass,closed_form_number"));
    }

    #[test]
    fn resolved_config_is_itself_a_valid_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), r#"{"version": 1, "n_max": 8}"#);
        let config = load_config(&path).unwrap();
        let out = dir.path().join("out");
        orchestrate(Subcommand::ValidateKernels, &config, &out, true).unwrap();
        let roundtrip = load_config(&out.join("resolved_config.json")).unwrap();
        assert_eq!(roundtrip.n_max, 8);
        assert_eq!(roundtrip.epsilon, config.epsilon);
    }
}
