//! Runs configured problems, the built-in scenario registry and report
//! writers (CSV tables and VTK snapshots).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::basis1d::{basis, BasisError, BasisTag, DEFAULT_LAMBDA};
use crate::config::{parse_config, ConfigError, MeshSource, Problem, RunConfig, Scheme};
use crate::contact::{pressure_profile_csv, ContactError, ContactSurface, RigidObstacle};
use crate::dynamics::{
    cfl_dt, explicit_run, mms_initial_state, newmark_run, static_solve, uniform_initial_state, ContactSetup,
    DynamicsError, ExternalLoad, MmsLoad, NewmarkCoeffs, RunResult, TractionLoad,
};
use crate::femcore::{AnalyticField, DisplacementField, FeModel, FemError};
use crate::meshdof::{gen_box_mesh, parse_mesh, Mesh, MeshError};
use crate::vtk::{model_vtk, VtkError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Contact(#[from] ContactError),
    #[error(transparent)]
    Vtk(#[from] VtkError),
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("unknown scenario '{0}'")]
    UnknownScenario(String),
    #[error("invalid request: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ScenarioError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    }
}

const CUBE: &str = "\
[mesh]
generator = box
elements = 2, 2, 2
lengths = 1, 1, 1

[material]
youngs = 1000
poisson = 0.3
density = 1
";

const CUBE_MMS_BOUNDARY: &str = "
[dirichlet]
tags = xmin
";

const STATIC_CUBE_MMS: &str = "
[basis]
kind = SDME_M
order = 2
k = 0.5
lambda = 100
integration = minimal

[time]
scheme = static

[solver]
preconditioner = cgd
tol = 1e-12
maxit = 100000

[newton]
tol = 1e-8
maxit = 25

[mms]
field = static-sine
neumann = xmax, ymin, ymax, zmin, zmax

[output]
name = static-cube-mms
";

const EXPLICIT_CUBE_MMS: &str = "
[basis]
kind = SDME_M
order = 4
k = 0.5
lambda = 100
integration = minimal

[time]
scheme = explicit
t_end = 0.25
steps = 800

[solver]
preconditioner = cggs
tol = 1e-12
maxit = 100000

[mms]
field = sine-sine
neumann = xmax, ymin, ymax, zmin, zmax

[output]
name = explicit-cube-mms
";

const NEWMARK_CUBE_MMS_X4: &str = "
[basis]
kind = SDME_M
order = 4
k = 0.5
lambda = 100
integration = minimal

[time]
scheme = newmark
t_end = 0.025
steps = 64

[solver]
preconditioner = cggs
tol = 1e-12
maxit = 100000

[newton]
tol = 1e-12
maxit = 25

[mms]
field = quartic-sine
neumann = xmax, ymin, ymax, zmin, zmax

[output]
name = newmark-cube-mms-x4
";

const NEWMARK_CUBE_MMS_SIN: &str = "
[basis]
kind = SDME_H
order = 4
k = 0.5
lambda = 100
integration = minimal

[time]
scheme = newmark
t_end = 0.25
dt = 2e-3

[solver]
preconditioner = cgd
tol = 1e-12
maxit = 100000

[newton]
tol = 1e-12
maxit = 25

[mms]
field = sine-sine
neumann = xmax, ymin, ymax, zmin, zmax

[output]
name = newmark-cube-mms-sin
";

const TRACTION_BLOCK: &str = "\
[mesh]
generator = box
elements = 4, 1, 1
lengths = 4, 1, 1

[material]
youngs = 1000
poisson = 0.3
density = 1

[basis]
kind = SDME_H
order = 3
k = 0.5
lambda = 100

[time]
scheme = newmark
t_end = 0.2
dt = 2e-3
snapshot_stride = 25

[solver]
preconditioner = cggs
tol = 1e-10
maxit = 100000

[newton]
tol = 1e-10
maxit = 25

[loading]
tags = xmax
traction = 0, -5, 0
profile = half-sine:0.1

[dirichlet]
tags = xmin

[output]
name = traction-block
vtk = true
vtk_resolution = 3
";

const BAR_IMPACT: &str = "\
[mesh]
generator = box
elements = 1, 2, 1
lengths = 0.5, 1, 0.5

[material]
youngs = 1000
poisson = 0.3
density = 1

[basis]
kind = SDME_M
order = 2
k = 0.5

[time]
scheme = newmark
t_end = 0.2
dt = 1e-3
snapshot_stride = 20

[solver]
preconditioner = cgd
tol = 1e-12
maxit = 100000

[newton]
tol = 1e-10
maxit = 25

[loading]

[initial]
displacement = 0, 0.005, 0
velocity = 0, -0.06, 0

[contact]
tags = ymin
point = 0, 0, 0
normal = 0, 1, 0
eps_n = 1e4
deps_n = 1e3
gap_tol = 1e-3
stress_tol = 1e-2

[output]
name = bar-impact
vtk = true
vtk_resolution = 2
";

/// Names of the built-in scenarios.
pub const SCENARIOS: [&str; 6] = [
    "static-cube-mms",
    "explicit-cube-mms",
    "newmark-cube-mms-x4",
    "newmark-cube-mms-sin",
    "traction-block",
    "bar-impact",
];

/// Configuration text of a built-in scenario; `newmark-cube-mms` is an
/// alias of `newmark-cube-mms-sin`.
pub fn scenario_text(name: &str) -> Option<String> {
    let cube = |body: &str| format!("{CUBE}{CUBE_MMS_BOUNDARY}{body}");
    match name {
        "static-cube-mms" => Some(cube(STATIC_CUBE_MMS)),
        "explicit-cube-mms" => Some(cube(EXPLICIT_CUBE_MMS)),
        "newmark-cube-mms-x4" => Some(cube(NEWMARK_CUBE_MMS_X4)),
        "newmark-cube-mms-sin" | "newmark-cube-mms" => Some(cube(NEWMARK_CUBE_MMS_SIN)),
        "traction-block" => Some(TRACTION_BLOCK.to_string()),
        "bar-impact" => Some(BAR_IMPACT.to_string()),
        _ => None,
    }
}

/// Built-in scenario with optional order and basis overrides.
pub fn scenario_config(name: &str, order: Option<usize>, kind: Option<BasisTag>) -> Result<RunConfig> {
    let text = scenario_text(name).ok_or_else(|| ScenarioError::UnknownScenario(name.to_string()))?;
    let mut cfg = parse_config(&text)?;
    if let Some(p) = order {
        cfg.basis.order = p;
    }
    if let Some(k) = kind {
        with_basis(&mut cfg, k);
    }
    Ok(cfg)
}

/// Switches the basis, supplying the default Helmholtz weight if needed.
pub fn with_basis(cfg: &mut RunConfig, kind: BasisTag) {
    cfg.basis.kind = kind;
    if kind == BasisTag::SdmeH && cfg.basis.lambda.is_none() {
        cfg.basis.lambda = Some(DEFAULT_LAMBDA);
    }
}

pub fn build_mesh(src: &MeshSource) -> Result<Mesh> {
    match src {
        MeshSource::Box {
            elements,
            lengths,
            origin,
        } => Ok(gen_box_mesh(*elements, *lengths, *origin)?),
        MeshSource::File(path) => {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            Ok(parse_mesh(&text)?)
        }
    }
}

pub fn build_model(cfg: &RunConfig) -> Result<FeModel> {
    let mesh = Arc::new(build_mesh(&cfg.mesh)?);
    if mesh.dim() != 3 {
        return Err(ScenarioError::Invalid("simulations need a hexahedral mesh".into()));
    }
    let b = Arc::new(basis(cfg.basis.order, cfg.basis.kind())?);
    let dirichlet = cfg.dirichlet.as_ref().map(|d| d.specs()).unwrap_or_default();
    Ok(FeModel::new(
        mesh,
        b,
        cfg.basis.integration,
        cfg.material.neo_hookean(),
        &dirichlet,
    )?)
}

/// Scalar outcome of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub basis: BasisTag,
    pub order: usize,
    pub scheme: Scheme,
    pub num_free: usize,
    pub num_boundary: usize,
    pub steps: usize,
    pub dt: f64,
    pub t_end: f64,
    /// Per-component `L2` error against the manufactured field.
    pub errors: Option<[f64; 3]>,
    pub mean_iterations: f64,
    pub mean_solve_seconds: f64,
    pub newton_iterations: usize,
    pub max_penetration: Option<f64>,
    /// Smallest pressure at penetrating points over the run.
    pub min_pressure: Option<f64>,
    /// Largest relative change of kinetic + strain + penalty energy; only
    /// for runs without external load.
    pub energy_drift: Option<f64>,
    /// Centre-of-mass velocity along the obstacle normal went from
    /// negative to positive.
    pub rebound: Option<bool>,
    pub wall_seconds: f64,
}

/// Completed run with everything needed for reporting.
pub struct Simulation {
    pub config: RunConfig,
    pub model: FeModel,
    pub result: RunResult,
    pub contact: Option<ContactSetup>,
    pub summary: RunSummary,
}

fn mms_field(cfg: &RunConfig) -> Option<AnalyticField> {
    match &cfg.problem {
        Problem::Mms(m) => Some(m.field),
        Problem::Loading(_) => None,
    }
}

/// Builds and runs the configured problem.
pub fn simulate(cfg: &RunConfig) -> Result<Simulation> {
    let start = Instant::now();
    let model = build_model(cfg)?;
    let load: Box<dyn ExternalLoad> = match &cfg.problem {
        Problem::Mms(m) => {
            let tags: Vec<&str> = m.neumann.iter().map(|s| s.as_str()).collect();
            Box::new(MmsLoad::new(m.field, &tags))
        }
        Problem::Loading(l) => Box::new(TractionLoad {
            tags: l.tags.clone(),
            traction: l.traction,
            body_force: l.body_force,
            profile: l.profile,
        }),
    };
    let mat = cfg.material.neo_hookean();
    let (n_steps, dt) = {
        let mut err = None;
        let r = cfg.time.resolve(|d| match cfl_dt(model.mesh(), &mat, d, cfg.time.cfl_mode) {
            Ok(v) => v,
            Err(e) => {
                err = Some(e);
                1.0
            }
        });
        if let Some(e) = err {
            return Err(e.into());
        }
        r
    };
    let initial = |model: &FeModel| -> Result<(Vec<f64>, Vec<f64>)> {
        Ok(match &cfg.problem {
            Problem::Mms(m) => mms_initial_state(model, &m.field, &cfg.solver)?,
            Problem::Loading(_) => uniform_initial_state(model, cfg.initial.displacement, cfg.initial.velocity, &cfg.solver)?,
        })
    };
    let stride = cfg.time.snapshot_stride;
    let mut contact = None;
    let result = match cfg.time.scheme {
        Scheme::Static => static_solve(&model, load.as_ref(), cfg.time.t_end, &cfg.newton, &cfg.solver)?,
        Scheme::Explicit => {
            let (u0, v0) = initial(&model)?;
            explicit_run(&model, load.as_ref(), u0, v0, dt, n_steps, &cfg.solver, stride)?
        }
        Scheme::Newmark => {
            let (u0, v0) = initial(&model)?;
            let coeffs = NewmarkCoeffs::new(dt, cfg.time.gamma, cfg.time.beta)?;
            if let Some(c) = &cfg.contact {
                let tags: Vec<&str> = c.tags.iter().map(|s| s.as_str()).collect();
                contact = Some(ContactSetup {
                    surface: ContactSurface::new(&model, &tags, &c.params)?,
                    obstacle: RigidObstacle::new(c.point, c.normal)?,
                    params: c.params,
                });
            }
            newmark_run(
                &model,
                load.as_ref(),
                u0,
                v0,
                &coeffs,
                n_steps,
                &cfg.newton,
                &cfg.solver,
                contact.as_ref(),
                stride,
            )?
        }
    };
    let errors = mms_field(cfg).map(|f| {
        let t = result.state.t;
        model.l2_error(&result.state.u, |x| f.displacement(x, t))
    });
    let free_body = match &cfg.problem {
        Problem::Loading(l) => l.traction == [0.0; 3] && l.body_force == [0.0; 3],
        Problem::Mms(_) => false,
    };
    let energies: Vec<f64> = result
        .steps
        .iter()
        .map(|s| s.kinetic + s.strain + s.contact.as_ref().map(|c| c.energy).unwrap_or(0.0))
        .collect();
    let energy_drift = (free_body && cfg.time.scheme == Scheme::Newmark && !energies.is_empty()).then(|| {
        let e0 = energies[0];
        let scale = if e0 > 0.0 { e0 } else { energies.iter().cloned().fold(0.0, f64::max) };
        if scale > 0.0 {
            energies.iter().map(|e| (e - e0).abs() / scale).fold(0.0, f64::max)
        } else {
            0.0
        }
    });
    let contact_steps: Vec<_> = result.steps.iter().filter_map(|s| s.contact.as_ref()).collect();
    let (max_penetration, min_pressure, rebound) = match &contact {
        Some(setup) => {
            let mass = model.total_mass();
            let n = setup.obstacle.normal;
            let vn: Vec<f64> = contact_steps
                .iter()
                .map(|c| (0..3).map(|a| c.momentum[a] * n[a]).sum::<f64>() / mass)
                .collect();
            let first_neg = vn.iter().position(|v| *v < 0.0);
            let rebound = first_neg.is_some_and(|i| vn[i..].iter().any(|v| *v > 0.0));
            (
                Some(contact_steps.iter().map(|c| c.max_penetration).fold(0.0, f64::max)),
                Some(contact_steps.iter().map(|c| c.min_pressure).fold(f64::INFINITY, f64::min)),
                Some(rebound),
            )
        }
        None => (None, None, None),
    };
    let summary = RunSummary {
        name: cfg.output.name.clone(),
        basis: cfg.basis.kind,
        order: cfg.basis.order,
        scheme: cfg.time.scheme,
        num_free: model.num_free(),
        num_boundary: model.dofmap().num_boundary_free(),
        steps: n_steps,
        dt,
        t_end: result.state.t,
        errors,
        mean_iterations: result.mean_iterations(),
        mean_solve_seconds: result.mean_solve_seconds(),
        newton_iterations: result.total_newton_iterations(),
        max_penetration,
        min_pressure,
        energy_drift,
        rebound,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(Simulation {
        config: cfg.clone(),
        model,
        result,
        contact,
        summary,
    })
}

/// Number formatting shared by every CSV: six significant digits.
pub fn sci(v: f64) -> String {
    format!("{v:.5e}")
}

fn opt_sci(v: Option<f64>) -> String {
    v.map(sci).unwrap_or_default()
}

pub const CONVERGENCE_CSV_HEADER: &str = "basis,P,dofs,boundary_dofs,err_x,err_y,err_z";

pub fn convergence_row(s: &RunSummary) -> String {
    let e = s.errors.unwrap_or([f64::NAN; 3]);
    format!(
        "{},{},{},{},{},{},{}",
        s.basis.label(),
        s.order,
        s.num_free,
        s.num_boundary,
        sci(e[0]),
        sci(e[1]),
        sci(e[2])
    )
}

pub const STEPS_CSV_HEADER: &str = "step,t,newton_iterations,residual,kinetic,strain,contact_energy,total_energy,eps_n,max_penetration,min_pressure,contact_force,active_points,momentum_x,momentum_y,momentum_z";

pub fn steps_csv(result: &RunResult) -> String {
    let mut s = String::from(STEPS_CSV_HEADER);
    s.push('\n');
    for r in &result.steps {
        let ce = r.contact.as_ref().map(|c| c.energy).unwrap_or(0.0);
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.step,
            sci(r.t),
            r.newton_iterations,
            sci(r.residual),
            sci(r.kinetic),
            sci(r.strain),
            sci(ce),
            sci(r.kinetic + r.strain + ce)
        );
        match &r.contact {
            Some(c) => {
                let minp = if c.min_pressure.is_finite() { sci(c.min_pressure) } else { String::new() };
                let _ = writeln!(
                    s,
                    ",{},{},{},{},{},{},{},{}",
                    sci(c.eps_n),
                    sci(c.max_penetration),
                    minp,
                    sci(c.total_force),
                    c.num_active,
                    sci(c.momentum[0]),
                    sci(c.momentum[1]),
                    sci(c.momentum[2])
                );
            }
            None => s.push_str(",,,,,,,,\n"),
        }
    }
    s
}

pub const SUMMARY_CSV_HEADER: &str = "name,basis,P,scheme,dofs,boundary_dofs,steps,dt,t_end,err_x,err_y,err_z,mean_iterations,mean_solve_seconds,newton_iterations,max_penetration,min_pressure,energy_drift,rebound";

pub fn summary_row(s: &RunSummary) -> String {
    let e = s.errors.map(|e| e.map(sci)).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        s.name,
        s.basis.label(),
        s.order,
        s.scheme.label(),
        s.num_free,
        s.num_boundary,
        s.steps,
        sci(s.dt),
        sci(s.t_end),
        e[0],
        e[1],
        e[2],
        sci(s.mean_iterations),
        sci(s.mean_solve_seconds),
        s.newton_iterations,
        opt_sci(s.max_penetration),
        opt_sci(s.min_pressure.filter(|v| v.is_finite())),
        opt_sci(s.energy_drift),
        s.rebound.map(|r| r.to_string()).unwrap_or_default()
    )
}

/// Machine-readable outputs of a run.
#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub summary: RunSummary,
    pub summary_csv: String,
    /// Present for manufactured-solution runs.
    pub convergence_csv: Option<String>,
    pub solver_stats_csv: String,
    pub steps_csv: String,
    pub contact_pressure_csv: Option<String>,
    /// `(file name, VTK text)` per snapshot.
    pub vtk: Vec<(String, String)>,
    /// Files written to disk, in writing order.
    pub files: Vec<PathBuf>,
}

impl Simulation {
    pub fn bundle(&self) -> Result<ReportBundle> {
        let s = &self.summary;
        let name = &self.config.output.name;
        let convergence_csv = s
            .errors
            .map(|_| format!("{CONVERGENCE_CSV_HEADER}\n{}\n", convergence_row(s)));
        let contact_pressure_csv = match (&self.contact, &self.result.last_contact) {
            (Some(setup), Some(state)) => Some(pressure_profile_csv(&setup.surface, &setup.obstacle, state)),
            _ => None,
        };
        let mut vtk = Vec::new();
        if self.config.output.vtk {
            let snaps: Vec<(usize, f64, &[f64])> = if self.result.snapshots.is_empty() {
                vec![(self.summary.steps, self.result.state.t, &self.result.state.u)]
            } else {
                self.result.snapshots.iter().map(|sn| (sn.step, sn.t, sn.u.as_slice())).collect()
            };
            for (step, t, u) in snaps {
                let title = format!("{name} step {step} t {}", sci(t));
                let text = model_vtk(&self.model, u, self.config.output.vtk_resolution, &title)?;
                vtk.push((format!("{name}_{step:06}.vtk"), text));
            }
        }
        Ok(ReportBundle {
            summary: s.clone(),
            summary_csv: format!("{SUMMARY_CSV_HEADER}\n{}\n", summary_row(s)),
            convergence_csv,
            solver_stats_csv: self.result.stats_csv(),
            steps_csv: steps_csv(&self.result),
            contact_pressure_csv,
            vtk,
            files: Vec::new(),
        })
    }
}

impl ReportBundle {
    /// Writes every output into `dir`, creating it if needed.
    pub fn write(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let name = self.summary.name.clone();
        let mut items: Vec<(String, &str)> = vec![
            (format!("{name}_summary.csv"), self.summary_csv.as_str()),
            (format!("{name}_solver_stats.csv"), self.solver_stats_csv.as_str()),
            (format!("{name}_steps.csv"), self.steps_csv.as_str()),
        ];
        if let Some(c) = &self.convergence_csv {
            items.push((format!("{name}_convergence.csv"), c));
        }
        if let Some(c) = &self.contact_pressure_csv {
            items.push((format!("{name}_contact_pressure.csv"), c));
        }
        for (f, t) in &self.vtk {
            items.push((f.clone(), t));
        }
        let mut files = Vec::new();
        for (file, text) in items {
            let path = dir.join(file);
            std::fs::write(&path, text).map_err(io_err(&path))?;
            files.push(path);
        }
        self.files = files;
        Ok(())
    }
}

/// Runs `cfg` and, when `outdir` is given, writes its reports there.
pub fn run_scenario(cfg: &RunConfig, outdir: Option<&Path>) -> Result<ReportBundle> {
    let sim = simulate(cfg)?;
    let mut bundle = sim.bundle()?;
    if let Some(dir) = outdir {
        bundle.write(dir)?;
    }
    Ok(bundle)
}

/// One row of a basis comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub basis: BasisTag,
    pub order: usize,
    pub outcome: std::result::Result<RunSummary, String>,
    /// ST mean solve time over this basis' mean solve time at equal order.
    pub speedup: Option<f64>,
}

impl CompareRow {
    pub fn summary(&self) -> Option<&RunSummary> {
        self.outcome.as_ref().ok()
    }
}

pub const COMPARE_CSV_HEADER: &str = "basis,P,DOFs,mean_iterations,mean_solve_seconds,speedup_vs_ST,status";

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut s = String::from(COMPARE_CSV_HEADER);
    s.push('\n');
    for r in rows {
        match &r.outcome {
            Ok(sum) => {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},ok",
                    r.basis.label(),
                    r.order,
                    sum.num_free,
                    sci(sum.mean_iterations),
                    sci(sum.mean_solve_seconds),
                    opt_sci(r.speedup)
                );
            }
            Err(e) => {
                let msg: String = e.chars().map(|c| if c == ',' || c == '\n' { ';' } else { c }).collect();
                let _ = writeln!(s, "{},{},,,,,failed: {msg}", r.basis.label(), r.order);
            }
        }
    }
    s
}

/// Runs `template` for every basis and order. A failed run marks its row
/// and the others proceed.
pub fn benchmark_compare(template: &RunConfig, bases: &[BasisTag], orders: &[usize]) -> Vec<CompareRow> {
    let mut rows = Vec::new();
    for &p in orders {
        let first = rows.len();
        for &b in bases {
            let mut cfg = template.clone();
            with_basis(&mut cfg, b);
            cfg.basis.order = p;
            cfg.output.name = format!("{}-{}-P{p}", template.output.name, b.label());
            let outcome = simulate(&cfg).map(|s| s.summary).map_err(|e| e.to_string());
            rows.push(CompareRow {
                basis: b,
                order: p,
                outcome,
                speedup: None,
            });
        }
        let st = rows[first..]
            .iter()
            .find(|r| r.basis == BasisTag::ModalJacobi)
            .and_then(|r| r.summary())
            .map(|s| s.mean_solve_seconds);
        if let Some(t_st) = st {
            for r in &mut rows[first..] {
                r.speedup = r.summary().map(|s| t_st / s.mean_solve_seconds);
            }
        }
    }
    rows
}
