//! Static Newton, explicit central-difference and implicit Newmark drivers.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

use crate::basis1d::BasisTag;
use crate::contact::{contact_contribution, ContactParams, ContactState, ContactSurface, RigidObstacle};
use crate::densela::DenseMatrix;
use crate::femcore::{mms_body_force, mms_traction, AnalyticField, DisplacementField, ExtraBlocks, FeModel, FemError, Integration, MMS_FD_STEP};
use crate::material::NeoHookean;
use crate::meshdof::Mesh;
use crate::solver::{pcg, CondensedSystem, CsrMatrix, PcgConfig, SolveStats, SolverError};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("Newton did not converge in step {step} after {iterations} iterations (relative residual {residual:e})")]
    NewtonDivergence { step: usize, iterations: usize, residual: f64 },
    #[error("step {step}: penetration {penetration:e} still exceeds {gap_tol:e} after {increments} penalty increments")]
    ContactUnresolved {
        step: usize,
        penetration: f64,
        gap_tol: f64,
        increments: usize,
    },
    #[error("external load is not finite at t = {0}")]
    NonFiniteLoad(f64),
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DynamicsError>;

/// Longitudinal wave speed used by the stability estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CflMode {
    /// `3K(1−ν)/(ρ(1+ν))` without a square root; reproduces the published
    /// step count of the explicit benchmark.
    AsPrinted,
    /// `√(3K(1−ν)/(ρ(1+ν)))`, the dilatational wave speed.
    PhysicalSqrt,
}

impl FromStr for CflMode {
    type Err = DynamicsError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "as-printed" | "asprinted" => Ok(CflMode::AsPrinted),
            "physical-sqrt" | "physicalsqrt" | "physical" => Ok(CflMode::PhysicalSqrt),
            _ => Err(DynamicsError::Invalid(format!("unknown CFL mode '{s}'"))),
        }
    }
}

impl CflMode {
    pub fn label(self) -> &'static str {
        match self {
            CflMode::AsPrinted => "as-printed",
            CflMode::PhysicalSqrt => "physical-sqrt",
        }
    }
}

pub fn wave_speed(mat: &NeoHookean, mode: CflMode) -> f64 {
    let (_, nu) = mat.engineering();
    let c = 3.0 * mat.bulk_modulus() * (1.0 - nu) / (mat.rho0 * (1.0 + nu));
    match mode {
        CflMode::AsPrinted => c,
        CflMode::PhysicalSqrt => c.sqrt(),
    }
}

/// `δ·h/c_L` with `h` the shortest reference edge.
pub fn cfl_dt(mesh: &Mesh, mat: &NeoHookean, delta: f64, mode: CflMode) -> Result<f64> {
    if !(delta > 0.2 && delta < 0.9) {
        return Err(DynamicsError::Invalid(format!("CFL factor must lie in (0.2, 0.9), got {delta}")));
    }
    Ok(delta * mesh.min_edge_length() / wave_speed(mat, mode))
}

/// Time-dependent external force on the free DOFs.
pub trait ExternalLoad: Sync {
    fn load(&self, model: &FeModel, t: f64) -> Result<Vec<f64>>;
}

/// No external force.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoLoad;

impl ExternalLoad for NoLoad {
    fn load(&self, model: &FeModel, _t: f64) -> Result<Vec<f64>> {
        Ok(vec![0.0; model.num_free()])
    }
}

/// Body force and boundary tractions reproducing a manufactured field.
#[derive(Debug, Clone)]
pub struct MmsLoad {
    pub field: AnalyticField,
    /// Tags receiving the traction `P·N` of the exact field.
    pub neumann_tags: Vec<String>,
    pub fd_step: f64,
}

impl MmsLoad {
    pub fn new(field: AnalyticField, neumann_tags: &[&str]) -> Self {
        MmsLoad {
            field,
            neumann_tags: neumann_tags.iter().map(|s| s.to_string()).collect(),
            fd_step: MMS_FD_STEP,
        }
    }
}

impl ExternalLoad for MmsLoad {
    fn load(&self, model: &FeModel, t: f64) -> Result<Vec<f64>> {
        let mat = *model.material();
        let field = self.field;
        let nan = [f64::NAN; 3];
        let mut f = model.body_load(|x| mms_body_force(&field, &mat, x, t, self.fd_step).unwrap_or(nan));
        let tags: Vec<&str> = self.neumann_tags.iter().map(|s| s.as_str()).collect();
        let tr = model.traction_load(&tags, |x, n| mms_traction(&field, &mat, x, n, t).unwrap_or(nan))?;
        for (a, b) in f.iter_mut().zip(&tr) {
            *a += b;
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFiniteLoad(t));
        }
        Ok(f)
    }
}

/// Time profile multiplying a constant traction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LoadProfile {
    Constant,
    /// Linear ramp reaching full load at the given time.
    Ramp(f64),
    /// `sin(πt/d)` for `t < d`, zero afterwards.
    HalfSine(f64),
}

impl LoadProfile {
    pub fn factor(self, t: f64) -> f64 {
        match self {
            LoadProfile::Constant => 1.0,
            LoadProfile::Ramp(t1) => (t / t1).clamp(0.0, 1.0),
            LoadProfile::HalfSine(d) => {
                if t < d {
                    (std::f64::consts::PI * t / d).sin()
                } else {
                    0.0
                }
            }
        }
    }
}

impl FromStr for LoadProfile {
    type Err = DynamicsError;
    /// Accepts `constant`, `ramp:<t1>` and `half-sine:<d>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || DynamicsError::Invalid(format!("unknown load profile '{s}'"));
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let time = || -> Result<f64> {
            let v: f64 = arg.ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(DynamicsError::Invalid(format!("load profile time must be positive, got {v}")))
            }
        };
        match (name.to_ascii_lowercase().replace('_', "-").as_str(), arg) {
            ("constant", None) => Ok(LoadProfile::Constant),
            ("ramp", Some(_)) => Ok(LoadProfile::Ramp(time()?)),
            ("half-sine", Some(_)) => Ok(LoadProfile::HalfSine(time()?)),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for LoadProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LoadProfile::Constant => write!(f, "constant"),
            LoadProfile::Ramp(t) => write!(f, "ramp:{t}"),
            LoadProfile::HalfSine(d) => write!(f, "half-sine:{d}"),
        }
    }
}

/// Uniform traction on tagged faces plus a uniform body force per unit
/// mass, both scaled by a common time profile.
#[derive(Debug, Clone)]
pub struct TractionLoad {
    pub tags: Vec<String>,
    pub traction: [f64; 3],
    pub body_force: [f64; 3],
    pub profile: LoadProfile,
}

impl ExternalLoad for TractionLoad {
    fn load(&self, model: &FeModel, t: f64) -> Result<Vec<f64>> {
        let s = self.profile.factor(t);
        let tags: Vec<&str> = self.tags.iter().map(|s| s.as_str()).collect();
        let tr = self.traction.map(|v| v * s);
        let mut f = model.traction_load(&tags, |_, _| tr)?;
        if self.body_force.iter().any(|b| *b != 0.0) {
            let b = self.body_force.map(|v| v * s);
            for (a, g) in f.iter_mut().zip(model.body_load(|_| b)) {
                *a += g;
            }
        }
        Ok(f)
    }
}

/// Linear solver settings shared by all drivers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub pcg: PcgConfig,
    /// Solve on the condensed boundary system.
    pub condense: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            pcg: PcgConfig::default(),
            condense: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonSettings {
    /// Relative residual tolerance `‖ψ‖/‖ψ0‖`.
    pub tol: f64,
    pub maxit: usize,
    /// Load increments for static solves.
    pub load_steps: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings {
            tol: 1e-8,
            maxit: 25,
            load_steps: 1,
        }
    }
}

/// Residual level regarded as exact balance, relative to the largest force
/// term entering the residual.
const ROUNDOFF_BALANCE: f64 = 1e-13;

/// Kinematic state on the free DOFs.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeState {
    pub t: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    /// Displacement one step back (explicit scheme).
    pub u_prev: Option<Vec<f64>>,
}

impl TimeState {
    pub fn at_rest(n: usize) -> Self {
        TimeState {
            t: 0.0,
            u: vec![0.0; n],
            v: vec![0.0; n],
            a: vec![0.0; n],
            u_prev: None,
        }
    }
}

/// Newmark parameters in standard form:
/// `a₊ = b1(u₊ − u) − b2 v − b3 a` and `v₊ = b4(u₊ − u) + b5 v + b6 a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewmarkCoeffs {
    /// Velocity weight γ.
    pub g1: f64,
    /// Displacement weight β.
    pub g2: f64,
    pub b: [f64; 6],
    pub dt: f64,
}

impl NewmarkCoeffs {
    pub fn new(dt: f64, gamma: f64, beta: f64) -> Result<Self> {
        if !(dt > 0.0) || !(beta > 0.0) || !(gamma > 0.0) {
            return Err(DynamicsError::Invalid(format!(
                "Newmark needs positive dt, beta, gamma (got {dt}, {beta}, {gamma})"
            )));
        }
        let b = [
            1.0 / (beta * dt * dt),
            1.0 / (beta * dt),
            1.0 / (2.0 * beta) - 1.0,
            gamma / (beta * dt),
            1.0 - gamma / beta,
            dt * (1.0 - gamma / (2.0 * beta)),
        ];
        Ok(NewmarkCoeffs {
            g1: gamma,
            g2: beta,
            b,
            dt,
        })
    }

    /// Trapezoidal rule, `γ = 1/2`, `β = 1/4`.
    pub fn trapezoidal(dt: f64) -> Result<Self> {
        Self::new(dt, 0.5, 0.25)
    }

    pub fn acceleration(&self, u_new: &[f64], s: &TimeState) -> Vec<f64> {
        let b = &self.b;
        (0..u_new.len())
            .map(|i| b[0] * (u_new[i] - s.u[i]) - b[1] * s.v[i] - b[2] * s.a[i])
            .collect()
    }

    pub fn velocity(&self, u_new: &[f64], s: &TimeState) -> Vec<f64> {
        let b = &self.b;
        (0..u_new.len())
            .map(|i| b[3] * (u_new[i] - s.u[i]) + b[4] * s.v[i] + b[5] * s.a[i])
            .collect()
    }
}

/// One linear solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveRecord {
    pub step: usize,
    pub newton_iter: usize,
    pub stats: SolveStats,
    /// Initial or final acceleration solve outside the stepping loop.
    pub startup: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub t: f64,
    pub u: Vec<f64>,
}

/// Per-step summary.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub newton_iterations: usize,
    pub residual: f64,
    pub kinetic: f64,
    pub strain: f64,
    pub contact: Option<ContactStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactStep {
    pub eps_n: f64,
    pub max_penetration: f64,
    /// Smallest pressure over penetrating points; infinite when none.
    pub min_pressure: f64,
    pub total_force: f64,
    pub energy: f64,
    pub num_active: usize,
    pub momentum: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub state: TimeState,
    pub solves: Vec<SolveRecord>,
    pub steps: Vec<StepRecord>,
    pub snapshots: Vec<Snapshot>,
    /// Contact state at the end of the run, when contact is enabled.
    pub last_contact: Option<ContactState>,
}

impl RunResult {
    fn new(state: TimeState) -> Self {
        RunResult {
            state,
            solves: Vec::new(),
            steps: Vec::new(),
            snapshots: Vec::new(),
            last_contact: None,
        }
    }

    /// Mean PCG iterations over the solves inside the stepping loop.
    pub fn mean_iterations(&self) -> f64 {
        mean(self.solves.iter().filter(|s| !s.startup).map(|s| s.stats.iterations as f64))
    }

    pub fn mean_solve_seconds(&self) -> f64 {
        mean(self.solves.iter().filter(|s| !s.startup).map(|s| s.stats.seconds))
    }

    pub fn total_newton_iterations(&self) -> usize {
        self.steps.iter().map(|s| s.newton_iterations).sum()
    }

    pub fn stats_csv(&self) -> String {
        let mut out = String::from(crate::solver::STATS_CSV_HEADER);
        out.push('\n');
        for r in &self.solves {
            out.push_str(&crate::solver::stats_csv_row(r.step, r.newton_iter, &r.stats));
            out.push('\n');
        }
        out
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `(s_m M + s_k K_T(u) + extra) x = rhs`.
fn linear_solve(
    model: &FeModel,
    u: &[f64],
    mass_scale: f64,
    tangent_scale: f64,
    extra: Option<&ExtraBlocks>,
    rhs: &[f64],
    settings: &SolverSettings,
) -> Result<(Vec<f64>, SolveStats)> {
    if settings.condense {
        let (_, sys) = model.condensed_operator(u, mass_scale, tangent_scale, extra)?;
        Ok(sys.solve(rhs, &settings.pcg)?)
    } else {
        let a = model.assemble_operator(u, mass_scale, tangent_scale, extra)?;
        Ok(pcg(&a, rhs, &settings.pcg)?)
    }
}

/// Mass operator factored once and reused.
enum MassSolver {
    Lumped(Vec<f64>),
    Condensed(CondensedSystem),
    Full(CsrMatrix),
}

impl MassSolver {
    fn new(model: &FeModel, mass: &CsrMatrix, settings: &SolverSettings) -> Result<Self> {
        let lagrange = model.element().basis().kind().tag == BasisTag::LagrangeGll;
        if lagrange && model.integration() == Integration::Collocation {
            return Ok(MassSolver::Lumped(mass.diagonal()));
        }
        if settings.condense {
            Ok(MassSolver::Condensed(model.condensed_mass()?))
        } else {
            Ok(MassSolver::Full(mass.clone()))
        }
    }

    /// Solves `M x = rhs`.
    fn solve(&self, rhs: &[f64], settings: &SolverSettings) -> Result<(Vec<f64>, SolveStats)> {
        match self {
            MassSolver::Lumped(d) => {
                let start = std::time::Instant::now();
                let x = rhs.iter().zip(d).map(|(r, m)| r / m).collect();
                Ok((
                    x,
                    SolveStats {
                        iterations: 0,
                        residual: 0.0,
                        seconds: start.elapsed().as_secs_f64(),
                        preconditioner: settings.pcg.preconditioner,
                        condensed: false,
                        size: d.len(),
                    },
                ))
            }
            MassSolver::Condensed(c) => Ok(c.solve(rhs, &settings.pcg)?),
            MassSolver::Full(m) => Ok(pcg(m, rhs, &settings.pcg)?),
        }
    }
}

fn record(out: &mut RunResult, step: usize, t: f64, u: &[f64], stride: usize, last: bool) {
    if stride > 0 && (step % stride == 0 || last) {
        out.snapshots.push(Snapshot { step, t, u: u.to_vec() });
    }
}

/// Static equilibrium `r_int(u) = f_ext` by Newton's method with load
/// stepping; the load is evaluated at `t`.
pub fn static_solve(
    model: &FeModel,
    load: &dyn ExternalLoad,
    t: f64,
    newton: &NewtonSettings,
    solver: &SolverSettings,
) -> Result<RunResult> {
    let n = model.num_free();
    let f_full = load.load(model, t)?;
    let mut out = RunResult::new(TimeState::at_rest(n));
    let mut u = vec![0.0; n];
    let steps = newton.load_steps.max(1);
    for ls in 1..=steps {
        let lam = ls as f64 / steps as f64;
        let f: Vec<f64> = f_full.iter().map(|v| v * lam).collect();
        let mut psi0 = None;
        let mut converged = false;
        let mut rel;
        let mut k = 0;
        loop {
            let r = model.internal_force(&u)?;
            let psi: Vec<f64> = f.iter().zip(&r).map(|(a, b)| a - b).collect();
            let pn = norm(&psi);
            let p0 = *psi0.get_or_insert(pn);
            rel = if p0 > 0.0 { pn / p0 } else { 0.0 };
            let floor = ROUNDOFF_BALANCE * norm(&f).max(norm(&r));
            if pn <= floor || (k > 0 && rel <= newton.tol) {
                converged = true;
                break;
            }
            if k >= newton.maxit {
                break;
            }
            let (du, stats) = linear_solve(model, &u, 0.0, 1.0, None, &psi, solver)?;
            log::debug!("load step {ls} newton {k}: rel {rel:.3e}, {} iterations", stats.iterations);
            out.solves.push(SolveRecord {
                step: ls,
                newton_iter: k,
                stats,
                startup: false,
            });
            for (a, b) in u.iter_mut().zip(&du) {
                *a += b;
            }
            k += 1;
        }
        if !converged {
            return Err(DynamicsError::NewtonDivergence {
                step: ls,
                iterations: k,
                residual: rel,
            });
        }
        out.steps.push(StepRecord {
            step: ls,
            t,
            newton_iterations: k,
            residual: rel,
            kinetic: 0.0,
            strain: model.strain_energy(&u)?,
            contact: None,
        });
    }
    out.state.u = u;
    out.state.t = t;
    Ok(out)
}

/// Explicit central-difference integration with the consistent mass
/// (diagonal for collocated Lagrange elements). `M/Δt²` is condensed once;
/// each step solves `(M/Δt²) u₊ = ψ + (M/Δt²)(2u − u₋)`.
#[allow(clippy::too_many_arguments)]
pub fn explicit_run(
    model: &FeModel,
    load: &dyn ExternalLoad,
    u0: Vec<f64>,
    v0: Vec<f64>,
    dt: f64,
    n_steps: usize,
    solver: &SolverSettings,
    snapshot_stride: usize,
) -> Result<RunResult> {
    if !(dt > 0.0) {
        return Err(DynamicsError::Invalid(format!("time step must be positive, got {dt}")));
    }
    let n = model.num_free();
    let mass = model.assemble_operator(&vec![0.0; n], 1.0, 0.0, None)?;
    let msolver = MassSolver::new(model, &mass, solver)?;
    let mut out = RunResult::new(TimeState::at_rest(n));
    let psi = |u: &[f64], t: f64| -> Result<Vec<f64>> {
        let f = load.load(model, t)?;
        let r = model.internal_force(u)?;
        Ok(f.iter().zip(&r).map(|(a, b)| a - b).collect())
    };
    let (a0, st0) = msolver.solve(&psi(&u0, 0.0)?, solver)?;
    out.solves.push(SolveRecord {
        step: 0,
        newton_iter: 0,
        stats: st0,
        startup: true,
    });
    let mut u_prev: Vec<f64> = (0..n).map(|i| u0[i] - dt * v0[i] + 0.5 * dt * dt * a0[i]).collect();
    let mut u = u0;
    record(&mut out, 0, 0.0, &u, snapshot_stride, n_steps == 0);
    let mut mu = vec![0.0; n];
    for step in 1..=n_steps {
        let t = (step - 1) as f64 * dt;
        let p = psi(&u, t)?;
        let w: Vec<f64> = (0..n).map(|i| 2.0 * u[i] - u_prev[i]).collect();
        mass.matvec(&w, &mut mu);
        // Scaling both sides by Δt² leaves the mass operator unscaled.
        let rhs: Vec<f64> = (0..n).map(|i| dt * dt * p[i] + mu[i]).collect();
        let (u_new, stats) = msolver.solve(&rhs, solver)?;
        out.solves.push(SolveRecord {
            step,
            newton_iter: 0,
            stats,
            startup: false,
        });
        u_prev = std::mem::replace(&mut u, u_new);
        record(&mut out, step, step as f64 * dt, &u, snapshot_stride, step == n_steps);
    }
    let t_end = n_steps as f64 * dt;
    let (a, st) = msolver.solve(&psi(&u, t_end)?, solver)?;
    out.solves.push(SolveRecord {
        step: n_steps,
        newton_iter: 1,
        stats: st,
        startup: true,
    });
    let v: Vec<f64> = (0..n).map(|i| (u[i] - u_prev[i]) / dt + 0.5 * dt * a[i]).collect();
    mass.matvec(&v, &mut mu);
    out.steps.push(StepRecord {
        step: n_steps,
        t: t_end,
        newton_iterations: 0,
        residual: 0.0,
        kinetic: 0.5 * dot(&v, &mu),
        strain: model.strain_energy(&u)?,
        contact: None,
    });
    out.state = TimeState {
        t: t_end,
        u,
        v,
        a,
        u_prev: Some(u_prev),
    };
    Ok(out)
}

/// Rigid-obstacle contact attached to a Newmark run.
#[derive(Debug, Clone)]
pub struct ContactSetup {
    pub surface: ContactSurface,
    pub obstacle: RigidObstacle,
    pub params: ContactParams,
}

/// Newmark/Newton integration, optionally with penalty contact.
#[allow(clippy::too_many_arguments)]
pub fn newmark_run(
    model: &FeModel,
    load: &dyn ExternalLoad,
    u0: Vec<f64>,
    v0: Vec<f64>,
    coeffs: &NewmarkCoeffs,
    n_steps: usize,
    newton: &NewtonSettings,
    solver: &SolverSettings,
    contact: Option<&ContactSetup>,
    snapshot_stride: usize,
) -> Result<RunResult> {
    let n = model.num_free();
    let dt = coeffs.dt;
    let mass = model.assemble_operator(&vec![0.0; n], 1.0, 0.0, None)?;
    let msolver = MassSolver::new(model, &mass, solver)?;
    let mut eps_n = contact.map(|c| c.params.eps_n).unwrap_or(0.0);
    let eval_contact = |u: &[f64], eps: f64| -> Option<ContactState> {
        contact.map(|c| contact_contribution(model, &c.surface, &c.obstacle, eps, u))
    };
    let mut mv = vec![0.0; n];

    // Initial acceleration from the equation of motion.
    let f0 = load.load(model, 0.0)?;
    let r0 = model.internal_force(&u0)?;
    let c0 = eval_contact(&u0, eps_n);
    let mut rhs: Vec<f64> = f0.iter().zip(&r0).map(|(a, b)| a - b).collect();
    if let Some(c) = &c0 {
        for (a, b) in rhs.iter_mut().zip(&c.force) {
            *a += b;
        }
    }
    let (a0, st0) = msolver.solve(&rhs, solver)?;
    let mut out = RunResult::new(TimeState {
        t: 0.0,
        u: u0,
        v: v0,
        a: a0,
        u_prev: None,
    });
    out.solves.push(SolveRecord {
        step: 0,
        newton_iter: 0,
        stats: st0,
        startup: true,
    });
    let energy_of = |s: &TimeState, c: &Option<ContactState>, mv: &mut Vec<f64>| -> Result<(f64, f64, Option<ContactStep>)> {
        mass.matvec(&s.v, mv);
        let kin = 0.5 * dot(&s.v, mv);
        let strain = model.strain_energy(&s.u)?;
        let cs = c.as_ref().map(|c| ContactStep {
            eps_n: 0.0,
            max_penetration: c.max_penetration,
            min_pressure: c
                .gaps
                .iter()
                .zip(&c.pressures)
                .filter(|(g, _)| **g < 0.0)
                .map(|(_, p)| *p)
                .fold(f64::INFINITY, f64::min),
            total_force: c.total_force,
            energy: c.energy,
            num_active: c.num_active,
            momentum: model.momentum(&s.v),
        });
        Ok((kin, strain, cs))
    };
    let (kin, strain, mut cs) = energy_of(&out.state, &c0, &mut mv)?;
    if let Some(c) = cs.as_mut() {
        c.eps_n = eps_n;
    }
    out.steps.push(StepRecord {
        step: 0,
        t: 0.0,
        newton_iterations: 0,
        residual: 0.0,
        kinetic: kin,
        strain,
        contact: cs,
    });
    let u_start = out.state.u.clone();
    record(&mut out, 0, 0.0, &u_start, snapshot_stride, n_steps == 0);

    let mut ma = vec![0.0; n];
    for step in 1..=n_steps {
        let t = step as f64 * dt;
        let f = load.load(model, t)?;
        let prev = out.state.clone();
        let mut increments = 0;
        let (u, iters, rel, cstate) = loop {
            let mut u = prev.u.clone();
            let mut psi0 = None;
            let mut last_contact: Option<ContactState> = None;
            let mut k = 0;
            let mut rel;
            let mut converged = false;
            loop {
                let a = coeffs.acceleration(&u, &prev);
                let r = model.internal_force(&u)?;
                mass.matvec(&a, &mut ma);
                let cst = eval_contact(&u, eps_n);
                let mut psi: Vec<f64> = (0..n).map(|i| f[i] - r[i] - ma[i]).collect();
                let mut scale = norm(&f).max(norm(&r)).max(norm(&ma));
                if let Some(c) = &cst {
                    for (p, fc) in psi.iter_mut().zip(&c.force) {
                        *p += fc;
                    }
                    scale = scale.max(norm(&c.force));
                }
                let pn = norm(&psi);
                let p0 = *psi0.get_or_insert(pn);
                rel = if p0 > 0.0 { pn / p0 } else { 0.0 };
                let stress_ok = match (&cst, &last_contact) {
                    (Some(c), Some(prev_c)) => c.pressure_change(prev_c) <= contact.map(|s| s.params.stress_tol).unwrap_or(1.0),
                    (Some(c), None) => !c.is_active(),
                    _ => true,
                };
                log::trace!("step {step} newton {k}: residual {pn:.3e} rel {rel:.3e} scale {scale:.3e}");
                let balanced = pn <= ROUNDOFF_BALANCE * scale || (k > 0 && rel <= newton.tol);
                if balanced && stress_ok {
                    converged = true;
                    last_contact = cst;
                    break;
                }
                if k >= newton.maxit {
                    break;
                }
                let blocks: BTreeMap<usize, DenseMatrix> = cst.as_ref().map(|c| c.matrices.clone()).unwrap_or_default();
                let extra = move |e: usize| blocks.get(&e).cloned();
                let (du, stats) = linear_solve(model, &u, coeffs.b[0], 1.0, Some(&extra), &psi, solver)?;
                out.solves.push(SolveRecord {
                    step,
                    newton_iter: k,
                    stats,
                    startup: false,
                });
                for (a, b) in u.iter_mut().zip(&du) {
                    *a += b;
                }
                last_contact = cst;
                k += 1;
            }
            if !converged {
                return Err(DynamicsError::NewtonDivergence {
                    step,
                    iterations: k,
                    residual: rel,
                });
            }
            match (contact, &last_contact) {
                (Some(setup), Some(c)) if c.max_penetration > setup.params.gap_tol => {
                    if increments >= setup.params.max_increments || setup.params.deps_n == 0.0 {
                        return Err(DynamicsError::ContactUnresolved {
                            step,
                            penetration: c.max_penetration,
                            gap_tol: setup.params.gap_tol,
                            increments,
                        });
                    }
                    eps_n += setup.params.deps_n;
                    increments += 1;
                    log::info!("step {step}: penetration {:.3e}, penalty raised to {eps_n:.3e}", c.max_penetration);
                }
                _ => break (u, k, rel, last_contact),
            }
        };
        let a = coeffs.acceleration(&u, &prev);
        let v = coeffs.velocity(&u, &prev);
        out.state = TimeState {
            t,
            u,
            v,
            a,
            u_prev: None,
        };
        let (kin, strain, mut cs) = energy_of(&out.state, &cstate, &mut mv)?;
        if let Some(c) = cs.as_mut() {
            c.eps_n = eps_n;
        }
        out.steps.push(StepRecord {
            step,
            t,
            newton_iterations: iters,
            residual: rel,
            kinetic: kin,
            strain,
            contact: cs,
        });
        out.last_contact = cstate;
        let u_now = out.state.u.clone();
        record(&mut out, step, t, &u_now, snapshot_stride, step == n_steps);
    }
    Ok(out)
}

/// Initial state of a manufactured field: `L2` projections of `u(·,0)` and
/// `v(·,0)`.
pub fn mms_initial_state(
    model: &FeModel,
    field: &dyn DisplacementField,
    solver: &SolverSettings,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mass = model.condensed_mass()?;
    let (u0, _) = model.l2_project(&mass, |x| field.displacement(x, 0.0), &solver.pcg)?;
    let (v0, _) = model.l2_project(&mass, |x| field.velocity(x, 0.0), &solver.pcg)?;
    Ok((u0, v0))
}

/// `L2` projections of a uniform initial displacement and velocity.
pub fn uniform_initial_state(
    model: &FeModel,
    displacement: [f64; 3],
    velocity: [f64; 3],
    solver: &SolverSettings,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = model.num_free();
    let zero = [0.0; 3];
    if displacement == zero && velocity == zero {
        return Ok((vec![0.0; n], vec![0.0; n]));
    }
    let mass = model.condensed_mass()?;
    let (u0, _) = model.l2_project(&mass, |_| displacement, &solver.pcg)?;
    let (v0, _) = model.l2_project(&mass, |_| velocity, &solver.pcg)?;
    Ok((u0, v0))
}

/// Observed convergence order from errors at successively halved steps.
pub fn observed_order(dts: &[f64], errors: &[f64]) -> Vec<f64> {
    dts.windows(2)
        .zip(errors.windows(2))
        .map(|(d, e)| (e[0] / e[1]).ln() / (d[0] / d[1]).ln())
        .collect()
}
