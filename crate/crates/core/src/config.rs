//! Declarative run configuration in a sectioned key-value text format.
//!
//! Grammar (one construct per line, surrounding whitespace ignored):
//!
//! ```text
//! line    := blank | comment | header | entry
//! comment := ('#' | ';') any*
//! header  := '[' name ']'
//! entry   := key '=' value [ '#' any* ]
//! ```
//!
//! Section names and keys are lowercase identifiers. A section or a key
//! may appear only once. Vectors are three comma-separated numbers, lists
//! are comma-separated names and booleans are `true` or `false`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::basis1d::{BasisKind, BasisTag, DEFAULT_JACOBI_WEIGHT, DEFAULT_K};
use crate::contact::ContactParams;
use crate::dynamics::{CflMode, LoadProfile, NewtonSettings, SolverSettings};
use crate::femcore::{AnalyticField, Integration};
use crate::material::NeoHookean;
use crate::meshdof::DirichletSpec;
use crate::solver::{PcgConfig, Preconditioner};

/// Largest polynomial order accepted from a configuration.
pub const MAX_ORDER: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown section [{section}]")]
    UnknownSection { line: usize, section: String },
    #[error("line {line}: unknown key `{key}` in [{section}]")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("line {line}: missing required key `{key}` in [{section}]")]
    MissingKey { line: usize, section: String, key: String },
    #[error("line {line}: missing required section [{section}]")]
    MissingSection { line: usize, section: String },
    #[error("line {line}: invalid value for `{key}`: {message}")]
    InvalidValue { line: usize, key: String, message: String },
    #[error("line {line}: {message}")]
    Conflict { line: usize, message: String },
}

impl ConfigError {
    /// One-based line the error refers to.
    pub fn line(&self) -> usize {
        match self {
            ConfigError::Syntax { line, .. }
            | ConfigError::UnknownSection { line, .. }
            | ConfigError::UnknownKey { line, .. }
            | ConfigError::MissingKey { line, .. }
            | ConfigError::MissingSection { line, .. }
            | ConfigError::InvalidValue { line, .. }
            | ConfigError::Conflict { line, .. } => *line,
        }
    }
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq)]
pub enum MeshSource {
    /// Structured hexahedral box.
    Box {
        elements: [usize; 3],
        lengths: [f64; 3],
        origin: [f64; 3],
    },
    /// Mesh file in the textual VERTICES/ELEMENTS/BOUNDARY format.
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialConfig {
    pub youngs: f64,
    pub poisson: f64,
    pub density: f64,
}

impl MaterialConfig {
    pub fn neo_hookean(&self) -> NeoHookean {
        NeoHookean::from_engineering(self.youngs, self.poisson, self.density).expect("validated at parse time")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisConfig {
    pub kind: BasisTag,
    pub order: usize,
    pub k: f64,
    /// Helmholtz weight; required for SDME-H.
    pub lambda: Option<f64>,
    pub jacobi_alpha: f64,
    pub jacobi_beta: f64,
    pub integration: Integration,
}

impl BasisConfig {
    pub fn kind(&self) -> BasisKind {
        let mut kind = BasisKind::new(self.kind)
            .with_k(self.k)
            .with_jacobi(self.jacobi_alpha, self.jacobi_beta);
        if let Some(l) = self.lambda {
            kind = kind.with_lambda(l);
        }
        kind
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Static,
    Explicit,
    Newmark,
}

impl Scheme {
    pub fn label(self) -> &'static str {
        match self {
            Scheme::Static => "static",
            Scheme::Explicit => "explicit",
            Scheme::Newmark => "newmark",
        }
    }
}

impl FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "static" => Ok(Scheme::Static),
            "explicit" | "central-difference" => Ok(Scheme::Explicit),
            "newmark" | "implicit" => Ok(Scheme::Newmark),
            _ => Err(format!("unknown scheme '{s}' (expected static, explicit or newmark)")),
        }
    }
}

/// How the time step is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepControl {
    Dt(f64),
    Steps(usize),
    /// Stability factor `δ` of the CFL estimate.
    Cfl(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeConfig {
    pub scheme: Scheme,
    /// Final time; for static runs the time at which loads are evaluated.
    pub t_end: f64,
    pub step: Option<StepControl>,
    pub cfl_mode: CflMode,
    pub gamma: f64,
    pub beta: f64,
    /// Snapshot every this many steps; 0 keeps only the final state.
    pub snapshot_stride: usize,
}

impl TimeConfig {
    /// Step count and size for a given CFL step estimate.
    pub fn resolve(&self, cfl_dt: impl FnOnce(f64) -> f64) -> (usize, f64) {
        match self.step {
            None => (0, 0.0),
            Some(StepControl::Steps(n)) => (n, self.t_end / n as f64),
            Some(StepControl::Dt(dt)) => {
                let n = round_steps(self.t_end / dt);
                (n, self.t_end / n as f64)
            }
            Some(StepControl::Cfl(delta)) => {
                let n = (self.t_end / cfl_dt(delta)).ceil().max(1.0) as usize;
                (n, self.t_end / n as f64)
            }
        }
    }
}

/// Step count for a ratio `T/dt`, tolerating roundoff in the ratio.
fn round_steps(ratio: f64) -> usize {
    let r = ratio.round();
    if (ratio - r).abs() <= 1e-9 * ratio.max(1.0) {
        r.max(1.0) as usize
    } else {
        ratio.ceil().max(1.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmsConfig {
    pub field: AnalyticField,
    /// Tags receiving the exact traction; the rest must be constrained.
    pub neumann: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadingConfig {
    pub tags: Vec<String>,
    pub traction: [f64; 3],
    /// Per unit mass.
    pub body_force: [f64; 3],
    pub profile: LoadProfile,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Problem {
    Mms(MmsConfig),
    Loading(LoadingConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletConfig {
    pub tags: Vec<String>,
    pub components: [bool; 3],
}

impl DirichletConfig {
    pub fn specs(&self) -> Vec<DirichletSpec> {
        self.tags
            .iter()
            .map(|t| DirichletSpec {
                tag: t.clone(),
                components: self.components,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InitialConfig {
    pub displacement: [f64; 3],
    pub velocity: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactConfig {
    pub tags: Vec<String>,
    pub point: [f64; 3],
    pub normal: [f64; 3],
    pub params: ContactParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    /// Prefix of every file written for the run.
    pub name: String,
    pub vtk: bool,
    pub vtk_resolution: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            name: "run".into(),
            vtk: false,
            vtk_resolution: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mesh: MeshSource,
    pub material: MaterialConfig,
    pub basis: BasisConfig,
    pub time: TimeConfig,
    pub solver: SolverSettings,
    pub newton: NewtonSettings,
    pub problem: Problem,
    pub dirichlet: Option<DirichletConfig>,
    pub initial: InitialConfig,
    pub contact: Option<ContactConfig>,
    pub output: OutputConfig,
}

struct Entry {
    value: String,
    line: usize,
}

struct Section {
    name: String,
    line: usize,
    entries: BTreeMap<String, Entry>,
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

fn tokenize(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with(';') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('[') {
            let name = rest.strip_suffix(']').map(str::trim).ok_or_else(|| ConfigError::Syntax {
                line,
                message: "section header must end with ']'".into(),
            })?;
            if !is_ident(name) {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("invalid section name '{name}'"),
                });
            }
            if sections.iter().any(|s| s.name == name) {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("section [{name}] appears twice"),
                });
            }
            sections.push(Section {
                name: name.to_string(),
                line,
                entries: BTreeMap::new(),
            });
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            message: "expected `key = value` or `[section]`".into(),
        })?;
        let key = key.trim();
        let value = value.split('#').next().unwrap_or("").trim();
        if !is_ident(key) {
            return Err(ConfigError::Syntax {
                line,
                message: format!("invalid key '{key}'"),
            });
        }
        let section = sections.last_mut().ok_or_else(|| ConfigError::Syntax {
            line,
            message: format!("key `{key}` appears before any section"),
        })?;
        if section.entries.contains_key(key) {
            return Err(ConfigError::Syntax {
                line,
                message: format!("key `{key}` appears twice in [{}]", section.name),
            });
        }
        section.entries.insert(
            key.to_string(),
            Entry {
                value: value.to_string(),
                line,
            },
        );
    }
    Ok(sections)
}

/// Consumes the keys of one section; leftovers are unknown keys.
struct Reader {
    name: String,
    line: usize,
    entries: BTreeMap<String, Entry>,
}

impl Reader {
    fn new(section: Section) -> Self {
        Reader {
            name: section.name,
            line: section.line,
            entries: section.entries,
        }
    }

    fn raw(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key).map(|e| (e.value, e.line))
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map(|e| e.line).unwrap_or(self.line)
    }

    fn missing(&self, key: &str) -> ConfigError {
        ConfigError::MissingKey {
            line: self.line,
            section: self.name.clone(),
            key: key.into(),
        }
    }

    fn get<T>(&mut self, key: &str, parse: impl Fn(&str) -> std::result::Result<T, String>) -> Result<Option<(T, usize)>> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => parse(&v)
                .map(|t| Some((t, line)))
                .map_err(|message| ConfigError::InvalidValue {
                    line,
                    key: key.into(),
                    message,
                }),
        }
    }

    fn opt<T>(&mut self, key: &str, parse: impl Fn(&str) -> std::result::Result<T, String>) -> Result<Option<T>> {
        Ok(self.get(key, parse)?.map(|(t, _)| t))
    }

    fn req<T>(&mut self, key: &str, parse: impl Fn(&str) -> std::result::Result<T, String>) -> Result<T> {
        self.opt(key, parse)?.ok_or_else(|| self.missing(key))
    }

    fn or<T>(&mut self, key: &str, default: T, parse: impl Fn(&str) -> std::result::Result<T, String>) -> Result<T> {
        Ok(self.opt(key, parse)?.unwrap_or(default))
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, e)) => Err(ConfigError::UnknownKey {
                line: e.line,
                section: self.name,
                key,
            }),
        }
    }
}

fn invalid(line: usize, key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        line,
        key: key.into(),
        message: message.into(),
    }
}

fn p_f64(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("'{s}' is not finite"))
    }
}

fn p_pos(s: &str) -> std::result::Result<f64, String> {
    let v = p_f64(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("must be positive, got {v}"))
    }
}

fn p_nonneg(s: &str) -> std::result::Result<f64, String> {
    let v = p_f64(s)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must be non-negative, got {v}"))
    }
}

fn p_usize(s: &str) -> std::result::Result<usize, String> {
    s.parse().map_err(|_| format!("'{s}' is not a non-negative integer"))
}

fn p_count(s: &str) -> std::result::Result<usize, String> {
    match p_usize(s)? {
        0 => Err("must be at least 1".into()),
        n => Ok(n),
    }
}

fn p_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got '{s}'")),
    }
}

fn p_vec3(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated numbers, got '{s}'"));
    }
    Ok([p_f64(parts[0])?, p_f64(parts[1])?, p_f64(parts[2])?])
}

fn p_counts3(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated counts, got '{s}'"));
    }
    Ok([p_count(parts[0])?, p_count(parts[1])?, p_count(parts[2])?])
}

fn p_list(s: &str) -> std::result::Result<Vec<String>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            let t = t.trim();
            if t.is_empty() || t.chars().any(|c| c.is_whitespace() || c == '#') {
                Err(format!("invalid name '{t}' in list"))
            } else {
                Ok(t.to_string())
            }
        })
        .collect()
}

fn p_name(s: &str) -> std::result::Result<String, String> {
    if !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')) {
        Ok(s.to_string())
    } else {
        Err(format!("'{s}' must be a non-empty name of letters, digits, '-', '_' or '.'"))
    }
}

fn p_components(s: &str) -> std::result::Result<[bool; 3], String> {
    let mut c = [false; 3];
    for t in p_list(s)? {
        let i = match t.as_str() {
            "x" => 0,
            "y" => 1,
            "z" => 2,
            _ => return Err(format!("unknown component '{t}' (expected x, y or z)")),
        };
        if c[i] {
            return Err(format!("component '{t}' listed twice"));
        }
        c[i] = true;
    }
    if c == [false; 3] {
        return Err("at least one component is required".into());
    }
    Ok(c)
}

fn p_parse<T: FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

fn p_field(s: &str) -> std::result::Result<AnalyticField, String> {
    AnalyticField::from_name(s).ok_or_else(|| {
        let names: Vec<&str> = AnalyticField::REGISTRY.iter().map(|(n, _)| *n).collect();
        format!("unknown field '{s}' (known: {})", names.join(", "))
    })
}

const SECTIONS: [&str; 11] = [
    "mesh", "material", "basis", "time", "solver", "newton", "mms", "loading", "dirichlet", "initial", "contact",
];

/// Parses and validates a configuration.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let eof = text.lines().count().max(1);
    let mut sections: BTreeMap<String, Section> = BTreeMap::new();
    for s in tokenize(text)? {
        if !SECTIONS.contains(&s.name.as_str()) && s.name != "output" {
            return Err(ConfigError::UnknownSection {
                line: s.line,
                section: s.name,
            });
        }
        sections.insert(s.name.clone(), s);
    }
    let mut take = |name: &str| sections.remove(name).map(Reader::new);
    let required = |r: Option<Reader>, name: &str| {
        r.ok_or_else(|| ConfigError::MissingSection {
            line: eof,
            section: name.into(),
        })
    };

    let mesh = parse_mesh_section(required(take("mesh"), "mesh")?)?;
    let material = parse_material(required(take("material"), "material")?)?;
    let basis = parse_basis(required(take("basis"), "basis")?)?;
    let time_reader = required(take("time"), "time")?;
    let time_line = time_reader.line;
    let time = parse_time(time_reader)?;
    let solver = match take("solver") {
        Some(r) => parse_solver(r)?,
        None => SolverSettings::default(),
    };
    let newton = match take("newton") {
        Some(r) => parse_newton(r)?,
        None => NewtonSettings::default(),
    };
    let problem = match (take("mms"), take("loading")) {
        (Some(m), Some(l)) => {
            return Err(ConfigError::Conflict {
                line: m.line.max(l.line),
                message: "exactly one of [mms] and [loading] may be present, found both".into(),
            })
        }
        (None, None) => {
            return Err(ConfigError::Conflict {
                line: eof,
                message: "exactly one of [mms] and [loading] must be present, found neither".into(),
            })
        }
        (Some(m), None) => Problem::Mms(parse_mms(m)?),
        (None, Some(l)) => Problem::Loading(parse_loading(l)?),
    };
    let dirichlet = take("dirichlet").map(parse_dirichlet).transpose()?;
    let initial = match take("initial") {
        Some(r) => {
            if matches!(problem, Problem::Mms(_)) {
                return Err(ConfigError::Conflict {
                    line: r.line,
                    message: "[initial] cannot be combined with [mms]; initial data come from the manufactured field".into(),
                });
            }
            parse_initial(r)?
        }
        None => InitialConfig::default(),
    };
    let contact = match take("contact") {
        Some(r) => {
            if time.scheme != Scheme::Newmark {
                return Err(ConfigError::Conflict {
                    line: r.line,
                    message: "[contact] requires scheme = newmark".into(),
                });
            }
            Some(parse_contact(r)?)
        }
        None => None,
    };
    let output = match take("output") {
        Some(r) => parse_output(r)?,
        None => OutputConfig::default(),
    };

    if time.scheme != Scheme::Static && time.step.is_none() {
        return Err(ConfigError::MissingKey {
            line: time_line,
            section: "time".into(),
            key: "dt, steps or cfl_delta".into(),
        });
    }
    if time.scheme == Scheme::Static && !matches!(problem, Problem::Mms(_)) && initial != InitialConfig::default() {
        return Err(ConfigError::Conflict {
            line: time_line,
            message: "static runs take no initial displacement or velocity".into(),
        });
    }
    if let Problem::Mms(m) = &problem {
        if m.field.is_static() != (time.scheme == Scheme::Static) {
            return Err(ConfigError::Conflict {
                line: time_line,
                message: format!(
                    "field '{}' is {} but scheme is {}",
                    m.field.name(),
                    if m.field.is_static() { "static" } else { "time-dependent" },
                    time.scheme.label()
                ),
            });
        }
    }
    Ok(RunConfig {
        mesh,
        material,
        basis,
        time,
        solver,
        newton,
        problem,
        dirichlet,
        initial,
        contact,
        output,
    })
}

fn parse_mesh_section(mut r: Reader) -> Result<MeshSource> {
    let (generator, line) = r.get("generator", |s| Ok(s.to_string()))?.ok_or_else(|| r.missing("generator"))?;
    let src = match generator.as_str() {
        "box" => MeshSource::Box {
            elements: r.req("elements", p_counts3)?,
            lengths: {
                let line = r.line_of("lengths");
                let l = r.or("lengths", [1.0; 3], p_vec3)?;
                if l.iter().any(|v| *v <= 0.0) {
                    return Err(invalid(line, "lengths", "box edge lengths must be positive"));
                }
                l
            },
            origin: r.or("origin", [0.0; 3], p_vec3)?,
        },
        "file" => MeshSource::File(PathBuf::from(r.req("path", |s| {
            if s.is_empty() {
                Err("path must not be empty".to_string())
            } else {
                Ok(s.to_string())
            }
        })?)),
        other => return Err(invalid(line, "generator", format!("unknown generator '{other}' (expected box or file)"))),
    };
    r.finish()?;
    Ok(src)
}

fn parse_material(mut r: Reader) -> Result<MaterialConfig> {
    let youngs = r.req("youngs", p_pos)?;
    let line = r.line_of("poisson");
    let poisson = r.req("poisson", p_f64)?;
    if !(poisson > -1.0 && poisson < 0.5) {
        return Err(invalid(line, "poisson", format!("must lie in (-1, 0.5), got {poisson}")));
    }
    let density = r.req("density", p_pos)?;
    r.finish()?;
    Ok(MaterialConfig {
        youngs,
        poisson,
        density,
    })
}

fn parse_basis(mut r: Reader) -> Result<BasisConfig> {
    let (kind, kind_line) = r.get("kind", p_parse::<BasisTag>)?.ok_or_else(|| r.missing("kind"))?;
    let (order, order_line) = r.get("order", p_count)?.ok_or_else(|| r.missing("order"))?;
    let min = if matches!(kind, BasisTag::SdmeM | BasisTag::SdmeK | BasisTag::SdmeH) { 2 } else { 1 };
    if order < min || order > MAX_ORDER {
        return Err(invalid(order_line, "order", format!("{kind} needs order in {min}..={MAX_ORDER}, got {order}")));
    }
    let k_line = r.line_of("k");
    let k = r.or("k", DEFAULT_K, p_f64)?;
    if !(0.0..=1.0).contains(&k) {
        return Err(invalid(k_line, "k", format!("must lie in [0, 1], got {k}")));
    }
    let lambda = r.opt("lambda", p_nonneg)?;
    if kind == BasisTag::SdmeH && lambda.is_none() {
        return Err(ConfigError::MissingKey {
            line: kind_line,
            section: "basis".into(),
            key: "lambda".into(),
        });
    }
    let a_line = r.line_of("jacobi_alpha");
    let jacobi_alpha = r.or("jacobi_alpha", DEFAULT_JACOBI_WEIGHT, p_f64)?;
    let b_line = r.line_of("jacobi_beta");
    let jacobi_beta = r.or("jacobi_beta", DEFAULT_JACOBI_WEIGHT, p_f64)?;
    for (v, line, key) in [(jacobi_alpha, a_line, "jacobi_alpha"), (jacobi_beta, b_line, "jacobi_beta")] {
        if v <= -1.0 {
            return Err(invalid(line, key, format!("must exceed -1, got {v}")));
        }
    }
    let integration = r.or("integration", Integration::Consistent, p_parse::<Integration>)?;
    r.finish()?;
    Ok(BasisConfig {
        kind,
        order,
        k,
        lambda,
        jacobi_alpha,
        jacobi_beta,
        integration,
    })
}

fn parse_time(mut r: Reader) -> Result<TimeConfig> {
    let scheme = r.req("scheme", p_parse::<Scheme>)?;
    let t_line = r.line_of("t_end");
    let t_end = match scheme {
        Scheme::Static => r.or("t_end", 0.0, p_nonneg)?,
        _ => r.req("t_end", p_pos)?,
    };
    let mut controls = Vec::new();
    if let Some((dt, line)) = r.get("dt", p_pos)? {
        controls.push((StepControl::Dt(dt), line));
    }
    if let Some((n, line)) = r.get("steps", p_count)? {
        controls.push((StepControl::Steps(n), line));
    }
    let cfl_line = r.line_of("cfl_delta");
    if let Some((d, line)) = r.get("cfl_delta", p_f64)? {
        if !(d > 0.2 && d < 0.9) {
            return Err(invalid(cfl_line, "cfl_delta", format!("must lie in (0.2, 0.9), got {d}")));
        }
        controls.push((StepControl::Cfl(d), line));
    }
    if controls.len() > 1 {
        return Err(ConfigError::Conflict {
            line: controls[1].1,
            message: "give only one of dt, steps and cfl_delta".into(),
        });
    }
    let step = controls.first().map(|c| c.0);
    if scheme == Scheme::Static && step.is_some() {
        return Err(ConfigError::Conflict {
            line: controls[0].1,
            message: "static runs take no time step".into(),
        });
    }
    if let Some(StepControl::Dt(dt)) = step {
        if dt > t_end {
            return Err(invalid(t_line, "t_end", format!("must be at least dt = {dt}")));
        }
    }
    let cfl_mode = r.or("cfl_mode", CflMode::AsPrinted, p_parse::<CflMode>)?;
    let gamma = r.or("gamma", 0.5, p_pos)?;
    let beta = r.or("beta", 0.25, p_pos)?;
    let snapshot_stride = r.or("snapshot_stride", 0, p_usize)?;
    r.finish()?;
    Ok(TimeConfig {
        scheme,
        t_end,
        step,
        cfl_mode,
        gamma,
        beta,
        snapshot_stride,
    })
}

fn parse_solver(mut r: Reader) -> Result<SolverSettings> {
    let d = SolverSettings::default();
    let s = SolverSettings {
        pcg: PcgConfig {
            preconditioner: r.or("preconditioner", d.pcg.preconditioner, p_parse::<Preconditioner>)?,
            tol: r.or("tol", d.pcg.tol, p_pos)?,
            maxit: r.or("maxit", d.pcg.maxit, p_count)?,
        },
        condense: r.or("condense", d.condense, p_bool)?,
    };
    r.finish()?;
    Ok(s)
}

fn parse_newton(mut r: Reader) -> Result<NewtonSettings> {
    let d = NewtonSettings::default();
    let s = NewtonSettings {
        tol: r.or("tol", d.tol, p_pos)?,
        maxit: r.or("maxit", d.maxit, p_count)?,
        load_steps: r.or("load_steps", d.load_steps, p_count)?,
    };
    r.finish()?;
    Ok(s)
}

fn parse_mms(mut r: Reader) -> Result<MmsConfig> {
    let m = MmsConfig {
        field: r.req("field", p_field)?,
        neumann: r.or("neumann", Vec::new(), p_list)?,
    };
    r.finish()?;
    Ok(m)
}

fn parse_loading(mut r: Reader) -> Result<LoadingConfig> {
    let l = LoadingConfig {
        tags: r.or("tags", Vec::new(), p_list)?,
        traction: r.or("traction", [0.0; 3], p_vec3)?,
        body_force: r.or("body_force", [0.0; 3], p_vec3)?,
        profile: r.or("profile", LoadProfile::Constant, p_parse::<LoadProfile>)?,
    };
    if l.traction != [0.0; 3] && l.tags.is_empty() {
        return Err(ConfigError::MissingKey {
            line: r.line,
            section: "loading".into(),
            key: "tags".into(),
        });
    }
    r.finish()?;
    Ok(l)
}

fn parse_dirichlet(mut r: Reader) -> Result<DirichletConfig> {
    let line = r.line_of("tags");
    let tags = r.req("tags", p_list)?;
    if tags.is_empty() {
        return Err(invalid(line, "tags", "at least one tag is required"));
    }
    let d = DirichletConfig {
        tags,
        components: r.or("components", [true; 3], p_components)?,
    };
    r.finish()?;
    Ok(d)
}

fn parse_initial(mut r: Reader) -> Result<InitialConfig> {
    let i = InitialConfig {
        displacement: r.or("displacement", [0.0; 3], p_vec3)?,
        velocity: r.or("velocity", [0.0; 3], p_vec3)?,
    };
    r.finish()?;
    Ok(i)
}

fn parse_contact(mut r: Reader) -> Result<ContactConfig> {
    let tags_line = r.line_of("tags");
    let tags = r.req("tags", p_list)?;
    if tags.is_empty() {
        return Err(invalid(tags_line, "tags", "at least one tag is required"));
    }
    let point = r.or("point", [0.0; 3], p_vec3)?;
    let n_line = r.line_of("normal");
    let normal = r.req("normal", p_vec3)?;
    let len = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (len - 1.0).abs() > 1e-12 {
        return Err(invalid(n_line, "normal", format!("must have unit length, got {len}")));
    }
    let d = ContactParams::default();
    let quad_points = match r.or("quad_points", 0, p_usize)? {
        0 => None,
        n => Some(n),
    };
    let params = ContactParams {
        eps_n: r.or("eps_n", d.eps_n, p_pos)?,
        deps_n: r.or("deps_n", d.deps_n, p_nonneg)?,
        gap_tol: r.or("gap_tol", d.gap_tol, p_pos)?,
        stress_tol: r.or("stress_tol", d.stress_tol, p_pos)?,
        quad_points,
        max_increments: r.or("max_increments", d.max_increments, p_usize)?,
    };
    r.finish()?;
    Ok(ContactConfig {
        tags,
        point,
        normal,
        params,
    })
}

fn parse_output(mut r: Reader) -> Result<OutputConfig> {
    let d = OutputConfig::default();
    let o = OutputConfig {
        name: r.or("name", d.name, p_name)?,
        vtk: r.or("vtk", d.vtk, p_bool)?,
        vtk_resolution: r.or("vtk_resolution", d.vtk_resolution, p_count)?,
    };
    r.finish()?;
    Ok(o)
}

fn vec3(v: [f64; 3]) -> String {
    format!("{}, {}, {}", v[0], v[1], v[2])
}

fn list(v: &[String]) -> String {
    v.join(", ")
}

impl RunConfig {
    /// Canonical text form; `parse_config` of it yields an equal value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "[mesh]");
        match &self.mesh {
            MeshSource::Box {
                elements,
                lengths,
                origin,
            } => {
                let _ = writeln!(w, "generator = box");
                let _ = writeln!(w, "elements = {}, {}, {}", elements[0], elements[1], elements[2]);
                let _ = writeln!(w, "lengths = {}", vec3(*lengths));
                let _ = writeln!(w, "origin = {}", vec3(*origin));
            }
            MeshSource::File(p) => {
                let _ = writeln!(w, "generator = file");
                let _ = writeln!(w, "path = {}", p.display());
            }
        }
        let m = &self.material;
        let _ = writeln!(w, "\n[material]\nyoungs = {}\npoisson = {}\ndensity = {}", m.youngs, m.poisson, m.density);
        let b = &self.basis;
        let _ = writeln!(w, "\n[basis]\nkind = {}\norder = {}\nk = {}", b.kind.label(), b.order, b.k);
        if let Some(l) = b.lambda {
            let _ = writeln!(w, "lambda = {l}");
        }
        let _ = writeln!(
            w,
            "jacobi_alpha = {}\njacobi_beta = {}\nintegration = {}",
            b.jacobi_alpha,
            b.jacobi_beta,
            b.integration.label()
        );
        let t = &self.time;
        let _ = writeln!(w, "\n[time]\nscheme = {}\nt_end = {}", t.scheme.label(), t.t_end);
        match t.step {
            Some(StepControl::Dt(dt)) => {
                let _ = writeln!(w, "dt = {dt}");
            }
            Some(StepControl::Steps(n)) => {
                let _ = writeln!(w, "steps = {n}");
            }
            Some(StepControl::Cfl(d)) => {
                let _ = writeln!(w, "cfl_delta = {d}");
            }
            None => {}
        }
        let _ = writeln!(
            w,
            "cfl_mode = {}\ngamma = {}\nbeta = {}\nsnapshot_stride = {}",
            t.cfl_mode.label(),
            t.gamma,
            t.beta,
            t.snapshot_stride
        );
        let so = &self.solver;
        let _ = writeln!(
            w,
            "\n[solver]\npreconditioner = {}\ntol = {}\nmaxit = {}\ncondense = {}",
            so.pcg.preconditioner.label(),
            so.pcg.tol,
            so.pcg.maxit,
            so.condense
        );
        let n = &self.newton;
        let _ = writeln!(w, "\n[newton]\ntol = {}\nmaxit = {}\nload_steps = {}", n.tol, n.maxit, n.load_steps);
        match &self.problem {
            Problem::Mms(m) => {
                let _ = writeln!(w, "\n[mms]\nfield = {}\nneumann = {}", m.field.name(), list(&m.neumann));
            }
            Problem::Loading(l) => {
                let _ = writeln!(
                    w,
                    "\n[loading]\ntags = {}\ntraction = {}\nbody_force = {}\nprofile = {}",
                    list(&l.tags),
                    vec3(l.traction),
                    vec3(l.body_force),
                    l.profile
                );
            }
        }
        if let Some(d) = &self.dirichlet {
            let comps: Vec<&str> = ["x", "y", "z"].iter().zip(d.components).filter(|(_, c)| *c).map(|(n, _)| *n).collect();
            let _ = writeln!(w, "\n[dirichlet]\ntags = {}\ncomponents = {}", list(&d.tags), comps.join(", "));
        }
        if !matches!(self.problem, Problem::Mms(_)) && self.initial != InitialConfig::default() {
            let i = &self.initial;
            let _ = writeln!(
                w,
                "\n[initial]\ndisplacement = {}\nvelocity = {}",
                vec3(i.displacement),
                vec3(i.velocity)
            );
        }
        if let Some(c) = &self.contact {
            let p = &c.params;
            let _ = writeln!(
                w,
                "\n[contact]\ntags = {}\npoint = {}\nnormal = {}\neps_n = {}\ndeps_n = {}\ngap_tol = {}\nstress_tol = {}\nquad_points = {}\nmax_increments = {}",
                list(&c.tags),
                vec3(c.point),
                vec3(c.normal),
                p.eps_n,
                p.deps_n,
                p.gap_tol,
                p.stress_tol,
                p.quad_points.unwrap_or(0),
                p.max_increments
            );
        }
        let o = &self.output;
        let _ = writeln!(w, "\n[output]\nname = {}\nvtk = {}\nvtk_resolution = {}", o.name, o.vtk, o.vtk_resolution);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MINIMAL: &str = "\
[mesh]
generator = box
elements = 2, 2, 2

[material]
youngs = 1000
poisson = 0.3
density = 1

[basis]
kind = SDME-M
order = 2

[time]
scheme = static

[mms]
field = static-sine
neumann = xmax, ymin, ymax, zmin, zmax

[dirichlet]
tags = xmin
";

    #[test]
    fn minimal_static_config_fills_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(
            c.mesh,
            MeshSource::Box {
                elements: [2, 2, 2],
                lengths: [1.0; 3],
                origin: [0.0; 3]
            }
        );
        assert_eq!(c.basis.k, DEFAULT_K);
        assert_eq!(c.basis.lambda, None);
        assert_eq!(c.basis.integration, Integration::Consistent);
        assert_eq!(c.solver, SolverSettings::default());
        assert_eq!(c.newton, NewtonSettings::default());
        assert_eq!(c.time.step, None);
        assert_eq!(c.output, OutputConfig::default());
        assert_eq!(c.dirichlet.unwrap().components, [true; 3]);
        match c.problem {
            Problem::Mms(m) => {
                assert_eq!(m.field, AnalyticField::StaticSine);
                assert_eq!(m.neumann.len(), 5);
            }
            _ => panic!("expected mms"),
        }
    }

    #[test]
    fn both_mms_and_loading_rejected() {
        let text = format!("{MINIMAL}\n[loading]\ntags = xmax\ntraction = 0, 0, 1\n");
        let e = parse_config(&text).unwrap_err();
        assert!(matches!(e, ConfigError::Conflict { .. }), "{e}");
        assert!(e.to_string().contains("[mms]"));
    }

    #[test]
    fn neither_mms_nor_loading_rejected() {
        let text = MINIMAL.replace("[mms]\nfield = static-sine\nneumann = xmax, ymin, ymax, zmin, zmax\n", "");
        assert!(matches!(parse_config(&text), Err(ConfigError::Conflict { .. })));
    }

    #[test]
    fn sdme_h_requires_lambda() {
        let text = MINIMAL.replace("kind = SDME-M", "kind = SDME_H");
        let e = parse_config(&text).unwrap_err();
        assert!(e.to_string().contains("lambda"), "{e}");
        assert_eq!(e.line(), 11);
        let ok = text.replace("order = 2", "order = 2\nlambda = 100");
        assert_eq!(parse_config(&ok).unwrap().basis.lambda, Some(100.0));
    }

    #[test]
    fn unknown_keys_and_sections_carry_lines() {
        let e = parse_config(&MINIMAL.replace("density = 1", "density = 1\ncolour = red")).unwrap_err();
        assert_eq!(
            e,
            ConfigError::UnknownKey {
                line: 9,
                section: "material".into(),
                key: "colour".into()
            }
        );
        let e = parse_config(&format!("{MINIMAL}[extras]\n")).unwrap_err();
        assert!(matches!(e, ConfigError::UnknownSection { line: 23, .. }), "{e}");
    }

    #[test]
    fn out_of_range_values_rejected() {
        for (from, to, key) in [
            ("poisson = 0.3", "poisson = 0.5", "poisson"),
            ("youngs = 1000", "youngs = -1", "youngs"),
            ("order = 2", "order = 1", "order"),
            ("order = 2", "order = 2\nk = 1.5", "k"),
            ("elements = 2, 2, 2", "elements = 2, 0, 2", "elements"),
        ] {
            let e = parse_config(&MINIMAL.replace(from, to)).unwrap_err();
            match &e {
                ConfigError::InvalidValue { key: k, .. } => assert_eq!(k, key),
                _ => panic!("{to}: {e}"),
            }
        }
    }

    #[test]
    fn syntax_errors_carry_lines() {
        let e = parse_config("[mesh]\ngenerator box\n").unwrap_err();
        assert_eq!(e.line(), 2);
        let e = parse_config("x = 1\n").unwrap_err();
        assert_eq!(e.line(), 1);
        let e = parse_config("[mesh]\n[mesh]\n").unwrap_err();
        assert_eq!(e.line(), 2);
        let e = parse_config("[mesh\n").unwrap_err();
        assert_eq!(e.line(), 1);
        let e = parse_config(&MINIMAL.replace("order = 2", "order = 2\norder = 3")).unwrap_err();
        assert_eq!(e.line(), 13);
    }

    #[test]
    fn dynamic_scheme_needs_one_step_control() {
        let dynamic = MINIMAL
            .replace("scheme = static", "scheme = newmark\nt_end = 0.25")
            .replace("static-sine", "sine-sine");
        assert!(matches!(parse_config(&dynamic), Err(ConfigError::MissingKey { .. })));
        let c = parse_config(&dynamic.replace("t_end = 0.25", "t_end = 0.25\ndt = 2e-3")).unwrap();
        assert_eq!(c.time.resolve(|_| unreachable!()), (125, 0.002));
        let both = dynamic.replace("t_end = 0.25", "t_end = 0.25\ndt = 2e-3\nsteps = 10");
        assert!(matches!(parse_config(&both), Err(ConfigError::Conflict { .. })));
        let mismatch = MINIMAL.replace("scheme = static", "scheme = newmark\nt_end = 1\nsteps = 4");
        assert!(matches!(parse_config(&mismatch), Err(ConfigError::Conflict { .. })));
    }

    #[test]
    fn step_resolution() {
        let mut t = TimeConfig {
            scheme: Scheme::Explicit,
            t_end: 0.25,
            step: Some(StepControl::Steps(800)),
            cfl_mode: CflMode::AsPrinted,
            gamma: 0.5,
            beta: 0.25,
            snapshot_stride: 0,
        };
        assert_eq!(t.resolve(|_| 1.0), (800, 0.25 / 800.0));
        t.step = Some(StepControl::Cfl(0.85));
        let (n, dt) = t.resolve(|d| d * 1e-3);
        assert_eq!(n, 295);
        assert!(dt <= 0.85e-3);
        t.step = Some(StepControl::Dt(0.1));
        assert_eq!(t.resolve(|_| 1.0).0, 3);
    }

    #[test]
    fn contact_requires_newmark_and_unit_normal() {
        let loading = "\
[mesh]
generator = box
elements = 1, 2, 1
lengths = 0.5, 1, 0.5
[material]
youngs = 1000
poisson = 0.3
density = 1
[basis]
kind = st
order = 2
[time]
scheme = newmark
t_end = 0.2
dt = 1e-3
[loading]
[initial]
velocity = 0, -0.06, 0
[contact]
tags = ymin
normal = 0, 1, 0
";
        let c = parse_config(loading).unwrap();
        assert_eq!(c.contact.as_ref().unwrap().params, ContactParams::default());
        assert_eq!(c.initial.velocity, [0.0, -0.06, 0.0]);
        let e = parse_config(&loading.replace("normal = 0, 1, 0", "normal = 0, 2, 0")).unwrap_err();
        assert!(matches!(e, ConfigError::InvalidValue { line: 21, .. }), "{e}");
        let e = parse_config(&loading.replace("scheme = newmark", "scheme = explicit")).unwrap_err();
        assert!(matches!(e, ConfigError::Conflict { line: 19, .. }), "{e}");
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = format!("# header comment\n; another\n\n{}", MINIMAL.replace("order = 2", "order = 2   # trailing"));
        assert_eq!(parse_config(&text).unwrap(), parse_config(MINIMAL).unwrap());
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        let basis = (
            prop::sample::select(BasisTag::ALL.to_vec()),
            2usize..=8,
            0.0f64..=1.0,
            prop::option::of(0.0f64..1e3),
            -0.9f64..3.0,
            prop::sample::select(vec![Integration::Consistent, Integration::Minimal, Integration::Collocation]),
        )
            .prop_map(|(kind, order, k, lambda, a, integration)| BasisConfig {
                kind,
                order,
                k,
                lambda: if kind == BasisTag::SdmeH { Some(lambda.unwrap_or(1.0)) } else { lambda },
                jacobi_alpha: a,
                jacobi_beta: a,
                integration,
            });
        let mesh = prop_oneof![
            (1usize..5, 1usize..5, 1usize..5, 0.1f64..10.0, -5.0f64..5.0).prop_map(|(a, b, c, l, o)| MeshSource::Box {
                elements: [a, b, c],
                lengths: [l, l * 0.5, l * 2.0],
                origin: [o, -o, 0.0],
            }),
            "[a-z]{1,8}\\.mesh".prop_map(|s| MeshSource::File(PathBuf::from(s))),
        ];
        let dynamic = (
            prop::bool::ANY,
            1e-3f64..1.0,
            prop_oneof![
                (1e-5f64..1e-3).prop_map(StepControl::Dt),
                (1usize..1000).prop_map(StepControl::Steps),
                (0.21f64..0.89).prop_map(StepControl::Cfl)
            ],
            0usize..10,
        );
        (
            mesh,
            basis,
            dynamic,
            prop::bool::ANY,
            prop::option::of((0.0f64..1.0, 1e2f64..1e6)),
            1e-14f64..1e-4,
            prop::sample::select(vec![Preconditioner::Diagonal, Preconditioner::SymmetricGaussSeidel]),
        )
            .prop_map(|(mesh, basis, (explicit, t_end, step, stride), mms, contact, tol, pre)| {
                let scheme = if contact.is_some() {
                    Scheme::Newmark
                } else if explicit {
                    Scheme::Explicit
                } else {
                    Scheme::Newmark
                };
                let problem = if mms && contact.is_none() {
                    Problem::Mms(MmsConfig {
                        field: AnalyticField::SineSine,
                        neumann: vec!["xmax".into(), "ymin".into()],
                    })
                } else {
                    Problem::Loading(LoadingConfig {
                        tags: vec!["ymax".into()],
                        traction: [0.0, -tol * 1e3, 1.5],
                        body_force: [0.0, -9.81, 0.0],
                        profile: LoadProfile::HalfSine(t_end * 0.5),
                    })
                };
                let initial = if matches!(problem, Problem::Loading(_)) {
                    InitialConfig {
                        displacement: [0.0, t_end * 1e-2, 0.0],
                        velocity: [0.1, -0.06, 0.0],
                    }
                } else {
                    InitialConfig::default()
                };
                RunConfig {
                    mesh,
                    material: MaterialConfig {
                        youngs: 1000.0 + t_end,
                        poisson: 0.3,
                        density: 1.0,
                    },
                    basis,
                    time: TimeConfig {
                        scheme,
                        t_end,
                        step: Some(step),
                        cfl_mode: CflMode::PhysicalSqrt,
                        gamma: 0.5,
                        beta: 0.25,
                        snapshot_stride: stride,
                    },
                    solver: SolverSettings {
                        pcg: PcgConfig {
                            preconditioner: pre,
                            tol,
                            maxit: 5000,
                        },
                        condense: explicit,
                    },
                    newton: NewtonSettings {
                        tol: tol * 10.0,
                        maxit: 30,
                        load_steps: 2,
                    },
                    problem,
                    dirichlet: Some(DirichletConfig {
                        tags: vec!["xmin".into()],
                        components: [true, false, explicit],
                    }),
                    initial,
                    contact: contact.map(|(g, eps)| ContactConfig {
                        tags: vec!["ymin".into()],
                        point: [0.0, -g, 0.0],
                        normal: [0.0, 1.0, 0.0],
                        params: ContactParams {
                            eps_n: eps,
                            deps_n: eps * 0.1,
                            gap_tol: 1e-3,
                            stress_tol: 1e-2,
                            quad_points: Some(3),
                            max_increments: 50,
                        },
                    }),
                    output: OutputConfig {
                        name: "case-1".into(),
                        vtk: explicit,
                        vtk_resolution: 3,
                    },
                }
            })
    }

    proptest! {
        #[test]
        fn text_round_trip(c in arb_config()) {
            let text = c.to_text();
            let back = parse_config(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_text(), text);
        }

        #[test]
        fn arbitrary_text_never_panics(s in "[\\[\\]a-z_=#;,.0-9 \\n-]{0,200}") {
            let _ = parse_config(&s);
        }
    }
}
