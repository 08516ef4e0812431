//! Run configuration, figure recipes and the command implementations
//! behind the `vaet` binary.
//!
//! Configs are TOML. Dimensioned values are strings with a unit suffix
//! (`"0.1487 eV"`, `"4.427 ps"`, `"290 K"`); `alpha` and `gamma_e` are bare
//! numbers in the internal eV-based units. A recipe supplies defaults that a
//! config file overrides key by key.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::bath::{correlation_function, memory_kernels, BathFamily, BathSpec};
use crate::error::{Error, Result};
use crate::hilbert::{CouplingKind, SystemParams};
use crate::noise::bath_covariance_selftest;
use crate::propagator::{InitialVib, MarkovIntegrator, PropagatorConfig, Scheme};
use crate::ratetheory::{mj_curve, MjVariant};
use crate::sweep::{
    mj_params_for, run_sweep, simulate, FitOptions, LambdaConvention, Simulation, Spacing, StationaryMode, SweepAxis,
    SweepParam, SweepSpec,
};
use crate::units::{internal_to_ps, kelvin_to_ev, ps_to_internal};

pub const OUT_DIR_ENV: &str = "VAET_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "vaet-out";

pub const RECIPES: &[(&str, &str)] = &[
    ("fig1a", include_str!("../recipes/fig1a.toml")),
    ("fig1b", include_str!("../recipes/fig1b.toml")),
    ("fig2", include_str!("../recipes/fig2.toml")),
    ("fig3a", include_str!("../recipes/fig3a.toml")),
    ("fig3b", include_str!("../recipes/fig3b.toml")),
    ("fig3c", include_str!("../recipes/fig3c.toml")),
    ("fig3d", include_str!("../recipes/fig3d.toml")),
    ("fig4a", include_str!("../recipes/fig4a.toml")),
    ("fig4b", include_str!("../recipes/fig4b.toml")),
    ("fig4c", include_str!("../recipes/fig4c.toml")),
    ("fig4d", include_str!("../recipes/fig4d.toml")),
    ("fig5a", include_str!("../recipes/fig5a.toml")),
    ("fig5b", include_str!("../recipes/fig5b.toml")),
];

pub fn recipe_text(name: &str) -> Result<&'static str> {
    RECIPES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let known: Vec<&str> = RECIPES.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown recipe `{name}` (known: {})", known.join(", ")))
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonGrid {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl EpsilonGrid {
    /// Parses `min:max:n` (eV).
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::invalid("epsilon_grid", format!("expected min:max:n, got `{s}`"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let min: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let max: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
        if !(min < max) || n < 2 {
            return Err(Error::invalid("epsilon_grid", format!("need min < max and n >= 2, got `{s}`")));
        }
        Ok(Self { min, max, n })
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.min + (self.max - self.min) * i as f64 / (self.n - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub axes: Vec<SweepAxis>,
    pub n_traj: usize,
    pub trajectory_budget: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MjConfig {
    pub lambda_convention: LambdaConvention,
    pub variant: MjVariant,
    pub epsilon_grid: Option<EpsilonGrid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Step in internal units (eV⁻¹).
    pub dt: f64,
    pub duration_ps: f64,
}

impl GridConfig {
    pub fn n_points(&self) -> usize {
        (ps_to_internal(self.duration_ps) / self.dt).round() as usize + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestConfig {
    pub paths: usize,
    pub grid: GridConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub recipe: Option<String>,
    pub description: Option<String>,
    pub system: SystemParams<f64>,
    pub bath: BathSpec<f64>,
    pub coupling: CouplingKind,
    pub propagation: PropagatorConfig,
    pub duration_ps: f64,
    pub fit: FitOptions,
    pub output_dir: Option<String>,
    pub sweep: Option<SweepConfig>,
    pub mj: MjConfig,
    pub kernels: GridConfig,
    pub noise_selftest: SelftestConfig,
}

impl RunConfig {
    pub fn simulation(&self) -> Simulation {
        Simulation {
            system: self.system,
            bath: self.bath,
            coupling: self.coupling,
            propagation: self.propagation.clone(),
            fit: self.fit,
        }
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec> {
        let sweep = self
            .sweep
            .as_ref()
            .ok_or_else(|| Error::Config("config has no [sweep] section".into()))?;
        Ok(SweepSpec {
            base: self.simulation(),
            axes: sweep.axes.clone(),
            n_traj: sweep.n_traj,
            master_seed: self.propagation.master_seed,
            trajectory_budget: sweep.trajectory_budget,
        })
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.propagation.master_seed = seed;
    }

    pub fn set_traj(&mut self, n: usize) {
        self.propagation.n_traj = n;
        if let Some(s) = self.sweep.as_mut() {
            s.n_traj = n;
        }
    }
}

/// Reads a recipe, a config text or both (config keys win).
pub fn load_config(recipe: Option<&str>, config_text: Option<&str>) -> Result<RunConfig> {
    let user = match config_text {
        Some(t) => t.parse::<Table>().map_err(|e| Error::Config(format!("config is not valid TOML: {e}")))?,
        None => Table::new(),
    };
    let recipe_name = match recipe {
        Some(r) => Some(r.to_string()),
        None => user.get("recipe").and_then(Value::as_str).map(str::to_string),
    };
    let mut table = match &recipe_name {
        Some(name) => recipe_text(name)?
            .parse::<Table>()
            .map_err(|e| Error::Config(format!("recipe `{name}` is not valid TOML: {e}")))?,
        None => Table::new(),
    };
    merge(&mut table, user);
    if let Some(name) = recipe_name {
        table.insert("recipe".into(), Value::String(name));
    }
    parse_table(table)
}

/// Parses and validates a config text without a recipe layer, unless the
/// text names one.
pub fn parse_and_validate(config_text: &str) -> Result<RunConfig> {
    load_config(None, Some(config_text))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dim {
    Energy,
    Time,
    Temperature,
}

impl Dim {
    fn name(self) -> &'static str {
        match self {
            Dim::Energy => "energy",
            Dim::Time => "time",
            Dim::Temperature => "temperature",
        }
    }
}

/// Converts to eV (energy, temperature) or ps (time).
fn unit_factor(unit: &str, want: Dim) -> std::result::Result<f64, String> {
    let (dim, f) = match unit {
        "eV" => (Dim::Energy, 1.0),
        "meV" => (Dim::Energy, 1e-3),
        "ps" => (Dim::Time, 1.0),
        "fs" => (Dim::Time, 1e-3),
        "eV^-1" | "1/eV" => (Dim::Time, internal_to_ps(1.0)),
        "K" => (Dim::Temperature, f64::NAN),
        _ => return Err(format!("unknown unit `{unit}`")),
    };
    match (dim, want) {
        (d, w) if d == w => Ok(f),
        // Temperatures may be given directly as k_B T.
        (Dim::Energy, Dim::Temperature) => Ok(f),
        (d, w) => Err(format!("unit `{unit}` is for {}, expected {}", d.name(), w.name())),
    }
}

struct Reader {
    errors: Vec<String>,
}

impl Reader {
    fn section(&mut self, root: &mut Table, name: &str, required: bool) -> Option<Table> {
        match root.remove(name) {
            Some(Value::Table(t)) => Some(t),
            Some(_) => {
                self.errors.push(format!("`{name}` must be a table"));
                None
            }
            None => {
                if required {
                    self.errors.push(format!("missing section [{name}]"));
                }
                None
            }
        }
    }

    fn missing(&mut self, sec: &str, key: &str) {
        self.errors.push(format!("missing key `{sec}.{key}`"));
    }

    fn quantity(&mut self, t: &mut Table, sec: &str, key: &str, dim: Dim, default: Option<f64>) -> f64 {
        let Some(v) = t.remove(key) else {
            return default.unwrap_or_else(|| {
                self.missing(sec, key);
                f64::NAN
            });
        };
        let Some(s) = v.as_str() else {
            self.errors.push(format!(
                "`{sec}.{key}` needs a unit, write it as a string such as \"1.0 {}\"",
                match dim {
                    Dim::Energy => "eV",
                    Dim::Time => "ps",
                    Dim::Temperature => "K",
                }
            ));
            return f64::NAN;
        };
        let parts: Vec<&str> = s.split_whitespace().collect();
        let parsed = match parts.as_slice() {
            [num, unit] => num
                .parse::<f64>()
                .map_err(|_| format!("cannot read number `{num}`"))
                .and_then(|x| {
                    if *unit == "K" && dim == Dim::Temperature {
                        Ok(kelvin_to_ev(x))
                    } else {
                        unit_factor(unit, dim).map(|f| x * f)
                    }
                }),
            _ => Err(format!("expected `<number> <unit>`, got `{s}`")),
        };
        match parsed {
            Ok(x) => x,
            Err(e) => {
                self.errors.push(format!("`{sec}.{key}`: {e}"));
                f64::NAN
            }
        }
    }

    /// Bare number; an `eV` suffix is tolerated since these couplings are
    /// often quoted in eV.
    fn number(&mut self, t: &mut Table, sec: &str, key: &str, default: Option<f64>) -> f64 {
        match t.remove(key) {
            Some(Value::Float(x)) => x,
            Some(Value::Integer(i)) => i as f64,
            Some(Value::String(s)) => match s.split_whitespace().collect::<Vec<_>>().as_slice() {
                [num, "eV"] if num.parse::<f64>().is_ok() => num.parse().unwrap_or(f64::NAN),
                _ => {
                    self.errors.push(format!("`{sec}.{key}` must be a number, got \"{s}\""));
                    f64::NAN
                }
            },
            Some(_) => {
                self.errors.push(format!("`{sec}.{key}` must be a number"));
                f64::NAN
            }
            None => default.unwrap_or_else(|| {
                self.missing(sec, key);
                f64::NAN
            }),
        }
    }

    fn integer(&mut self, t: &mut Table, sec: &str, key: &str, default: Option<u64>) -> u64 {
        match t.remove(key) {
            Some(Value::Integer(i)) if i >= 0 => i as u64,
            Some(_) => {
                self.errors.push(format!("`{sec}.{key}` must be a non-negative integer"));
                0
            }
            None => default.unwrap_or_else(|| {
                self.missing(sec, key);
                0
            }),
        }
    }

    fn boolean(&mut self, t: &mut Table, sec: &str, key: &str, default: bool) -> bool {
        match t.remove(key) {
            Some(Value::Boolean(b)) => b,
            Some(_) => {
                self.errors.push(format!("`{sec}.{key}` must be true or false"));
                default
            }
            None => default,
        }
    }

    fn string(&mut self, t: &mut Table, sec: &str, key: &str) -> Option<String> {
        match t.remove(key) {
            Some(Value::String(s)) => Some(s),
            Some(_) => {
                self.errors.push(format!("`{sec}.{key}` must be a string"));
                None
            }
            None => None,
        }
    }

    fn choice<E: for<'de> Deserialize<'de>>(&mut self, t: &mut Table, sec: &str, key: &str) -> Option<E> {
        let s = self.string(t, sec, key)?;
        match E::deserialize(serde::de::value::StrDeserializer::<serde::de::value::Error>::new(&s)) {
            Ok(e) => Some(e),
            Err(_) => {
                self.errors.push(format!("`{sec}.{key}`: unknown value \"{s}\""));
                None
            }
        }
    }

    fn finish(&mut self, t: Table, sec: &str) {
        for k in t.keys() {
            if sec.is_empty() {
                self.errors.push(format!("unknown key `{k}`"));
            } else {
                self.errors.push(format!("unknown key `{sec}.{k}`"));
            }
        }
    }
}

fn flatten(e: Error, out: &mut Vec<String>) {
    match e {
        Error::Validation(list) => out.extend(list),
        Error::InvalidParameter { reason, .. } => out.push(reason),
        other => out.push(other.to_string()),
    }
}

fn parse_initial_vib(r: &mut Reader, s: &str) -> InitialVib {
    let parts: Vec<&str> = s.split_whitespace().collect();
    match parts.as_slice() {
        ["ground"] => InitialVib::Ground,
        ["fock", n] => match n.parse() {
            Ok(n) => InitialVib::Fock { n },
            Err(_) => {
                r.errors.push(format!("`propagation.initial_vib`: bad Fock level `{n}`"));
                InitialVib::Ground
            }
        },
        ["thermal", rest @ ..] => {
            let mut t = Table::new();
            t.insert("temperature".into(), Value::String(rest.join(" ")));
            let temperature = r.quantity(&mut t, "propagation.initial_vib", "temperature", Dim::Temperature, None);
            InitialVib::Thermal { temperature }
        }
        _ => {
            r.errors.push(format!(
                "`propagation.initial_vib`: expected \"ground\", \"fock <n>\" or \"thermal <T>\", got \"{s}\""
            ));
            InitialVib::Ground
        }
    }
}

fn parse_grid(r: &mut Reader, root: &mut Table, name: &str, dt_default: f64, dur_default: f64) -> (GridConfig, Option<Table>) {
    let mut t = r.section(root, name, false).unwrap_or_default();
    let dt_ps = r.quantity(&mut t, name, "dt", Dim::Time, Some(internal_to_ps(dt_default)));
    let duration_ps = r.quantity(&mut t, name, "duration", Dim::Time, Some(dur_default));
    if !(dt_ps > 0.0) || !(duration_ps > dt_ps) {
        r.errors.push(format!("[{name}] needs 0 < dt < duration"));
    }
    (
        GridConfig {
            dt: ps_to_internal(dt_ps),
            duration_ps,
        },
        Some(t),
    )
}

fn parse_table(mut root: Table) -> Result<RunConfig> {
    let mut r = Reader { errors: Vec::new() };
    let recipe = r.string(&mut root, "", "recipe");
    let description = r.string(&mut root, "", "description");

    let mut t = r.section(&mut root, "system", true).unwrap_or_default();
    let system = SystemParams {
        epsilon: r.quantity(&mut t, "system", "epsilon", Dim::Energy, None),
        delta: r.quantity(&mut t, "system", "delta", Dim::Energy, None),
        omega_v: r.quantity(&mut t, "system", "omega_v", Dim::Energy, None),
        gamma: r.quantity(&mut t, "system", "gamma", Dim::Energy, Some(0.0)),
        fock_dim: r.integer(&mut t, "system", "fock_dim", Some(10)) as usize,
    };
    r.finish(t, "system");

    let mut p = r.section(&mut root, "propagation", true).unwrap_or_default();
    let scheme: Option<Scheme> = r.choice(&mut p, "propagation", "scheme");
    if scheme.is_none() && !r.errors.iter().any(|e| e.contains("propagation.scheme")) {
        r.missing("propagation", "scheme");
    }
    let scheme = scheme.unwrap_or(Scheme::Closed);

    let bath_table = r.section(&mut root, "bath", false);
    if bath_table.is_none() && scheme != Scheme::Closed {
        r.errors.push(format!("scheme `{scheme:?}` needs a [bath] section with a spectral density family"));
    }
    let has_bath = bath_table.is_some();
    let mut b = bath_table.unwrap_or_default();
    let family_name = r.string(&mut b, "bath", "family");
    let alpha = r.number(&mut b, "bath", "alpha", if has_bath { None } else { Some(0.0) });
    let family = match (family_name.as_deref(), has_bath) {
        (Some("ohmic"), _) | (None, false) => BathFamily::Ohmic {
            alpha,
            omega_c: r.quantity(&mut b, "bath", "omega_c", Dim::Energy, if has_bath { None } else { Some(0.5) }),
        },
        (Some("structured"), _) => BathFamily::Structured {
            alpha,
            omega_0: r.quantity(&mut b, "bath", "omega_0", Dim::Energy, None),
            beta: r.quantity(&mut b, "bath", "beta", Dim::Energy, None),
        },
        (Some(other), _) => {
            r.errors.push(format!("`bath.family`: unknown value \"{other}\" (ohmic or structured)"));
            BathFamily::Ohmic { alpha, omega_c: 0.5 }
        }
        (None, true) => {
            r.missing("bath", "family");
            BathFamily::Ohmic { alpha, omega_c: 0.5 }
        }
    };
    let bath = BathSpec {
        family,
        temperature: r.quantity(&mut b, "bath", "temperature", Dim::Temperature, Some(kelvin_to_ev(290.0))),
        gamma_e: r.number(&mut b, "bath", "gamma_e", if has_bath { None } else { Some(0.0) }),
    };
    r.finish(b, "bath");

    let coupling_given: Option<CouplingKind> = r.choice(&mut p, "propagation", "coupling");
    let coupling = match (scheme.implied_coupling(), coupling_given) {
        (Some(implied), Some(given)) if implied != given => {
            r.errors.push(format!(
                "`propagation.coupling` = {given:?} contradicts `propagation.scheme` = {scheme:?}"
            ));
            implied
        }
        (Some(implied), _) => implied,
        (None, Some(given)) => given,
        (None, None) => CouplingKind::Diagonal,
    };
    let dt_ps = r.quantity(&mut p, "propagation", "dt", Dim::Time, None);
    let duration_ps = r.quantity(&mut p, "propagation", "duration", Dim::Time, None);
    let dt = ps_to_internal(dt_ps);
    let n_steps = if dt_ps > 0.0 && duration_ps > 0.0 {
        (duration_ps / dt_ps).round() as usize
    } else {
        0
    };
    let n_traj = r.integer(&mut p, "propagation", "n_traj", Some(1)) as usize;
    let seed = r.integer(&mut p, "propagation", "seed", Some(0));
    let mut propagation = PropagatorConfig::new(scheme, dt, n_steps, n_traj, seed);
    propagation.renormalize_each_step = r.boolean(&mut p, "propagation", "renormalize", true);
    propagation.record_stride = r.integer(&mut p, "propagation", "record_stride", Some(1)) as usize;
    propagation.keep_full_density = r.boolean(&mut p, "propagation", "keep_full_density", false);
    if let Some(s) = r.string(&mut p, "propagation", "initial_vib") {
        propagation.initial_vib = parse_initial_vib(&mut r, &s);
    }
    propagation.markov_integrator = r
        .choice::<MarkovIntegrator>(&mut p, "propagation", "markov_integrator")
        .unwrap_or_default();
    r.finish(p, "propagation");

    let mut f = r.section(&mut root, "fit", false).unwrap_or_default();
    let fixed = f.contains_key("p_inf").then(|| r.number(&mut f, "fit", "p_inf", None));
    let tail = f.contains_key("tail_fraction").then(|| r.number(&mut f, "fit", "tail_fraction", None));
    let stationary = match (fixed, tail) {
        (Some(_), Some(_)) => {
            r.errors.push("[fit] takes either `p_inf` or `tail_fraction`, not both".into());
            StationaryMode::default()
        }
        (Some(p_inf), None) => StationaryMode::Fixed { p_inf },
        (None, Some(tail_fraction)) => StationaryMode::Estimate { tail_fraction },
        (None, None) => StationaryMode::default(),
    };
    r.finish(f, "fit");

    let mut o = r.section(&mut root, "output", false).unwrap_or_default();
    let output_dir = r.string(&mut o, "output", "dir");
    r.finish(o, "output");

    let sweep = r.section(&mut root, "sweep", false).map(|mut s| {
        let n_traj = r.integer(&mut s, "sweep", "n_traj", Some(n_traj as u64)) as usize;
        let trajectory_budget = s.contains_key("budget").then(|| r.integer(&mut s, "sweep", "budget", None));
        let mut axes = Vec::new();
        match s.remove("axes") {
            Some(Value::Array(list)) => {
                for (i, a) in list.into_iter().enumerate() {
                    let sec = format!("sweep.axes[{i}]");
                    let Value::Table(mut a) = a else {
                        r.errors.push(format!("`{sec}` must be a table"));
                        continue;
                    };
                    let param: Option<SweepParam> = r.choice(&mut a, &sec, "param");
                    let min = r.quantity(&mut a, &sec, "min", Dim::Energy, None);
                    let max = r.quantity(&mut a, &sec, "max", Dim::Energy, None);
                    let n_points = r.integer(&mut a, &sec, "n_points", None) as usize;
                    let spacing = r.choice::<Spacing>(&mut a, &sec, "spacing").unwrap_or_default();
                    r.finish(a, &sec);
                    match param {
                        Some(param) => axes.push(SweepAxis {
                            param,
                            min,
                            max,
                            n_points,
                            spacing,
                        }),
                        None => r.missing(&sec, "param"),
                    }
                }
            }
            _ => r.errors.push("[sweep] needs an `axes` array of tables".into()),
        }
        r.finish(s, "sweep");
        SweepConfig {
            axes,
            n_traj,
            trajectory_budget,
        }
    });

    let mut m = r.section(&mut root, "mj", false).unwrap_or_default();
    let mj = MjConfig {
        lambda_convention: r.choice(&mut m, "mj", "lambda_convention").unwrap_or_default(),
        variant: r.choice(&mut m, "mj", "variant").unwrap_or_default(),
        epsilon_grid: r.string(&mut m, "mj", "epsilon_grid").and_then(|s| match EpsilonGrid::parse(&s) {
            Ok(g) => Some(g),
            Err(e) => {
                r.errors.push(format!("`mj.epsilon_grid`: {e}"));
                None
            }
        }),
    };
    r.finish(m, "mj");

    let (kernels, rest) = parse_grid(&mut r, &mut root, "kernels", 0.5, 1.0);
    if let Some(t) = rest {
        r.finish(t, "kernels");
    }
    let mut nst = r.section(&mut root, "noise_selftest", false).unwrap_or_default();
    let paths = r.integer(&mut nst, "noise_selftest", "paths", Some(2000)) as usize;
    let mut wrapper = Table::new();
    wrapper.insert("noise_selftest".into(), Value::Table(nst));
    let (st_grid, rest) = parse_grid(&mut r, &mut wrapper, "noise_selftest", 0.5, 0.5);
    if let Some(t) = rest {
        r.finish(t, "noise_selftest");
    }
    let noise_selftest = SelftestConfig { paths, grid: st_grid };

    r.finish(root, "");

    let cfg = RunConfig {
        recipe,
        description,
        system,
        bath,
        coupling,
        propagation,
        duration_ps,
        fit: FitOptions { stationary },
        output_dir,
        sweep,
        mj,
        kernels,
        noise_selftest,
    };
    let mut errors = r.errors;
    cross_validate(&cfg, &mut errors);
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Validation(errors))
    }
}

fn cross_validate(cfg: &RunConfig, errors: &mut Vec<String>) {
    let numeric_ok = |x: f64| !x.is_nan();
    let s = &cfg.system;
    if [s.epsilon, s.delta, s.omega_v, s.gamma].into_iter().all(numeric_ok) {
        if let Err(e) = s.validate() {
            flatten(e, errors);
        }
    }
    let b = &cfg.bath;
    if numeric_ok(b.temperature) && numeric_ok(b.gamma_e) && numeric_ok(b.alpha()) {
        if let Err(e) = b.validate() {
            flatten(e, errors);
        }
    }
    let p = &cfg.propagation;
    if p.scheme == Scheme::Closed && (b.gamma_e != 0.0 || b.alpha() != 0.0) {
        errors.push(format!(
            "`propagation.scheme` = closed forbids bath coupling, but `bath.gamma_e` = {} and `bath.alpha` = {}",
            b.gamma_e,
            b.alpha()
        ));
    }
    if numeric_ok(p.dt) && numeric_ok(cfg.duration_ps) {
        if let Err(e) = p.validate() {
            flatten(e, errors);
        }
    }
    if let Some(sw) = &cfg.sweep {
        for a in &sw.axes {
            if numeric_ok(a.min) && numeric_ok(a.max) {
                if let Err(e) = a.validate() {
                    flatten(e, errors);
                }
            }
        }
        if sw.axes.is_empty() || sw.axes.len() > 2 {
            errors.push(format!("[sweep] needs one or two axes, got {}", sw.axes.len()));
        }
    }
    if let StationaryMode::Estimate { tail_fraction } = cfg.fit.stationary {
        if !(tail_fraction > 0.0 && tail_fraction < 1.0) {
            errors.push(format!("`fit.tail_fraction` must lie in (0, 1), got {tail_fraction}"));
        }
    }
}

/// Structured provenance record written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub command: String,
    pub code_version: String,
    pub master_seed: u64,
    pub config: RunConfig,
    pub results: serde_json::Value,
}

impl Metadata {
    pub fn new(command: &str, cfg: &RunConfig, results: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: cfg.propagation.master_seed,
            config: cfg.clone(),
            results,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }

    /// Reads the record back from `metadata.json` or from the comment line
    /// at the top of a CSV.
    pub fn parse(text: &str) -> Result<Self> {
        let line = text.lines().next().unwrap_or_default();
        let json = line.strip_prefix("# ").unwrap_or(text);
        serde_json::from_str(json).map_err(|e| Error::Data(format!("unreadable metadata: {e}")))
    }
}

/// Files written by one command; removed again if the command fails.
pub struct Outputs {
    dir: PathBuf,
    created: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, content: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        self.created.push(path.clone());
        fs::write(&path, content)?;
        Ok(path)
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.created
    }

    pub fn discard(self) {
        for p in &self.created {
            let _ = fs::remove_file(p);
        }
    }
}

fn csv_with_metadata(meta: &Metadata, extra_comment: Option<&str>, body: &str) -> String {
    let mut s = format!("# {}\n", meta.to_json());
    if let Some(c) = extra_comment {
        s.push_str("# ");
        s.push_str(c);
        s.push('\n');
    }
    s.push_str(body);
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Sweep,
    Mj,
    Kernels,
    NoiseSelftest,
    ValidateConfig,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Sweep => "sweep",
            Command::Mj => "mj",
            Command::Kernels => "kernels",
            Command::NoiseSelftest => "noise-selftest",
            Command::ValidateConfig => "validate-config",
        }
    }
}

/// What a command reports on stdout besides the files it wrote.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub lines: Vec<String>,
    pub files: Vec<PathBuf>,
    /// The command ran but its check failed (self-test outside the band).
    pub check_failed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub epsilon_grid: Option<EpsilonGrid>,
    pub paths: Option<usize>,
}

/// Runs `cmd`, writing into `out`. On error every file written so far is
/// removed, except a sweep checkpoint, which exists to be resumed.
pub fn execute(cmd: Command, cfg: &RunConfig, out: &Path, ov: &Overrides) -> Result<Report> {
    if cmd == Command::ValidateConfig {
        let json = serde_json::to_string_pretty(cfg).map_err(|e| Error::Data(e.to_string()))?;
        return Ok(Report {
            lines: vec!["config ok".into(), json],
            ..Default::default()
        });
    }
    let mut outputs = Outputs::new(out)?;
    let res = match cmd {
        Command::Simulate => command_simulate(cfg, &mut outputs),
        Command::Sweep => command_sweep(cfg, &mut outputs),
        Command::Mj => command_mj(cfg, ov, &mut outputs),
        Command::Kernels => command_kernels(cfg, &mut outputs),
        Command::NoiseSelftest => command_noise_selftest(cfg, ov, &mut outputs),
        Command::ValidateConfig => unreachable!(),
    };
    match res {
        Ok(mut report) => {
            report.files = outputs.files().to_vec();
            Ok(report)
        }
        Err(e) => {
            outputs.discard();
            Err(e)
        }
    }
}

fn command_simulate(cfg: &RunConfig, out: &mut Outputs) -> Result<Report> {
    let outcome = simulate(&cfg.simulation())?;
    let pops = &outcome.ensemble.populations;
    let mut body = String::from("t_ps,P_D,P_A,re_coh,im_coh\n");
    for i in 0..pops.len() {
        writeln!(
            body,
            "{:e},{:e},{:e},{:e},{:e}",
            pops.t[i], pops.p_d[i], pops.p_a[i], pops.coh_re[i], pops.coh_im[i]
        )
        .ok();
    }
    let max_pa = pops.p_a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_pd = pops.p_d.iter().cloned().fold(f64::INFINITY, f64::min);
    let fit = match &outcome.fit {
        Ok(f) => serde_json::to_value(f).unwrap_or_default(),
        Err(msg) => serde_json::json!({ "error": msg }),
    };
    let results = serde_json::json!({
        "n_traj_used": outcome.ensemble.n_traj_used,
        "n_resampled": outcome.ensemble.n_resampled,
        "final_pd_stderr": outcome.ensemble.convergence_diag,
        "max_P_A": max_pa,
        "min_P_D": min_pd,
        "P_inf": if outcome.p_inf.is_finite() { Some(outcome.p_inf) } else { None },
        "fit": fit,
    });
    let meta = Metadata::new("simulate", cfg, results);
    out.write("trace.csv", &csv_with_metadata(&meta, None, &body))?;
    out.write("metadata.json", &meta.to_json())?;
    let mut lines = vec![format!("max_P_A={max_pa:e} min_P_D={min_pd:e}")];
    if let Ok(f) = &outcome.fit {
        lines.push(format!("k_rel_ps_inv={:e} r2={:.4} P_inf={:.4}", f.k_rel, f.r_squared, f.p_inf));
    }
    Ok(Report {
        lines,
        ..Default::default()
    })
}

fn command_sweep(cfg: &RunConfig, out: &mut Outputs) -> Result<Report> {
    let spec = cfg.sweep_spec()?;
    let checkpoint = out.dir().join("sweep_checkpoint.jsonl");
    let map = run_sweep(&spec, Some(&checkpoint))?;
    let results = serde_json::json!({
        "points": map.cells.len(),
        "flagged_fraction": map.flagged_fraction(),
        "checkpoint": checkpoint.display().to_string(),
    });
    let meta = Metadata::new("sweep", cfg, results);
    out.write("ratemap.csv", &csv_with_metadata(&meta, None, &map.to_csv()))?;
    out.write("metadata.json", &meta.to_json())?;
    Ok(Report {
        lines: vec![format!(
            "points={} flagged_fraction={:.3}",
            map.cells.len(),
            map.flagged_fraction()
        )],
        ..Default::default()
    })
}

fn command_mj(cfg: &RunConfig, ov: &Overrides, out: &mut Outputs) -> Result<Report> {
    let grid = ov
        .epsilon_grid
        .or(cfg.mj.epsilon_grid)
        .ok_or_else(|| Error::Config("mj needs an epsilon grid (--epsilon-grid or mj.epsilon_grid)".into()))?;
    let params = mj_params_for(&cfg.simulation(), cfg.mj.lambda_convention, cfg.mj.variant)?;
    let curve = mj_curve(&params, &grid.values())?;
    let mut body = String::from("epsilon_eV,k_ps_inv\n");
    for (e, k) in curve.epsilon.iter().zip(&curve.rate_ps_inv) {
        writeln!(body, "{e:e},{k:e}").ok();
    }
    let lambda_line = format!(
        "S={} lambda_s={} lambda_v={} lambda_tot={}",
        params.huang_rhys(),
        params.lambda_s,
        params.lambda_v,
        params.lambda_s + params.lambda_v
    );
    let results = serde_json::json!({
        "epsilon_grid": grid,
        "huang_rhys": params.huang_rhys(),
        "lambda_s": params.lambda_s,
        "lambda_v": params.lambda_v,
        "peak_epsilon": curve.peak_epsilon(),
    });
    let meta = Metadata::new("mj", cfg, results);
    out.write("mj.csv", &csv_with_metadata(&meta, Some(&lambda_line), &body))?;
    out.write("metadata.json", &meta.to_json())?;
    Ok(Report {
        lines: vec![lambda_line, format!("peak_epsilon={}", curve.peak_epsilon())],
        ..Default::default()
    })
}

fn command_kernels(cfg: &RunConfig, out: &mut Outputs) -> Result<Report> {
    let g = &cfg.kernels;
    let corr = correlation_function(&cfg.bath, g.dt, g.n_points())?;
    let k = memory_kernels(&corr);
    let mut body = String::from("t,ReC,ImC,Reg0,Img0,Reg1,Img1,Reg2,Img2\n");
    for i in 0..corr.len() {
        writeln!(
            body,
            "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            internal_to_ps(i as f64 * g.dt),
            corr.values[i].re,
            corr.values[i].im,
            k.g0[i].re,
            k.g0[i].im,
            k.g1[i].re,
            k.g1[i].im,
            k.g2[i].re,
            k.g2[i].im
        )
        .ok();
    }
    let meta = Metadata::new(
        "kernels",
        cfg,
        serde_json::json!({ "points": corr.len(), "time_unit": "ps", "value_units": "internal (eV)" }),
    );
    out.write("kernels.csv", &csv_with_metadata(&meta, None, &body))?;
    out.write("metadata.json", &meta.to_json())?;
    Ok(Report {
        lines: vec![format!("points={}", corr.len())],
        ..Default::default()
    })
}

fn command_noise_selftest(cfg: &RunConfig, ov: &Overrides, out: &mut Outputs) -> Result<Report> {
    let g = &cfg.noise_selftest.grid;
    let paths = ov.paths.unwrap_or(cfg.noise_selftest.paths);
    let rep = bath_covariance_selftest(&cfg.bath, g.dt, g.n_points(), paths, cfg.propagation.master_seed)?;
    let mut body = String::from("t_ps,target_re,target_im,empirical_re,empirical_im,within_band\n");
    for i in 0..rep.target.len() {
        let within = (rep.empirical[i] - rep.target[i]).norm() <= rep.band;
        writeln!(
            body,
            "{:e},{:e},{:e},{:e},{:e},{}",
            internal_to_ps(i as f64 * g.dt),
            rep.target[i].re,
            rep.target[i].im,
            rep.empirical[i].re,
            rep.empirical[i].im,
            within as u8
        )
        .ok();
    }
    let verdict = format!(
        "noise-selftest {} paths={} fraction_within={:.4} band={:e} rms_error={:e}",
        if rep.passed { "PASS" } else { "FAIL" },
        paths,
        rep.fraction_within,
        rep.band,
        rep.rms_error
    );
    let meta = Metadata::new(
        "noise-selftest",
        cfg,
        serde_json::json!({
            "paths": paths,
            "passed": rep.passed,
            "fraction_within": rep.fraction_within,
            "band": rep.band,
            "rms_error": rep.rms_error,
        }),
    );
    out.write("noise_selftest.csv", &csv_with_metadata(&meta, Some(&verdict), &body))?;
    out.write("metadata.json", &meta.to_json())?;
    Ok(Report {
        lines: vec![verdict],
        check_failed: !rep.passed,
        ..Default::default()
    })
}

/// One-line machine-readable error for stderr.
pub fn error_line(e: &Error) -> String {
    format!("error kind={} msg={:?}", e.kind(), e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[system]
epsilon = "0.1487 eV"
delta = "1e-4 eV"
omega_v = "0.1487 eV"

[bath]
family = "ohmic"
alpha = 0.05
omega_c = "0.5 eV"
gamma_e = 0.05

[propagation]
scheme = "markov_sse"
dt = "1 eV^-1"
duration = "1 ps"
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_and_validate(MINIMAL).unwrap();
        assert_eq!(cfg.system.gamma, 0.0);
        assert_eq!(cfg.system.fock_dim, 10);
        assert_eq!(cfg.coupling, CouplingKind::Diagonal);
        assert_eq!(cfg.propagation.n_traj, 1);
        assert_eq!(cfg.propagation.master_seed, 0);
        assert!(cfg.propagation.renormalize_each_step);
        assert_eq!(cfg.propagation.n_steps, (1.0 / internal_to_ps(1.0)).round() as usize);
        assert!((cfg.bath.temperature - 0.024989).abs() < 1e-6);
        assert_eq!(cfg.fit.stationary, StationaryMode::Estimate { tail_fraction: 0.2 });
        assert!(cfg.sweep.is_none());
    }

    #[test]
    fn kelvin_conversion() {
        let text = MINIMAL.replace("gamma_e = 0.05", "gamma_e = 0.05\ntemperature = \"290 K\"");
        let cfg = parse_and_validate(&text).unwrap();
        assert!((cfg.bath.temperature - 290.0 * 8.617e-5).abs() < 1e-15);
        let text = MINIMAL.replace("gamma_e = 0.05", "gamma_e = 0.05\ntemperature = \"0.025 eV\"");
        assert_eq!(parse_and_validate(&text).unwrap().bath.temperature, 0.025);
    }

    #[test]
    fn every_violation_is_reported() {
        let text = MINIMAL
            .replace("\"0.5 eV\"", "\"0.5 ps\"")
            .replace("delta = \"1e-4 eV\"", "delta = 1e-4\ndelat = \"1 eV\"")
            .replace("duration = \"1 ps\"", "duration = \"1 K\"");
        let Err(Error::Validation(errs)) = parse_and_validate(&text) else {
            panic!("expected validation errors");
        };
        let all = errs.join("\n");
        assert!(all.contains("bath.omega_c") && all.contains("is for time"), "{all}");
        assert!(all.contains("system.delta") && all.contains("needs a unit"), "{all}");
        assert!(all.contains("unknown key `system.delat`"), "{all}");
        assert!(all.contains("propagation.duration"), "{all}");
        assert!(errs.len() >= 4);
    }

    #[test]
    fn closed_scheme_rejects_bath_coupling() {
        let text = r#"
[system]
epsilon = "0.1487 eV"
delta = "1e-4 eV"
omega_v = "0.1487 eV"
[bath]
family = "structured"
alpha = 0.08
omega_0 = "0.1 eV"
beta = "0.005 eV"
gamma_e = 0.0
[propagation]
scheme = "closed"
dt = "0.05 eV^-1"
duration = "0.1 ps"
"#;
        let err = parse_and_validate(text).unwrap_err().to_string();
        assert!(err.contains("propagation.scheme") && err.contains("bath.alpha"), "{err}");
    }

    #[test]
    fn nm_scheme_needs_bath_and_matching_coupling() {
        let text = MINIMAL.replace("markov_sse", "nm_diagonal");
        let cfg = parse_and_validate(&text).unwrap();
        assert_eq!(cfg.coupling, CouplingKind::Diagonal);
        let bad = text.replace("scheme = \"nm_diagonal\"", "scheme = \"nm_diagonal\"\ncoupling = \"off_diagonal\"");
        assert!(parse_and_validate(&bad).unwrap_err().to_string().contains("contradicts"));
        let start = text.find("[bath]").unwrap();
        let end = text.find("[propagation]").unwrap();
        let no_bath = format!("{}{}", &text[..start], &text[end..]);
        assert!(parse_and_validate(&no_bath).unwrap_err().to_string().contains("[bath]"));
    }

    #[test]
    fn all_recipes_parse() {
        for (name, _) in RECIPES {
            let cfg = load_config(Some(name), None).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(cfg.recipe.as_deref(), Some(*name));
            cfg.simulation().propagator().unwrap_or_else(|e| panic!("{name}: {e}"));
            if cfg.sweep.is_some() {
                let spec = cfg.sweep_spec().unwrap();
                spec.validate().unwrap();
                let last = spec.n_points() - 1;
                spec.simulation_at(last).propagator().unwrap_or_else(|e| panic!("{name}: {e}"));
            }
        }
        assert!(load_config(Some("fig9"), None).is_err());
    }

    #[test]
    fn config_overrides_recipe() {
        let cfg = load_config(Some("fig3a"), Some("[propagation]\nscheme = \"nm_diagonal\"\nn_traj = 7\n")).unwrap();
        assert_eq!(cfg.coupling, CouplingKind::Diagonal);
        assert_eq!(cfg.propagation.n_traj, 7);
        assert_eq!(cfg.system.omega_v, 0.1087);
        let named = parse_and_validate("recipe = \"fig5b\"").unwrap();
        assert_eq!(named, load_config(Some("fig5b"), None).unwrap());
    }

    #[test]
    fn metadata_round_trips() {
        for (name, _) in RECIPES {
            let cfg = load_config(Some(name), None).unwrap();
            let meta = Metadata::new("simulate", &cfg, serde_json::json!({ "x": 0.1 }));
            let back = Metadata::parse(&meta.to_json()).unwrap();
            assert_eq!(back.config, cfg);
            let csv = csv_with_metadata(&meta, None, "a,b\n");
            assert_eq!(Metadata::parse(&csv).unwrap(), meta);
        }
    }

    #[test]
    fn epsilon_grid_parsing() {
        let g = EpsilonGrid::parse("0.01:0.3:50").unwrap();
        let v = g.values();
        assert_eq!(v.len(), 50);
        assert_eq!(v[0], 0.01);
        assert!((v[49] - 0.3).abs() < 1e-15);
        assert!(v.windows(2).all(|w| w[1] > w[0]));
        assert!(EpsilonGrid::parse("0.3:0.01:5").is_err());
        assert!(EpsilonGrid::parse("a:b").is_err());
    }

    #[test]
    fn mj_command_writes_one_row_per_grid_point() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = load_config(Some("fig1a"), None).unwrap();
        let ov = Overrides {
            epsilon_grid: Some(EpsilonGrid::parse("0.01:0.3:50").unwrap()),
            ..Default::default()
        };
        let rep = execute(Command::Mj, &cfg, dir.path(), &ov).unwrap();
        assert!(rep.lines[0].starts_with("S="));
        let text = fs::read_to_string(dir.path().join("mj.csv")).unwrap();
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
        assert_eq!(rows.len(), 50);
        let eps: Vec<f64> = rows.iter().map(|r| r.split(',').next().unwrap().parse().unwrap()).collect();
        assert!(eps.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn failed_command_leaves_no_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = load_config(Some("fig5b"), None).unwrap();
        // No epsilon grid anywhere.
        assert!(execute(Command::Mj, &cfg, dir.path(), &Overrides::default()).is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn error_line_is_single_line() {
        let e = Error::Validation(vec!["a \"b\"".into(), "c\nd".into()]);
        let line = error_line(&e);
        assert!(line.starts_with("error kind=validation msg=\""));
        assert_eq!(line.lines().count(), 1);
    }
}
