//! Parameter scans over the simulate → fit pipeline, rate maps, the
//! activationless reference curve and comparison with Marcus–Jortner.
//!
//! Every grid point gets its own seed derived from the master seed and its
//! row-major index, so results do not depend on evaluation order. Completed
//! points are appended to a JSON-lines checkpoint; a rerun with the same
//! spec skips them.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bath::{reorganization_energy_bath, reorganization_energy_caption, reorganization_energy_mode, BathSpec};
use crate::error::{Error, Result};
use crate::hilbert::{CouplingKind, SystemParams};
use crate::noise::derive_seed;
use crate::observables::{estimate_stationary, fit_relaxation, FitFlag, RateFit, Stationary};
use crate::propagator::{EnsembleResult, Propagator, PropagatorConfig, Scheme};
use crate::ratetheory::{MjCurve, MjParams, MjVariant};

/// Largest `points × n_traj` a sweep accepts unless the spec raises it.
pub const DEFAULT_TRAJECTORY_BUDGET: u64 = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum StationaryMode {
    /// Mean of `P_D` over the last `tail_fraction` of the trace.
    Estimate { tail_fraction: f64 },
    /// Known stationary donor population.
    Fixed { p_inf: f64 },
}

impl Default for StationaryMode {
    fn default() -> Self {
        StationaryMode::Estimate { tail_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    #[serde(default)]
    pub stationary: StationaryMode,
}

/// One fully specified simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Simulation {
    pub system: SystemParams<f64>,
    pub bath: BathSpec<f64>,
    pub coupling: CouplingKind,
    pub propagation: PropagatorConfig,
    #[serde(default)]
    pub fit: FitOptions,
}

impl Simulation {
    pub fn propagator(&self) -> Result<Propagator<f64>> {
        if self.propagation.scheme == Scheme::Closed {
            Propagator::closed(self.propagation.clone(), &self.system)
        } else {
            Propagator::new(self.propagation.clone(), &self.system, self.coupling, &self.bath)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationOutcome {
    pub ensemble: EnsembleResult,
    pub stationary: Option<Stationary>,
    pub p_inf: f64,
    pub fit: std::result::Result<RateFit, String>,
}

/// Runs the ensemble and fits the relaxation rate. Fit problems are
/// reported in the outcome, not as errors.
pub fn simulate(sim: &Simulation) -> Result<SimulationOutcome> {
    let ensemble = sim.propagator()?.run_ensemble()?;
    let (stationary, p_inf) = match sim.fit.stationary {
        StationaryMode::Fixed { p_inf } => (None, p_inf),
        StationaryMode::Estimate { tail_fraction } => match estimate_stationary(&ensemble.populations, tail_fraction) {
            Ok(s) => {
                let p = s.p_inf;
                (Some(s), p)
            }
            Err(e) => {
                return Ok(SimulationOutcome {
                    ensemble,
                    stationary: None,
                    p_inf: f64::NAN,
                    fit: Err(e.to_string()),
                })
            }
        },
    };
    let fit = fit_relaxation(&ensemble.populations, p_inf).map(|mut f| {
        if let Some(s) = &stationary {
            for flag in &s.flags {
                if !f.flags.contains(flag) {
                    f.flags.push(*flag);
                }
            }
        }
        f
    });
    Ok(SimulationOutcome {
        ensemble,
        stationary,
        p_inf,
        fit: fit.map_err(|e| e.to_string()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Epsilon,
    Gamma,
    Delta,
    OmegaV,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Epsilon => "epsilon",
            SweepParam::Gamma => "gamma",
            SweepParam::Delta => "delta",
            SweepParam::OmegaV => "omega_v",
        }
    }

    fn apply(self, sys: &mut SystemParams<f64>, v: f64) {
        match self {
            SweepParam::Epsilon => sys.epsilon = v,
            SweepParam::Gamma => sys.gamma = v,
            SweepParam::Delta => sys.delta = v,
            SweepParam::OmegaV => sys.omega_v = v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    #[default]
    Linear,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub param: SweepParam,
    pub min: f64,
    pub max: f64,
    pub n_points: usize,
    #[serde(default)]
    pub spacing: Spacing,
}

impl SweepAxis {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.min < self.max) {
            bad.push(format!("{} axis needs min < max, got {} .. {}", self.param.name(), self.min, self.max));
        }
        if self.n_points < 2 {
            bad.push(format!("{} axis needs n_points >= 2, got {}", self.param.name(), self.n_points));
        }
        if self.spacing == Spacing::Log && !(self.min > 0.0) {
            bad.push(format!("{} axis: log spacing needs min > 0", self.param.name()));
        }
        match bad.len() {
            0 => Ok(()),
            1 => Err(Error::invalid("axis", bad.remove(0))),
            _ => Err(Error::Validation(bad)),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        let n = self.n_points;
        (0..n)
            .map(|i| {
                let f = i as f64 / (n - 1) as f64;
                match self.spacing {
                    Spacing::Linear => self.min + f * (self.max - self.min),
                    Spacing::Log => (self.min.ln() + f * (self.max.ln() - self.min.ln())).exp(),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: Simulation,
    pub axes: Vec<SweepAxis>,
    pub n_traj: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub trajectory_budget: Option<u64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() || self.axes.len() > 2 {
            return Err(Error::invalid("axes", format!("need one or two axes, got {}", self.axes.len())));
        }
        if self.axes.len() == 2 && self.axes[0].param == self.axes[1].param {
            return Err(Error::invalid("axes", "the two axes must vary different parameters"));
        }
        for a in &self.axes {
            a.validate()?;
        }
        if self.n_traj == 0 {
            return Err(Error::invalid("n_traj", "must be >= 1"));
        }
        let total = self.n_points() as u64 * self.n_traj as u64;
        let budget = self.trajectory_budget.unwrap_or(DEFAULT_TRAJECTORY_BUDGET);
        if total > budget {
            return Err(Error::Config(format!(
                "sweep needs {total} trajectories, above the budget of {budget}"
            )));
        }
        Ok(())
    }

    pub fn n_points(&self) -> usize {
        self.axes.iter().map(|a| a.n_points).product()
    }

    /// Axis values of the point with row-major index `i` (first axis slowest).
    pub fn point(&self, i: usize) -> Vec<f64> {
        let mut rem = i;
        let mut out = vec![0.0; self.axes.len()];
        for (k, axis) in self.axes.iter().enumerate().rev() {
            out[k] = axis.values()[rem % axis.n_points];
            rem /= axis.n_points;
        }
        out
    }

    pub fn point_seed(&self, i: usize) -> u64 {
        derive_seed(self.master_seed, i as u64)
    }

    /// The simulation run at grid point `i`.
    pub fn simulation_at(&self, i: usize) -> Simulation {
        let mut sim = self.base.clone();
        for (axis, v) in self.axes.iter().zip(self.point(i)) {
            axis.param.apply(&mut sim.system, v);
        }
        sim.propagation.n_traj = self.n_traj;
        sim.propagation.master_seed = self.point_seed(i);
        sim
    }
}

/// Result of one grid point as stored in the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub index: usize,
    pub seed: u64,
    pub axis_values: Vec<f64>,
    pub k_ps_inv: Option<f64>,
    pub r2: Option<f64>,
    pub p_inf: Option<f64>,
    /// Standard error of `P_D` at the final time.
    pub stderr: Option<f64>,
    pub flags: Vec<String>,
    pub error: Option<String>,
}

impl PointRecord {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

fn flag_name(f: FitFlag) -> String {
    serde_json::to_value(f)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| format!("{f:?}"))
}

/// Simulates and fits grid point `i`.
pub fn evaluate_point(spec: &SweepSpec, i: usize) -> PointRecord {
    let sim = spec.simulation_at(i);
    let mut rec = PointRecord {
        index: i,
        seed: sim.propagation.master_seed,
        axis_values: spec.point(i),
        k_ps_inv: None,
        r2: None,
        p_inf: None,
        stderr: None,
        flags: Vec::new(),
        error: None,
    };
    match simulate(&sim) {
        Ok(out) => {
            rec.stderr = Some(out.ensemble.convergence_diag);
            if out.p_inf.is_finite() {
                rec.p_inf = Some(out.p_inf);
            }
            match out.fit {
                Ok(fit) => {
                    rec.k_ps_inv = Some(fit.k_rel);
                    rec.r2 = Some(fit.r_squared);
                    rec.flags = fit.flags.iter().map(|&f| flag_name(f)).collect();
                }
                Err(msg) => {
                    rec.flags.push(flag_name(FitFlag::Failed));
                    rec.error = Some(msg);
                }
            }
        }
        Err(e) => {
            rec.flags.push("simulation_failed".to_string());
            rec.error = Some(format!("{} {}", e.kind(), e));
        }
    }
    rec
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    spec: SweepSpec,
}

fn read_checkpoint(path: &Path, spec: &SweepSpec) -> Result<BTreeMap<usize, PointRecord>> {
    let mut done = BTreeMap::new();
    if !path.exists() {
        return Ok(done);
    }
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let Some(first) = lines.next() else {
        return Ok(done);
    };
    let header: CheckpointHeader = serde_json::from_str(&first?)
        .map_err(|e| Error::Data(format!("checkpoint header unreadable: {e}")))?;
    if header.spec != *spec {
        return Err(Error::Config(format!(
            "checkpoint {} belongs to a different sweep spec",
            path.display()
        )));
    }
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // A torn final line from an interrupted write is recomputed.
        let Ok(rec) = serde_json::from_str::<PointRecord>(&line) else {
            continue;
        };
        if rec.index >= spec.n_points() || rec.seed != spec.point_seed(rec.index) {
            return Err(Error::Data(format!("checkpoint record {} does not match the spec", rec.index)));
        }
        done.insert(rec.index, rec);
    }
    Ok(done)
}

/// Runs every grid point not already in `checkpoint`, appending each one
/// as it completes.
pub fn run_sweep(spec: &SweepSpec, checkpoint: Option<&Path>) -> Result<RateMap> {
    spec.validate()?;
    let mut done = match checkpoint {
        Some(p) => read_checkpoint(p, spec)?,
        None => BTreeMap::new(),
    };
    let mut writer = match checkpoint {
        Some(p) => {
            let fresh = !p.exists() || std::fs::metadata(p)?.len() == 0;
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            if fresh {
                let header = serde_json::to_string(&CheckpointHeader { spec: spec.clone() })
                    .map_err(|e| Error::Data(e.to_string()))?;
                writeln!(f, "{header}")?;
            }
            Some(f)
        }
        None => None,
    };
    for i in 0..spec.n_points() {
        if done.contains_key(&i) {
            continue;
        }
        let rec = evaluate_point(spec, i);
        if let Some(f) = writer.as_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        done.insert(i, rec);
    }
    let map = RateMap::from_records(spec, done.into_values().collect())?;
    let failed = map.cells.iter().filter(|c| c.failed()).count();
    if failed * 10 > map.cells.len() {
        return Err(Error::Fit(format!(
            "{failed} of {} sweep points failed (limit 10%)",
            map.cells.len()
        )));
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateMap {
    pub axes: Vec<(SweepParam, Vec<f64>)>,
    /// Row-major, first axis slowest.
    pub cells: Vec<PointRecord>,
}

impl RateMap {
    pub fn from_records(spec: &SweepSpec, mut records: Vec<PointRecord>) -> Result<Self> {
        records.sort_by_key(|r| r.index);
        if records.len() != spec.n_points() || records.iter().enumerate().any(|(i, r)| r.index != i) {
            return Err(Error::Data(format!(
                "rate map needs {} consecutive records, got {}",
                spec.n_points(),
                records.len()
            )));
        }
        Ok(Self {
            axes: spec.axes.iter().map(|a| (a.param, a.values())).collect(),
            cells: records,
        })
    }

    pub fn rates(&self) -> Vec<Option<f64>> {
        self.cells.iter().map(|c| c.k_ps_inv).collect()
    }

    pub fn flagged_fraction(&self) -> f64 {
        let n = self.cells.iter().filter(|c| !c.flags.is_empty()).count();
        n as f64 / self.cells.len().max(1) as f64
    }

    /// CSV with columns `axis1, axis2, k_ps_inv, r2, P_inf, stderr, flags`.
    /// Missing values are empty fields and always come with a flag.
    pub fn to_csv(&self) -> String {
        let name = |k: usize| self.axes.get(k).map_or("axis2", |a| a.0.name());
        let mut out = format!("{},{},k_ps_inv,r2,P_inf,stderr,flags\n", name(0), name(1));
        let num = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
        for c in &self.cells {
            let a2 = c.axis_values.get(1).map_or(String::new(), |v| format!("{v:e}"));
            out.push_str(&format!(
                "{:e},{},{},{},{},{},{}\n",
                c.axis_values[0],
                a2,
                num(c.k_ps_inv),
                num(c.r2),
                num(c.p_inf),
                num(c.stderr),
                c.flags.join(";")
            ));
        }
        out
    }
}

/// `ε*(γ) = λ_bath + 2γ²/ω_v`
pub fn activationless_curve(gamma_grid: &[f64], lambda_bath: f64, omega_v: f64) -> Result<Vec<(f64, f64)>> {
    gamma_grid
        .iter()
        .map(|&g| Ok((g, lambda_bath + reorganization_energy_mode(g, omega_v)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaConvention {
    /// `(1/π)∫J(ω)/ω dω`
    #[default]
    Integral,
    /// `½αω_c` for Ohmic baths.
    Caption,
}

pub fn bath_reorganization(bath: &BathSpec<f64>, convention: LambdaConvention) -> Result<f64> {
    match convention {
        LambdaConvention::Integral => reorganization_energy_bath(bath),
        LambdaConvention::Caption => reorganization_energy_caption(bath).ok_or_else(|| {
            Error::Config("the caption reorganization convention only covers Ohmic baths".into())
        }),
    }
}

/// Marcus–Jortner parameters sharing the reorganization energies of `sim`.
pub fn mj_params_for(sim: &Simulation, convention: LambdaConvention, variant: MjVariant) -> Result<MjParams<f64>> {
    let s = &sim.system;
    Ok(MjParams {
        coupling: 0.5 * s.delta,
        epsilon: s.epsilon,
        lambda_s: bath_reorganization(&sim.bath, convention)?,
        lambda_v: reorganization_energy_mode(s.gamma, s.omega_v)?,
        omega_v: s.omega_v,
        temperature: sim.bath.temperature,
        m_max: None,
        variant,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MjComparison {
    pub epsilon: Vec<f64>,
    pub k_sim: Vec<Option<f64>>,
    pub k_mj: Vec<f64>,
    pub ratio: Vec<Option<f64>>,
    /// Geometric mean of the finite ratios.
    pub mean_ratio: Option<f64>,
    pub sim_argmax: Option<usize>,
    pub mj_argmax: usize,
    pub peak_offset_steps: Option<usize>,
}

/// Per-point `k_sim/k_MJ` on a shared ε grid.
pub fn compare_to_mj(map: &RateMap, mj: &MjCurve) -> Result<MjComparison> {
    if map.axes.len() != 1 || map.axes[0].0 != SweepParam::Epsilon {
        return Err(Error::Alignment("comparison needs a one-dimensional epsilon sweep".into()));
    }
    let eps = &map.axes[0].1;
    if eps.len() != mj.epsilon.len() || eps.iter().zip(&mj.epsilon).any(|(a, b)| (a - b).abs() > 1e-12 * a.abs().max(1.0)) {
        return Err(Error::Alignment(format!(
            "epsilon grids differ ({} vs {} points)",
            eps.len(),
            mj.epsilon.len()
        )));
    }
    let k_sim = map.rates();
    let ratio: Vec<Option<f64>> = k_sim
        .iter()
        .zip(&mj.rate_ps_inv)
        .map(|(s, &m)| s.filter(|_| m > 0.0).map(|s| s / m))
        .collect();
    let logs: Vec<f64> = ratio.iter().flatten().filter(|r| **r > 0.0).map(|r| r.ln()).collect();
    let mean_ratio = (!logs.is_empty()).then(|| (logs.iter().sum::<f64>() / logs.len() as f64).exp());
    let sim_argmax = k_sim
        .iter()
        .enumerate()
        .filter_map(|(i, k)| k.map(|k| (i, k)))
        .fold(None, |best: Option<(usize, f64)>, (i, k)| match best {
            Some((_, bk)) if bk >= k => best,
            _ => Some((i, k)),
        })
        .map(|b| b.0);
    Ok(MjComparison {
        epsilon: eps.clone(),
        k_sim,
        k_mj: mj.rate_ps_inv.clone(),
        ratio,
        mean_ratio,
        sim_argmax,
        mj_argmax: mj.argmax,
        peak_offset_steps: sim_argmax.map(|s| s.abs_diff(mj.argmax)),
    })
}
