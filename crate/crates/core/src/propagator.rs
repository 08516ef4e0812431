//! Trajectory integrators and ensemble averaging.
//!
//! Four schemes share one state layout (`index = elec·N + n`, donor first):
//!
//! * `MarkovSse`: nonlinear white-noise equation with real increments.
//!   The default integrator splits each step into the exact unitary factor
//!   `e^{−iH dt}` (precomputed from the eigendecomposition of the real
//!   symmetric `H`) followed by an Euler–Maruyama step of the noise part.
//!   `MarkovIntegrator::Rk4` instead integrates the full drift by RK4 and
//!   adds the Euler–Maruyama increment.
//! * `NmDiagonal` / `NmOffDiagonal`: first-order memory-kernel equations
//!   with shifted colored noise, integrated by RK4. Noise and kernels live
//!   on a half-step grid so every RK4 stage sees exact samples; the shift
//!   integral is accumulated on the full grid and extrapolated to the
//!   stage times.
//! * `Closed`: `−iHψ` by RK4, single trajectory.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bath::{memory_kernels, spectral_correlation_table, BathSpec, CorrelationTable, Environment};
use crate::error::{Error, Result};
use crate::hilbert::{build_system_hamiltonian, reduced_electronic, CouplingKind, OperatorMatrix, SparseOperator, SystemParams};
use crate::noise::{derive_seed, rng_from_seed, NoiseSynthesizer, ShiftKernel};
use crate::observables::{populations, PopulationTrace};
use crate::scalar::{cplx, czero, to_c64, Real};
use crate::units::internal_to_ps;

type C64 = Complex<f64>;

/// Trajectories per work unit; a unit is always reduced sequentially.
pub const CHUNK_TRAJ: usize = 16;
/// Resampling attempts for one trajectory before giving up.
pub const MAX_RESAMPLE: u64 = 8;
const VIB_STREAM: u64 = 0x5649_4252;
const BLOWUP_NORM: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    MarkovSse,
    NmDiagonal,
    NmOffDiagonal,
    Closed,
}

impl Scheme {
    /// Coupling fixed by the scheme itself, if any.
    pub fn implied_coupling(self) -> Option<CouplingKind> {
        match self {
            Scheme::NmDiagonal => Some(CouplingKind::Diagonal),
            Scheme::NmOffDiagonal => Some(CouplingKind::OffDiagonal),
            _ => None,
        }
    }

    pub fn is_non_markovian(self) -> bool {
        matches!(self, Scheme::NmDiagonal | Scheme::NmOffDiagonal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkovIntegrator {
    #[default]
    Split,
    Rk4,
}

/// Initial vibrational state; the electron always starts on the donor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialVib {
    #[default]
    Ground,
    Fock { n: usize },
    /// Fock level drawn per trajectory from the Boltzmann weights at this
    /// temperature (eV).
    Thermal { temperature: f64 },
}

fn default_true() -> bool {
    true
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagatorConfig {
    pub scheme: Scheme,
    /// Step in eV⁻¹.
    pub dt: f64,
    pub n_steps: usize,
    pub n_traj: usize,
    pub master_seed: u64,
    #[serde(default = "default_true")]
    pub renormalize_each_step: bool,
    /// Record every `record_stride`-th step (step 0 is always recorded).
    #[serde(default = "default_stride")]
    pub record_stride: usize,
    #[serde(default)]
    pub initial_vib: InitialVib,
    #[serde(default)]
    pub keep_full_density: bool,
    #[serde(default)]
    pub markov_integrator: MarkovIntegrator,
}

impl PropagatorConfig {
    pub fn new(scheme: Scheme, dt: f64, n_steps: usize, n_traj: usize, master_seed: u64) -> Self {
        Self {
            scheme,
            dt,
            n_steps,
            n_traj,
            master_seed,
            renormalize_each_step: true,
            record_stride: 1,
            initial_vib: InitialVib::Ground,
            keep_full_density: false,
            markov_integrator: MarkovIntegrator::Split,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            bad.push(format!("dt must be > 0, got {}", self.dt));
        }
        if self.n_steps == 0 {
            bad.push("n_steps must be >= 1".to_string());
        }
        if self.n_traj == 0 {
            bad.push("n_traj must be >= 1".to_string());
        }
        if self.record_stride == 0 {
            bad.push("record_stride must be >= 1".to_string());
        }
        if let InitialVib::Thermal { temperature } = self.initial_vib {
            if !(temperature > 0.0) {
                bad.push(format!("initial thermal temperature must be > 0, got {temperature}"));
            }
        }
        match bad.len() {
            0 => Ok(()),
            1 => Err(Error::invalid("propagation", bad.remove(0))),
            _ => Err(Error::Validation(bad)),
        }
    }

    /// Trajectories actually run: the closed scheme is deterministic.
    pub fn effective_traj(&self) -> usize {
        if self.scheme == Scheme::Closed {
            1
        } else {
            self.n_traj
        }
    }

    pub fn record_steps(&self) -> Vec<usize> {
        (0..=self.n_steps).step_by(self.record_stride.max(1)).collect()
    }
}

/// Recorded states of a single trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTrace<T> {
    pub seed: u64,
    pub t_ps: Vec<f64>,
    pub states: Vec<Vec<Complex<T>>>,
}

impl<T: Real> TrajectoryTrace<T> {
    pub fn populations(&self) -> Result<PopulationTrace> {
        let rho: Vec<_> = self
            .states
            .iter()
            .map(|psi| normalized_reduced(psi))
            .collect();
        populations(&self.t_ps, &rho)
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub t_ps: Vec<f64>,
    /// Averaged electronic density matrix per record.
    pub rho_elec: Vec<[[C64; 2]; 2]>,
    /// Averaged full density matrix per record, when requested.
    pub rho_full: Option<Vec<OperatorMatrix<f64>>>,
    pub populations: PopulationTrace,
    /// Standard error of `P_D` per record.
    pub pd_stderr: Vec<f64>,
    pub n_traj_used: usize,
    pub n_resampled: usize,
    /// Standard error of `P_D` at the final record.
    pub convergence_diag: f64,
}

struct ColoredTables {
    synth: NoiseSynthesizer,
    g0: Vec<C64>,
    g1: Vec<C64>,
    shift: ShiftKernel,
}

enum Drive<T> {
    Unitary,
    Markov { propagator: Option<Vec<Complex<T>>> },
    Colored(Option<Arc<ColoredTables>>),
}

pub struct Propagator<T: Real> {
    cfg: PropagatorConfig,
    system: SystemParams<T>,
    kind: CouplingKind,
    gamma_e: T,
    h: SparseOperator<T>,
    h_norm: f64,
    sqrt_n: Vec<T>,
    drive: Drive<T>,
}

struct Blowup {
    step: usize,
}

struct Workspace<T> {
    psi: Vec<Complex<T>>,
    k1: Vec<Complex<T>>,
    k2: Vec<Complex<T>>,
    k3: Vec<Complex<T>>,
    k4: Vec<Complex<T>>,
    tmp: Vec<Complex<T>>,
    noise: Vec<C64>,
    scratch: Vec<C64>,
}

impl<T: Real> Workspace<T> {
    fn new(dim: usize) -> Self {
        let z = vec![czero(); dim];
        Self {
            psi: z.clone(),
            k1: z.clone(),
            k2: z.clone(),
            k3: z.clone(),
            k4: z.clone(),
            tmp: z,
            noise: Vec::new(),
            scratch: Vec::new(),
        }
    }
}

fn normalized_reduced<T: Real>(psi: &[Complex<T>]) -> [[C64; 2]; 2] {
    let r = reduced_electronic(psi);
    let tr = (r[0][0].re + r[1][1].re).as_f64();
    let inv = if tr > 0.0 { 1.0 / tr } else { 0.0 };
    [
        [to_c64(r[0][0]) * inv, to_c64(r[0][1]) * inv],
        [to_c64(r[1][0]) * inv, to_c64(r[1][1]) * inv],
    ]
}

#[inline]
fn axpy<T: Real>(out: &mut [Complex<T>], x: &[Complex<T>], a: T, y: &[Complex<T>]) {
    for ((o, &xi), &yi) in out.iter_mut().zip(x).zip(y) {
        *o = xi + yi * a;
    }
}

#[inline]
fn sum_sqr<T: Real>(v: &[Complex<T>]) -> T {
    v.iter().fold(T::zero(), |acc, z| acc + z.norm_sqr())
}

impl<T: Real> Propagator<T> {
    /// Propagator driven by a bath spectral density.
    pub fn new(cfg: PropagatorConfig, system: &SystemParams<T>, kind: CouplingKind, bath: &BathSpec<T>) -> Result<Self> {
        if cfg.scheme == Scheme::Closed {
            return Self::closed(cfg, system);
        }
        bath.validate()?;
        let gamma_e = bath.gamma_e.as_f64();
        Self::with_environment(cfg, system, kind, gamma_e, Arc::new(bath.to_f64()))
    }

    /// Closed-system propagator; no environment at all.
    pub fn closed(cfg: PropagatorConfig, system: &SystemParams<T>) -> Result<Self> {
        if cfg.scheme != Scheme::Closed {
            return Err(Error::Config(format!("{:?} scheme needs an environment", cfg.scheme)));
        }
        Self::build(cfg, system, CouplingKind::Diagonal, 0.0, None)
    }

    /// Propagator driven by an arbitrary stationary environment.
    pub fn with_environment(
        cfg: PropagatorConfig,
        system: &SystemParams<T>,
        kind: CouplingKind,
        gamma_e: f64,
        env: Arc<dyn Environment>,
    ) -> Result<Self> {
        Self::build(cfg, system, kind, gamma_e, Some(env))
    }

    fn build(
        cfg: PropagatorConfig,
        system: &SystemParams<T>,
        kind: CouplingKind,
        gamma_e: f64,
        env: Option<Arc<dyn Environment>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if !(gamma_e >= 0.0) || !gamma_e.is_finite() {
            return Err(Error::invalid("gamma_e", format!("must be >= 0, got {gamma_e}")));
        }
        if let Some(implied) = cfg.scheme.implied_coupling() {
            if implied != kind {
                return Err(Error::Config(format!(
                    "{:?} scheme cannot run with {:?} coupling",
                    cfg.scheme, kind
                )));
            }
        }
        let dense = build_system_hamiltonian(system)?;
        let h_norm = dense.gershgorin_bound().as_f64();
        let dt = cfg.dt;
        let split = cfg.scheme == Scheme::MarkovSse && cfg.markov_integrator == MarkovIntegrator::Split;
        if split {
            if gamma_e * gamma_e * dt > 0.01 {
                return Err(Error::invalid(
                    "dt",
                    format!("gamma_e^2 * dt = {:.3e} exceeds 0.01", gamma_e * gamma_e * dt),
                ));
            }
        } else if dt * h_norm > 0.1 {
            return Err(Error::invalid(
                "dt",
                format!("dt * |H| = {:.3e} exceeds 0.1 (|H| <= {h_norm:.4e} eV)", dt * h_norm),
            ));
        }
        let drive = match cfg.scheme {
            Scheme::Closed => Drive::Unitary,
            Scheme::MarkovSse => Drive::Markov {
                propagator: if split { Some(unitary_step(&dense, dt)) } else { None },
            },
            Scheme::NmDiagonal | Scheme::NmOffDiagonal => {
                let env = env.ok_or_else(|| Error::Config("non-Markovian scheme needs an environment".into()))?;
                if gamma_e == 0.0 {
                    Drive::Colored(None)
                } else {
                    Drive::Colored(Some(Arc::new(colored_tables(&*env, dt, cfg.n_steps)?)))
                }
            }
        };
        let sqrt_n = (0..=system.fock_dim).map(|k| T::of((k as f64).sqrt())).collect();
        Ok(Self {
            cfg,
            system: *system,
            kind,
            gamma_e: T::of(gamma_e),
            h: SparseOperator::from_dense(&dense),
            h_norm,
            sqrt_n,
            drive,
        })
    }

    pub fn config(&self) -> &PropagatorConfig {
        &self.cfg
    }

    pub fn coupling(&self) -> CouplingKind {
        self.kind
    }

    /// Gershgorin bound on `‖H‖` used by the step guard.
    pub fn hamiltonian_norm(&self) -> f64 {
        self.h_norm
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    pub fn record_times_ps(&self) -> Vec<f64> {
        self.cfg
            .record_steps()
            .into_iter()
            .map(|k| internal_to_ps(k as f64 * self.cfg.dt))
            .collect()
    }

    /// Recorded states of the trajectory with this seed.
    pub fn run_trajectory(&self, seed: u64) -> Result<TrajectoryTrace<T>> {
        let mut ws = Workspace::new(self.dim());
        let mut states = Vec::new();
        self.propagate(seed, &mut ws, |psi| states.push(psi.to_vec()))
            .map_err(|b| {
                Error::Propagation(format!("trajectory with seed {seed} diverged at step {}", b.step))
            })?;
        Ok(TrajectoryTrace {
            seed,
            t_ps: self.record_times_ps(),
            states,
        })
    }

    fn initial_state(&self, seed: u64, psi: &mut [Complex<T>]) {
        let n_max = self.system.fock_dim;
        let n = match self.cfg.initial_vib {
            InitialVib::Ground => 0,
            InitialVib::Fock { n } => n.min(n_max - 1),
            InitialVib::Thermal { temperature } => {
                let w = self.system.omega_v.as_f64();
                let weights: Vec<f64> = (0..n_max).map(|k| (-(k as f64) * w / temperature).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng_from_seed(derive_seed(seed, VIB_STREAM)).gen::<f64>() * total;
                let mut pick = n_max - 1;
                for (k, wk) in weights.iter().enumerate() {
                    if u < *wk {
                        pick = k;
                        break;
                    }
                    u -= wk;
                }
                pick
            }
        };
        psi.iter_mut().for_each(|z| *z = czero());
        psi[n] = cplx(T::one(), T::zero());
    }


    fn propagate(
        &self,
        seed: u64,
        ws: &mut Workspace<T>,
        mut record: impl FnMut(&[Complex<T>]),
    ) -> std::result::Result<(), Blowup> {
        self.initial_state(seed, &mut ws.psi);
        record(&ws.psi);
        let stride = self.cfg.record_stride;
        let dt = T::of(self.cfg.dt);
        let n = self.cfg.n_steps;
        match &self.drive {
            Drive::Unitary => {
                for k in 0..n {
                    rk4(ws, dt, |_, psi, out| self.hamiltonian_rhs(psi, out));
                    self.finish_step(ws, k)?;
                    if (k + 1) % stride == 0 {
                        record(&ws.psi);
                    }
                }
            }
            Drive::Markov { propagator } => {
                // Same draw order as `noise::white_noise`: one normal per step.
                let mut rng = rng_from_seed(seed);
                let sqdt = self.cfg.dt.sqrt();
                for k in 0..n {
                    let xi: f64 = StandardNormal.sample(&mut rng);
                    let dw = T::of(xi * sqdt);
                    match propagator {
                        Some(u) => dense_apply(u, &ws.psi, &mut ws.tmp),
                        None => {
                            rk4(ws, dt, |_, psi, out| self.markov_drift(psi, out));
                            ws.tmp.copy_from_slice(&ws.psi);
                        }
                    }
                    self.markov_noise_step(&ws.tmp, &mut ws.psi, dw, propagator.is_some());
                    self.finish_step(ws, k)?;
                    if (k + 1) % stride == 0 {
                        record(&ws.psi);
                    }
                }
            }
            Drive::Colored(tables) => {
                let tables = tables.as_deref();
                if let Some(tb) = tables {
                    ws.noise.resize(2 * n + 1, C64::default());
                    tb.synth.sample_into(seed, &mut ws.scratch, &mut ws.noise);
                }
                let mut acc = tables.map(|tb| tb.shift.accumulator());
                let ge = self.gamma_e.as_f64();
                let mut hist = [C64::default(); 3];
                for k in 0..n {
                    let drives = match (tables, acc.as_mut()) {
                        (Some(tb), Some(acc)) => {
                            let x = self.coupling_expectation(&ws.psi).as_f64() * ge;
                            let s = acc.push(C64::new(x, 0.0));
                            hist = [s, hist[0], hist[1]];
                            let (s_half, s_full) = extrapolate_shift(k, &hist);
                            let at = |h: usize, shift: C64| StageDrive {
                                z: from64(ws.noise[h] + shift),
                                g0: from64(tb.g0[h]),
                                g1: from64(tb.g1[h]),
                            };
                            [at(2 * k, s), at(2 * k + 1, s_half), at(2 * k + 2, s_full)]
                        }
                        _ => [StageDrive::default(); 3],
                    };
                    rk4(ws, dt, |stage, psi, out| self.nm_rhs(psi, &drives[stage], out));
                    self.finish_step(ws, k)?;
                    if (k + 1) % stride == 0 {
                        record(&ws.psi);
                    }
                }
            }
        }
        Ok(())
    }

    fn finish_step(&self, ws: &mut Workspace<T>, k: usize) -> std::result::Result<(), Blowup> {
        let n2 = sum_sqr(&ws.psi).as_f64();
        if !n2.is_finite() || n2 == 0.0 {
            return Err(Blowup { step: k + 1 });
        }
        if self.cfg.renormalize_each_step {
            let inv = T::of(1.0 / n2.sqrt());
            ws.psi.iter_mut().for_each(|z| *z *= inv);
        } else if n2.sqrt() > BLOWUP_NORM {
            return Err(Blowup { step: k + 1 });
        }
        Ok(())
    }

    /// `out = −iHψ`
    #[inline]
    fn hamiltonian_rhs(&self, psi: &[Complex<T>], out: &mut [Complex<T>]) {
        self.h.apply_into(psi, out);
        for o in out.iter_mut() {
            *o = cplx(o.im, -o.re);
        }
    }

    /// `Lψ` for the unit coupling operator (`σ_z` or `σ_x` on the electron).
    #[inline]
    fn apply_l(&self, psi: &[Complex<T>], out: &mut [Complex<T>]) {
        let n = psi.len() / 2;
        match self.kind {
            CouplingKind::Diagonal => {
                out[..n].copy_from_slice(&psi[..n]);
                for (o, &p) in out[n..].iter_mut().zip(&psi[n..]) {
                    *o = -p;
                }
            }
            CouplingKind::OffDiagonal => {
                out[..n].copy_from_slice(&psi[n..]);
                out[n..].copy_from_slice(&psi[..n]);
            }
        }
    }

    /// `⟨L⟩` of the unit coupling operator, normalized by `⟨ψ|ψ⟩`.
    #[inline]
    fn coupling_expectation(&self, psi: &[Complex<T>]) -> T {
        let n = psi.len() / 2;
        let (d, a) = psi.split_at(n);
        let n2 = sum_sqr(psi);
        match self.kind {
            CouplingKind::Diagonal => (sum_sqr(d) - sum_sqr(a)) / n2,
            CouplingKind::OffDiagonal => {
                let da = d.iter().zip(a).fold(czero::<T>(), |acc, (x, y)| acc + x.conj() * *y);
                T::of(2.0) * da.re / n2
            }
        }
    }

    /// `−iHψ − (γ²/2)(L² − 2⟨L⟩L + ⟨L⟩²)ψ` with `L² = 1`.
    fn markov_drift(&self, psi: &[Complex<T>], out: &mut [Complex<T>]) {
        self.hamiltonian_rhs(psi, out);
        let s = self.coupling_expectation(psi);
        let g2 = self.gamma_e * self.gamma_e * T::of(0.5);
        let n = psi.len() / 2;
        let sign = |i: usize| -> (usize, T) {
            match self.kind {
                CouplingKind::Diagonal => (i, if i < n { T::one() } else { -T::one() }),
                CouplingKind::OffDiagonal => ((i + n) % (2 * n), T::one()),
            }
        };
        for (i, o) in out.iter_mut().enumerate() {
            let (j, sg) = sign(i);
            let lpsi = psi[j] * sg;
            *o -= (psi[i] * (T::one() + s * s) - lpsi * (T::of(2.0) * s)) * g2;
        }
    }

    /// Euler–Maruyama noise increment `γ(L − ⟨L⟩)ψ dW`, plus the Itô
    /// correction when the drift was not already integrated.
    fn markov_noise_step(&self, psi: &[Complex<T>], out: &mut [Complex<T>], dw: T, with_drift: bool) {
        self.apply_l(psi, out);
        let s = self.coupling_expectation(psi);
        let g = self.gamma_e;
        let drift = if with_drift {
            g * g * T::of(0.5 * self.cfg.dt)
        } else {
            T::zero()
        };
        for (o, &p) in out.iter_mut().zip(psi) {
            let w = *o;
            *o = p - (p * (T::one() + s * s) - w * (T::of(2.0) * s)) * drift + (w - p * s) * (g * dw);
        }
    }

    /// Right-hand side of the first-order memory-kernel equation.
    fn nm_rhs(&self, psi: &[Complex<T>], drive: &StageDrive<T>, out: &mut [Complex<T>]) {
        self.hamiltonian_rhs(psi, out);
        let ge = self.gamma_e;
        if ge == T::zero() {
            return;
        }
        let ge2 = ge * ge;
        let one = T::one();
        let n = psi.len() / 2;
        let (d, a) = psi.split_at(n);
        let (od, oa) = out.split_at_mut(n);
        let dd = sum_sqr(d);
        let aa = sum_sqr(a);
        let n2 = dd + aa;
        let da = d.iter().zip(a).fold(czero::<T>(), |acc, (x, y)| acc + x.conj() * *y);
        let sz = (dd - aa) / n2;
        let zeta = drive.z * ge;
        let g0c = drive.g0 * ge2;
        let i = cplx(T::zero(), one);
        match self.kind {
            CouplingKind::Diagonal => {
                let cd = zeta * (one - sz) + g0c * (sz - sz * sz);
                let ca = zeta * (-one - sz) + g0c * (-sz - sz * sz);
                let m_exp = (da * (one + sz) + da.conj() * (one - sz)) / n2;
                let pref = i * drive.g1 * (ge2 * self.system.delta);
                for k in 0..n {
                    od[k] += cd * d[k] + pref * (a[k] * (one + sz) - m_exp * d[k]);
                    oa[k] += ca * a[k] + pref * (d[k] * (one - sz) - m_exp * a[k]);
                }
            }
            CouplingKind::OffDiagonal => {
                let sx = T::of(2.0) * da.re / n2;
                let x = |v: &[Complex<T>], k: usize| -> Complex<T> {
                    let mut r = czero();
                    if k > 0 {
                        r += v[k - 1] * self.sqrt_n[k];
                    }
                    if k + 1 < n {
                        r += v[k + 1] * self.sqrt_n[k + 1];
                    }
                    r
                };
                let mut zx = T::zero();
                for k in 0..n {
                    zx += (d[k].conj() * x(d, k)).re - (a[k].conj() * x(a, k)).re;
                }
                let szx = zx / n2;
                let cross = zeta + g0c * sx;
                let diag = zeta * sx + g0c * (sx * sx);
                let q = -i * drive.g1 * ge2;
                let eps = self.system.epsilon;
                let two_g = T::of(2.0) * self.system.gamma;
                for k in 0..n {
                    let xd = x(d, k);
                    let xa = x(a, k);
                    od[k] += cross * a[k] - diag * d[k]
                        + q * (d[k] * (eps * (one - sz)) + (xd - d[k] * szx) * two_g);
                    oa[k] += cross * d[k] - diag * a[k]
                        + q * (a[k] * (eps * (-one - sz)) + (-xa - a[k] * szx) * two_g);
                }
            }
        }
    }

    /// Ensemble average over `effective_traj()` trajectories.
    ///
    /// Trajectories are processed in fixed chunks whose partial sums are
    /// merged in chunk order, so results are bitwise identical for any
    /// worker count.
    pub fn run_ensemble(&self) -> Result<EnsembleResult> {
        let n_traj = self.cfg.effective_traj();
        let n_rec = self.cfg.record_steps().len();
        let dim = self.dim();
        let full = self.cfg.keep_full_density;
        let chunks = n_traj.div_ceil(CHUNK_TRAJ);
        let batch = if full { rayon::current_num_threads().max(1) } else { 64 };
        let mut total = Accum::new(n_rec, dim, full);
        let mut start = 0;
        while start < chunks {
            let end = (start + batch).min(chunks);
            let parts: Vec<Result<Accum>> = (start..end)
                .into_par_iter()
                .map(|c| self.run_chunk(c * CHUNK_TRAJ, ((c + 1) * CHUNK_TRAJ).min(n_traj), n_rec, full))
                .collect();
            for p in parts {
                total.merge(&p?);
            }
            start = end;
        }
        if total.resampled as f64 > 0.01 * n_traj as f64 {
            return Err(Error::Propagation(format!(
                "{} of {n_traj} trajectories diverged and were resampled (limit 1%); reduce dt",
                total.resampled
            )));
        }
        self.finish_ensemble(total, n_traj)
    }

    fn run_chunk(&self, lo: usize, hi: usize, n_rec: usize, full: bool) -> Result<Accum> {
        let dim = self.dim();
        let mut acc = Accum::new(n_rec, dim, full);
        let mut ws = Workspace::new(dim);
        let mut buf: Vec<Vec<Complex<T>>> = Vec::with_capacity(n_rec);
        for i in lo..hi {
            let base = derive_seed(self.cfg.master_seed, i as u64);
            let mut attempt = 0;
            loop {
                let seed = if attempt == 0 { base } else { derive_seed(base, attempt) };
                buf.clear();
                let res = self.propagate(seed, &mut ws, |psi| buf.push(psi.to_vec()));
                match res {
                    Ok(()) => break,
                    Err(b) => {
                        attempt += 1;
                        acc.resampled += 1;
                        if attempt > MAX_RESAMPLE {
                            return Err(Error::Propagation(format!(
                                "trajectory {i} diverged {attempt} times (last at step {})",
                                b.step
                            )));
                        }
                    }
                }
            }
            acc.add(&buf);
        }
        Ok(acc)
    }

    fn finish_ensemble(&self, total: Accum, n_traj: usize) -> Result<EnsembleResult> {
        let m = total.count as f64;
        let t_ps = self.record_times_ps();
        let mut rho_elec = Vec::with_capacity(t_ps.len());
        let mut pd_stderr = Vec::with_capacity(t_ps.len());
        for r in 0..t_ps.len() {
            let dd = total.dd[r] / m;
            let aa = total.aa[r] / m;
            let da = total.da[r] / m;
            rho_elec.push([[C64::new(dd, 0.0), da], [da.conj(), C64::new(aa, 0.0)]]);
            let var = (total.pd2[r] / m - dd * dd).max(0.0);
            pd_stderr.push(if total.count > 1 {
                (var / (m - 1.0)).sqrt()
            } else {
                0.0
            });
        }
        let rho_full = total.full.map(|f| {
            let dim = self.dim();
            f.chunks(dim * dim)
                .map(|block| {
                    let mut op = OperatorMatrix::from_fn(dim, dim, |r, c| block[r * dim + c] / m);
                    // Exact Hermitian symmetrization of the running sums.
                    for r in 0..dim {
                        for c in r..dim {
                            let v = (op[(r, c)] + op[(c, r)].conj()) * 0.5;
                            op[(r, c)] = v;
                            op[(c, r)] = v.conj();
                        }
                    }
                    op
                })
                .collect()
        });
        let pops = populations(&t_ps, &rho_elec)?;
        Ok(EnsembleResult {
            convergence_diag: *pd_stderr.last().unwrap_or(&0.0),
            t_ps,
            rho_elec,
            rho_full,
            populations: pops,
            pd_stderr,
            n_traj_used: n_traj,
            n_resampled: total.resampled,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct StageDrive<T> {
    z: Complex<T>,
    g0: Complex<T>,
    g1: Complex<T>,
}

impl<T: Real> Default for StageDrive<T> {
    fn default() -> Self {
        Self {
            z: czero(),
            g0: czero(),
            g1: czero(),
        }
    }
}

#[inline]
fn from64<T: Real>(z: C64) -> Complex<T> {
    crate::scalar::from_c64(z)
}

/// Classical RK4; `f(stage, ψ, out)` with stages 0, 1, 2 at `t`, `t + dt/2`, `t + dt`.
#[inline]
fn rk4<T: Real>(ws: &mut Workspace<T>, dt: T, mut f: impl FnMut(usize, &[Complex<T>], &mut [Complex<T>])) {
    let half = dt * T::of(0.5);
    f(0, &ws.psi, &mut ws.k1);
    axpy(&mut ws.tmp, &ws.psi, half, &ws.k1);
    f(1, &ws.tmp, &mut ws.k2);
    axpy(&mut ws.tmp, &ws.psi, half, &ws.k2);
    f(1, &ws.tmp, &mut ws.k3);
    axpy(&mut ws.tmp, &ws.psi, dt, &ws.k3);
    f(2, &ws.tmp, &mut ws.k4);
    let sixth = dt / T::of(6.0);
    let two = T::of(2.0);
    for i in 0..ws.psi.len() {
        ws.psi[i] += (ws.k1[i] + (ws.k2[i] + ws.k3[i]) * two + ws.k4[i]) * sixth;
    }
}

/// Shift at `t_k + dt/2` and `t_k + dt` by polynomial extrapolation of
/// `hist = [s_k, s_{k−1}, s_{k−2}]`.
fn extrapolate_shift(k: usize, hist: &[C64; 3]) -> (C64, C64) {
    let [s0, s1, s2] = *hist;
    match k {
        0 => (s0, s0),
        1 => ((3.0 * s0 - s1) * 0.5, 2.0 * s0 - s1),
        _ => (
            (15.0 * s0 - 10.0 * s1 + 3.0 * s2) / 8.0,
            3.0 * s0 - 3.0 * s1 + s2,
        ),
    }
}

#[inline]
fn dense_apply<T: Real>(u: &[Complex<T>], x: &[Complex<T>], out: &mut [Complex<T>]) {
    let n = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &u[r * n..(r + 1) * n];
        *o = row.iter().zip(x).fold(czero(), |acc, (&a, &b)| acc + a * b);
    }
}

/// `e^{−iH dt}` for real symmetric `H`, row-major.
fn unitary_step<T: Real>(h: &OperatorMatrix<T>, dt: f64) -> Vec<Complex<T>> {
    let n = h.rows();
    let m = DMatrix::from_fn(n, n, |r, c| 0.5 * (h[(r, c)].re.as_f64() + h[(c, r)].re.as_f64()));
    let eig = SymmetricEigen::new(m);
    let v = &eig.eigenvectors;
    let phases: Vec<C64> = eig
        .eigenvalues
        .iter()
        .map(|&e| C64::from_polar(1.0, -e * dt))
        .collect();
    let mut u = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let z: C64 = (0..n).map(|k| phases[k] * (v[(r, k)] * v[(c, k)])).sum();
            u.push(from64(z));
        }
    }
    u
}

fn colored_tables(env: &dyn Environment, dt: f64, n_steps: usize) -> Result<ColoredTables> {
    let half_len = 2 * n_steps + 1;
    let synth = NoiseSynthesizer::new(env, 0.5 * dt, half_len)?;
    let corr = spectral_correlation_table(env, 0.5 * dt, half_len, synth.fft_len())?;
    let kernels = memory_kernels(&corr);
    let full = CorrelationTable {
        dt,
        values: corr.values.iter().step_by(2).copied().collect(),
    };
    Ok(ColoredTables {
        synth,
        g0: kernels.g0,
        g1: kernels.g1,
        shift: ShiftKernel::new(&full),
    })
}

struct Accum {
    dim: usize,
    dd: Vec<f64>,
    aa: Vec<f64>,
    da: Vec<C64>,
    pd2: Vec<f64>,
    full: Option<Vec<C64>>,
    count: usize,
    resampled: usize,
}

impl Accum {
    fn new(n_rec: usize, dim: usize, full: bool) -> Self {
        Self {
            dim,
            dd: vec![0.0; n_rec],
            aa: vec![0.0; n_rec],
            da: vec![C64::default(); n_rec],
            pd2: vec![0.0; n_rec],
            full: full.then(|| vec![C64::default(); n_rec * dim * dim]),
            count: 0,
            resampled: 0,
        }
    }

    fn add<T: Real>(&mut self, states: &[Vec<Complex<T>>]) {
        let dim = self.dim;
        for (r, psi) in states.iter().enumerate() {
            let rho = normalized_reduced(psi);
            let pd = rho[0][0].re;
            self.dd[r] += pd;
            self.aa[r] += rho[1][1].re;
            self.da[r] += rho[0][1];
            self.pd2[r] += pd * pd;
            if let Some(f) = self.full.as_mut() {
                let n2 = sum_sqr(psi).as_f64();
                let v: Vec<C64> = psi.iter().map(|&z| to_c64(z)).collect();
                let block = &mut f[r * dim * dim..(r + 1) * dim * dim];
                for i in 0..dim {
                    for j in 0..dim {
                        block[i * dim + j] += v[i] * v[j].conj() / n2;
                    }
                }
            }
        }
        self.count += 1;
    }

    fn merge(&mut self, other: &Accum) {
        for r in 0..self.dd.len() {
            self.dd[r] += other.dd[r];
            self.aa[r] += other.aa[r];
            self.da[r] += other.da[r];
            self.pd2[r] += other.pd2[r];
        }
        if let (Some(a), Some(b)) = (self.full.as_mut(), other.full.as_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.count += other.count;
        self.resampled += other.resampled;
    }
}

/// Operator multiplying `g2` in the general memory-kernel equation,
/// `(L† − ⟨L†⟩)[L†, L]L − ⟨(L† − ⟨L†⟩)[L†, L]⟩`. It vanishes for Hermitian
/// `L`, so propagation carries no `g2` term.
pub fn g2_term_operator<T: Real>(l: &OperatorMatrix<T>, psi: &[Complex<T>]) -> Result<OperatorMatrix<T>> {
    let ld = l.adjoint();
    let n = l.dim();
    let id = OperatorMatrix::<T>::identity(n);
    let mean = ld.expectation(psi)?;
    let shifted = &ld - &id.scale(mean);
    let a = shifted.matmul(&ld.commutator(l)?)?;
    let a_mean = a.expectation(psi)?;
    Ok(&a.matmul(l)? - &id.scale(a_mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::{BathFamily, ExponentialCorrelation};

    fn system(eps: f64, delta: f64, wv: f64, g: f64, n: usize) -> SystemParams<f64> {
        SystemParams {
            epsilon: eps,
            delta,
            omega_v: wv,
            gamma: g,
            fock_dim: n,
        }
    }

    fn ohmic(alpha: f64, gamma_e: f64) -> BathSpec<f64> {
        BathSpec {
            family: BathFamily::Ohmic { alpha, omega_c: 0.5 },
            temperature: 0.025,
            gamma_e,
        }
    }

    #[test]
    fn closed_rabi_oscillation() {
        let delta = 0.01;
        let period = 2.0 * std::f64::consts::PI / delta;
        let dt = 0.2;
        let n_steps = (10.0 * period / dt).round() as usize;
        let mut cfg = PropagatorConfig::new(Scheme::Closed, dt, n_steps, 1, 0);
        cfg.record_stride = 50;
        let p = Propagator::closed(cfg.clone(), &system(0.0, delta, 0.1487, 0.0, 2)).unwrap();
        let pops = p.run_trajectory(0).unwrap().populations().unwrap();
        let mut worst: f64 = 0.0;
        for (j, &k) in cfg.record_steps().iter().enumerate() {
            let t = k as f64 * dt;
            worst = worst.max((pops.p_a[j] - (0.5 * delta * t).sin().powi(2)).abs());
        }
        assert!(worst < 1e-6, "max deviation {worst}");
    }

    #[test]
    fn closed_norm_drift_without_renormalization() {
        let sys = system(0.1, 0.01, 0.1, 0.05, 4);
        let h_norm = build_system_hamiltonian(&sys).unwrap().gershgorin_bound();
        let mut cfg = PropagatorConfig::new(Scheme::Closed, 0.01 / h_norm, 10_000, 1, 0);
        cfg.renormalize_each_step = false;
        cfg.record_stride = 10_000;
        let tr = Propagator::closed(cfg, &sys).unwrap().run_trajectory(0).unwrap();
        let n2 = sum_sqr(&tr.states[1]);
        assert!((n2.sqrt() - 1.0).abs() < 1e-8, "norm {}", n2.sqrt());
    }

    #[test]
    fn step_guard_rejects_large_dt() {
        let sys = system(0.1, 0.01, 0.1487, 0.1, 8);
        let cfg = PropagatorConfig::new(Scheme::Closed, 1.0, 10, 1, 0);
        assert!(matches!(Propagator::closed(cfg, &sys), Err(Error::InvalidParameter { .. })));
        // The split Markov step is exact in H; only γ_E² dt is limited.
        let cfg = PropagatorConfig::new(Scheme::MarkovSse, 3.0, 10, 1, 0);
        assert!(Propagator::new(cfg, &sys, CouplingKind::Diagonal, &ohmic(0.05, 0.05)).is_ok());
        let cfg = PropagatorConfig::new(Scheme::MarkovSse, 3.0, 10, 1, 0);
        assert!(Propagator::new(cfg, &sys, CouplingKind::Diagonal, &ohmic(0.05, 0.5)).is_err());
    }

    #[test]
    fn scheme_and_coupling_must_agree() {
        let sys = system(0.1, 0.01, 0.1487, 0.1, 4);
        let cfg = PropagatorConfig::new(Scheme::NmDiagonal, 0.05, 10, 1, 0);
        assert!(matches!(
            Propagator::new(cfg, &sys, CouplingKind::OffDiagonal, &ohmic(0.05, 0.05)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn diagonal_coupling_conserves_sigma_z_without_tunneling() {
        let sys = system(0.1, 0.0, 0.1487, 0.1, 6);
        for (scheme, integ) in [
            (Scheme::MarkovSse, MarkovIntegrator::Split),
            (Scheme::MarkovSse, MarkovIntegrator::Rk4),
            (Scheme::NmDiagonal, MarkovIntegrator::Split),
        ] {
            let mut cfg = PropagatorConfig::new(scheme, 0.05, 2000, 4, 7);
            cfg.markov_integrator = integ;
            cfg.record_stride = 100;
            let p = Propagator::new(cfg, &sys, CouplingKind::Diagonal, &ohmic(0.05, 0.05)).unwrap();
            let res = p.run_ensemble().unwrap();
            for &pd in &res.populations.p_d {
                assert!((pd - 1.0).abs() < 1e-12, "{scheme:?} {integ:?}: {pd}");
            }
        }
    }

    #[test]
    fn donor_ground_state_is_dark_without_tunneling() {
        // L|D,0⟩ = ⟨L⟩|D,0⟩ and γ = 0: only a phase accumulates.
        let sys = system(0.1, 0.0, 0.1487, 0.0, 3);
        let cfg = PropagatorConfig::new(Scheme::MarkovSse, 0.5, 200, 1, 3);
        let p = Propagator::new(cfg, &sys, CouplingKind::Diagonal, &ohmic(0.05, 0.05)).unwrap();
        let tr = p.run_trajectory(11).unwrap();
        let last = tr.states.last().unwrap();
        assert!((last[0].norm() - 1.0).abs() < 1e-12);
        let e0 = 0.05 + 0.5 * 0.1487;
        let want = C64::from_polar(1.0, -e0 * 100.0);
        assert!((last[0] - want).norm() < 1e-10);
    }

    #[test]
    fn nm_without_coupling_equals_closed_bitwise() {
        let sys = system(0.12, 0.02, 0.1487, 0.08, 5);
        let mut closed = PropagatorConfig::new(Scheme::Closed, 0.05, 500, 1, 0);
        closed.record_stride = 10;
        let a = Propagator::closed(closed.clone(), &sys).unwrap().run_trajectory(1).unwrap();
        for scheme in [Scheme::NmDiagonal, Scheme::NmOffDiagonal] {
            let mut cfg = closed.clone();
            cfg.scheme = scheme;
            let kind = scheme.implied_coupling().unwrap();
            let b = Propagator::new(cfg, &sys, kind, &ohmic(0.05, 0.0)).unwrap().run_trajectory(1).unwrap();
            assert_eq!(a.states, b.states);
        }
    }

    #[test]
    fn off_diagonal_without_bias_or_mode_relaxes_along_sigma_x() {
        // ε = γ = 0 removes the g1 term; populations can only move through
        // the σ_x noise and stay symmetric around 1/2 on average.
        let sys = system(0.0, 0.0, 0.1487, 0.0, 2);
        let mut cfg = PropagatorConfig::new(Scheme::NmOffDiagonal, 0.2, 2000, 64, 5);
        cfg.record_stride = 100;
        let p = Propagator::new(cfg, &sys, CouplingKind::OffDiagonal, &ohmic(0.05, 0.1)).unwrap();
        let res = p.run_ensemble().unwrap();
        let last = *res.populations.p_d.last().unwrap();
        assert!(last < 0.999);
        for (pd, pa) in res.populations.p_d.iter().zip(&res.populations.p_a) {
            assert!((pd + pa - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let sys = system(0.1, 0.01, 0.1487, 0.1, 4);
        let mut cfg = PropagatorConfig::new(Scheme::NmOffDiagonal, 0.05, 400, 2, 9);
        cfg.record_stride = 20;
        let p = Propagator::new(cfg, &sys, CouplingKind::OffDiagonal, &ohmic(0.05, 0.05)).unwrap();
        assert_eq!(p.run_trajectory(42).unwrap(), p.run_trajectory(42).unwrap());
        assert_ne!(p.run_trajectory(42).unwrap().states, p.run_trajectory(43).unwrap().states);
    }

    #[test]
    fn ensemble_is_independent_of_thread_count() {
        let sys = system(0.1, 0.01, 0.1487, 0.1, 4);
        let mut cfg = PropagatorConfig::new(Scheme::NmDiagonal, 0.05, 200, 70, 9);
        cfg.record_stride = 10;
        let p = Propagator::new(cfg, &sys, CouplingKind::Diagonal, &ohmic(0.05, 0.05)).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| p.run_ensemble()).unwrap();
        let b = four.install(|| p.run_ensemble()).unwrap();
        assert_eq!(a.populations, b.populations);
        assert_eq!(a.rho_elec, b.rho_elec);
    }

    #[test]
    fn single_trajectory_ensemble_matches_trajectory() {
        let sys = system(0.1, 0.01, 0.1487, 0.1, 4);
        let mut cfg = PropagatorConfig::new(Scheme::MarkovSse, 0.5, 300, 1, 21);
        cfg.record_stride = 30;
        let p = Propagator::new(cfg, &sys, CouplingKind::Diagonal, &ohmic(0.05, 0.05)).unwrap();
        let ens = p.run_ensemble().unwrap();
        let tr = p.run_trajectory(derive_seed(21, 0)).unwrap();
        for (j, psi) in tr.states.iter().enumerate() {
            let pd: f64 = psi[..4].iter().map(|z| z.norm_sqr()).sum();
            assert!((ens.populations.p_d[j] - pd).abs() < 1e-14);
        }
        assert_eq!(ens.convergence_diag, 0.0);
    }

    #[test]
    fn deterministic_limit_gives_pure_ensemble() {
        let sys = system(0.1, 0.02, 0.1487, 0.1, 4);
        let mut cfg = PropagatorConfig::new(Scheme::MarkovSse, 0.5, 400, 20, 2);
        cfg.record_stride = 100;
        cfg.keep_full_density = true;
        let p = Propagator::new(cfg, &sys, CouplingKind::Diagonal, &ohmic(0.0, 0.0)).unwrap();
        let res = p.run_ensemble().unwrap();
        for rho in res.rho_full.as_ref().unwrap() {
            let purity = rho.matmul(rho).unwrap().trace().re;
            assert!((purity - 1.0).abs() < 1e-8, "purity {purity}");
        }
        assert!(res.pd_stderr.iter().all(|&s| s < 1e-7));
    }

    #[test]
    fn averaged_density_is_a_density_matrix() {
        let sys = system(0.1, 0.02, 0.1487, 0.1, 4);
        let mut cfg = PropagatorConfig::new(Scheme::NmOffDiagonal, 0.05, 600, 48, 2);
        cfg.record_stride = 60;
        cfg.keep_full_density = true;
        let p = Propagator::new(cfg, &sys, CouplingKind::OffDiagonal, &ohmic(0.05, 0.1)).unwrap();
        let res = p.run_ensemble().unwrap();
        for (r, full) in res.rho_full.as_ref().unwrap().iter().enumerate() {
            assert!(full.hermiticity_defect() < 1e-10);
            assert!((full.trace().re - 1.0).abs() < 1e-8);
            let reduced = crate::hilbert::partial_trace_vib(full).unwrap();
            for a in 0..2 {
                for b in 0..2 {
                    assert!((reduced[(a, b)] - res.rho_elec[r][a][b]).norm() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn split_and_rk4_markov_agree_statistically() {
        let sys = system(0.1487, 0.01, 0.1487, 0.1, 4);
        let run = |integ| {
            let mut cfg = PropagatorConfig::new(Scheme::MarkovSse, 0.05, 4000, 200, 4);
            cfg.markov_integrator = integ;
            cfg.record_stride = 400;
            Propagator::new(cfg, &sys, CouplingKind::Diagonal, &ohmic(0.05, 0.05))
                .unwrap()
                .run_ensemble()
                .unwrap()
        };
        let a = run(MarkovIntegrator::Split);
        let b = run(MarkovIntegrator::Rk4);
        for j in 0..a.t_ps.len() {
            let tol = 1e-3 + 3.0 * (a.pd_stderr[j].powi(2) + b.pd_stderr[j].powi(2)).sqrt();
            assert!((a.populations.p_d[j] - b.populations.p_d[j]).abs() < tol, "record {j}");
        }
    }

    #[test]
    fn thermal_initial_levels_follow_boltzmann() {
        let sys = system(0.1, 0.0, 0.1, 0.0, 4);
        let mut cfg = PropagatorConfig::new(Scheme::MarkovSse, 0.5, 1, 1, 0);
        cfg.initial_vib = InitialVib::Thermal { temperature: 0.1 };
        let p = Propagator::new(cfg, &sys, CouplingKind::Diagonal, &ohmic(0.0, 0.0)).unwrap();
        let mut counts = [0usize; 4];
        let m = 4000;
        for i in 0..m {
            let tr = p.run_trajectory(derive_seed(1, i)).unwrap();
            let n = (0..4).find(|&k| tr.states[0][k].norm() > 0.5).unwrap();
            counts[n] += 1;
        }
        let z: f64 = (0..4).map(|k| (-(k as f64)).exp()).sum();
        for (k, &c) in counts.iter().enumerate() {
            let p = (-(k as f64)).exp() / z;
            let sd = (p * (1.0 - p) / m as f64).sqrt();
            assert!((c as f64 / m as f64 - p).abs() < 5.0 * sd, "level {k}");
        }
    }

    #[test]
    fn exponential_environment_is_accepted() {
        let sys = system(0.0, 0.02, 0.1, 0.0, 2);
        let cfg = PropagatorConfig::new(Scheme::NmDiagonal, 0.05, 100, 2, 0);
        let env = Arc::new(ExponentialCorrelation::unit_area(5.0));
        let p = Propagator::with_environment(cfg, &sys, CouplingKind::Diagonal, 0.1, env).unwrap();
        assert_eq!(p.run_ensemble().unwrap().n_traj_used, 2);
    }

    #[test]
    fn shift_extrapolation_is_exact_for_quadratics() {
        let f = |t: f64| C64::new(1.0 + 2.0 * t - 0.5 * t * t, t * t);
        let hist = [f(5.0), f(4.0), f(3.0)];
        let (h, e) = extrapolate_shift(5, &hist);
        assert!((h - f(5.5)).norm() < 1e-12);
        assert!((e - f(6.0)).norm() < 1e-12);
    }

    #[test]
    fn unitary_step_is_unitary() {
        let h = build_system_hamiltonian(&system(0.1, 0.02, 0.1487, 0.1, 6)).unwrap();
        let u = unitary_step(&h, 3.0);
        let n = h.rows();
        let m = OperatorMatrix::from_rows(n, n, u).unwrap();
        let prod = m.matmul(&m.adjoint()).unwrap();
        assert!((&prod - &OperatorMatrix::identity(n)).max_abs() < 1e-12);
    }

    fn random_state(dim: usize, salt: f64) -> Vec<C64> {
        let mut v: Vec<C64> = (0..dim)
            .map(|k| C64::new((k as f64 * 0.7 + salt).sin(), (k as f64 * 1.3 - salt).cos()))
            .collect();
        crate::hilbert::normalize(&mut v);
        v
    }

    #[test]
    fn g2_term_vanishes_for_hermitian_coupling() {
        use crate::hilbert::{build_coupling_operator, pauli_x, pauli_y};
        let sys = system(0.1487, 0.01, 0.1487, 0.1, 4);
        for (salt, kind) in [(0.1, CouplingKind::Diagonal), (0.9, CouplingKind::OffDiagonal)] {
            let l = build_coupling_operator::<f64>(kind, 0.05, sys.fock_dim).unwrap();
            let psi = random_state(sys.dim(), salt);
            assert!(g2_term_operator(&l, &psi).unwrap().max_abs() < 1e-14);
        }
        // A non-Hermitian coupling such as σ₋ gives a nonzero term.
        let sm = (&pauli_x::<f64>() - &pauli_y::<f64>().scale(C64::new(0.0, 1.0))).scale_real(0.5);
        let psi = random_state(2, 0.3);
        assert!(g2_term_operator(&sm, &psi).unwrap().max_abs() > 1e-3);
    }

    /// The per-geometry right-hand sides agree with the general
    /// operator form in the noise and `g0` terms. In the `g1` term the
    /// general form `i(L − ⟨L⟩)[H, L]` and the per-geometry forms differ,
    /// and the per-geometry forms are what gets integrated.
    #[test]
    fn geometry_forms_against_general_form() {
        use crate::hilbert::{build_coupling_operator, build_system_hamiltonian};
        let sys = system(0.1487, 0.02, 0.1487, 0.1, 3);
        let ge = 0.3;
        let h = build_system_hamiltonian(&sys).unwrap();
        let i = C64::new(0.0, 1.0);
        for (salt, kind, scheme) in [
            (0.2, CouplingKind::Diagonal, Scheme::NmDiagonal),
            (1.1, CouplingKind::OffDiagonal, Scheme::NmOffDiagonal),
        ] {
            let cfg = PropagatorConfig::new(scheme, 0.1, 10, 1, 0);
            let env = Arc::new(ExponentialCorrelation::unit_area(2.0));
            let p = Propagator::<f64>::with_environment(cfg, &sys, kind, ge, env).unwrap();
            let l = build_coupling_operator::<f64>(kind, ge, sys.fock_dim).unwrap();
            let psi = random_state(sys.dim(), salt);
            let id = OperatorMatrix::<f64>::identity(sys.dim());
            let dl = &l - &id.scale(l.expectation(&psi).unwrap());
            let general = |d: &StageDrive<f64>| -> Vec<C64> {
                let g0op = dl.matmul(&l).unwrap();
                let g0op = &g0op - &id.scale(g0op.expectation(&psi).unwrap());
                let g1op = dl.matmul(&h.commutator(&l).unwrap()).unwrap();
                let g1op = &g1op - &id.scale(g1op.expectation(&psi).unwrap());
                let op = &(&(&h.scale(-i) + &dl.scale(d.z)) - &g0op.scale(d.g0)) + &g1op.scale(i * d.g1);
                op.apply(&psi).unwrap()
            };
            let ours = |d: &StageDrive<f64>| -> Vec<C64> {
                let mut out = vec![C64::default(); psi.len()];
                p.nm_rhs(&psi, d, &mut out);
                out
            };
            let gap = |a: &[C64], b: &[C64]| a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
            let no_g1 = StageDrive {
                z: C64::new(0.4, -0.7),
                g0: C64::new(0.8, 0.25),
                g1: C64::default(),
            };
            assert!(gap(&general(&no_g1), &ours(&no_g1)) < 1e-14, "{kind:?}");
            let with_g1 = StageDrive {
                g1: C64::new(1.5, -0.5),
                ..no_g1
            };
            assert!(gap(&general(&with_g1), &ours(&with_g1)) > 1e-4, "{kind:?}");
        }
    }

    /// A short exponential memory of unit area approaches white noise, so
    /// the memory-kernel scheme must agree with the Markov scheme.
    #[test]
    fn short_memory_matches_markov_limit() {
        let sys = system(0.0, 0.02, 0.1487, 0.0, 2);
        let ge = 0.1;
        let t_end = 300.0;
        let n_traj = 400;
        let mk = {
            let dt = 0.5;
            let mut cfg = PropagatorConfig::new(Scheme::MarkovSse, dt, (t_end / dt) as usize, n_traj, 11);
            cfg.record_stride = cfg.n_steps;
            Propagator::<f64>::with_environment(cfg, &sys, CouplingKind::Diagonal, ge, Arc::new(ExponentialCorrelation::unit_area(5.0)))
                .unwrap()
                .run_ensemble()
                .unwrap()
        };
        let nm = {
            let dt = 0.02;
            let mut cfg = PropagatorConfig::new(Scheme::NmDiagonal, dt, (t_end / dt) as usize, n_traj, 12);
            cfg.record_stride = cfg.n_steps;
            Propagator::<f64>::with_environment(cfg, &sys, CouplingKind::Diagonal, ge, Arc::new(ExponentialCorrelation::unit_area(5.0)))
                .unwrap()
                .run_ensemble()
                .unwrap()
        };
        let a = *mk.populations.p_d.last().unwrap();
        let b = *nm.populations.p_d.last().unwrap();
        let se = (mk.pd_stderr.last().unwrap().powi(2) + nm.pd_stderr.last().unwrap().powi(2)).sqrt();
        assert!((a - b).abs() <= 3.0 * se, "markov {a} vs memory {b}, stderr {se}");
        // The comparison must be informative: dephasing has visibly acted.
        assert!(a < 0.9, "{a}");
    }
}
