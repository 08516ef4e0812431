//! Marcus–Jortner rate with one quantized mode and a classical bath.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::units::HBAR_EV_PS;

/// Relative size of the neglected Poisson tail at which summation stops.
pub const MJ_TAIL_TOL: f64 = 1e-12;
const HARD_MAX_TERMS: usize = 100_000;

/// Where the vibrational quantum enters the Gaussian exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MjVariant {
    /// `(ε − (λ_s + λ_v) + mω_v)²`
    #[default]
    AsPrinted,
    /// `(ε − λ_s − mω_v)²`, the usual textbook placement.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MjParams<T> {
    /// Electronic coupling `V = Δ/2` (eV).
    pub coupling: T,
    pub epsilon: T,
    pub lambda_s: T,
    pub lambda_v: T,
    pub omega_v: T,
    /// `k_B T` in eV.
    pub temperature: T,
    /// Optional hard cap on the vibrational sum; adaptive when `None`.
    pub m_max: Option<usize>,
    pub variant: MjVariant,
}

impl<T: Real> MjParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_s > T::zero()) {
            return Err(Error::Domain(format!(
                "lambda_s must be > 0 for the classical bath Gaussian, got {}",
                self.lambda_s
            )));
        }
        let mut bad = Vec::new();
        if !(self.temperature > T::zero()) {
            bad.push(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.omega_v > T::zero()) {
            bad.push(format!("omega_v must be > 0, got {}", self.omega_v));
        }
        if !(self.lambda_v >= T::zero()) {
            bad.push(format!("lambda_v must be >= 0, got {}", self.lambda_v));
        }
        if !self.epsilon.is_finite() || !self.coupling.is_finite() {
            bad.push("epsilon and coupling must be finite".to_string());
        }
        match bad.len() {
            0 => Ok(()),
            1 => Err(Error::invalid("mj", bad.remove(0))),
            _ => Err(Error::Validation(bad)),
        }
    }

    pub fn huang_rhys(&self) -> T {
        self.lambda_v / self.omega_v
    }
}

/// `S = 2γ²/ω_v²`
pub fn huang_rhys<T: Real>(gamma: T, omega_v: T) -> Result<T> {
    if !(omega_v > T::zero()) {
        return Err(Error::invalid("omega_v", format!("must be > 0, got {omega_v}")));
    }
    Ok(T::of(2.0) * gamma * gamma / (omega_v * omega_v))
}

/// Poisson weights `e^{−S} S^m / m!` until the remaining tail is below
/// `tol` (absolute).
pub fn poisson_weights<T: Real>(s: T, tol: T) -> Vec<T> {
    let mut w = vec![(-s).exp()];
    let mut m = 0usize;
    loop {
        let next = w[m] * s / T::of((m + 1) as f64);
        if poisson_tail_bound(s, m, w[m]) <= tol || m + 1 >= HARD_MAX_TERMS {
            break;
        }
        w.push(next);
        m += 1;
    }
    w
}

/// Upper bound on `Σ_{j>m} P_j` given `P_m`; infinite while `m + 2 ≤ S`.
fn poisson_tail_bound<T: Real>(s: T, m: usize, pm: T) -> T {
    let ratio = s / T::of((m + 2) as f64);
    if ratio >= T::one() {
        return T::infinity();
    }
    let next = pm * s / T::of((m + 1) as f64);
    next / (T::one() - ratio)
}

/// Rate in ps⁻¹.
pub fn mj_rate<T: Real>(p: &MjParams<T>) -> Result<T> {
    Ok(mj_rate_terms(p)?.0)
}

/// Rate in ps⁻¹ and the number of vibrational terms summed.
pub fn mj_rate_terms<T: Real>(p: &MjParams<T>) -> Result<(T, usize)> {
    p.validate()?;
    let s = p.huang_rhys();
    let four_lt = T::of(4.0) * p.lambda_s * p.temperature;
    let pi = T::PI();
    let pref = T::of(2.0) * pi / T::of(HBAR_EV_PS) * p.coupling * p.coupling / (pi * four_lt).sqrt();
    let center = match p.variant {
        MjVariant::AsPrinted => p.epsilon - (p.lambda_s + p.lambda_v),
        MjVariant::Standard => p.epsilon - p.lambda_s,
    };
    let cap = p.m_max.map_or(HARD_MAX_TERMS, |m| m + 1);
    let mut weight = (-s).exp();
    let mut sum = T::zero();
    let mut terms = 0;
    for m in 0..cap {
        let mw = T::of(m as f64) * p.omega_v;
        let x = match p.variant {
            MjVariant::AsPrinted => center + mw,
            MjVariant::Standard => center - mw,
        };
        sum += weight * (-(x * x) / four_lt).exp();
        terms = m + 1;
        // Gaussian factors are ≤ 1, so the Poisson tail bounds what is left.
        let tail = poisson_tail_bound(s, m, weight);
        if tail <= T::of(MJ_TAIL_TOL) * sum || tail < T::min_positive_value() {
            break;
        }
        weight = weight * s / T::of((m + 1) as f64);
    }
    Ok((pref * sum, terms))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MjCurve {
    pub epsilon: Vec<f64>,
    pub rate_ps_inv: Vec<f64>,
    pub argmax: usize,
}

impl MjCurve {
    pub fn peak_epsilon(&self) -> f64 {
        self.epsilon[self.argmax]
    }
}

pub fn mj_curve<T: Real>(base: &MjParams<T>, epsilon_grid: &[T]) -> Result<MjCurve> {
    if epsilon_grid.is_empty() {
        return Err(Error::invalid("epsilon_grid", "must not be empty"));
    }
    let mut rates = Vec::with_capacity(epsilon_grid.len());
    for &e in epsilon_grid {
        let p = MjParams { epsilon: e, ..*base };
        rates.push(mj_rate(&p)?.as_f64());
    }
    let argmax = rates
        .iter()
        .enumerate()
        .fold(0, |best, (i, &k)| if k > rates[best] { i } else { best });
    Ok(MjCurve {
        epsilon: epsilon_grid.iter().map(|e| e.as_f64()).collect(),
        rate_ps_inv: rates,
        argmax,
    })
}
