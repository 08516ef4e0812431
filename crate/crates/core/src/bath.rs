//! Harmonic bath: spectral densities, the correlation function C(t),
//! reorganization energies and the memory kernels g0, g1, g2.
//!
//! The two-sided noise spectrum used throughout is
//!
//! ```text
//! Ŝ(ω) = J(ω) (n(ω) + 1) / π      ω > 0
//! Ŝ(ω) = J(|ω|) n(|ω|) / π        ω < 0
//! ```
//!
//! so that `C(t) = ∫ Ŝ(ω) e^{-iωt} dω` equals
//! `(1/π) ∫₀^∞ J(ω) [coth(ω/2T) cos ωt − i sin ωt] dω`.

use num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::{integrate, integrate_semi_infinite, QuadOptions};
use crate::scalar::{czero, from_c64, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BathFamily<T> {
    /// `J(ω) = 2αω e^{-ω/ω_c}`
    Ohmic { alpha: T, omega_c: T },
    /// `J(ω) = α ω₀² ω / ((ω₀² − ω²)² + β² ω²)`
    Structured { alpha: T, omega_0: T, beta: T },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BathSpec<T> {
    pub family: BathFamily<T>,
    pub temperature: T,
    pub gamma_e: T,
}

impl<T: Real> BathSpec<T> {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut positive = |name: &str, v: T| {
            if !(v > T::zero()) || !v.is_finite() {
                bad.push(format!("{name} must be > 0, got {v}"));
            }
        };
        positive("temperature", self.temperature);
        match self.family {
            BathFamily::Ohmic { omega_c, .. } => positive("omega_c", omega_c),
            BathFamily::Structured { omega_0, .. } => positive("omega_0", omega_0),
        }
        let mut non_negative = |name: &str, v: T| {
            if !(v >= T::zero()) || !v.is_finite() {
                bad.push(format!("{name} must be >= 0, got {v}"));
            }
        };
        non_negative("gamma_e", self.gamma_e);
        match self.family {
            BathFamily::Ohmic { alpha, .. } => non_negative("alpha", alpha),
            BathFamily::Structured { alpha, beta, .. } => {
                non_negative("alpha", alpha);
                non_negative("beta", beta);
            }
        }
        match bad.len() {
            0 => Ok(()),
            1 => Err(Error::invalid("bath", bad.remove(0))),
            _ => Err(Error::Validation(bad)),
        }
    }

    pub fn alpha(&self) -> T {
        match self.family {
            BathFamily::Ohmic { alpha, .. } | BathFamily::Structured { alpha, .. } => alpha,
        }
    }

    pub fn to_f64(&self) -> BathSpec<f64> {
        let family = match self.family {
            BathFamily::Ohmic { alpha, omega_c } => BathFamily::Ohmic {
                alpha: alpha.as_f64(),
                omega_c: omega_c.as_f64(),
            },
            BathFamily::Structured { alpha, omega_0, beta } => BathFamily::Structured {
                alpha: alpha.as_f64(),
                omega_0: omega_0.as_f64(),
                beta: beta.as_f64(),
            },
        };
        BathSpec {
            family,
            temperature: self.temperature.as_f64(),
            gamma_e: self.gamma_e.as_f64(),
        }
    }

    /// `J(ω)/ω`, finite at ω = 0.
    fn j_over_omega(&self, omega: T) -> T {
        match self.family {
            BathFamily::Ohmic { alpha, omega_c } => T::of(2.0) * alpha * (-omega / omega_c).exp(),
            BathFamily::Structured { alpha, omega_0, beta } => {
                let w02 = omega_0 * omega_0;
                let d = w02 - omega * omega;
                alpha * w02 / (d * d + beta * beta * omega * omega)
            }
        }
    }

    /// Frequency above which the spectral density is negligible and
    /// monotonically decreasing.
    fn base_cutoff(&self) -> T {
        let t50 = T::of(50.0) * self.temperature;
        match self.family {
            BathFamily::Ohmic { omega_c, .. } => t50.max(T::of(20.0) * omega_c),
            BathFamily::Structured { omega_0, beta, .. } => {
                t50.max(T::of(20.0) * omega_0).max(omega_0 + T::of(20.0) * beta)
            }
        }
    }
}

pub fn spectral_density<T: Real>(spec: &BathSpec<T>, omega: T) -> Result<T> {
    if !(omega >= T::zero()) {
        return Err(Error::Domain(format!("spectral density needs omega >= 0, got {omega}")));
    }
    Ok(omega * spec.j_over_omega(omega))
}

/// `ω coth(ω / 2T)`, continuous at ω = 0.
fn omega_coth(omega: f64, temperature: f64) -> f64 {
    let x = omega / (2.0 * temperature);
    if x.abs() < 1e-6 {
        2.0 * temperature * (1.0 + x * x / 3.0)
    } else {
        omega / x.tanh()
    }
}

/// Two-sided spectrum `Ŝ(ω)` of a bath, see the module docs.
pub fn two_sided_spectrum(spec: &BathSpec<f64>, omega: f64) -> f64 {
    let w = omega.abs();
    let jw = spec.j_over_omega(w);
    // J (n + 1) for ω > 0 and J n for ω < 0 share ½ J (coth ± 1).
    0.5 * jw * (omega_coth(w, spec.temperature) + omega) / std::f64::consts::PI
}

/// Anything that can drive the stochastic propagators: a stationary noise
/// with two-sided spectrum `Ŝ(ω)`.
pub trait Environment: Send + Sync {
    fn spectrum(&self, omega: f64) -> f64;
    /// Lag beyond which `|C(t)|` is negligible compared with `C(0)`.
    fn memory_time(&self) -> f64;
}

impl Environment for BathSpec<f64> {
    fn spectrum(&self, omega: f64) -> f64 {
        two_sided_spectrum(self, omega)
    }

    fn memory_time(&self) -> f64 {
        let thermal = 14.0 / (2.0 * std::f64::consts::PI * self.temperature);
        match self.family {
            // The zero-temperature part decays algebraically, ~ 1/(ω_c t)².
            BathFamily::Ohmic { omega_c, .. } => thermal.max(300.0 / omega_c),
            BathFamily::Structured { omega_0, beta, .. } => {
                let ring = if beta > 0.0 { 2.0 * 13.8 / beta } else { f64::INFINITY };
                thermal.max(ring).max(300.0 / omega_0)
            }
        }
    }
}

/// Real exponential correlation `C(t) = A e^{-κ|t|}`, used to probe the
/// white-noise limit of the memory-kernel equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentialCorrelation {
    pub amplitude: f64,
    pub kappa: f64,
}

impl ExponentialCorrelation {
    /// Unit-area white-noise limit: `∫ C(t) dt = 1` over the real line.
    pub fn unit_area(kappa: f64) -> Self {
        Self {
            amplitude: 0.5 * kappa,
            kappa,
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        self.amplitude * (-self.kappa * t.abs()).exp()
    }
}

impl Environment for ExponentialCorrelation {
    fn spectrum(&self, omega: f64) -> f64 {
        self.amplitude * self.kappa / (std::f64::consts::PI * (self.kappa * self.kappa + omega * omega))
    }

    fn memory_time(&self) -> f64 {
        30.0 / self.kappa
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTable<T> {
    pub dt: T,
    pub values: Vec<Complex<T>>,
}

impl<T: Real> CorrelationTable<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn from_fn(dt: T, len: usize, f: impl Fn(T) -> Complex<T>) -> Self {
        Self {
            dt,
            values: (0..len).map(|k| f(dt * T::of(k as f64))).collect(),
        }
    }

    pub fn to_f64(&self) -> CorrelationTable<f64> {
        CorrelationTable {
            dt: self.dt.as_f64(),
            values: self.values.iter().map(|&z| crate::scalar::to_c64(z)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelTable<T> {
    pub dt: T,
    pub g0: Vec<Complex<T>>,
    pub g1: Vec<Complex<T>>,
    pub g2: Vec<Complex<T>>,
}

/// Quadrature controls for [`correlation_function`].
#[derive(Debug, Clone, Copy)]
pub struct CorrelationOptions {
    pub rel_tol: f64,
    /// Largest cutoff tried before giving up, as a multiple of the base cutoff.
    pub max_cutoff_factor: f64,
}

impl Default for CorrelationOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            max_cutoff_factor: 4096.0,
        }
    }
}

/// `C(t)` at `t = k·dt`, `k = 0..len`, by adaptive Gauss–Kronrod quadrature.
///
/// Tolerances are relative to the scale `∫|integrand|` at t = 0, since C(t)
/// itself passes through zero for oscillatory baths.
pub fn correlation_function<T: Real>(spec: &BathSpec<T>, dt: T, len: usize) -> Result<CorrelationTable<T>> {
    correlation_function_with(spec, dt, len, &CorrelationOptions::default())
}

pub fn correlation_function_with<T: Real>(
    spec: &BathSpec<T>,
    dt: T,
    len: usize,
    opts: &CorrelationOptions,
) -> Result<CorrelationTable<T>> {
    spec.validate()?;
    let times: Vec<f64> = (0..len).map(|k| k as f64 * dt.as_f64()).collect();
    let values = correlation_at(&spec.to_f64(), &times, opts)?;
    Ok(CorrelationTable {
        dt,
        values: values.into_iter().map(from_c64).collect(),
    })
}

/// `C(t)` at arbitrary times (including negative ones).
pub fn correlation_at(spec: &BathSpec<f64>, times: &[f64], opts: &CorrelationOptions) -> Result<Vec<Complex<f64>>> {
    if spec.alpha() == 0.0 {
        return Ok(vec![czero(); times.len()]);
    }
    let pi = std::f64::consts::PI;
    let temp = spec.temperature;
    let envelope = |w: f64| spec.j_over_omega(w) * (omega_coth(w, temp) + w) / pi;

    let env_opts = QuadOptions {
        rel_tol: 1e-10,
        initial_panels: 16,
        ..Default::default()
    };
    let base = spec.base_cutoff();
    let total = integrate_semi_infinite(|w: f64| Complex::new(envelope(w), 0.0), 0.0, base / 20.0, &env_opts)
        .map_err(|f| Error::Quadrature {
            message: "envelope integral".into(),
            cutoff: f64::INFINITY,
            estimated_error: f.error,
        })?
        .value
        .re;
    let abs_tol = opts.rel_tol * total;

    // Envelope tail beyond each candidate cutoff.
    let mut cutoffs = Vec::new();
    let mut cut = base;
    while cut <= base * opts.max_cutoff_factor {
        let tail = integrate_semi_infinite(|w: f64| Complex::new(envelope(w), 0.0), cut, cut, &env_opts)
            .map(|r| r.value.re)
            .unwrap_or(f64::INFINITY);
        cutoffs.push((cut, tail));
        cut *= 2.0;
    }

    times
        .iter()
        .map(|&t| {
            // Past a monotone-decreasing cutoff the oscillatory tail is
            // bounded by 2 f(Ω)/|t|.
            let choice = cutoffs.iter().find(|&&(c, tail)| {
                let osc = if t != 0.0 { 2.0 * envelope(c) / t.abs() } else { f64::INFINITY };
                tail.min(osc) <= 0.1 * abs_tol
            });
            let &(omega_max, _) = choice.ok_or_else(|| Error::Quadrature {
                message: format!("spectral tail too heavy at t = {t}"),
                cutoff: base * opts.max_cutoff_factor,
                estimated_error: cutoffs.last().map_or(f64::NAN, |c| c.1),
            })?;
            let periods = (omega_max * t.abs() / (2.0 * pi)).ceil() as usize;
            let q = QuadOptions {
                rel_tol: 0.0,
                abs_tol: 0.5 * abs_tol,
                initial_panels: 8 + periods,
                max_panels: 200_000 + 4 * periods,
            };
            let integrand = |w: f64| {
                let jw = spec.j_over_omega(w);
                let (s, c) = (w * t).sin_cos();
                Complex::new(jw * omega_coth(w, temp) * c, -jw * w * s) / pi
            };
            integrate(integrand, 0.0, omega_max, &q)
                .map(|r| r.value)
                .map_err(|f| Error::Quadrature {
                    message: format!("C(t) at t = {t} after {} panels", f.panels),
                    cutoff: omega_max,
                    estimated_error: f.error,
                })
        })
        .collect()
}

/// `C(k·dt)` for `k = 0..len` from the spectrum sampled on the FFT grid
/// `ω_m = m·2π/(fft_len·dt)` up to the Nyquist frequency.
///
/// This is exactly the covariance of noise synthesized on the same grid by
/// [`crate::noise::sample_noise`], including its periodic wrap-around, which
/// makes it the consistent choice for kernels and the shifted noise.
pub fn spectral_correlation_table(env: &dyn Environment, dt: f64, len: usize, fft_len: usize) -> Result<CorrelationTable<f64>> {
    if fft_len < len {
        return Err(Error::Config(format!("FFT length {fft_len} shorter than the grid ({len})")));
    }
    let dw = 2.0 * std::f64::consts::PI / (fft_len as f64 * dt);
    let mut buf: Vec<Complex<f64>> = (0..fft_len)
        .map(|m| {
            let w = signed_frequency(m, fft_len) * dw;
            Complex::new(env.spectrum(w) * dw, 0.0)
        })
        .collect();
    // Σ_m S_m e^{-i ω_m t_k} is a forward DFT.
    FftPlanner::new().plan_fft_forward(fft_len).process(&mut buf);
    buf.truncate(len);
    Ok(CorrelationTable { dt, values: buf })
}

/// Index `m` of an FFT buffer mapped to its signed frequency bin.
pub fn signed_frequency(m: usize, n: usize) -> f64 {
    if m < n.div_ceil(2) {
        m as f64
    } else {
        m as f64 - n as f64
    }
}

/// `λ_bath = (1/π) ∫₀^∞ J(ω)/ω dω`.
pub fn reorganization_energy_bath<T: Real>(spec: &BathSpec<T>) -> Result<T> {
    spec.validate()?;
    let s = spec.to_f64();
    if s.alpha() == 0.0 {
        return Ok(T::zero());
    }
    let scale = match s.family {
        BathFamily::Ohmic { omega_c, .. } => omega_c,
        BathFamily::Structured { omega_0, beta, .. } => {
            if beta == 0.0 {
                return Err(Error::Divergent(
                    "structured bath with beta = 0 has a non-integrable pole at omega_0".into(),
                ));
            }
            omega_0
        }
    };
    let opts = QuadOptions {
        rel_tol: 1e-11,
        initial_panels: 64,
        ..Default::default()
    };
    let r = integrate_semi_infinite(|w: f64| Complex::new(s.j_over_omega(w), 0.0), 0.0, scale, &opts).map_err(
        |f| Error::Quadrature {
            message: "reorganization integral".into(),
            cutoff: f64::INFINITY,
            estimated_error: f.error,
        },
    )?;
    if !r.value.re.is_finite() {
        return Err(Error::Divergent("reorganization integral is not finite".into()));
    }
    Ok(T::of(r.value.re / std::f64::consts::PI))
}

/// Short-hand convention `λ = ½ α ω_c` for the Ohmic family.
///
/// The integral of the Ohmic form gives `2αω_c/π` instead; recipes choose
/// which of the two they use. `None` for structured baths.
pub fn reorganization_energy_caption<T: Real>(spec: &BathSpec<T>) -> Option<T> {
    match spec.family {
        BathFamily::Ohmic { alpha, omega_c } => Some(T::of(0.5) * alpha * omega_c),
        BathFamily::Structured { .. } => None,
    }
}

/// Holstein mode reorganization energy `2γ²/ω_v`.
pub fn reorganization_energy_mode<T: Real>(gamma: T, omega_v: T) -> Result<T> {
    if !(omega_v > T::zero()) {
        return Err(Error::invalid("omega_v", format!("must be > 0, got {omega_v}")));
    }
    Ok(T::of(2.0) * gamma * gamma / omega_v)
}

pub fn total_reorganization_energy<T: Real>(lambda_bath: T, gamma: T, omega_v: T) -> Result<T> {
    Ok(lambda_bath + reorganization_energy_mode(gamma, omega_v)?)
}

/// Cumulative integral `∫₀^{t_k} f` on a uniform grid: Simpson's rule for
/// even panel counts, Simpson plus a closing 3/8 rule for odd counts, and
/// the trapezoid for the single-panel case.
pub fn cumulative_simpson<T: Real>(f: &[Complex<T>], dt: T) -> Vec<Complex<T>> {
    let n = f.len();
    let mut out = vec![czero(); n];
    if n < 2 {
        return out;
    }
    let third = dt / T::of(3.0);
    let mut even = vec![czero(); n];
    let mut k = 2;
    while k < n {
        even[k] = even[k - 2] + (f[k - 2] + f[k - 1] * T::of(4.0) + f[k]) * third;
        out[k] = even[k];
        k += 2;
    }
    out[1] = (f[0] + f[1]) * (dt * T::of(0.5));
    let three_eighths = dt * T::of(3.0 / 8.0);
    let mut k = 3;
    while k < n {
        out[k] = even[k - 3] + (f[k - 3] + (f[k - 2] + f[k - 1]) * T::of(3.0) + f[k]) * three_eighths;
        k += 2;
    }
    out
}

/// Memory kernels for a stationary correlation function:
/// `g0(t) = ∫₀^t C(τ) dτ`, `g1(t) = ∫₀^t C(τ) τ dτ` and
/// `g2(t) = ∫₀^t C(t−s)(t−s) g0(s) ds`.
pub fn memory_kernels<T: Real>(corr: &CorrelationTable<T>) -> KernelTable<T> {
    let dt = corr.dt;
    let c = &corr.values;
    let g0 = cumulative_simpson(c, dt);
    let ct: Vec<Complex<T>> = c
        .iter()
        .enumerate()
        .map(|(k, &v)| v * (dt * T::of(k as f64)))
        .collect();
    let g1 = cumulative_simpson(&ct, dt);

    // h(0) = 0 and g0(0) = 0, so the trapezoid convolution has no end corrections.
    let h: Vec<Complex<f64>> = ct.iter().map(|&z| crate::scalar::to_c64(z)).collect();
    let x: Vec<Complex<f64>> = g0.iter().map(|&z| crate::scalar::to_c64(z)).collect();
    let mut g2: Vec<Complex<T>> = crate::fftconv::causal_convolution(&h, &x)
        .into_iter()
        .map(|z| from_c64(z * dt.as_f64()))
        .collect();
    if let Some(first) = g2.first_mut() {
        *first = czero();
    }
    KernelTable { dt, g0, g1, g2 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ohmic(alpha: f64, omega_c: f64, t: f64) -> BathSpec<f64> {
        BathSpec {
            family: BathFamily::Ohmic { alpha, omega_c },
            temperature: t,
            gamma_e: 0.05,
        }
    }

    fn structured(alpha: f64, omega_0: f64, beta: f64, t: f64) -> BathSpec<f64> {
        BathSpec {
            family: BathFamily::Structured { alpha, omega_0, beta },
            temperature: t,
            gamma_e: 0.01,
        }
    }

    #[test]
    fn spectral_density_examples() {
        let o = ohmic(0.05, 0.5, 0.025);
        assert_eq!(spectral_density(&o, 0.0).unwrap(), 0.0);
        let v = spectral_density(&o, 0.5).unwrap();
        assert!((v - 2.0 * 0.05 * 0.5 * (-1.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.018394).abs() < 1e-6);
        let s = structured(0.08, 0.1, 0.005, 0.025);
        assert!((spectral_density(&s, 0.1).unwrap() - 320.0).abs() < 1e-9);
        assert!(matches!(spectral_density(&o, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn reorganization_examples() {
        let o = ohmic(0.05, 0.5, 0.025);
        let lam = reorganization_energy_bath(&o).unwrap();
        assert!((lam - 2.0 * 0.05 * 0.5 / std::f64::consts::PI).abs() < 1e-10);
        assert!((lam - 0.015915).abs() < 1e-6);
        assert!((reorganization_energy_caption(&o).unwrap() - 0.0125).abs() < 1e-15);
        assert_eq!(reorganization_energy_bath(&ohmic(0.0, 0.5, 0.025)).unwrap(), 0.0);
        assert!((reorganization_energy_mode(0.1f64, 0.1487).unwrap() - 0.1345).abs() < 1e-4);
        assert!((reorganization_energy_mode(0.05f64, 0.1).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(reorganization_energy_mode(0.0, 0.1).unwrap(), 0.0);
        // Structured closed form α/(2β).
        let s = structured(0.08, 0.1, 0.005, 0.025);
        assert!((reorganization_energy_bath(&s).unwrap() - 8.0).abs() < 1e-7);
        assert!(matches!(
            reorganization_energy_bath(&structured(0.08, 0.1, 0.0, 0.025)),
            Err(Error::Divergent(_))
        ));
    }

    #[test]
    fn correlation_at_zero_is_real() {
        for spec in [ohmic(0.05, 0.5, 0.025), structured(0.08, 0.1, 0.005, 0.025)] {
            let c = correlation_function(&spec, 1.0, 1).unwrap();
            assert!(c.values[0].im.abs() <= 1e-8 * c.values[0].re.abs());
            assert!(c.values[0].re > 0.0);
        }
    }

    #[test]
    fn hermitian_symmetry_in_time() {
        let spec = structured(0.08, 0.1, 0.005, 0.025);
        let opts = CorrelationOptions::default();
        let plus = correlation_at(&spec, &[3.0, 17.5, 40.0], &opts).unwrap();
        let minus = correlation_at(&spec, &[-3.0, -17.5, -40.0], &opts).unwrap();
        let scale = correlation_at(&spec, &[0.0], &opts).unwrap()[0].re;
        for (p, m) in plus.iter().zip(&minus) {
            assert!((m - p.conj()).norm() <= 1e-7 * scale);
        }
    }

    #[test]
    fn ohmic_high_temperature_is_linear_in_t() {
        let t = 2.0;
        let opts = CorrelationOptions::default();
        let c1 = correlation_at(&ohmic(0.05, 0.5, 20.0), &[t], &opts).unwrap()[0].re;
        let c2 = correlation_at(&ohmic(0.05, 0.5, 40.0), &[t], &opts).unwrap()[0].re;
        assert!(((c2 / c1) - 2.0).abs() < 0.04, "ratio {}", c2 / c1);
    }

    #[test]
    fn structured_correlation_oscillates_at_omega_0() {
        let spec = structured(0.08, 0.1, 0.005, 0.025);
        let dt = 0.5;
        let c = correlation_function(&spec, dt, 300).unwrap();
        let re: Vec<f64> = c.values.iter().map(|z| z.re).collect();
        let maxima: Vec<usize> = (1..re.len() - 1)
            .filter(|&k| re[k] > re[k - 1] && re[k] >= re[k + 1])
            .collect();
        // t = 0 is the first maximum.
        let spacing = maxima[0] as f64 * dt;
        let period = 2.0 * std::f64::consts::PI / 0.1;
        assert!((spacing - period).abs() <= 0.05 * period, "spacing {spacing}");
    }

    #[test]
    fn spectral_table_matches_quadrature() {
        for spec in [ohmic(0.05, 0.5, 0.025), structured(0.08, 0.1, 0.005, 0.025)] {
            let dt = 0.5;
            let len = 200;
            let fft_len = (len + (spec.memory_time() / dt) as usize).next_power_of_two();
            let fast = spectral_correlation_table(&spec, dt, len, fft_len).unwrap();
            let quad = correlation_function(&spec, dt, len).unwrap();
            let scale = quad.values[0].re;
            let worst = fast
                .values
                .iter()
                .zip(&quad.values)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            assert!(worst < 1e-3 * scale, "worst {worst} scale {scale}");
        }
    }

    #[test]
    fn exponential_kernels_match_closed_form() {
        let kappa = 2.0;
        let dt = 1e-3;
        let corr = CorrelationTable::from_fn(dt, 3001, |t: f64| Complex::new((-kappa * t).exp(), 0.0));
        let k = memory_kernels(&corr);
        assert_eq!(k.g0[0], czero());
        assert_eq!(k.g1[0], czero());
        assert_eq!(k.g2[0], czero());
        for (i, (g0, g1)) in k.g0.iter().zip(&k.g1).enumerate() {
            let t = i as f64 * dt;
            let e = (-kappa * t).exp();
            assert!((g0.re - (1.0 - e) / kappa).abs() < 1e-8, "g0 at {t}");
            assert!((g1.re - (1.0 - (1.0 + kappa * t) * e) / (kappa * kappa)).abs() < 1e-7);
        }
    }

    #[test]
    fn g2_matches_direct_double_sum() {
        let dt = 0.01;
        let corr = CorrelationTable::from_fn(dt, 257, |t: f64| Complex::new((-t).exp() * (3.0 * t).cos(), -(0.5 * t).sin()));
        let k = memory_kernels(&corr);
        for &i in &[1usize, 10, 100, 256] {
            let mut s = czero();
            for j in 0..=i {
                let w = if j == 0 || j == i { 0.5 } else { 1.0 };
                let tau = (i - j) as f64 * dt;
                s += corr.values[i - j] * tau * k.g0[j] * w;
            }
            s *= dt;
            assert!((s - k.g2[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn kernels_are_translation_invariant() {
        // Same stationary C sampled on grids with different absolute origins.
        let dt = 0.01;
        let c = |t: f64| Complex::new((-0.7 * t).exp(), -0.3 * t * (-t).exp());
        let a = memory_kernels(&CorrelationTable::from_fn(dt, 400, c));
        let b = memory_kernels(&CorrelationTable::from_fn(dt, 400, |t: f64| c((t + 5.0) - 5.0)));
        for i in 0..400 {
            assert!((a.g0[i] - b.g0[i]).norm() < 1e-10);
            assert!((a.g1[i] - b.g1[i]).norm() < 1e-10);
        }
    }

    #[test]
    fn kernel_convergence_order() {
        let kappa = 3.0;
        let exact = |t: f64| (1.0 - (-kappa * t).exp()) / kappa;
        let err = |dt: f64| {
            let n = (2.0 / dt).round() as usize + 1;
            let k = memory_kernels(&CorrelationTable::from_fn(dt, n, |t: f64| {
                Complex::new((-kappa * t).exp(), 0.0)
            }));
            (0..n).map(|i| (k.g0[i].re - exact(i as f64 * dt)).abs()).fold(0.0, f64::max)
        };
        let e1 = err(0.02);
        let e2 = err(0.01);
        assert!((e1 / e2).log2() >= 2.0, "order {}", (e1 / e2).log2());
    }

    #[test]
    fn spectral_density_non_negative() {
        let specs = [ohmic(0.3, 0.2, 0.01), structured(1.0, 0.05, 0.2, 0.1)];
        for s in specs {
            for i in 0..5000 {
                let w = i as f64 * 1e-3;
                assert!(spectral_density(&s, w).unwrap() >= 0.0);
            }
        }
    }
}
