//! Colored complex Gaussian noise with covariance `E[z*(t) z(t')] = C(t − t')`,
//! real white noise for the Markovian equation, and the shifted noise
//! `z̃_t = z_t + ∫₀^t C(t − s) ⟨L†⟩_s ds`.
//!
//! Colored paths are synthesized on an FFT frequency grid:
//! `z(t_k) = Σ_m √(Ŝ(ω_m) Δω) ξ_m e^{+iω_m t_k}` with independent circular
//! complex Gaussians `ξ_m` (`E|ξ|² = 1`). The covariance of the result is the
//! periodized spectral sum of [`crate::bath::spectral_correlation_table`],
//! so the grid is padded by the bath memory to keep wrap-around negligible.

use std::sync::Arc;

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};

use crate::bath::{correlation_at, signed_frequency, CorrelationOptions, CorrelationTable, Environment};
use crate::error::{Error, Result};
use crate::fftconv::{ConvolutionKernel, OnlineConvolution};

type C64 = Complex<f64>;

/// Largest FFT the synthesizer will plan.
pub const MAX_SYNTHESIS_MODES: usize = 1 << 24;

/// SplitMix64 finalizer: decorrelated per-index seeds from one master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    pub dt: f64,
    pub z: Vec<C64>,
    pub seed: u64,
    /// Filled during propagation.
    pub shifted: Vec<C64>,
}

/// Reusable synthesis plan for one environment and grid.
pub struct NoiseSynthesizer {
    dt: f64,
    len: usize,
    amplitudes: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    silent: bool,
}

impl NoiseSynthesizer {
    /// Plans synthesis of `len` points spaced `dt`.
    pub fn new(env: &dyn Environment, dt: f64, len: usize) -> Result<Self> {
        let fft_len = synthesis_length(env, dt, len)?;
        let dw = 2.0 * std::f64::consts::PI / (fft_len as f64 * dt);
        let amplitudes: Vec<f64> = (0..fft_len)
            .map(|m| {
                let s = env.spectrum(signed_frequency(m, fft_len) * dw);
                if s > 0.0 {
                    (s * dw).sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let silent = amplitudes.iter().all(|&a| a == 0.0);
        let fft = FftPlanner::new().plan_fft_inverse(fft_len);
        Ok(Self {
            dt,
            len,
            amplitudes,
            fft,
            silent,
        })
    }

    pub fn fft_len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sample(&self, seed: u64) -> NoisePath {
        let mut z = vec![C64::default(); self.len];
        self.sample_into(seed, &mut Vec::new(), &mut z);
        NoisePath {
            dt: self.dt,
            z,
            seed,
            shifted: Vec::new(),
        }
    }

    /// Allocation-free variant of [`Self::sample`]; `scratch` is resized as needed.
    pub fn sample_into(&self, seed: u64, scratch: &mut Vec<C64>, out: &mut [C64]) {
        if self.silent {
            out.iter_mut().for_each(|z| *z = C64::default());
            return;
        }
        let mut rng = rng_from_seed(seed);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        scratch.clear();
        scratch.extend(self.amplitudes.iter().map(|&a| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            C64::new(re * h * a, im * h * a)
        }));
        self.fft.process(scratch);
        out.copy_from_slice(&scratch[..self.len]);
    }
}

/// FFT length used for a grid of `len` points: the next power of two that
/// covers the grid plus the environment memory, so periodic wrap-around of
/// the synthesized covariance stays outside the lags in use.
pub fn synthesis_length(env: &dyn Environment, dt: f64, len: usize) -> Result<usize> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt", format!("must be > 0, got {dt}")));
    }
    let memory = env.memory_time() / dt;
    if !memory.is_finite() {
        return Err(Error::Config("environment has unbounded memory; cannot synthesize noise".into()));
    }
    let required = len + len.max(memory.ceil() as usize);
    let fft_len = required.max(16).next_power_of_two();
    if fft_len > MAX_SYNTHESIS_MODES {
        return Err(Error::Config(format!(
            "noise grid of {len} points with memory {:.0} steps needs {fft_len} synthesis modes, above the limit of {MAX_SYNTHESIS_MODES}",
            memory
        )));
    }
    Ok(fft_len)
}

/// One colored-noise realization on `len` points spaced `dt`.
pub fn sample_noise(env: &dyn Environment, dt: f64, len: usize, seed: u64) -> Result<NoisePath> {
    Ok(NoiseSynthesizer::new(env, dt, len)?.sample(seed))
}

/// Real Gaussian white noise with variance `1/dt` per sample.
pub fn white_noise(dt: f64, len: usize, seed: u64) -> Result<NoisePath> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt", format!("must be > 0, got {dt}")));
    }
    let mut rng = rng_from_seed(seed);
    let sd = dt.recip().sqrt();
    let z = (0..len)
        .map(|_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            C64::new(x * sd, 0.0)
        })
        .collect();
    Ok(NoisePath {
        dt,
        z,
        seed,
        shifted: Vec::new(),
    })
}

/// `z̃(t_k)` for `k = expectations.len() − 1` by direct trapezoid summation.
///
/// `expectations[j]` holds `⟨L†⟩` at step `j`. Costs `O(k)`; see
/// [`ShiftAccumulator`] for the propagation path.
pub fn update_shifted_noise(path: &NoisePath, corr: &CorrelationTable<f64>, expectations: &[C64]) -> Result<C64> {
    let Some(k) = expectations.len().checked_sub(1) else {
        return Err(Error::invalid("expectations", "need at least one entry"));
    };
    if k >= path.z.len() || k >= corr.values.len() {
        return Err(Error::Shape(format!(
            "step {k} outside noise ({}) or correlation ({}) grid",
            path.z.len(),
            corr.values.len()
        )));
    }
    if k == 0 {
        return Ok(path.z[0]);
    }
    let c = &corr.values;
    let mut s: C64 = (1..k).map(|j| c[k - j] * expectations[j]).sum();
    s += 0.5 * (c[k] * expectations[0] + c[0] * expectations[k]);
    Ok(path.z[k] + s * corr.dt)
}

/// Shared, precomputed convolution kernel for the shift integral.
pub struct ShiftKernel {
    dt: f64,
    conv: ConvolutionKernel,
}

impl ShiftKernel {
    pub fn new(corr: &CorrelationTable<f64>) -> Self {
        Self {
            dt: corr.dt,
            conv: ConvolutionKernel::new(corr.values.clone()),
        }
    }

    pub fn len(&self) -> usize {
        self.conv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conv.is_empty()
    }

    pub fn accumulator(&self) -> ShiftAccumulator<'_> {
        ShiftAccumulator {
            kernel: self,
            online: OnlineConvolution::new(&self.conv),
        }
    }
}

/// Online trapezoid evaluation of `∫₀^{t_k} C(t_k − s) ⟨L†⟩_s ds`.
pub struct ShiftAccumulator<'a> {
    kernel: &'a ShiftKernel,
    online: OnlineConvolution<'a>,
}

impl ShiftAccumulator<'_> {
    /// Records `⟨L†⟩` at the next step and returns the shift at that step.
    pub fn push(&mut self, expectation: C64) -> C64 {
        let k = self.online.len();
        let full = self.online.push(expectation);
        if k == 0 {
            return C64::default();
        }
        let c = self.kernel.conv.taps();
        let x0 = self.online.inputs()[0];
        (full - 0.5 * (c[k] * x0 + c[0] * expectation)) * self.kernel.dt
    }
}

#[derive(Debug, Clone)]
pub struct CovarianceReport {
    pub dt: f64,
    pub paths: usize,
    pub target: Vec<C64>,
    pub empirical: Vec<C64>,
    /// Half-width `5 C(0)/√M` of the acceptance band.
    pub band: f64,
    pub fraction_within: f64,
    pub rms_error: f64,
    pub passed: bool,
}

/// Compares the empirical `Ê[z*(t) z(0)]` over `paths` realizations with
/// the quadrature correlation function.
pub fn covariance_selftest(
    env: &dyn Environment,
    target: &dyn Fn(&[f64]) -> Result<Vec<C64>>,
    dt: f64,
    len: usize,
    paths: usize,
    master_seed: u64,
) -> Result<CovarianceReport> {
    if paths == 0 {
        return Err(Error::invalid("paths", "must be >= 1"));
    }
    let synth = NoiseSynthesizer::new(env, dt, len)?;
    let mut acc = vec![C64::default(); len];
    let mut scratch = Vec::new();
    let mut z = vec![C64::default(); len];
    for p in 0..paths {
        synth.sample_into(derive_seed(master_seed, p as u64), &mut scratch, &mut z);
        let z0 = z[0];
        for (a, &zt) in acc.iter_mut().zip(&z) {
            *a += zt.conj() * z0;
        }
    }
    let empirical: Vec<C64> = acc.into_iter().map(|a| a / paths as f64).collect();
    let times: Vec<f64> = (0..len).map(|k| k as f64 * dt).collect();
    let target = target(&times)?;
    let band = 5.0 * target[0].re.abs() / (paths as f64).sqrt();
    let within = empirical
        .iter()
        .zip(&target)
        .filter(|(e, t)| (*e - *t).norm() <= band)
        .count();
    let rms_error = (empirical
        .iter()
        .zip(&target)
        .map(|(e, t)| (e - t).norm_sqr())
        .sum::<f64>()
        / len as f64)
        .sqrt();
    let fraction_within = within as f64 / len as f64;
    Ok(CovarianceReport {
        dt,
        paths,
        target,
        empirical,
        band,
        fraction_within,
        rms_error,
        passed: fraction_within >= 0.99,
    })
}

/// Self-test against the bath quadrature.
pub fn bath_covariance_selftest(
    spec: &crate::bath::BathSpec<f64>,
    dt: f64,
    len: usize,
    paths: usize,
    master_seed: u64,
) -> Result<CovarianceReport> {
    let opts = CorrelationOptions::default();
    covariance_selftest(spec, &|t| correlation_at(spec, t, &opts), dt, len, paths, master_seed)
}
