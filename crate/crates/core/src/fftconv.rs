//! Causal convolutions `y_k = Σ_{j≤k} h_{k−j} x_j`, both in batch and
//! online (one `x` at a time) form.
//!
//! The online form is used for the shifted noise, where `x_k` is only known
//! once the trajectory reaches step `k`. Short lags are summed directly;
//! longer lags are split into bands `[s, 2s)` with `s = DIRECT_LAGS·2^i`
//! and each completed input block of length `s` is convolved with its band
//! by FFT, landing just before its first output is needed. Total cost is
//! `O(n log² n)` instead of `O(n²)`.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

type C64 = Complex<f64>;

pub const DIRECT_LAGS: usize = 32;

/// Full causal convolution truncated to `x.len()` outputs.
pub fn causal_convolution(h: &[C64], x: &[C64]) -> Vec<C64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let m = h.len().min(n);
    if n * m <= 1 << 16 {
        return (0..n)
            .map(|k| {
                let lo = k.saturating_sub(m - 1);
                (lo..=k).map(|j| h[k - j] * x[j]).sum()
            })
            .collect();
    }
    let size = (n + m).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut a = vec![C64::default(); size];
    let mut b = vec![C64::default(); size];
    a[..m].copy_from_slice(&h[..m]);
    b[..n].copy_from_slice(x);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v;
    }
    inv.process(&mut a);
    let scale = 1.0 / size as f64;
    a.truncate(n);
    a.iter_mut().for_each(|z| *z *= scale);
    a
}

struct Band {
    size: usize,
    spectrum: Vec<C64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

/// Precomputed kernel, shareable across trajectories.
pub struct ConvolutionKernel {
    h: Vec<C64>,
    bands: Vec<Band>,
}

impl ConvolutionKernel {
    pub fn new(h: Vec<C64>) -> Self {
        let n = h.len();
        let mut planner = FftPlanner::new();
        let mut bands = Vec::new();
        let mut s = DIRECT_LAGS;
        while s < n {
            let fwd = planner.plan_fft_forward(2 * s);
            let inv = planner.plan_fft_inverse(2 * s);
            let mut spectrum = vec![C64::default(); 2 * s];
            let hi = (2 * s).min(n);
            spectrum[..hi - s].copy_from_slice(&h[s..hi]);
            fwd.process(&mut spectrum);
            let scale = 1.0 / (2 * s) as f64;
            spectrum.iter_mut().for_each(|z| *z *= scale);
            bands.push(Band { size: s, spectrum, fwd, inv });
            s *= 2;
        }
        Self { h, bands }
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn taps(&self) -> &[C64] {
        &self.h
    }
}

pub struct OnlineConvolution<'a> {
    kernel: &'a ConvolutionKernel,
    x: Vec<C64>,
    pending: Vec<C64>,
    buf: Vec<C64>,
}

impl<'a> OnlineConvolution<'a> {
    pub fn new(kernel: &'a ConvolutionKernel) -> Self {
        let n = kernel.len();
        Self {
            kernel,
            x: Vec::with_capacity(n),
            pending: vec![C64::default(); n],
            buf: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn inputs(&self) -> &[C64] {
        &self.x
    }

    /// Appends `x_k` and returns `y_k`. Panics past the kernel length.
    pub fn push(&mut self, xk: C64) -> C64 {
        let k = self.x.len();
        let n = self.kernel.len();
        assert!(k < n, "online convolution is longer than its kernel");
        self.x.push(xk);
        let h = &self.kernel.h;
        let mut y = self.pending[k];
        let lags = (k + 1).min(DIRECT_LAGS);
        for (l, &hl) in h.iter().enumerate().take(lags) {
            y += hl * self.x[k - l];
        }
        for band in &self.kernel.bands {
            let s = band.size;
            if !(k + 1).is_multiple_of(s) {
                continue;
            }
            let start = k + 1 - s;
            if k + 1 >= n {
                continue;
            }
            self.buf.clear();
            self.buf.extend_from_slice(&self.x[start..=k]);
            self.buf.resize(2 * s, C64::default());
            band.fwd.process(&mut self.buf);
            for (u, v) in self.buf.iter_mut().zip(&band.spectrum) {
                *u *= v;
            }
            band.inv.process(&mut self.buf);
            let end = (k + 1 + 2 * s - 1).min(n);
            for (idx, out) in (k + 1..end).enumerate() {
                self.pending[out] += self.buf[idx];
            }
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(h: &[C64], x: &[C64]) -> Vec<C64> {
        (0..x.len())
            .map(|k| (0..=k).map(|j| h[k - j] * x[j]).sum())
            .collect()
    }

    fn signal(n: usize, a: f64) -> Vec<C64> {
        (0..n)
            .map(|k| C64::new((a * k as f64).sin(), (0.3 * a * k as f64).cos() * 0.5))
            .collect()
    }

    #[test]
    fn batch_matches_direct() {
        for &n in &[1usize, 7, 300, 1000] {
            let h = signal(n, 0.11);
            let x = signal(n, 0.07);
            let want = direct(&h, &x);
            let got = causal_convolution(&h, &x);
            for (a, b) in want.iter().zip(&got) {
                assert!((a - b).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn online_matches_direct() {
        for &n in &[5usize, 32, 33, 64, 100, 1000, 1025] {
            let h = signal(n, 0.013);
            let x = signal(n, 0.19);
            let want = direct(&h, &x);
            let kernel = ConvolutionKernel::new(h);
            let mut online = OnlineConvolution::new(&kernel);
            for (k, &xk) in x.iter().enumerate() {
                let y = online.push(xk);
                assert!((y - want[k]).norm() < 1e-9, "n {n} k {k}");
            }
        }
    }
}
