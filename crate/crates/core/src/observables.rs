//! Populations, coherences, stationary values and late-time rate fits.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

type C64 = Complex<f64>;

/// Electronic observables on a time grid (times in ps).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PopulationTrace {
    pub t: Vec<f64>,
    pub p_d: Vec<f64>,
    pub p_a: Vec<f64>,
    pub coh_re: Vec<f64>,
    pub coh_im: Vec<f64>,
}

impl PopulationTrace {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Trace with only the donor population set (`P_A = 1 − P_D`).
    pub fn from_donor(t: Vec<f64>, p_d: Vec<f64>) -> Self {
        let n = t.len();
        let p_a = p_d.iter().map(|p| 1.0 - p).collect();
        Self {
            t,
            p_d,
            p_a,
            coh_re: vec![0.0; n],
            coh_im: vec![0.0; n],
        }
    }
}

/// `P_D = ρ_DD`, `P_A = ρ_AA`, coherence `ρ_DA` for each 2×2 matrix.
pub fn populations(t: &[f64], rho: &[[[C64; 2]; 2]]) -> Result<PopulationTrace> {
    if t.len() != rho.len() {
        return Err(Error::Shape(format!("{} times for {} density matrices", t.len(), rho.len())));
    }
    let mut out = PopulationTrace {
        t: t.to_vec(),
        ..Default::default()
    };
    for (k, r) in rho.iter().enumerate() {
        let tr = r[0][0] + r[1][1];
        if (tr.re - 1.0).abs() > 1e-6 || tr.im.abs() > 1e-6 {
            return Err(Error::Data(format!("density matrix {k} has trace {tr}")));
        }
        out.p_d.push(r[0][0].re);
        out.p_a.push(r[1][1].re);
        out.coh_re.push(r[0][1].re);
        out.coh_im.push(r[0][1].im);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitFlag {
    /// r² below 0.9.
    LowR2,
    /// Positive slope: the signal grows instead of relaxing.
    Growth,
    /// `P_D − P_inf` changed sign; the window was cut at the first crossing.
    SignCrossing,
    /// No decile window reached r² ≥ 0.98.
    FallbackWindow,
    /// Significant linear trend in the tail used for `P_inf`.
    NonStationary,
    /// Tail residuals are large and smooth, i.e. still oscillating.
    Oscillating,
    /// Fit could not be performed at all.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stationary {
    pub p_inf: f64,
    pub std: f64,
    pub slope: f64,
    pub slope_se: f64,
    pub flags: Vec<FitFlag>,
}

/// Mean of `P_D` over the last `tail_fraction` of the trace.
pub fn estimate_stationary(trace: &PopulationTrace, tail_fraction: f64) -> Result<Stationary> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::invalid("tail_fraction", format!("must be in (0, 1], got {tail_fraction}")));
    }
    let n = trace.len();
    let m = ((n as f64) * tail_fraction).round() as usize;
    if m < 50 {
        return Err(Error::Data(format!("stationary tail has {m} points, need at least 50")));
    }
    let t = &trace.t[n - m..];
    let y = &trace.p_d[n - m..];
    // Offset by the first sample so constant traces come back exactly.
    let mean = y[0] + y.iter().map(|v| v - y[0]).sum::<f64>() / m as f64;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    let line = ols(t, y);
    let mut flags = Vec::new();
    if line.slope.abs() > 3.0 * line.slope_se {
        flags.push(FitFlag::NonStationary);
    }
    // Residual structure: smooth (high lag-1 autocorrelation) and sizable.
    let resid: Vec<f64> = t
        .iter()
        .zip(y)
        .map(|(&ti, &yi)| yi - (line.intercept + line.slope * ti))
        .collect();
    let rvar = resid.iter().map(|r| r * r).sum::<f64>() / m as f64;
    if rvar > 0.0 {
        let lag1 = resid.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / ((m - 1) as f64 * rvar);
        if lag1 > 0.5 && rvar.sqrt() > 1e-3 && !flags.contains(&FitFlag::NonStationary) {
            flags.push(FitFlag::Oscillating);
            flags.push(FitFlag::NonStationary);
        }
    }
    Ok(Stationary {
        p_inf: mean,
        std: var.sqrt(),
        slope: line.slope,
        slope_se: line.slope_se,
        flags,
    })
}

#[derive(Debug, Clone, Copy)]
struct Line {
    intercept: f64,
    slope: f64,
    slope_se: f64,
    r2: f64,
}

fn ols(x: &[f64], y: &[f64]) -> Line {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let sse = (syy - slope * sxy).max(0.0);
    let slope_se = if n > 2.0 && sxx > 0.0 {
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        f64::INFINITY
    };
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    Line {
        intercept,
        slope,
        slope_se,
        r2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    #[serde(rename = "k_rel_ps_inv")]
    pub k_rel: f64,
    #[serde(rename = "P_inf")]
    pub p_inf: f64,
    #[serde(rename = "t0_ps")]
    pub t0: f64,
    pub t_end_ps: f64,
    #[serde(rename = "r2")]
    pub r_squared: f64,
    pub n_points: usize,
    pub flags: Vec<FitFlag>,
}

impl RateFit {
    pub fn is_flagged(&self) -> bool {
        !self.flags.is_empty()
    }
}

pub const MIN_FIT_POINTS: usize = 20;

/// OLS fit of `ln|P_D − P_inf|` against `t` for `t ≥ t0`; `k_rel = −slope`.
pub fn extract_rate(trace: &PopulationTrace, p_inf: f64, t0: f64) -> Result<RateFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut flags = Vec::new();
    let mut sign = 0.0;
    for (&t, &p) in trace.t.iter().zip(&trace.p_d) {
        if t < t0 {
            continue;
        }
        let d = p - p_inf;
        if d.abs() < 1e-6 {
            continue;
        }
        if sign == 0.0 {
            sign = d.signum();
        } else if d.signum() != sign {
            flags.push(FitFlag::SignCrossing);
            break;
        }
        xs.push(t);
        ys.push(d.abs().ln());
    }
    if xs.len() < MIN_FIT_POINTS {
        return Err(Error::Fit(format!(
            "{} usable points after t0 = {t0} ps, need {MIN_FIT_POINTS}",
            xs.len()
        )));
    }
    let line = ols(&xs, &ys);
    let mut k = -line.slope;
    if k < 0.0 {
        flags.push(FitFlag::Growth);
        k = 0.0;
    }
    if line.r2 < 0.9 {
        flags.push(FitFlag::LowR2);
    }
    Ok(RateFit {
        k_rel: k,
        p_inf,
        t0,
        t_end_ps: *xs.last().unwrap_or(&t0),
        r_squared: line.r2,
        n_points: xs.len(),
        flags,
    })
}

/// Earliest decile start whose tail fit reaches r² ≥ 0.98, else the best.
pub fn choose_fit_window(trace: &PopulationTrace, p_inf: f64) -> (f64, Vec<FitFlag>) {
    let n = trace.len();
    if n == 0 {
        return (0.0, vec![FitFlag::FallbackWindow]);
    }
    let mut best: Option<(f64, f64)> = None;
    for d in 1..10 {
        let t0 = trace.t[(n * d / 10).min(n - 1)];
        if let Ok(fit) = extract_rate(trace, p_inf, t0) {
            if fit.r_squared >= 0.98 && !fit.flags.contains(&FitFlag::SignCrossing) {
                return (t0, Vec::new());
            }
            if best.is_none_or(|(_, r2)| fit.r_squared > r2) {
                best = Some((t0, fit.r_squared));
            }
        }
    }
    let t0 = best.map_or(trace.t[n / 10], |b| b.0);
    (t0, vec![FitFlag::FallbackWindow])
}

/// Window choice followed by the fit, merging the flags of both.
pub fn fit_relaxation(trace: &PopulationTrace, p_inf: f64) -> Result<RateFit> {
    let (t0, window_flags) = choose_fit_window(trace, p_inf);
    let mut fit = extract_rate(trace, p_inf, t0)?;
    for f in window_flags {
        if !fit.flags.contains(&f) {
            fit.flags.push(f);
        }
    }
    Ok(fit)
}

/// `k_inst(t) = −d/dt ln|P_D − P_inf|` by central differences. Noisy on
/// stochastic data; diagnostic only. Endpoints and points too close to
/// `P_inf` are `NaN`.
pub fn instantaneous_rate(trace: &PopulationTrace, p_inf: f64) -> Vec<f64> {
    let n = trace.len();
    let ln: Vec<f64> = trace
        .p_d
        .iter()
        .map(|p| {
            let d = (p - p_inf).abs();
            if d < 1e-6 {
                f64::NAN
            } else {
                d.ln()
            }
        })
        .collect();
    (0..n)
        .map(|k| {
            if k == 0 || k + 1 == n {
                f64::NAN
            } else {
                -(ln[k + 1] - ln[k - 1]) / (trace.t[k + 1] - trace.t[k - 1])
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn grid(n: usize, t_end: f64) -> Vec<f64> {
        (0..n).map(|k| k as f64 * t_end / (n - 1) as f64).collect()
    }

    #[test]
    fn populations_of_simple_states() {
        let one = C64::new(1.0, 0.0);
        let zero = C64::default();
        let half = C64::new(0.5, 0.0);
        let tr = populations(&[0.0, 1.0], &[[[one, zero], [zero, zero]], [[half, zero], [zero, half]]]).unwrap();
        assert_eq!(tr.p_d, vec![1.0, 0.5]);
        assert_eq!(tr.p_a, vec![0.0, 0.5]);
        assert_eq!(tr.coh_re, vec![0.0, 0.0]);
        let bad = populations(&[0.0], &[[[one, zero], [zero, half]]]);
        assert!(matches!(bad, Err(Error::Data(_))));
    }

    #[test]
    fn stationary_of_constant_and_relaxing_traces() {
        let t = grid(1000, 10.0);
        let c = PopulationTrace::from_donor(t.clone(), vec![0.7; 1000]);
        let s = estimate_stationary(&c, 0.2).unwrap();
        assert_eq!(s.p_inf, 0.7);
        assert!(s.flags.is_empty());

        let p: Vec<f64> = t.iter().map(|&x| 0.5 + 0.5 * (-x).exp()).collect();
        let s = estimate_stationary(&PopulationTrace::from_donor(t.clone(), p), 0.2).unwrap();
        assert!((s.p_inf - 0.5).abs() < 1e-3);

        let short = PopulationTrace::from_donor(grid(100, 1.0), vec![0.5; 100]);
        assert!(estimate_stationary(&short, 0.2).is_err());
    }

    #[test]
    fn pure_oscillation_is_flagged() {
        let t = grid(2000, 10.0);
        let p: Vec<f64> = t.iter().map(|&x| 0.5 + 0.3 * (2.0 * x).sin()).collect();
        let s = estimate_stationary(&PopulationTrace::from_donor(t, p), 0.2).unwrap();
        assert!(s.flags.contains(&FitFlag::NonStationary), "{:?}", s.flags);
    }

    #[test]
    fn exact_exponential_recovered() {
        let t = grid(500, 20.0);
        let p: Vec<f64> = t.iter().map(|&x| 0.3 + 0.6 * (-0.5 * x).exp()).collect();
        let tr = PopulationTrace::from_donor(t, p);
        let fit = extract_rate(&tr, 0.3, 2.0).unwrap();
        assert!((fit.k_rel - 0.5).abs() < 1e-10);
        assert!(fit.flags.is_empty());
        let (t0, flags) = choose_fit_window(&tr, 0.3);
        assert_eq!(t0, tr.t[50]);
        assert!(flags.is_empty());
    }

    #[test]
    fn two_state_kinetics() {
        let (kf, kb) = (0.3, 0.1);
        let t = grid(4001, 80.0);
        let p: Vec<f64> = t
            .iter()
            .map(|&x| kb / (kf + kb) + kf / (kf + kb) * (-(kf + kb) * x).exp())
            .collect();
        let tr = PopulationTrace::from_donor(t, p);
        let s = estimate_stationary(&tr, 0.2).unwrap();
        assert!((s.p_inf - 0.25).abs() < 1e-6);
        let fit = extract_rate(&tr, s.p_inf, 1.0).unwrap();
        assert!((fit.k_rel - 0.4).abs() < 1e-6);
    }

    #[test]
    fn noisy_fit_is_robust() {
        let t = grid(200, 4.0);
        let normal = Normal::new(0.0, 0.005).unwrap();
        let mut ks = Vec::new();
        for r in 0..100u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(r);
            let p: Vec<f64> = t
                .iter()
                .map(|&x| 0.2 + 0.8 * (-0.5 * x).exp() + normal.sample(&mut rng))
                .collect();
            let fit = extract_rate(&PopulationTrace::from_donor(t.clone(), p), 0.2, 0.0).unwrap();
            ks.push(fit.k_rel);
        }
        for k in &ks {
            assert!((k - 0.5).abs() < 0.02, "k = {k}");
        }
    }

    #[test]
    fn growth_and_too_few_points() {
        let t = grid(100, 5.0);
        let p: Vec<f64> = t.iter().map(|&x| 0.5 - 0.01 * (0.3 * x).exp()).collect();
        let fit = extract_rate(&PopulationTrace::from_donor(t.clone(), p), 0.5, 0.0).unwrap();
        assert!(fit.flags.contains(&FitFlag::Growth));
        assert_eq!(fit.k_rel, 0.0);
        let p: Vec<f64> = t.iter().map(|&x| 0.5 + (-x).exp()).collect();
        assert!(matches!(
            extract_rate(&PopulationTrace::from_donor(t, p), 0.5, 4.9),
            Err(Error::Fit(_))
        ));
    }

    #[test]
    fn window_skips_initial_oscillation() {
        // Oscillation crossing P_inf that dies out by t = 4, clean
        // exponential afterwards.
        let t = grid(1000, 20.0);
        let transition = 4.0;
        let period = 1.0;
        let p: Vec<f64> = t
            .iter()
            .map(|&x| {
                let base = 0.4 + 0.5 * (-0.3 * x).exp();
                if x < transition {
                    base + 0.6 * (1.0 - x / transition) * (2.0 * std::f64::consts::PI * x / period).cos()
                } else {
                    base
                }
            })
            .collect();
        let (t0, flags) = choose_fit_window(&PopulationTrace::from_donor(t, p), 0.4);
        assert!(flags.is_empty());
        assert!(t0 >= transition - period, "t0 = {t0}");
    }

    #[test]
    fn never_exponential_falls_back() {
        let t = grid(500, 10.0);
        let p: Vec<f64> = t.iter().map(|&x| 0.7 + 0.2 * (3.0 * x).cos().abs()).collect();
        let (_, flags) = choose_fit_window(&PopulationTrace::from_donor(t, p), 0.5);
        assert_eq!(flags, vec![FitFlag::FallbackWindow]);
    }

    #[test]
    fn origin_shift_invariance() {
        let t = grid(300, 10.0);
        let p: Vec<f64> = t.iter().map(|&x| 0.1 + 0.7 * (-0.8 * x).exp()).collect();
        let shifted: Vec<f64> = t.iter().map(|x| x + 123.0).collect();
        let a = extract_rate(&PopulationTrace::from_donor(t, p.clone()), 0.1, 1.0).unwrap();
        let b = extract_rate(&PopulationTrace::from_donor(shifted, p), 0.1, 124.0).unwrap();
        assert!((a.k_rel - b.k_rel).abs() < 1e-12);
    }

    #[test]
    fn instantaneous_rate_of_exponential() {
        let t = grid(400, 4.0);
        let p: Vec<f64> = t.iter().map(|&x| 0.5 + 0.5 * (-2.0 * x).exp()).collect();
        let k = instantaneous_rate(&PopulationTrace::from_donor(t, p), 0.5);
        assert!(k[0].is_nan());
        assert!((k[200] - 2.0).abs() < 1e-3);
    }
}
