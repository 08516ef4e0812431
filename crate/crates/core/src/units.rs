//! Unit conventions.
//!
//! Internally ħ = k_B = 1: energies are in eV and times in eV⁻¹. Conversion to
//! picoseconds happens only when traces and rates are reported.

/// ħ in eV·ps.
pub const HBAR_EV_PS: f64 = 6.582e-4;

/// k_B in eV/K.
pub const KB_EV_PER_K: f64 = 8.617e-5;

/// Internal time (eV⁻¹) to picoseconds.
#[inline]
pub fn internal_to_ps(t: f64) -> f64 {
    t * HBAR_EV_PS
}

/// Picoseconds to internal time (eV⁻¹).
#[inline]
pub fn ps_to_internal(t_ps: f64) -> f64 {
    t_ps / HBAR_EV_PS
}

/// A rate in eV (ħ = 1) expressed in ps⁻¹.
#[inline]
pub fn rate_ev_to_ps_inv(k: f64) -> f64 {
    k / HBAR_EV_PS
}

#[inline]
pub fn kelvin_to_ev(t_kelvin: f64) -> f64 {
    t_kelvin * KB_EV_PER_K
}

#[inline]
pub fn ev_to_kelvin(t_ev: f64) -> f64 {
    t_ev / KB_EV_PER_K
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn room_temperature_in_ev() {
        assert!((kelvin_to_ev(290.0) - 0.024989).abs() < 1e-6);
    }

    #[test]
    fn one_ps_round_trips() {
        let t = ps_to_internal(1.0);
        assert!((t - 1_519.295_047).abs() < 1e-3);
        assert!((internal_to_ps(t) - 1.0).abs() < 1e-15);
    }
}
