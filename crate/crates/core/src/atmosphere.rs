//! Closed-form turbulence statistics: refractive-index spectra, Cn2
//! profiles, structure functions, Fried parameter, isoplanatic angle,
//! long/short-exposure OTFs and the lucky-frame probability.
//!
//! Path coordinate: `z = 0` at the aperture, `z = L` at the object.

use std::f64::consts::PI;

use crate::error::{config, domain, Result};
use crate::optics::diffraction_otf_circular;
use crate::special::adaptive_simpson;
use crate::Flagged;

/// Kolmogorov spectrum `0.033 Cn2 |k|^(-11/3)`.
pub fn kolmogorov_psd(k_mag: f64, cn2: f64) -> Result<f64> {
    if !(k_mag > 0.0) {
        return domain(format!("Kolmogorov spectrum is singular at |k| = {k_mag}"));
    }
    Ok(0.033 * cn2 * k_mag.powf(-11.0 / 3.0))
}

/// von Karman spectrum `0.033 Cn2 exp(-k^2/km^2) / (k^2 + k0^2)^(11/6)` with
/// `k0 = 2 pi / L0` and `km = 5.92 / l0`.
pub fn von_karman_psd(k_mag: f64, cn2: f64, outer_scale: f64, inner_scale: f64) -> Result<f64> {
    if !(outer_scale > 0.0 && inner_scale > 0.0) {
        return config("von Karman scales must be positive");
    }
    let k0 = 2.0 * PI / outer_scale;
    let km = 5.92 / inner_scale;
    let k2 = k_mag * k_mag;
    Ok(0.033 * cn2 * (-k2 / (km * km)).exp() / (k2 + k0 * k0).powf(11.0 / 6.0))
}

/// Hufnagel–Valley profile at altitude `h` [m].
pub fn cn2_hufnagel_valley(h: f64, a: f64, v: f64) -> f64 {
    5.94e-53 * (v / 27.0).powi(2) * h.powi(10) * (-h / 1000.0).exp()
        + 2.7e-16 * (-h / 1500.0).exp()
        + a * (-h / 100.0).exp()
}

/// Piecewise power-law (SLC-Day) profile at altitude `h` [m].
pub fn cn2_slcd(h: f64) -> f64 {
    if h < 19.0 {
        0.0
    } else if h < 230.0 {
        4.008e-13 * h.powf(-1.054)
    } else if h < 850.0 {
        1.3e-15
    } else if h < 7000.0 {
        6.352e-7 * h.powf(-2.966)
    } else {
        6.209e-18 * h.powf(-0.6229)
    }
}

const SLCD_BREAKS: [f64; 4] = [19.0, 230.0, 850.0, 7000.0];

/// Refractive-index structure constant along the path.
#[derive(Debug, Clone, PartialEq)]
pub enum Cn2Profile {
    Constant(f64),
    /// Altitude profile evaluated at `h = z`, i.e. a vertical path upward
    /// from the aperture.
    HufnagelValley { a: f64, v: f64 },
    Slcd,
    /// Knots `(z_i, c_i)` with strictly increasing `z_i`; linear between
    /// knots and zero outside.
    Tabulated { z: Vec<f64>, c: Vec<f64> },
}

impl Cn2Profile {
    pub fn hufnagel_valley_default() -> Self {
        Cn2Profile::HufnagelValley { a: 1.7e-14, v: 21.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Cn2Profile::Constant(c) if *c < 0.0 || !c.is_finite() => config("Cn2 must be finite and >= 0"),
            Cn2Profile::Tabulated { z, c } => {
                if z.len() != c.len() || z.len() < 2 {
                    return config("tabulated profile needs >= 2 matching knots");
                }
                if z.windows(2).any(|w| !(w[1] > w[0])) {
                    return config("tabulated profile knots must increase");
                }
                if c.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                    return config("tabulated Cn2 values must be finite and >= 0");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, z: f64) -> f64 {
        match self {
            Cn2Profile::Constant(c) => *c,
            Cn2Profile::HufnagelValley { a, v } => cn2_hufnagel_valley(z.max(0.0), *a, *v),
            Cn2Profile::Slcd => cn2_slcd(z),
            Cn2Profile::Tabulated { z: zs, c } => {
                if z < zs[0] || z > zs[zs.len() - 1] {
                    return 0.0;
                }
                let i = zs.partition_point(|v| *v <= z).clamp(1, zs.len() - 1);
                let t = (z - zs[i - 1]) / (zs[i] - zs[i - 1]);
                c[i - 1] + t * (c[i] - c[i - 1])
            }
        }
    }

    /// `int_a^b w(z) Cn2(z) dz`. Analytic profiles use adaptive Simpson
    /// (relative tolerance 1e-8) split at the profile's breakpoints;
    /// tabulated profiles use the trapezoid rule on their knots.
    pub fn integrate<W: Fn(f64) -> f64>(&self, a: f64, b: f64, weight: W) -> f64 {
        if !(b > a) {
            return 0.0;
        }
        match self {
            Cn2Profile::Tabulated { z, c } => {
                let mut pts: Vec<(f64, f64)> = Vec::new();
                pts.push((a, self.eval(a)));
                for (zi, ci) in z.iter().zip(c) {
                    if *zi > a && *zi < b {
                        pts.push((*zi, *ci));
                    }
                }
                pts.push((b, self.eval(b)));
                pts.windows(2)
                    .map(|p| 0.5 * (p[1].0 - p[0].0) * (weight(p[0].0) * p[0].1 + weight(p[1].0) * p[1].1))
                    .sum()
            }
            _ => {
                let mut edges = vec![a];
                if matches!(self, Cn2Profile::Slcd) {
                    edges.extend(SLCD_BREAKS.iter().copied().filter(|&x| x > a && x < b));
                }
                edges.push(b);
                edges
                    .windows(2)
                    .map(|w| adaptive_simpson(|z| weight(z) * self.eval(z), w[0], w[1], 1e-8))
                    .sum()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaveKind {
    Plane,
    Spherical,
}

/// Optical and turbulence parameters shared by every derived statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct OpticalConfig {
    /// Wavelength [m].
    pub wavelength: f64,
    /// Aperture diameter [m].
    pub aperture: f64,
    /// Path length [m].
    pub path_length: f64,
    pub profile: Cn2Profile,
    pub wave: WaveKind,
    /// Simulation grid size (samples per side).
    pub n: usize,
    /// Aperture-plane sample spacing [m].
    pub dx: f64,
}

impl OpticalConfig {
    /// Spherical-wave configuration with a 128-sample grid holding the
    /// aperture in 64 samples.
    pub fn new(wavelength: f64, aperture: f64, path_length: f64, profile: Cn2Profile) -> Self {
        Self { wavelength, aperture, path_length, profile, wave: WaveKind::Spherical, n: 128, dx: aperture / 64.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("wavelength", self.wavelength),
            ("aperture", self.aperture),
            ("path length", self.path_length),
            ("dx", self.dx),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return config(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if self.n < 2 || !self.n.is_power_of_two() {
            return config(format!("grid size {} must be a power of two", self.n));
        }
        self.profile.validate()
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    /// Spherical-wave path weight `((L - z)/L)^(5/3)`.
    pub fn spherical_weight(&self, z: f64) -> f64 {
        ((self.path_length - z) / self.path_length).max(0.0).powf(5.0 / 3.0)
    }

    /// `int_0^L Cn2 dz` for plane waves, with the spherical weight otherwise.
    pub fn turbulence_integral(&self, wave: WaveKind) -> f64 {
        match wave {
            WaveKind::Plane => self.profile.integrate(0.0, self.path_length, |_| 1.0),
            WaveKind::Spherical => self.profile.integrate(0.0, self.path_length, |z| self.spherical_weight(z)),
        }
    }
}

/// Fried parameter for the configuration's wave kind.
pub fn fried_parameter(cfg: &OpticalConfig) -> f64 {
    fried_parameter_for(cfg, cfg.wave)
}

/// `r0 = 0.185 [4 pi^2 / (k^2 int w Cn2)]^(3/5)`; `+inf` without turbulence.
pub fn fried_parameter_for(cfg: &OpticalConfig, wave: WaveKind) -> f64 {
    let integral = cfg.turbulence_integral(wave);
    fried_from_integral(cfg.wavenumber(), integral)
}

pub(crate) fn fried_from_integral(k: f64, integral: f64) -> f64 {
    if !(integral > 0.0) {
        return f64::INFINITY;
    }
    0.185 * (4.0 * PI * PI / (k * k * integral)).powf(0.6)
}

/// `theta0 = 58.1e-3 lambda^(6/5) [int z^(5/3) Cn2 dz]^(-3/5)` with `z`
/// measured from the aperture; `+inf` without turbulence.
pub fn isoplanatic_angle(cfg: &OpticalConfig) -> f64 {
    let integral = cfg.profile.integrate(0.0, cfg.path_length, |z| z.powf(5.0 / 3.0));
    if !(integral > 0.0) {
        return f64::INFINITY;
    }
    58.1e-3 * cfg.wavelength.powf(1.2) * integral.powf(-0.6)
}

/// Kolmogorov phase structure function `6.88 (r/r0)^(5/3)` [rad^2].
pub fn phase_structure_function(r: f64, r0: f64) -> f64 {
    6.88 * (r / r0).powf(5.0 / 3.0)
}

/// Refractive-index structure function `Cn2 r^(2/3)`.
pub fn refractive_structure_function(r: f64, cn2: f64) -> f64 {
    cn2 * r.powf(2.0 / 3.0)
}

/// Phase structure function of one layer of thickness `l`:
/// `2.91 k^2 l Cn2 r^(5/3)`.
pub fn single_layer_structure_function(r: f64, k: f64, l: f64, cn2: f64) -> f64 {
    2.91 * k * k * l * cn2 * r.powf(5.0 / 3.0)
}

/// Long-exposure atmospheric OTF `exp(-3.44 (lambda z f / r0)^(5/3))`.
pub fn le_otf(f_mag: f64, wavelength: f64, z: f64, r0: f64) -> f64 {
    (-3.44 * (wavelength * z * f_mag / r0).powf(5.0 / 3.0)).exp()
}

/// Short-exposure (tilt-removed) OTF
/// `exp(-3.44 (lambda z f/r0)^(5/3) (1 - (lambda z f / D)^(1/3)))`.
/// Beyond `lambda z f = D` the bracket is clamped at 0 and the result flagged.
pub fn se_otf(f_mag: f64, wavelength: f64, z: f64, r0: f64, aperture: f64) -> Flagged<f64> {
    let rho = wavelength * z * f_mag;
    let mut bracket = 1.0 - (rho / aperture).powf(1.0 / 3.0);
    let clamped = bracket < 0.0;
    if clamped {
        bracket = 0.0;
    }
    let value = (-3.44 * (rho / r0).powf(5.0 / 3.0) * bracket).exp();
    Flagged { value, flagged: clamped }
}

/// Expected long-exposure OTF: diffraction OTF of the circular aperture
/// times the atmospheric long-exposure OTF.
pub fn mean_otf(f_mag: f64, wavelength: f64, z: f64, r0: f64, aperture: f64) -> Result<f64> {
    let f0 = aperture / (2.0 * wavelength * z);
    Ok(diffraction_otf_circular(f_mag, f0)? * le_otf(f_mag, wavelength, z, r0))
}

/// Probability of a lucky short exposure, `5.6 exp(-0.1557 (D/r0)^2)`.
/// Flagged below the validity limit `D/r0 = 3.5`.
pub fn lucky_probability(d_over_r0: f64) -> Flagged<f64> {
    Flagged { value: 5.6 * (-0.1557 * d_over_r0 * d_over_r0).exp(), flagged: d_over_r0 < 3.5 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> OpticalConfig {
        OpticalConfig::new(525e-9, 0.2034, 7000.0, Cn2Profile::Constant(1e-15))
    }

    #[test]
    fn psd_values() {
        assert!((kolmogorov_psd(1.0, 1e-16).unwrap() - 3.3e-18).abs() < 1e-30);
        let r = kolmogorov_psd(2.0, 1e-15).unwrap() / kolmogorov_psd(1.0, 1e-15).unwrap();
        assert!((r - 2f64.powf(-11.0 / 3.0)).abs() < 1e-14);
        assert!(kolmogorov_psd(0.0, 1e-15).is_err());
        assert!(von_karman_psd(0.0, 1e-15, 10.0, 0.01).unwrap().is_finite());
    }

    #[test]
    fn profile_values() {
        assert_eq!(cn2_slcd(10.0), 0.0);
        assert!((cn2_slcd(100.0) - 4.008e-13 * 100f64.powf(-1.054)).abs() < 1e-25);
        assert!((cn2_hufnagel_valley(0.0, 1.7e-14, 21.0) - (2.7e-16 + 1.7e-14)).abs() < 1e-28);
    }

    #[test]
    fn worked_example_fried_parameter() {
        let r0 = fried_parameter(&example());
        assert!((r0 - 0.047_850_370_833_414_75).abs() < 1e-9, "{r0}");
    }

    #[test]
    fn zero_turbulence_is_infinite_r0() {
        let cfg = OpticalConfig::new(525e-9, 0.2, 1000.0, Cn2Profile::Constant(0.0));
        assert!(fried_parameter(&cfg).is_infinite());
        assert!(isoplanatic_angle(&cfg).is_infinite());
    }

    #[test]
    fn otf_values() {
        let v = le_otf(1.0, 1.0, 1.0, 1.0);
        assert!((v - (-3.44f64).exp()).abs() < 1e-15);
        assert_eq!(le_otf(0.0, 1.0, 1.0, 0.1), 1.0);
        assert_eq!(se_otf(0.0, 1.0, 1.0, 0.1, 1.0).value, 1.0);
        let s = se_otf(2.0, 1.0, 1.0, 0.5, 1.0);
        assert!(s.flagged);
    }

    #[test]
    fn lucky_values() {
        assert!((lucky_probability(3.5).value - 0.831_471_378_674_652_8).abs() < 1e-12);
        assert!((lucky_probability(4.0).value - 0.463_738_992_004_889_9).abs() < 1e-12);
        assert!(lucky_probability(3.0).flagged);
        assert!(!lucky_probability(3.5).flagged);
    }
}
