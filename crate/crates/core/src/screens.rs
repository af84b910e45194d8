//! Random phase screens: FFT synthesis from the Kolmogorov or von Karman
//! phase spectrum, subharmonic low-frequency augmentation, the Voelz
//! sampling rule and an empirical structure-function estimator.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{config, Result};
use crate::fft::{fft2_inplace, freq_index, ifft2_inplace};
use crate::rng::{normal, stream};

/// Sample spacing `lambda L / (s D)` for split-step grids, `s >= 4`.
pub fn voelz_spacing(wavelength: f64, path_length: f64, aperture: f64, s: f64) -> Result<f64> {
    if s < 4.0 {
        return config(format!("Voelz factor must be >= 4, got {s}"));
    }
    Ok(wavelength * path_length / (s * aperture))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpectrumKind {
    Kolmogorov,
    VonKarman { outer_scale: f64, inner_scale: f64 },
}

/// Phase spectrum of a thin layer with Fried parameter `r0`.
///
/// The density (per unit angular wavenumber squared) is
/// `2 pi k^2 dz 0.033 Cn2 |kappa|^(-11/3)` with the layer's `k^2 Cn2 dz`
/// expressed through `r0`, i.e. `c r0^(-5/3) |kappa|^(-11/3)` with
/// `c = 2 pi 0.033 (4 pi^2) 0.185^(5/3)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenSpectrum {
    pub r0: f64,
    pub kind: SpectrumKind,
}

impl ScreenSpectrum {
    pub fn kolmogorov(r0: f64) -> Self {
        Self { r0, kind: SpectrumKind::Kolmogorov }
    }

    pub fn coefficient() -> f64 {
        2.0 * PI * 0.033 * 4.0 * PI * PI * 0.185f64.powf(5.0 / 3.0)
    }

    /// Phase PSD at angular wavenumber `kappa` [rad^2 m^2]; zero at the origin.
    pub fn density(&self, kappa: f64) -> f64 {
        if kappa == 0.0 || self.r0.is_infinite() {
            return 0.0;
        }
        let c = Self::coefficient() * self.r0.powf(-5.0 / 3.0);
        match self.kind {
            SpectrumKind::Kolmogorov => c * kappa.powf(-11.0 / 3.0),
            SpectrumKind::VonKarman { outer_scale, inner_scale } => {
                let k0 = 2.0 * PI / outer_scale;
                let km = 5.92 / inner_scale;
                c * (-kappa * kappa / (km * km)).exp() / (kappa * kappa + k0 * k0).powf(11.0 / 6.0)
            }
        }
    }
}

/// A real phase screen [rad] on an N x N grid.
#[derive(Debug, Clone)]
pub struct PhaseScreen {
    pub phase: Array2<f64>,
    pub dx: f64,
    pub r0_effective: f64,
    pub spectrum: ScreenSpectrum,
    pub seed: u64,
}

/// Draw a screen by filtering real white noise with `sqrt(PSD)` in the
/// Fourier domain. The filtered spectrum is Hermitian, so the inverse
/// transform is real; the zero-frequency bin is zero.
pub fn sample_screen_fft(n: usize, dx: f64, spectrum: ScreenSpectrum, seed: u64) -> Result<PhaseScreen> {
    if n < 2 || !n.is_power_of_two() {
        return config(format!("screen size {n} must be a power of two"));
    }
    if !(dx > 0.0) {
        return config("screen spacing must be positive");
    }
    let mut rng = stream(seed, "screen", 0);
    let mut buf = Array2::from_shape_fn((n, n), |_| Complex64::new(normal(&mut rng), 0.0));
    fft2_inplace(&mut buf);
    let dk = 2.0 * PI / (n as f64 * dx);
    for ((r, c), v) in buf.indexed_iter_mut() {
        let ky = freq_index(r, n) * dk;
        let kx = freq_index(c, n) * dk;
        *v *= spectrum.density((kx * kx + ky * ky).sqrt()).sqrt();
    }
    ifft2_inplace(&mut buf);
    // phi = sum_k c_k e^{i k x} with E|c_k|^2 = PSD dk^2; the inverse FFT's
    // 1/N^2 and the white-noise spectrum's N^2 variance leave a factor N dk.
    let scale = n as f64 * dk;
    let phase = buf.mapv(|v| v.re * scale);
    Ok(PhaseScreen { phase, dx, r0_effective: spectrum.r0, spectrum, seed })
}

/// Add `levels` rings of subharmonics: at level p a 3 x 3 lattice of
/// frequencies spaced `dk / 3^p` (center excluded) with complex Gaussian
/// amplitudes; the real part is added and its mean removed.
///
/// Each amplitude's variance is the PSD integrated over that lattice
/// point's cell rather than the center value times the cell area. Near the
/// origin the spectrum is steep enough that the center value loses about a
/// quarter of the structure function at a quarter of the screen width.
pub fn add_subharmonics(screen: &PhaseScreen, levels: usize) -> PhaseScreen {
    let mut out = screen.clone();
    if levels == 0 {
        return out;
    }
    let n = screen.phase.nrows();
    let low = subharmonic_field(n, n, screen.dx, &screen.spectrum, levels, screen.seed, 0.0, 0.0);
    out.phase += &low;
    out
}

/// Low-frequency subharmonic component on an `rows x cols` grid with
/// spacing `dx`, whose sample `(0, 0)` sits at physical offset
/// `(y0, x0)` from the reference grid's center sample. The lattice spacing
/// is based on the `rows x dx` extent.
pub(crate) fn subharmonic_field(
    rows: usize,
    cols: usize,
    dx: f64,
    spectrum: &ScreenSpectrum,
    levels: usize,
    seed: u64,
    y0: f64,
    x0: f64,
) -> Array2<f64> {
    let extent = rows.max(cols) as f64 * dx;
    let mut terms: Vec<(f64, f64, Complex64)> = Vec::new();
    for p in 1..=levels {
        let mut rng = stream(seed, "subharmonics", p as u64);
        let dk = 2.0 * PI / (3f64.powi(p as i32) * extent);
        for a in -1i32..=1 {
            for b in -1i32..=1 {
                let (ky, kx) = (a as f64 * dk, b as f64 * dk);
                let amp = cell_mean_density(spectrum, kx, ky, dk).sqrt() * dk;
                let c = Complex64::new(normal(&mut rng), normal(&mut rng)) * amp;
                if amp > 0.0 {
                    terms.push((ky, kx, c));
                }
            }
        }
    }
    let hr = (rows / 2) as f64;
    let hc = (cols / 2) as f64;
    // exp(i(kx x + ky y)) factors into a row phase times a column phase
    let mut field = Array2::<f64>::zeros((rows, cols));
    for (ky, kx, a) in &terms {
        let ex: Vec<Complex64> = (0..cols).map(|c| Complex64::from_polar(1.0, kx * (x0 + (c as f64 - hc) * dx))).collect();
        for (r, mut row) in field.rows_mut().into_iter().enumerate() {
            let ay = a * Complex64::from_polar(1.0, ky * (y0 + (r as f64 - hr) * dx));
            for (v, e) in row.iter_mut().zip(&ex) {
                *v += ay.re * e.re - ay.im * e.im;
            }
        }
    }
    let mean = field.mean().unwrap_or(0.0);
    field.mapv_inplace(|v| v - mean);
    field
}

/// Mean of the PSD over the square cell of side `d` centered at `(kx, ky)`,
/// by a 16 x 16 midpoint rule.
fn cell_mean_density(spectrum: &ScreenSpectrum, kx: f64, ky: f64, d: f64) -> f64 {
    if kx == 0.0 && ky == 0.0 {
        return 0.0;
    }
    const M: usize = 16;
    let mut sum = 0.0;
    for i in 0..M {
        for j in 0..M {
            let u = kx + d * ((j as f64 + 0.5) / M as f64 - 0.5);
            let v = ky + d * ((i as f64 + 0.5) / M as f64 - 0.5);
            sum += spectrum.density((u * u + v * v).sqrt());
        }
    }
    sum / (M * M) as f64
}

/// Screen with subharmonics in one call.
pub fn sample_screen(n: usize, dx: f64, spectrum: ScreenSpectrum, subharmonic_levels: usize, seed: u64) -> Result<PhaseScreen> {
    Ok(add_subharmonics(&sample_screen_fft(n, dx, spectrum, seed)?, subharmonic_levels))
}

/// Radially binned structure function estimate.
#[derive(Debug, Clone)]
pub struct StructureCurve {
    /// Bin separation [m]: bin `b` collects lags with `round(|r|/dx) = b`
    /// and reports the pair-weighted mean separation of those lags.
    pub r: Vec<f64>,
    pub d: Vec<f64>,
    /// Number of sample pairs per bin.
    pub pairs: Vec<f64>,
}

/// Accumulates `E[(phi(x) - phi(x + r))^2]` over all pixel pairs of a stack
/// of equally sized screens, using zero-padded FFT correlations.
pub struct StructureAccumulator {
    n: usize,
    pad: usize,
    max_lag: usize,
    dx: f64,
    mask_spec: Array2<Complex64>,
    acc: Array2<Complex64>,
    screens: usize,
}

impl StructureAccumulator {
    pub fn new(n: usize, dx: f64, max_lag: usize) -> Self {
        let max_lag = max_lag.min(n - 1);
        let pad = (n + max_lag + 1).next_multiple_of(8);
        let mut mask = Array2::<Complex64>::zeros((pad, pad));
        for r in 0..n {
            for c in 0..n {
                mask[[r, c]] = Complex64::new(1.0, 0.0);
            }
        }
        fft2_inplace(&mut mask);
        Self { n, pad, max_lag, dx, mask_spec: mask, acc: Array2::zeros((pad, pad)), screens: 0 }
    }

    pub fn add(&mut self, phase: &Array2<f64>) {
        let (n, p) = (self.n, self.pad);
        assert_eq!(phase.dim(), (n, n), "screen size mismatch");
        // pack phi and phi^2 into one complex transform
        let mut z = Array2::<Complex64>::zeros((p, p));
        for ((r, c), v) in phase.indexed_iter() {
            z[[r, c]] = Complex64::new(*v, v * v);
        }
        fft2_inplace(&mut z);
        for r in 0..p {
            for c in 0..p {
                let zk = z[[r, c]];
                let zm = z[[(p - r) % p, (p - c) % p]].conj();
                let a = 0.5 * (zk + zm);
                let b = (zk - zm) * Complex64::new(0.0, -0.5);
                let m = self.mask_spec[[r, c]];
                // corr(u, v)(r) = sum_x u(x) v(x + r)  <->  conj(U) V
                self.acc[[r, c]] += b.conj() * m + m.conj() * b - 2.0 * a.norm_sqr();
            }
        }
        self.screens += 1;
    }

    pub fn screens(&self) -> usize {
        self.screens
    }

    pub fn finish(&self) -> StructureCurve {
        let p = self.pad;
        let mut sums = self.acc.clone();
        ifft2_inplace(&mut sums);
        let mut counts = self.mask_spec.mapv(|m| Complex64::new(m.norm_sqr(), 0.0));
        ifft2_inplace(&mut counts);
        let bins = self.max_lag + 1;
        let mut d = vec![0.0; bins];
        let mut pairs = vec![0.0; bins];
        let mut rsum = vec![0.0; bins];
        let ml = self.max_lag as isize;
        for dy in -ml..=ml {
            for dxl in -ml..=ml {
                let rad = ((dy * dy + dxl * dxl) as f64).sqrt();
                let b = rad.round() as usize;
                if b >= bins {
                    continue;
                }
                let iy = dy.rem_euclid(p as isize) as usize;
                let ix = dxl.rem_euclid(p as isize) as usize;
                let cnt = counts[[iy, ix]].re.round() * self.screens as f64;
                if cnt <= 0.0 {
                    continue;
                }
                d[b] += sums[[iy, ix]].re;
                pairs[b] += cnt;
                rsum[b] += rad * cnt;
            }
        }
        let mut r = vec![0.0; bins];
        for b in 0..bins {
            if pairs[b] > 0.0 {
                d[b] /= pairs[b];
                r[b] = rsum[b] / pairs[b] * self.dx;
            }
        }
        StructureCurve { r, d, pairs }
    }
}

/// Isotropic structure-function estimate over a list of screens (at least two).
pub fn empirical_structure_function(screens: &[PhaseScreen], max_lag: usize) -> Result<StructureCurve> {
    if screens.len() < 2 {
        return config("structure function needs at least two screens");
    }
    let n = screens[0].phase.nrows();
    let mut acc = StructureAccumulator::new(n, screens[0].dx, max_lag);
    for s in screens {
        if s.phase.dim() != (n, n) {
            return config("screens must share one size");
        }
        acc.add(&s.phase);
    }
    Ok(acc.finish())
}

/// Least-squares slope of `log D` against `log r` over bins with
/// `r_min <= r <= r_max`.
pub fn log_log_slope(curve: &StructureCurve, r_min: f64, r_max: f64) -> f64 {
    let pts: Vec<(f64, f64)> = curve
        .r
        .iter()
        .zip(&curve.d)
        .filter(|(r, d)| **r >= r_min && **r <= r_max && **d > 0.0)
        .map(|(r, d)| (r.ln(), d.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voelz_example() {
        let dx = voelz_spacing(525e-9, 7000.0, 0.2034, 4.0).unwrap();
        assert!((dx - 4.516_961_651_917_404e-3).abs() < 1e-15);
        let dx8 = voelz_spacing(525e-9, 7000.0, 0.2034, 8.0).unwrap();
        assert!((dx8 - dx / 2.0).abs() < 1e-18);
        assert!(voelz_spacing(525e-9, 7000.0, 0.2034, 3.9).is_err());
    }

    #[test]
    fn screen_is_deterministic_and_zero_mean() {
        let s = ScreenSpectrum::kolmogorov(0.1);
        let a = sample_screen_fft(32, 0.01, s, 5).unwrap();
        let b = sample_screen_fft(32, 0.01, s, 5).unwrap();
        assert_eq!(a.phase, b.phase);
        assert!(a.phase.mean().unwrap().abs() < 1e-12);
    }

    #[test]
    fn zero_levels_passthrough() {
        let s = sample_screen_fft(16, 0.01, ScreenSpectrum::kolmogorov(0.1), 1).unwrap();
        assert_eq!(add_subharmonics(&s, 0).phase, s.phase);
    }

    #[test]
    fn constant_screens_have_zero_structure() {
        let mut s = sample_screen_fft(16, 0.01, ScreenSpectrum::kolmogorov(0.1), 1).unwrap();
        s.phase.fill(3.0);
        let c = empirical_structure_function(&[s.clone(), s], 6).unwrap();
        assert!(c.d.iter().all(|v| v.abs() < 1e-9));
    }
}
