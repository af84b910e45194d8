//! Split-step reference simulator: per-source propagation through a stack
//! of phase screens, PSF grids and image synthesis by scattering
//! convolution.
//!
//! A point source at distance `L` is propagated in lens-transformed
//! coordinates. The spherical wave leaving the source becomes a plane wave,
//! aperture-plane coordinates `eta` stay fixed for every step, and a screen
//! at distance `t` from the source is sampled at `x = eta t/L + u z/L`, the
//! point where the ray from source `u` to aperture point `eta` crosses it.
//! Free-space steps between screens at `t_a < t_b` become paraxial
//! propagations over `L^2 (1/t_a - 1/t_b)`.
//!
//! Propagation on the periodic window is exact only for phase that is
//! periodic on the window. Drawn screens are therefore periodic on their
//! own footprint (`N` samples of `dx t/L`) and each source reads them
//! through an exact Fourier shift, which keeps overlapping cones
//! correlated. Subharmonics carry only scales above three window widths
//! (Fresnel numbers of tens even for the longest scaled steps); they are
//! summed along each ray and applied at the aperture.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::atmosphere::{fried_from_integral, OpticalConfig};
use crate::error::{config, Result};
use crate::fft::{fft2_inplace, freq_index, ifft2_inplace};
use crate::optics::{crop_psf, make_pupil, psf_from_field, sv_convolve_scatter, Boundary, ComplexField, Propagated, PsfGrid, Pupil, PupilShape};
use crate::rng::derive_seed;
use crate::screens::{sample_screen_fft, subharmonic_field, PhaseScreen, ScreenSpectrum};

#[derive(Debug, Clone)]
pub struct SplitStepOptions {
    /// Number of screens `M`.
    pub screens: usize,
    pub subharmonic_levels: usize,
    /// Side of the cropped PSF kernels (odd).
    pub kernel_size: usize,
    /// Spacing of PSF grid points in pixels; 1 gives one PSF per pixel.
    pub stride: usize,
    pub lens_cancel: bool,
}

impl Default for SplitStepOptions {
    fn default() -> Self {
        Self { screens: 10, subharmonic_levels: 3, kernel_size: 33, stride: 1, lens_cancel: true }
    }
}

/// Screens, source points and sampling for one split-step realization.
#[derive(Debug, Clone)]
pub struct SplitStepPlan {
    pub cfg: OpticalConfig,
    /// Distance of each screen from the aperture, strictly increasing.
    pub screen_positions: Vec<f64>,
    /// One screen per position, centered on the optical axis.
    pub screens: Vec<PhaseScreen>,
    /// Drawn screens are periodic on their footprint and read by Fourier
    /// shifts; caller-supplied screens are read bilinearly.
    pub periodic: bool,
    /// Subharmonic levels added along the rays (periodic screens only).
    pub subharmonic_levels: usize,
    /// Source coordinates `(x, y)` [m], row-major over the PSF grid.
    pub point_grid: Vec<[f64; 2]>,
    pub grid_rows: Vec<usize>,
    pub grid_cols: Vec<usize>,
    pub image_dim: (usize, usize),
    pub kernel_size: usize,
    pub lens_cancel: bool,
    pupil: Pupil,
    spectra: Vec<Array2<Complex64>>,
}

/// Midpoints of `m` equal slabs and their Fried parameters.
///
/// Each screen carries the slab's spherically weighted `int Cn2 dz`
/// divided by the weight at the screen, because the lens transform samples
/// a screen at distance `t` from the source with the coordinate scale
/// `t/L`; the screens then add up to the spherical-wave Fried parameter.
pub fn screen_layers(cfg: &OpticalConfig, m: usize) -> Result<Vec<(f64, f64)>> {
    if m == 0 {
        return config("at least one screen is required");
    }
    let l = cfg.path_length;
    let k = cfg.wavenumber();
    Ok((0..m)
        .map(|i| {
            let (a, b) = (l * i as f64 / m as f64, l * (i + 1) as f64 / m as f64);
            let z = 0.5 * (a + b);
            let integral = cfg.profile.integrate(a, b, |z| cfg.spherical_weight(z));
            (z, fried_from_integral(k, integral / cfg.spherical_weight(z)))
        })
        .collect())
}

/// Object-plane pixel pitch implied by the aperture grid: one PSF bin,
/// `lambda L / (N dx)`.
pub fn pixel_pitch(cfg: &OpticalConfig) -> f64 {
    cfg.wavelength * cfg.path_length / (cfg.n as f64 * cfg.dx)
}

fn grid_coords(n: usize, stride: usize) -> Vec<usize> {
    let first = (stride / 2).min(n - 1);
    (first..n).step_by(stride).collect()
}

impl SplitStepPlan {
    /// Screens drawn from the configuration's turbulence for an `h x w`
    /// image: `opts.screens` slab-midpoint screens, each an `N x N` FFT
    /// screen spanning the window's footprint at its distance, plus
    /// subharmonics evaluated along the rays.
    pub fn new(cfg: &OpticalConfig, image_dim: (usize, usize), opts: &SplitStepOptions, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut plan = Self::skeleton(cfg, image_dim, opts)?;
        let layers = screen_layers(cfg, opts.screens)?;
        let (l, n, dx) = (cfg.path_length, cfg.n, cfg.dx);
        let screens = layers
            .par_iter()
            .enumerate()
            .map(|(i, &(z, r0))| sample_screen_fft(n, dx * (l - z) / l, ScreenSpectrum::kolmogorov(r0), derive_seed(seed, "splitstep-screen", i as u64)))
            .collect::<Result<Vec<_>>>()?;
        plan.spectra = screens
            .iter()
            .map(|s| {
                let mut b = s.phase.mapv(|v| Complex64::new(v, 0.0));
                fft2_inplace(&mut b);
                b
            })
            .collect();
        plan.screen_positions = layers.iter().map(|l| l.0).collect();
        plan.screens = screens;
        plan.periodic = true;
        plan.subharmonic_levels = opts.subharmonic_levels;
        Ok(plan)
    }

    /// A plan with caller-supplied screens at distances `positions` from the
    /// aperture.
    pub fn from_screens(
        cfg: &OpticalConfig,
        positions: Vec<f64>,
        screens: Vec<PhaseScreen>,
        image_dim: (usize, usize),
        opts: &SplitStepOptions,
    ) -> Result<Self> {
        cfg.validate()?;
        if positions.len() != screens.len() {
            return config("one position per screen is required");
        }
        if positions.iter().any(|&z| !(z > 0.0 && z < cfg.path_length)) {
            return config("screen positions must lie strictly inside the path");
        }
        if positions.windows(2).any(|w| w[1] <= w[0]) {
            return config("screen positions must be strictly increasing");
        }
        let mut plan = Self::skeleton(cfg, image_dim, opts)?;
        plan.screen_positions = positions;
        plan.screens = screens;
        Ok(plan)
    }

    fn skeleton(cfg: &OpticalConfig, image_dim: (usize, usize), opts: &SplitStepOptions) -> Result<Self> {
        let (h, w) = image_dim;
        if h == 0 || w == 0 {
            return config("image must be nonempty");
        }
        if opts.stride == 0 {
            return config("grid stride must be positive");
        }
        if opts.kernel_size % 2 == 0 || opts.kernel_size > cfg.n {
            return config(format!("kernel size {} must be odd and at most the grid size", opts.kernel_size));
        }
        let voelz = cfg.wavelength * cfg.path_length / (cfg.aperture * cfg.dx);
        if voelz < 4.0 {
            return config(format!("aperture grid spacing violates the Voelz rule (factor {voelz:.2} < 4)"));
        }
        let d = (cfg.aperture / cfg.dx).round() as usize;
        let pupil = make_pupil(PupilShape::Circle, cfg.n, d)?;
        let grid_rows = grid_coords(h, opts.stride);
        let grid_cols = grid_coords(w, opts.stride);
        let p = pixel_pitch(cfg);
        let point_grid = grid_rows
            .iter()
            .flat_map(|&r| grid_cols.iter().map(move |&c| [(c as f64 - (w / 2) as f64) * p, (r as f64 - (h / 2) as f64) * p]))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            screen_positions: Vec::new(),
            screens: Vec::new(),
            point_grid,
            grid_rows,
            grid_cols,
            image_dim,
            kernel_size: opts.kernel_size,
            lens_cancel: opts.lens_cancel,
            pupil,
            periodic: false,
            subharmonic_levels: 0,
            spectra: Vec::new(),
        })
    }

    /// Number of screens `M`.
    pub fn m(&self) -> usize {
        self.screens.len()
    }

    pub fn pupil(&self) -> &Pupil {
        &self.pupil
    }

    /// Source coordinates of image pixel `(row, col)`.
    pub fn object_coord(&self, row: usize, col: usize) -> [f64; 2] {
        let p = pixel_pitch(&self.cfg);
        let (h, w) = self.image_dim;
        [(col as f64 - (w / 2) as f64) * p, (row as f64 - (h / 2) as f64) * p]
    }
}

/// Bilinear sample of a centered screen at `(x, y)` [m].
fn screen_at(screen: &PhaseScreen, x: f64, y: f64) -> f64 {
    let m = screen.phase.nrows();
    let half = (m / 2) as f64;
    let fx = x / screen.dx + half;
    let fy = y / screen.dx + half;
    let c0 = (fx.floor() as usize).min(m - 2);
    let r0 = (fy.floor() as usize).min(m - 2);
    let (tx, ty) = (fx - c0 as f64, fy - r0 as f64);
    let p = &screen.phase;
    (1.0 - ty) * ((1.0 - tx) * p[[r0, c0]] + tx * p[[r0, c0 + 1]]) + ty * ((1.0 - tx) * p[[r0 + 1, c0]] + tx * p[[r0 + 1, c0 + 1]])
}

/// Periodic screen read at `x + shift`, through its spectrum.
fn shifted_screen(screen: &PhaseScreen, spectrum: &Array2<Complex64>, shift: [f64; 2]) -> Array2<f64> {
    if shift == [0.0, 0.0] {
        return screen.phase.clone();
    }
    let n = screen.phase.nrows();
    let dk = 2.0 * PI / (n as f64 * screen.dx);
    let mut b = spectrum.clone();
    for ((r, c), v) in b.indexed_iter_mut() {
        let ky = freq_index(r, n) * dk;
        let kx = freq_index(c, n) * dk;
        *v *= Complex64::from_polar(1.0, kx * shift[0] + ky * shift[1]);
    }
    ifft2_inplace(&mut b);
    b.mapv(|v| v.re)
}

fn covers(screen: &PhaseScreen, lo: f64, hi: f64) -> bool {
    let m = screen.phase.nrows();
    let half = (m / 2) as f64;
    let eps = 1e-9;
    lo / screen.dx + half >= -eps && hi / screen.dx + half <= (m - 1) as f64 + eps
}

/// Lens-transformed field at the aperture for a source at `u`, without the
/// source's tilt carrier; the aliasing flag is set when some step's
/// transfer function is undersampled (`lambda tau > N dx^2`).
fn propagate_scaled(plan: &SplitStepPlan, u: [f64; 2]) -> Result<(Array2<Complex64>, bool)> {
    let cfg = &plan.cfg;
    let (n, dx, l, wl) = (cfg.n, cfg.dx, cfg.path_length, cfg.wavelength);
    let half = (n / 2) as f64;
    let eta_lo = -half * dx;
    let eta_hi = (n as f64 - 1.0 - half) * dx;
    let mut v = Array2::from_elem((n, n), Complex64::new(1.0, 0.0));
    let mut low = Array2::<f64>::zeros((n, n));
    let mut aliased = false;
    let df = 1.0 / (n as f64 * dx);
    // source side first: decreasing distance from the aperture
    for i in (0..plan.m()).rev() {
        let z = plan.screen_positions[i];
        let t = l - z;
        let (a, b) = (t / l, z / l);
        let scr = &plan.screens[i];
        if plan.periodic {
            let shift = [u[0] * b, u[1] * b];
            let phase = shifted_screen(scr, &plan.spectra[i], shift);
            v.zip_mut_with(&phase, |val, p| *val *= Complex64::from_polar(1.0, *p));
            if plan.subharmonic_levels > 0 {
                low += &subharmonic_field(n, n, scr.dx, &scr.spectrum, plan.subharmonic_levels, scr.seed, shift[1], shift[0]);
            }
        } else {
            for k in 0..2 {
                if !covers(scr, eta_lo * a + u[k] * b, eta_hi * a + u[k] * b) {
                    return config(format!("screen {i} does not cover the ray bundle of source ({:.4}, {:.4})", u[0], u[1]));
                }
            }
            for ((r, c), val) in v.indexed_iter_mut() {
                let x = (c as f64 - half) * dx * a + u[0] * b;
                let y = (r as f64 - half) * dx * a + u[1] * b;
                *val *= Complex64::from_polar(1.0, screen_at(scr, x, y));
            }
        }
        let t_next = if i > 0 { l - plan.screen_positions[i - 1] } else { l };
        let tau = l * l * (1.0 / t - 1.0 / t_next);
        if tau > 0.0 {
            aliased |= wl * tau > n as f64 * dx * dx;
            fft2_inplace(&mut v);
            for ((r, c), val) in v.indexed_iter_mut() {
                let fy = freq_index(r, n) * df;
                let fx = freq_index(c, n) * df;
                *val *= Complex64::from_polar(1.0, -PI * wl * tau * (fx * fx + fy * fy));
            }
            ifft2_inplace(&mut v);
        }
    }
    if plan.subharmonic_levels > 0 && plan.periodic {
        v.zip_mut_with(&low, |val, p| *val *= Complex64::from_polar(1.0, *p));
    }
    Ok((v, aliased))
}

/// Aperture-plane field of a unit point source at object coordinates `u`
/// [m] after all screens. With `lens_cancel` the quadratic carrier
/// `exp(jk|eta|^2 / 2L)` is removed and only the source's tilt
/// `exp(-jk eta.u / L)` remains.
pub fn propagate_point(plan: &SplitStepPlan, u: [f64; 2]) -> Result<Propagated> {
    let cfg = &plan.cfg;
    let (v, aliased) = propagate_scaled(plan, u)?;
    let (n, dx, l) = (cfg.n, cfg.dx, cfg.path_length);
    let k = cfg.wavenumber();
    let half = (n / 2) as f64;
    let data = Array2::from_shape_fn((n, n), |(r, c)| {
        let (x, y) = ((c as f64 - half) * dx, (r as f64 - half) * dx);
        let mut phase = -k * (x * u[0] + y * u[1]) / l;
        if !plan.lens_cancel {
            phase += k * (x * x + y * y) / (2.0 * l);
        }
        v[[r, c]] * Complex64::from_polar(1.0, phase)
    });
    let field = ComplexField::new(data, dx)?.with_wavelength(cfg.wavelength);
    Ok(Propagated { field, aliased })
}

/// Full-grid, unit-sum PSF of source `u`, centered on its ideal image
/// point (the source's own tilt carrier is left out).
pub fn point_psf(plan: &SplitStepPlan, u: [f64; 2]) -> Result<Array2<f64>> {
    let (v, _) = propagate_scaled(plan, u)?;
    let field = &v * &plan.pupil.mask.mapv(|m| Complex64::new(m, 0.0));
    psf_from_field(&field, 1)
}

/// One cropped, unit-sum PSF per grid point.
pub fn psf_grid(plan: &SplitStepPlan) -> Result<PsfGrid> {
    let psfs = plan
        .point_grid
        .par_iter()
        .map(|&u| point_psf(plan, u).map(|p| crop_psf(&p, plan.kernel_size)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PsfGrid { rows: plan.grid_rows.clone(), cols: plan.grid_cols.clone(), psfs })
}

/// Scattering convolution of `ideal` with the plan's PSF grid, nearest
/// grid PSF between grid points.
pub fn simulate_image(plan: &SplitStepPlan, ideal: &Array2<f64>) -> Result<Array2<f64>> {
    if ideal.dim() != plan.image_dim {
        return config(format!("image is {:?}, plan expects {:?}", ideal.dim(), plan.image_dim));
    }
    let grid = psf_grid(plan)?;
    Ok(sv_convolve_scatter(ideal, &grid, Boundary::Zero))
}
