//! Fourier-optics kernels: pupils, PSF/OTF formation, free-space
//! propagation, and spatially varying convolution (scattering and
//! gathering forms).

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2, Axis};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{config, domain, Error, Result};
use crate::fft::{fft2_inplace, fftshift, freq_index, ifft2_inplace, ifftshift};

/// Complex samples on an N x N grid with physical spacing `dx`.
/// The grid origin sits at sample `(N/2, N/2)`.
#[derive(Debug, Clone)]
pub struct ComplexField {
    pub data: Array2<Complex64>,
    pub dx: f64,
    pub wavelength: Option<f64>,
}

impl ComplexField {
    pub fn new(data: Array2<Complex64>, dx: f64) -> Result<Self> {
        let (ny, nx) = data.dim();
        if ny != nx {
            return config(format!("field must be square, got {ny}x{nx}"));
        }
        if nx < 2 || !nx.is_power_of_two() {
            return config(format!("field size {nx} must be a power of two >= 2"));
        }
        if !(dx > 0.0) || !dx.is_finite() {
            return config(format!("sample spacing must be positive, got {dx}"));
        }
        Ok(Self { data, dx, wavelength: None })
    }

    pub fn with_wavelength(mut self, wavelength: f64) -> Self {
        self.wavelength = Some(wavelength);
        self
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    /// Physical coordinate of sample index `i` along either axis.
    pub fn coord(&self, i: usize) -> f64 {
        (i as f64 - (self.n() / 2) as f64) * self.dx
    }

    /// Sum of |U|^2 dx^2.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.dx * self.dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PupilShape {
    Circle,
    Square,
}

/// Binary aperture mask on an N x N grid.
///
/// The support spans exactly `diameter_samples` samples per axis: its center
/// is at `(N/2, N/2)` for odd diameters and half a sample before that for
/// even diameters. A sample belongs to the support when its center lies
/// inside the aperture.
#[derive(Debug, Clone)]
pub struct Pupil {
    pub mask: Array2<f64>,
    pub diameter_samples: usize,
}

impl Pupil {
    pub fn n(&self) -> usize {
        self.mask.nrows()
    }

    /// Grid coordinate of the aperture center (same on both axes).
    pub fn center(&self) -> f64 {
        pupil_center(self.n(), self.diameter_samples)
    }

    /// Aperture radius in samples.
    pub fn radius(&self) -> f64 {
        self.diameter_samples as f64 / 2.0
    }

    pub fn support_count(&self) -> usize {
        self.mask.iter().filter(|&&v| v > 0.0).count()
    }
}

pub(crate) fn pupil_center(n: usize, d: usize) -> f64 {
    let c = (n / 2) as f64;
    if d % 2 == 0 {
        c - 0.5
    } else {
        c
    }
}

pub fn make_pupil(shape: PupilShape, n: usize, diameter_samples: usize) -> Result<Pupil> {
    if diameter_samples == 0 {
        return config("pupil diameter must be at least one sample");
    }
    if diameter_samples > n {
        return config(format!("pupil diameter {diameter_samples} exceeds grid size {n}"));
    }
    let c = pupil_center(n, diameter_samples);
    let r = diameter_samples as f64 / 2.0;
    let mask = Array2::from_shape_fn((n, n), |(i, j)| {
        let y = i as f64 - c;
        let x = j as f64 - c;
        let inside = match shape {
            PupilShape::Circle => x * x + y * y <= r * r,
            PupilShape::Square => x.abs() <= r && y.abs() <= r,
        };
        if inside {
            1.0
        } else {
            0.0
        }
    });
    Ok(Pupil { mask, diameter_samples })
}

/// Centered, unit-sum intensity PSF |FFT(P e^{j phi})|^2 on an
/// `oversample * N` grid.
pub fn psf_from_phase(pupil: &Pupil, phase: &Array2<f64>, oversample: usize) -> Result<Array2<f64>> {
    if phase.dim() != pupil.mask.dim() {
        return config("phase grid does not match pupil grid");
    }
    let field = Array2::from_shape_fn(phase.dim(), |ix| {
        let p = pupil.mask[ix];
        if p == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            Complex64::from_polar(p, phase[ix])
        }
    });
    psf_from_field(&field, oversample)
}

/// Centered, unit-sum |FFT(U)|^2 of a pupil-plane field zero-padded to
/// `oversample * N`.
pub fn psf_from_field(field: &Array2<Complex64>, oversample: usize) -> Result<Array2<f64>> {
    if oversample < 1 {
        return config("oversample factor must be >= 1");
    }
    let n = field.nrows();
    let m = n * oversample;
    let off = (m - n) / 2;
    let mut buf = Array2::<Complex64>::zeros((m, m));
    buf.slice_mut(ndarray::s![off..off + n, off..off + n]).assign(field);
    fft2_inplace(&mut buf);
    let mut psf = fftshift(&buf.mapv(|v| v.norm_sqr()));
    let total: f64 = psf.sum();
    if !(total > 0.0) {
        return Err(Error::Numerical("PSF has zero energy".into()));
    }
    psf.mapv_inplace(|v| v / total);
    Ok(psf)
}

/// Central `k x k` window of a centered PSF (`k` odd), rescaled to unit
/// sum.
pub fn crop_psf(psf: &Array2<f64>, k: usize) -> Array2<f64> {
    let c = psf.nrows() / 2;
    let h = k / 2;
    let mut out = psf.slice(ndarray::s![c - h..c + h + 1, c - h..c + h + 1]).to_owned();
    let total = out.sum();
    if total > 0.0 {
        out.mapv_inplace(|v| v / total);
    }
    out
}

/// Fresnel impulse response `exp(jkz)/(j lambda z) exp(jk|xi|^2/2z)` sampled
/// on a centered N x N grid.
pub fn fresnel_kernel(n: usize, dx: f64, z: f64, wavelength: f64) -> Result<ComplexField> {
    if !(z > 0.0) {
        return domain(format!("Fresnel kernel needs z > 0, got {z}"));
    }
    fresnel_kernel_signed(n, dx, z, wavelength)
}

fn fresnel_kernel_signed(n: usize, dx: f64, z: f64, wavelength: f64) -> Result<ComplexField> {
    let k = 2.0 * PI / wavelength;
    let carrier = Complex64::from_polar(1.0, 2.0 * PI * (z / wavelength).fract());
    let pref = carrier / Complex64::new(0.0, wavelength * z);
    let h = n / 2;
    let data = Array2::from_shape_fn((n, n), |(i, j)| {
        let y = (i as f64 - h as f64) * dx;
        let x = (j as f64 - h as f64) * dx;
        pref * Complex64::from_polar(1.0, k * (x * x + y * y) / (2.0 * z))
    });
    Ok(ComplexField::new(data, dx)?.with_wavelength(wavelength))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropagationMethod {
    /// Convolution with the paraxial Fresnel kernel. Uses the analytic
    /// transfer function when `N dx^2 >= lambda |z|` and the sampled
    /// impulse response otherwise.
    FresnelConv,
    /// Exact scalar transfer function `exp(jkz sqrt(1 - (lambda f)^2))`.
    AngularSpectrum,
}

#[derive(Debug, Clone)]
pub struct Propagated {
    pub field: ComplexField,
    /// Set when the transfer function is undersampled for this distance
    /// (`N dx^2 < lambda |z|`); the periodic result then wraps energy.
    pub aliased: bool,
}

pub fn propagate(field: &ComplexField, z: f64, method: PropagationMethod) -> Result<Propagated> {
    let wavelength = field
        .wavelength
        .ok_or_else(|| Error::Config("propagation needs the field wavelength".into()))?;
    let n = field.n();
    let dx = field.dx;
    let critical = n as f64 * dx * dx;
    let mut spec = ifftshift(&field.data);
    fft2_inplace(&mut spec);
    let aliased;
    match method {
        PropagationMethod::AngularSpectrum => {
            aliased = wavelength * z.abs() > critical;
            apply_transfer(&mut spec, dx, |fx, fy| angular_spectrum_tf(fx, fy, z, wavelength));
        }
        PropagationMethod::FresnelConv => {
            aliased = false;
            if critical >= wavelength * z.abs() {
                apply_transfer(&mut spec, dx, |fx, fy| fresnel_tf(fx, fy, z, wavelength));
            } else {
                let kernel = fresnel_kernel_signed(n, dx, z, wavelength)?;
                let mut h = ifftshift(&kernel.data);
                h.mapv_inplace(|v| v * dx * dx);
                fft2_inplace(&mut h);
                spec.zip_mut_with(&h, |a, b| *a *= *b);
            }
        }
    }
    ifft2_inplace(&mut spec);
    let out = ComplexField::new(fftshift(&spec), dx)?.with_wavelength(wavelength);
    Ok(Propagated { field: out, aliased })
}

fn apply_transfer<F: Fn(f64, f64) -> Complex64>(spec: &mut Array2<Complex64>, dx: f64, tf: F) {
    let n = spec.nrows();
    let df = 1.0 / (n as f64 * dx);
    for ((r, c), v) in spec.indexed_iter_mut() {
        let fy = freq_index(r, n) * df;
        let fx = freq_index(c, n) * df;
        *v *= tf(fx, fy);
    }
}

/// Angular-spectrum transfer function, evaluated so that large `z/lambda`
/// does not lose precision in the carrier phase.
pub fn angular_spectrum_tf(fx: f64, fy: f64, z: f64, wavelength: f64) -> Complex64 {
    let k = 2.0 * PI / wavelength;
    let x = wavelength * wavelength * (fx * fx + fy * fy);
    let carrier = Complex64::from_polar(1.0, 2.0 * PI * (z / wavelength).fract());
    if x <= 1.0 {
        let excess = -x / (1.0 + (1.0 - x).sqrt());
        carrier * Complex64::from_polar(1.0, k * z * excess)
    } else {
        carrier * Complex64::from_polar((-k * z.abs() * (x - 1.0).sqrt()).exp(), -k * z)
    }
}

/// Paraxial (Fresnel) transfer function `exp(jkz) exp(-j pi lambda z f^2)`.
pub fn fresnel_tf(fx: f64, fy: f64, z: f64, wavelength: f64) -> Complex64 {
    let carrier = Complex64::from_polar(1.0, 2.0 * PI * (z / wavelength).fract());
    carrier * Complex64::from_polar(1.0, -PI * wavelength * z * (fx * fx + fy * fy))
}

/// Direct Rayleigh–Sommerfeld sum
/// `U(x) = 1/(j lambda) sum U(xi) exp(jkr)/r cos(theta) dx^2`
/// at observation points `(x, y)` in a plane a distance `z` away.
pub fn rs_oracle(field: &ComplexField, z: f64, obs: &[[f64; 2]], allow_large: bool) -> Result<Vec<Complex64>> {
    let n = field.n();
    if n > 256 && !allow_large {
        return config(format!("direct Rayleigh-Sommerfeld sum refused for N = {n} > 256"));
    }
    let wavelength = field
        .wavelength
        .ok_or_else(|| Error::Config("Rayleigh-Sommerfeld sum needs the field wavelength".into()))?;
    let k = 2.0 * PI / wavelength;
    let pref = Complex64::new(0.0, -1.0 / wavelength) * field.dx * field.dx;
    let nonzero: Vec<(f64, f64, Complex64)> = field
        .data
        .indexed_iter()
        .filter(|(_, v)| v.norm_sqr() > 0.0)
        .map(|((i, j), v)| (field.coord(j), field.coord(i), *v))
        .collect();
    Ok(obs
        .par_iter()
        .map(|p| {
            let mut acc = Complex64::new(0.0, 0.0);
            for &(xs, ys, u) in &nonzero {
                let dx = p[0] - xs;
                let dy = p[1] - ys;
                let r = (dx * dx + dy * dy + z * z).sqrt();
                // exp(jkr) with the phase reduced modulo 2 pi in wavelengths
                let phase = 2.0 * PI * (r / wavelength).fract();
                acc += u * Complex64::from_polar(z / (r * r), phase);
            }
            let _ = k;
            acc * pref
        })
        .collect())
}

/// Incoherent imaging: intensity convolved with a (unit-sum) PSF.
pub fn incoherent_image(psf: &Array2<f64>, ideal: &Array2<f64>) -> Array2<f64> {
    crate::fft::convolve_same(ideal, psf)
}

/// Coherent imaging: |asf * U|^2, left unnormalized.
pub fn coherent_image(asf: &Array2<Complex64>, field: &Array2<Complex64>) -> Array2<f64> {
    crate::fft::convolve_same_complex(field, asf).mapv(|v| v.norm_sqr())
}

/// OTF of a centered PSF, normalized so the zero-frequency value (at the
/// grid center) is 1.
pub fn otf_from_psf(psf: &Array2<f64>) -> Result<Array2<Complex64>> {
    let total: f64 = psf.sum();
    if !(total > 0.0) {
        return domain("OTF needs a PSF with positive sum");
    }
    let mut buf = ifftshift(psf).mapv(|v| Complex64::new(v / total, 0.0));
    fft2_inplace(&mut buf);
    Ok(fftshift(&buf))
}

/// Amplitude transfer function of a centered amplitude spread function,
/// normalized by its zero-frequency value when that is nonzero.
pub fn atf_from_asf(asf: &Array2<Complex64>) -> Array2<Complex64> {
    let mut buf = ifftshift(asf);
    fft2_inplace(&mut buf);
    let dc = buf[[0, 0]];
    if dc.norm() > 0.0 {
        buf.mapv_inplace(|v| v / dc);
    }
    fftshift(&buf)
}

/// Diffraction-limited OTF of a circular pupil,
/// `(2/pi)[acos(x) - x sqrt(1 - x^2)]` with `x = f / (2 f0)`, zero for f > 2 f0.
pub fn diffraction_otf_circular(f: f64, f0: f64) -> Result<f64> {
    if f < 0.0 {
        return domain(format!("frequency must be nonnegative, got {f}"));
    }
    let x = f / (2.0 * f0);
    if x >= 1.0 {
        return Ok(0.0);
    }
    Ok(2.0 / PI * (x.acos() - x * (1.0 - x * x).sqrt()))
}

/// Handling of samples outside the image in spatially varying convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    #[default]
    Zero,
    Replicate,
}

/// A kernel per image pixel. Kernels are K x K with their center at
/// `(K/2, K/2)`.
pub trait KernelField: Sync {
    fn kernel_dim(&self) -> (usize, usize);
    fn kernel_at(&self, row: usize, col: usize) -> ArrayView2<'_, f64>;
}

/// The same kernel everywhere.
pub struct InvariantKernel(pub Array2<f64>);

impl KernelField for InvariantKernel {
    fn kernel_dim(&self) -> (usize, usize) {
        self.0.dim()
    }
    fn kernel_at(&self, _: usize, _: usize) -> ArrayView2<'_, f64> {
        self.0.view()
    }
}

/// One kernel per pixel, row-major.
pub struct PerPixelKernels {
    pub width: usize,
    pub kernels: Vec<Array2<f64>>,
}

impl KernelField for PerPixelKernels {
    fn kernel_dim(&self) -> (usize, usize) {
        self.kernels[0].dim()
    }
    fn kernel_at(&self, row: usize, col: usize) -> ArrayView2<'_, f64> {
        self.kernels[row * self.width + col].view()
    }
}

/// PSFs on a regular grid of source pixels; between grid points the
/// nearest PSF is used.
#[derive(Debug, Clone)]
pub struct PsfGrid {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    /// Row-major over `rows x cols`.
    pub psfs: Vec<Array2<f64>>,
}

impl PsfGrid {
    pub fn get(&self, i: usize, j: usize) -> &Array2<f64> {
        &self.psfs[i * self.cols.len() + j]
    }

    pub fn nearest(&self, row: usize, col: usize) -> &Array2<f64> {
        self.get(nearest_index(&self.rows, row), nearest_index(&self.cols, col))
    }

    /// Scale every kernel to unit sum.
    pub fn normalize(&mut self) {
        for p in &mut self.psfs {
            let s = p.sum();
            if s > 0.0 {
                p.mapv_inplace(|v| v / s);
            }
        }
    }
}

fn nearest_index(coords: &[usize], x: usize) -> usize {
    match coords.binary_search(&x) {
        Ok(i) => i,
        Err(0) => 0,
        Err(i) if i == coords.len() => coords.len() - 1,
        Err(i) => {
            if x - coords[i - 1] <= coords[i] - x {
                i - 1
            } else {
                i
            }
        }
    }
}

impl KernelField for PsfGrid {
    fn kernel_dim(&self) -> (usize, usize) {
        self.psfs[0].dim()
    }
    fn kernel_at(&self, row: usize, col: usize) -> ArrayView2<'_, f64> {
        self.nearest(row, col).view()
    }
}

fn clamp_index(i: isize, n: usize) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        Some(i as usize)
    } else {
        None
    }
}

/// Scattering convolution: every source pixel `u` spreads its value with
/// its own kernel, `out(x) = sum_u I(u) h_u(x - u)`.
pub fn sv_convolve_scatter<K: KernelField + ?Sized>(image: &Array2<f64>, kernels: &K, boundary: Boundary) -> Array2<f64> {
    sv_convolve(image, kernels, boundary, true)
}

/// Gathering convolution: every output pixel `x` collects with its own
/// kernel, `out(x) = sum_u I(u) h_x(x - u)`.
pub fn sv_convolve_gather<K: KernelField + ?Sized>(image: &Array2<f64>, kernels: &K, boundary: Boundary) -> Array2<f64> {
    sv_convolve(image, kernels, boundary, false)
}

fn sv_convolve<K: KernelField + ?Sized>(image: &Array2<f64>, kernels: &K, boundary: Boundary, scatter: bool) -> Array2<f64> {
    let (h, w) = image.dim();
    let (kh, kw) = kernels.kernel_dim();
    let (cy, cx) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = Array2::<f64>::zeros((h, w));
    out.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(r, mut row)| {
        let own_row: Vec<ArrayView2<f64>> = if scatter {
            Vec::new()
        } else {
            (0..w).map(|c| kernels.kernel_at(r, c)).collect()
        };
        for c in 0..w {
            let mut acc = 0.0;
            for a in 0..kh {
                // source row u = x + c_y - a
                let ur = r as isize + cy - a as isize;
                let ur = match (clamp_index(ur, h), boundary) {
                    (Some(v), _) => v,
                    (None, Boundary::Zero) => continue,
                    (None, Boundary::Replicate) => ur.clamp(0, h as isize - 1) as usize,
                };
                for b in 0..kw {
                    let uc = c as isize + cx - b as isize;
                    let uc = match (clamp_index(uc, w), boundary) {
                        (Some(v), _) => v,
                        (None, Boundary::Zero) => continue,
                        (None, Boundary::Replicate) => uc.clamp(0, w as isize - 1) as usize,
                    };
                    let v = image[[ur, uc]];
                    if v == 0.0 {
                        continue;
                    }
                    let k = if scatter { kernels.kernel_at(ur, uc)[[a, b]] } else { own_row[c][[a, b]] };
                    acc += v * k;
                }
            }
            row[c] = acc;
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_pupil_counts() {
        assert_eq!(make_pupil(PupilShape::Circle, 4, 4).unwrap().support_count(), 12);
        assert_eq!(make_pupil(PupilShape::Square, 8, 8).unwrap().support_count(), 64);
        let p = make_pupil(PupilShape::Circle, 8, 1).unwrap();
        assert_eq!(p.support_count(), 1);
        assert_eq!(p.mask[[4, 4]], 1.0);
        assert!(make_pupil(PupilShape::Circle, 8, 9).is_err());
        assert!(make_pupil(PupilShape::Circle, 8, 0).is_err());
    }

    #[test]
    fn otf_closed_form_values() {
        assert_eq!(diffraction_otf_circular(0.0, 1.0).unwrap(), 1.0);
        assert_eq!(diffraction_otf_circular(2.0, 1.0).unwrap(), 0.0);
        let v = diffraction_otf_circular(1.0, 1.0).unwrap();
        assert!((v - 0.391_002_218_955_770_6).abs() < 1e-12);
        assert!(diffraction_otf_circular(-0.1, 1.0).is_err());
    }

    #[test]
    fn fresnel_kernel_modulus_and_phase() {
        let (lam, z) = (500e-9, 10.0);
        let h = fresnel_kernel(16, 1e-3, z, lam).unwrap();
        for v in h.data.iter() {
            assert!((v.norm() - 1.0 / (lam * z)).abs() * lam * z < 1e-12);
        }
        let k = 2.0 * PI / lam;
        let expect = (k * z - PI / 2.0).rem_euclid(2.0 * PI);
        let got = h.data[[8, 8]].arg().rem_euclid(2.0 * PI);
        let d = (expect - got).abs();
        assert!(d.min(2.0 * PI - d) < 1e-6);
        assert!(fresnel_kernel(16, 1e-3, 0.0, lam).is_err());
    }

    #[test]
    fn nearest_grid_lookup() {
        assert_eq!(nearest_index(&[0, 8, 16], 3), 0);
        assert_eq!(nearest_index(&[0, 8, 16], 5), 1);
        assert_eq!(nearest_index(&[0, 8, 16], 40), 2);
    }
}
