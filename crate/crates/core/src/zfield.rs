//! The Zernike space: fields of per-pixel Zernike coefficients whose
//! spatial correlation follows the two-aperture model.
//!
//! Tilt kernels use the `I0`/`I2` Bessel integrals. Every other mode's
//! kernel is the double-disk integral of `|rho - rho' + 2s|^(5/3)` weighted
//! by the two Zernike polynomials, evaluated on a pixel lattice as a sum over
//! the cross-correlation of the sampled polynomials. Fields are drawn per
//! mode by circulant embedding and mixed pixelwise with the Noll matrix.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::atmosphere::{fried_parameter_for, Cn2Profile, OpticalConfig, WaveKind};
use crate::error::{config, domain, Result};
use crate::fft::{fft2_inplace, ifft2_inplace};
use crate::rng::{normal, stream, Rng};
use crate::special::{bessel_j, integrate, Quadrature};
use crate::zernike::{noll_unindex, NollMatrix, ZernikeVector};
use crate::{Error, Flagged};

/// Tilt constant `c2` of the closed-form tilt correlation.
pub const C2_TILT: f64 = 7.7554;
/// Integration range of the tilt Bessel integrals.
pub const TILT_RANGE: (f64, f64) = (1e-8, 1e3);

fn tilt_breakpoints() -> Vec<f64> {
    let mut b: Vec<f64> = (-8..=0).map(|e| 10f64.powi(e)).collect();
    b.extend((1..=40).map(|k| 1.0 + 0.5 * k as f64));
    b.extend([30.0, 50.0, 100.0, 200.0, 500.0, TILT_RANGE.1]);
    b
}

/// `I0(s) = int z^(-14/3) J0(2sz) J2(z)^2 dz` and the same with `J2(2sz)`,
/// over [`TILT_RANGE`].
pub fn tilt_kernel_integrals(s: f64) -> Result<(f64, f64)> {
    if !(s >= 0.0) || !s.is_finite() {
        return domain(format!("separation must be finite and nonnegative, got {s}"));
    }
    let bp = tilt_breakpoints();
    let w = |z: f64| z.powf(-14.0 / 3.0) * bessel_j(2, z).powi(2);
    let i0 = integrate(|z| w(z) * bessel_j(0, 2.0 * s * z), &bp, 1e-16, 1e-10, 20_000).value;
    let i2 = if s == 0.0 { 0.0 } else { integrate(|z| w(z) * bessel_j(2, 2.0 * s * z), &bp, 1e-16, 1e-10, 20_000).value };
    Ok((i0, i2))
}

/// `E[a_j(u) a_j(u')]` for the tilts `j = 2` (x) and `j = 3` (y):
/// `(c2 / 2^(5/3)) (D/r0)^(5/3) [I0(s) -+ cos(2 psi0) I2(s)]`, minus for
/// `j = 2`. `psi0` is the angle of `u - u'` from the x axis.
pub fn tilt_correlation(j: usize, s: f64, psi0: f64, d_over_r0: f64) -> Result<f64> {
    let sign = match j {
        2 => -1.0,
        3 => 1.0,
        _ => return domain(format!("tilt correlation is defined for j = 2, 3, got {j}")),
    };
    let (i0, i2) = tilt_kernel_integrals(s)?;
    Ok(C2_TILT / 2f64.powf(5.0 / 3.0) * d_over_r0.powf(5.0 / 3.0) * (i0 + sign * (2.0 * psi0).cos() * i2))
}

/// Tilt variance in pixels squared at Nyquist pixel pitch,
/// `(16/pi^2) (c2 / 2^(5/3)) I0(0) (D/r0)^(5/3)`.
pub fn kappa_squared(d_over_r0: f64) -> f64 {
    let (i0, _) = tilt_kernel_integrals(0.0).expect("s = 0 is valid");
    16.0 / (PI * PI) * C2_TILT / 2f64.powf(5.0 / 3.0) * i0 * d_over_r0.powf(5.0 / 3.0)
}

/// `I0` and `I2` tabulated on a radial grid for fast kernel evaluation.
#[derive(Debug, Clone)]
pub struct TiltTable {
    s: Vec<f64>,
    i0: Vec<f64>,
    i2: Vec<f64>,
}

impl TiltTable {
    /// Nodes every 0.005 up to 1, every 0.02 up to 4 and every 0.1 beyond,
    /// reaching at least `s_max`.
    pub fn new(s_max: f64) -> Self {
        let mut s = Vec::new();
        let mut x = 0.0;
        while x <= s_max + 1e-12 || s.len() < 2 {
            s.push(x);
            x += if x < 1.0 - 1e-12 {
                0.005
            } else if x < 4.0 - 1e-12 {
                0.02
            } else {
                0.1
            };
            x = (x * 1000.0).round() / 1000.0;
        }
        let vals: Vec<(f64, f64)> = s.par_iter().map(|&v| tilt_kernel_integrals(v).unwrap()).collect();
        Self { i0: vals.iter().map(|v| v.0).collect(), i2: vals.iter().map(|v| v.1).collect(), s }
    }

    /// Shared table covering at least `s_max`.
    pub fn shared(s_max: f64) -> Arc<TiltTable> {
        static CACHE: OnceLock<Mutex<Option<Arc<TiltTable>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(None));
        let mut g = cache.lock().unwrap();
        if let Some(t) = g.as_ref() {
            if t.s_max() >= s_max {
                return t.clone();
            }
        }
        let t = Arc::new(TiltTable::new(s_max.max(8.0)));
        *g = Some(t.clone());
        t
    }

    pub fn s_max(&self) -> f64 {
        *self.s.last().unwrap()
    }

    /// Linearly interpolated `(I0, I2)`; exact quadrature beyond the table.
    pub fn eval(&self, s: f64) -> (f64, f64) {
        if s >= self.s_max() {
            return tilt_kernel_integrals(s).unwrap();
        }
        let k = match self.s.binary_search_by(|v| v.total_cmp(&s)) {
            Ok(k) => return (self.i0[k], self.i2[k]),
            Err(k) => k - 1,
        };
        let t = (s - self.s[k]) / (self.s[k + 1] - self.s[k]);
        (self.i0[k] + t * (self.i0[k + 1] - self.i0[k]), self.i2[k] + t * (self.i2[k + 1] - self.i2[k]))
    }
}

/// Rule for the double-disk integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiskQuadrature {
    /// Pixel lattice with `cells` samples across the diameter; cell
    /// integrals from 8 x 8 sub-samples.
    Lattice { cells: usize },
    /// Halton points in the product of two disks.
    QuasiMonteCarlo { points: usize },
}

impl Default for DiskQuadrature {
    fn default() -> Self {
        DiskQuadrature::Lattice { cells: 96 }
    }
}

/// Sampled Zernike polynomials on a lattice over the unit disk, with their
/// FFT spectra for cross-correlation.
///
/// Each sample is the integral of `Z_j` over its cell's part of the disk.
/// The samples of mode `j` (radial order `n`) are then made exactly
/// orthogonal to every monomial of degree `< n` at the cell centers, so the
/// discrete double-disk integral inherits the continuum decay at large
/// separation instead of growing like `s^(5/3)`.
pub struct DiskLattice {
    cells: usize,
    fft_n: usize,
    spectra: Vec<Array2<Complex64>>,
}

impl DiskLattice {
    pub fn new(cells: usize, n_modes: usize) -> Result<Self> {
        if cells < 8 {
            return config("lattice needs at least 8 cells across the disk");
        }
        let h = 2.0 / cells as f64;
        const SUB: usize = 8;
        let center = |k: usize| -1.0 + (k as f64 + 0.5) * h;
        let idx: Vec<_> = (1..=n_modes).map(noll_unindex).collect::<Result<_>>()?;
        let mut cell_list = Vec::new();
        let mut weights = Vec::new();
        let mut raw = vec![Vec::new(); n_modes];
        for r in 0..cells {
            for c in 0..cells {
                let (yc, xc) = (center(r), center(c));
                let mut inside = 0usize;
                let mut acc = vec![0.0; n_modes];
                for a in 0..SUB {
                    for b in 0..SUB {
                        let y = yc + h * ((a as f64 + 0.5) / SUB as f64 - 0.5);
                        let x = xc + h * ((b as f64 + 0.5) / SUB as f64 - 0.5);
                        let rho = (x * x + y * y).sqrt();
                        if rho > 1.0 {
                            continue;
                        }
                        inside += 1;
                        let th = y.atan2(x);
                        for (m, id) in idx.iter().enumerate() {
                            acc[m] += crate::zernike::zernike_eval(id.j, rho, th).unwrap();
                        }
                    }
                }
                if inside == 0 {
                    continue;
                }
                let area = h * h / (SUB * SUB) as f64;
                cell_list.push((r, c, yc, xc));
                weights.push(inside as f64 * area);
                for m in 0..n_modes {
                    raw[m].push(acc[m] * area);
                }
            }
        }
        let k = cell_list.len();
        let max_order = idx.iter().map(|i| i.n).max().unwrap_or(0);
        let monomials: Vec<(i32, i32)> =
            (0..max_order as i32).flat_map(|d| (0..=d).map(move |a| (a, d - a))).collect();
        let mono = DMatrix::from_fn(k, monomials.len(), |r, m| {
            let (_, _, y, x) = cell_list[r];
            x.powi(monomials[m].0) * y.powi(monomials[m].1)
        });
        let fft_n = (2 * cells + 1).next_power_of_two();
        let mut spectra = Vec::with_capacity(n_modes);
        for (m, id) in idx.iter().enumerate() {
            let mut g = DVector::from_vec(raw[m].clone());
            let cols = (id.n * (id.n + 1)) / 2;
            if cols > 0 {
                let p = mono.columns(0, cols);
                let wp = DMatrix::from_fn(k, cols, |r, c| p[(r, c)] * weights[r]);
                let gram = p.transpose() * &wp;
                let rhs = p.transpose() * &g;
                let coef = gram
                    .clone()
                    .cholesky()
                    .map(|ch| ch.solve(&rhs))
                    .or_else(|| gram.clone().lu().solve(&rhs))
                    .ok_or_else(|| Error::Numerical("monomial Gram matrix is singular".into()))?;
                g -= wp * coef;
            }
            let mut buf = Array2::<Complex64>::zeros((fft_n, fft_n));
            for (q, &(r, c, _, _)) in cell_list.iter().enumerate() {
                buf[[r, c]] = Complex64::new(g[q], 0.0);
            }
            fft2_inplace(&mut buf);
            spectra.push(buf);
        }
        Ok(Self { cells, fft_n, spectra })
    }

    /// Shared lattice for `(cells, n_modes)`.
    pub fn shared(cells: usize, n_modes: usize) -> Result<Arc<DiskLattice>> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<DiskLattice>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(l) = cache.lock().unwrap().get(&cells) {
            if l.spectra.len() >= n_modes {
                return Ok(l.clone());
            }
        }
        let l = Arc::new(DiskLattice::new(cells, n_modes)?);
        cache.lock().unwrap().insert(cells, l.clone());
        Ok(l)
    }

    pub fn n_modes(&self) -> usize {
        self.spectra.len()
    }

    /// Lag table `C_ij(r) = sum_x g_i(x) g_j(x - r)` with lags `r` in
    /// unit-radius coordinates.
    pub fn cross_correlation(&self, i: usize, j: usize) -> LagTable {
        let n = self.fft_n;
        let mut prod = Zip::from(&self.spectra[i - 1])
            .and(&self.spectra[j - 1])
            .map_collect(|a, b| a * b.conj());
        ifft2_inplace(&mut prod);
        let h = 2.0 / self.cells as f64;
        let span = self.cells as isize - 1;
        let mut lags = Vec::new();
        for dy in -span..=span {
            for dx in -span..=span {
                let v = prod[[dy.rem_euclid(n as isize) as usize, dx.rem_euclid(n as isize) as usize]].re;
                lags.push((dy as f64 * h, dx as f64 * h, v));
            }
        }
        LagTable { lags }
    }
}

/// Discrete cross-correlation of two sampled modes.
#[derive(Debug, Clone)]
pub struct LagTable {
    /// `(ry, rx, C)` in unit-radius coordinates.
    lags: Vec<(f64, f64, f64)>,
}

impl LagTable {
    /// `F(s) = sum_r C(r) |r + 2s|^(5/3)`, with `s` in aperture diameters.
    pub fn double_disk(&self, sy: f64, sx: f64) -> f64 {
        let (ty, tx) = (2.0 * sy, 2.0 * sx);
        self.lags
            .iter()
            .map(|&(ry, rx, c)| {
                let d2 = (ry + ty).powi(2) + (rx + tx).powi(2);
                c * d2.powf(5.0 / 6.0)
            })
            .sum()
    }
}

fn halton(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Double-disk integral by Halton points, with a batch standard error.
fn double_disk_qmc(i: usize, j: usize, sy: f64, sx: f64, points: usize) -> Result<Quadrature> {
    let (zi, zj) = (noll_unindex(i)?, noll_unindex(j)?);
    const BATCHES: usize = 16;
    let per = (points / BATCHES).max(1);
    let mut means = Vec::with_capacity(BATCHES);
    for b in 0..BATCHES {
        let mut acc = 0.0;
        for q in 0..per {
            let k = b * per + q + 1;
            let (r1, t1) = (halton(k, 2).sqrt(), 2.0 * PI * halton(k, 3));
            let (r2, t2) = (halton(k, 5).sqrt(), 2.0 * PI * halton(k, 7));
            let (y1, x1) = (r1 * t1.sin(), r1 * t1.cos());
            let (y2, x2) = (r2 * t2.sin(), r2 * t2.cos());
            let d2 = (y1 - y2 + 2.0 * sy).powi(2) + (x1 - x2 + 2.0 * sx).powi(2);
            acc += crate::zernike::zernike_eval(zi.j, r1, t1)? * crate::zernike::zernike_eval(zj.j, r2, t2)? * d2.powf(5.0 / 6.0);
        }
        means.push(acc / per as f64 * PI * PI);
    }
    let mean = means.iter().sum::<f64>() / BATCHES as f64;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (BATCHES - 1) as f64;
    Ok(Quadrature { value: mean, error: (var / BATCHES as f64).sqrt(), evaluations: per * BATCHES })
}

/// `F_ij(s)` with an error estimate: for the lattice rule the difference to
/// a lattice with two thirds of the cells.
pub fn double_disk_integral(i: usize, j: usize, s: [f64; 2], rule: DiskQuadrature) -> Result<Quadrature> {
    if i < 1 || j < 1 {
        return domain("Noll indices start at 1");
    }
    match rule {
        DiskQuadrature::Lattice { cells } => {
            let n_modes = i.max(j);
            let fine = DiskLattice::shared(cells, n_modes)?;
            let coarse = DiskLattice::shared((2 * cells / 3).max(8), n_modes)?;
            let v = fine.cross_correlation(i, j).double_disk(s[0], s[1]);
            let w = coarse.cross_correlation(i, j).double_disk(s[0], s[1]);
            Ok(Quadrature { value: v, error: (v - w).abs(), evaluations: 0 })
        }
        DiskQuadrature::QuasiMonteCarlo { points } => double_disk_qmc(i, j, s[0], s[1], points),
    }
}

fn multi_aperture_prefactor(cfg: &OpticalConfig) -> f64 {
    let k = cfg.wavenumber();
    let radius = cfg.aperture / 2.0;
    -2.91 * k * k * radius.powf(5.0 / 3.0) / (2.0 * PI * PI)
}

/// `E[a_i(u) a_j(u')]` by the two-aperture model with `s = (u - u')/D`
/// given as `[sy, sx]` in aperture diameters. Requires a constant profile.
pub fn spatial_corr_numeric(i: usize, j: usize, s: [f64; 2], cfg: &OpticalConfig, rule: DiskQuadrature) -> Result<Quadrature> {
    let cn2 = match cfg.profile {
        Cn2Profile::Constant(c) => c,
        _ => return Err(Error::Unsupported("the two-aperture model assumes a constant Cn2 profile; use exact_path_corr".into())),
    };
    let q = double_disk_integral(i, j, s, rule)?;
    let pref = multi_aperture_prefactor(cfg) * cn2 * cfg.path_length / 2f64.powf(5.0 / 3.0);
    Ok(Quadrature { value: pref * q.value, error: (pref * q.error).abs(), evaluations: q.evaluations })
}

/// Largest rescaled separation used inside [`exact_path_corr`].
pub const PATH_SEPARATION_CAP: f64 = 50.0;

/// Path-resolved correlation: the two-aperture integrand evaluated layer by
/// layer, `pref * int Cn2(z) ((L - z)/L)^(5/3) F(s z / (L - z)) dz` with `z`
/// from the aperture. The rescaled separation is capped at
/// [`PATH_SEPARATION_CAP`]. With `parity_zero`, pairs with odd `i - j`
/// return zero.
pub fn exact_path_corr(i: usize, j: usize, s: [f64; 2], cfg: &OpticalConfig, parity_zero: bool) -> Result<f64> {
    cfg.validate()?;
    if parity_zero && (i + j) % 2 == 1 {
        return Ok(0.0);
    }
    let cells = DiskQuadrature::default();
    let DiskQuadrature::Lattice { cells } = cells else { unreachable!() };
    let lattice = DiskLattice::shared(cells, i.max(j))?;
    let table = lattice.cross_correlation(i, j);
    let l = cfg.path_length;
    let f = |z: f64| {
        if z >= l {
            return 0.0;
        }
        let mut t = z / (l - z);
        let mag = (s[0] * s[0] + s[1] * s[1]).sqrt() * t;
        if mag > PATH_SEPARATION_CAP {
            t *= PATH_SEPARATION_CAP / mag;
        }
        cfg.profile.eval(z) * cfg.spherical_weight(z) * table.double_disk(s[0] * t, s[1] * t)
    };
    let mut bp: Vec<f64> = (0..=16).map(|k| l * k as f64 / 16.0).collect();
    bp.insert(16, l * 0.99);
    let q = integrate(f, &bp, 0.0, 1e-7, 2000);
    Ok(multi_aperture_prefactor(cfg) * q.value)
}

/// Normalized autocovariance of one mode's coefficient field as a function
/// of the separation `(sy, sx)` in aperture diameters.
#[derive(Debug, Clone)]
pub enum CorrelationKernel {
    /// `delta` correlation: one at zero separation, zero elsewhere.
    White,
    /// Closed-form tilt kernel, `j` in {2, 3}.
    Tilt { j: usize, table: Arc<TiltTable> },
    /// Polar table, bilinear in `(s, psi)`, zero beyond the last radius.
    Table(KernelTable),
    /// Exact pixel-lag values near the origin, polar table beyond.
    Lattice(LatticeKernel),
}

impl CorrelationKernel {
    pub fn corr(&self, sy: f64, sx: f64) -> f64 {
        let s = (sy * sy + sx * sx).sqrt();
        match self {
            CorrelationKernel::White => {
                if s == 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            CorrelationKernel::Tilt { j, table } => {
                let (i0, i2) = table.eval(s);
                let (i00, _) = table.eval(0.0);
                let sign = if *j == 2 { -1.0 } else { 1.0 };
                let c2 = if s == 0.0 { 1.0 } else { (sx * sx - sy * sy) / (s * s) };
                (i0 + sign * c2 * i2) / i00
            }
            CorrelationKernel::Table(t) => t.eval(sy, sx),
            CorrelationKernel::Lattice(t) => t.eval(sy, sx),
        }
    }
}

/// Kernel values on `radial x angular` nodes: radii uniform on
/// `[0, s_max]`, angles uniform on `[0, pi)` (autocovariances are even).
#[derive(Debug, Clone)]
pub struct KernelTable {
    pub s_max: f64,
    pub radial: usize,
    pub angular: usize,
    /// Row-major `radial x angular`, normalized to 1 at the origin.
    pub values: Vec<f64>,
}

impl KernelTable {
    pub fn eval(&self, sy: f64, sx: f64) -> f64 {
        let s = (sy * sy + sx * sx).sqrt();
        let ds = self.s_max / (self.radial - 1) as f64;
        let t = s / ds;
        if t > (self.radial - 1) as f64 {
            return 0.0;
        }
        let mut psi = sy.atan2(sx);
        if psi < 0.0 {
            psi += PI;
        }
        let u = psi / (PI / self.angular as f64);
        let (r0, a0) = (t.floor() as usize, u.floor() as usize % self.angular);
        let (r1, a1) = ((r0 + 1).min(self.radial - 1), (a0 + 1) % self.angular);
        let (fr, fa) = (t - t.floor(), u - u.floor());
        let v = |r: usize, a: usize| self.values[r * self.angular + a];
        (1.0 - fr) * ((1.0 - fa) * v(r0, a0) + fa * v(r0, a1)) + fr * ((1.0 - fa) * v(r1, a0) + fa * v(r1, a1))
    }
}

/// Normalized autocovariance tables for modes `4..=n_modes` from the
/// lattice double-disk integral. Nodes are spaced at most `4/63` apart in
/// radius, with 16 angles.
pub fn build_kernel_tables(n_modes: usize, s_max: f64, cells: usize) -> Result<Vec<KernelTable>> {
    const ANGULAR: usize = 16;
    let radial = ((s_max / (4.0 / 63.0)).ceil() as usize + 1).max(64);
    let sets = ModeLags::new(n_modes, cells)?;
    let ds = s_max / (radial - 1) as f64;
    let nodes: Vec<(usize, usize)> = (0..radial).flat_map(|r| (0..ANGULAR).map(move |a| (r, a))).collect();
    let per_node: Vec<Vec<f64>> = nodes
        .par_iter()
        .map(|&(r, a)| {
            let s = r as f64 * ds;
            let psi = a as f64 * PI / ANGULAR as f64;
            sets.eval(s * psi.sin(), s * psi.cos())
        })
        .collect();
    let origin = &per_node[0];
    if let Some(m) = origin.iter().position(|&v| v == 0.0) {
        return Err(Error::Numerical(format!("zero variance for mode {}", m + 4)));
    }
    Ok((0..sets.tables.len())
        .map(|m| KernelTable { s_max, radial, angular: ANGULAR, values: per_node.iter().map(|v| v[m] / origin[m]).collect() })
        .collect())
}

/// Lag tables of modes `4..=n`, sharing one `|r + 2s|^(5/3)` pass per
/// separation when their lag lists coincide.
struct ModeLags {
    tables: Vec<LagTable>,
    shared: Option<Vec<(f64, f64)>>,
}

impl ModeLags {
    fn new(n_modes: usize, cells: usize) -> Result<Self> {
        let lattice = DiskLattice::shared(cells, n_modes)?;
        let tables: Vec<LagTable> = (4..=n_modes).map(|j| lattice.cross_correlation(j, j)).collect();
        let lags: Vec<(f64, f64)> = tables.first().map(|t| t.lags.iter().map(|l| (l.0, l.1)).collect()).unwrap_or_default();
        let same = tables.iter().all(|t| t.lags.len() == lags.len() && t.lags.iter().zip(&lags).all(|(a, b)| a.0 == b.0 && a.1 == b.1));
        Ok(Self { tables, shared: same.then_some(lags) })
    }

    fn eval(&self, sy: f64, sx: f64) -> Vec<f64> {
        match &self.shared {
            Some(lags) => {
                let k: Vec<f64> = lags.iter().map(|&(ry, rx)| ((ry + 2.0 * sy).powi(2) + (rx + 2.0 * sx).powi(2)).powf(5.0 / 6.0)).collect();
                self.tables.iter().map(|t| t.lags.iter().zip(&k).map(|(l, kv)| l.2 * kv).sum()).collect()
            }
            None => self.tables.iter().map(|t| t.double_disk(sy, sx)).collect(),
        }
    }
}

/// A higher-order kernel evaluated exactly at the pixel lags of one field
/// pitch inside a disc, and from a polar table beyond it.
///
/// Bilinear interpolation of the polar table is not positive definite at
/// scales finer than its nodes; modes with large azimuthal order vary by a
/// full period across a few table angles. Exact lattice values near the
/// origin keep the embedding spectrum nonnegative up to torus effects.
#[derive(Debug, Clone)]
pub struct LatticeKernel {
    pub pitch: f64,
    pub radius: usize,
    /// Normalized values at lags `(dy, dx)`, `|dy|, |dx| <= radius`, stored
    /// at `[dy + radius, dx + radius]`; only the disc is meaningful.
    pub near: Array2<f64>,
    pub far: KernelTable,
}

impl LatticeKernel {
    pub fn eval(&self, sy: f64, sx: f64) -> f64 {
        let (fy, fx) = (sy / self.pitch, sx / self.pitch);
        let (iy, ix) = (fy.round(), fx.round());
        let r = self.radius as f64;
        if (fy - iy).abs() < 1e-6 && (fx - ix).abs() < 1e-6 && iy * iy + ix * ix <= r * r {
            return self.near[[(iy + r) as usize, (ix + r) as usize]];
        }
        self.far.eval(sy, sx)
    }
}

/// Radius [diameters] of the exact region used by [`ZernikeSpace`]. At 3
/// the worst clipped share over modes 4..36 is under 0.5% (astigmatism,
/// whose tails are the slowest).
pub const LATTICE_NEAR: f64 = 3.0;

/// Largest disc radius [pixels] evaluated exactly by [`build_lattice_kernels`].
pub const LATTICE_NEAR_MAX: usize = 64;

/// Kernels of modes `4..=n_modes` for fields of pitch `pitch` diameters:
/// exact within `near` diameters (at most [`LATTICE_NEAR_MAX`] pixels),
/// polar table to `s_max` beyond.
pub fn build_lattice_kernels(n_modes: usize, s_max: f64, cells: usize, pitch: f64, near: f64) -> Result<Vec<LatticeKernel>> {
    if !(pitch > 0.0) {
        return config("pitch must be positive");
    }
    let tables = build_kernel_tables(n_modes, s_max, cells)?;
    let sets = ModeLags::new(n_modes, cells)?;
    let radius = ((near / pitch).floor() as usize).min(LATTICE_NEAR_MAX);
    let ri = radius as i64;
    // half disc; the other half follows from C(-s) = C(s)
    let lags: Vec<(i64, i64)> = (0..=ri)
        .flat_map(|dy| (-ri..=ri).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| dy * dy + dx * dx <= ri * ri && (dy > 0 || dx >= 0))
        .collect();
    let values: Vec<Vec<f64>> = lags.par_iter().map(|&(dy, dx)| sets.eval(dy as f64 * pitch, dx as f64 * pitch)).collect();
    let origin = &values[0];
    let side = 2 * radius + 1;
    Ok(tables
        .into_iter()
        .enumerate()
        .map(|(m, far)| {
            let mut near = Array2::zeros((side, side));
            for (&(dy, dx), v) in lags.iter().zip(&values) {
                let x = v[m] / origin[m];
                near[[(ri + dy) as usize, (ri + dx) as usize]] = x;
                near[[(ri - dy) as usize, (ri - dx) as usize]] = x;
            }
            LatticeKernel { pitch, radius, near, far }
        })
        .collect())
}

/// Torus size of the tilt-field embedding relative to the field. The tilt
/// kernels decay like `s^(-1/3)`; on a 2x torus about 1.2% of the spectral
/// mass comes out negative, on a 4x torus under 0.8%. Higher modes decay
/// fast and use a 2x torus.
pub const EMBEDDING_PAD: usize = 4;

/// Circulant-embedding sampler of a stationary Gaussian field on an
/// `h x w` lattice with pitch `pitch` aperture diameters.
#[derive(Debug, Clone)]
pub struct WssSampler {
    h: usize,
    w: usize,
    sqrt_eig: Array2<f64>,
    /// Share of the embedding spectrum's absolute mass that was negative
    /// and clipped to zero.
    pub clipped_fraction: f64,
}

impl WssSampler {
    /// Torus of `pad * h x pad * w` (`pad >= 2`).
    pub fn new(kernel: &CorrelationKernel, h: usize, w: usize, pitch: f64, pad: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return config("field must be nonempty");
        }
        if pad < 2 {
            return config("circulant embedding needs at least 2x padding");
        }
        if !(pitch > 0.0) {
            return config("pitch must be positive");
        }
        let (ph, pw) = (pad * h, pad * w);
        let signed = |k: usize, n: usize| if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        let rows: Vec<Vec<Complex64>> = (0..ph)
            .into_par_iter()
            .map(|r| (0..pw).map(|c| Complex64::new(kernel.corr(signed(r, ph) * pitch, signed(c, pw) * pitch), 0.0)).collect())
            .collect();
        let mut cov = Array2::from_shape_fn((ph, pw), |(r, c)| rows[r][c]);
        fft2_inplace(&mut cov);
        let mut neg = 0.0;
        let mut total = 0.0;
        let sqrt_eig = cov.mapv(|v| {
            total += v.re.abs();
            if v.re < 0.0 {
                neg += -v.re;
            }
            (v.re.max(0.0) / (ph * pw) as f64).sqrt()
        });
        Ok(Self { h, w, sqrt_eig, clipped_fraction: if total > 0.0 { neg / total } else { 0.0 } })
    }

    pub fn flagged(&self) -> bool {
        self.clipped_fraction > 0.01
    }

    /// Two independent fields from one complex transform.
    pub fn sample_pair(&self, rng: &mut Rng) -> (Array2<f64>, Array2<f64>) {
        let mut z = self.sqrt_eig.mapv(|s| Complex64::new(normal(rng), normal(rng)) * s);
        fft2_inplace(&mut z);
        let a = Array2::from_shape_fn((self.h, self.w), |(r, c)| z[[r, c]].re);
        let b = Array2::from_shape_fn((self.h, self.w), |(r, c)| z[[r, c]].im);
        (a, b)
    }
}

/// One unit-variance stationary field with the given normalized kernel.
pub fn sample_field_wss(kernel: &CorrelationKernel, h: usize, w: usize, pitch: f64, seed: u64) -> Result<Flagged<Array2<f64>>> {
    let s = WssSampler::new(kernel, h, w, pitch, 2)?;
    let mut rng = stream(seed, "wss", 0);
    Ok(Flagged { value: s.sample_pair(&mut rng).0, flagged: s.flagged() })
}

/// Per-pixel Zernike coefficients.
#[derive(Debug, Clone)]
pub struct ZernikeField {
    /// One `H x W` field per Noll index `1..=N`; index 0 (piston) is zero.
    pub modes: Vec<Array2<f64>>,
    /// Object-plane pixel pitch [m].
    pub pitch: f64,
    pub aperture: f64,
    pub d_over_r0: f64,
}

impl ZernikeField {
    pub fn dim(&self) -> (usize, usize) {
        self.modes[0].dim()
    }

    pub fn vector_at(&self, r: usize, c: usize) -> ZernikeVector {
        self.modes.iter().map(|m| m[[r, c]]).collect()
    }
}

/// Nyquist object-plane pixel pitch `lambda L / (2D)`.
pub fn nyquist_pitch(cfg: &OpticalConfig) -> f64 {
    cfg.wavelength * cfg.path_length / (2.0 * cfg.aperture)
}

/// Precomputed sampler of the Zernike space on an `H x W` grid.
///
/// Step one draws an independent unit-variance field per mode from that
/// mode's normalized kernel; step two mixes them pixelwise with the lower
/// factor of the Noll matrix (x-tilt first), so every pixel's coefficient
/// vector has exactly the Noll covariance.
pub struct ZernikeSpace {
    pub n_modes: usize,
    pub h: usize,
    pub w: usize,
    pub pitch: f64,
    pub aperture: f64,
    pub noll: NollMatrix,
    samplers: Vec<Option<WssSampler>>,
}

impl ZernikeSpace {
    pub fn new(n_modes: usize, h: usize, w: usize, pitch: f64, aperture: f64, d_over_r0: f64) -> Result<Self> {
        if !(d_over_r0 >= 0.0) || !d_over_r0.is_finite() {
            return config("D/r0 must be finite and nonnegative");
        }
        let noll = NollMatrix::new(n_modes, d_over_r0)?;
        let ds = pitch / aperture;
        // minimum-image lags on a pad x torus reach pad/2 * (h, w) pixels
        let diag = ((h * h + w * w) as f64).sqrt() * ds * 1.01;
        let tilt = TiltTable::shared(diag * EMBEDDING_PAD as f64 / 2.0);
        let tables = if n_modes >= 4 { build_lattice_kernels(n_modes, diag.max(4.0), 96, ds, LATTICE_NEAR)? } else { Vec::new() };
        let mut kernels = vec![None];
        kernels.push(Some(CorrelationKernel::Tilt { j: 2, table: tilt.clone() }));
        kernels.push(Some(CorrelationKernel::Tilt { j: 3, table: tilt }));
        kernels.extend(tables.into_iter().map(|t| Some(CorrelationKernel::Lattice(t))));
        let samplers = kernels
            .into_par_iter()
            .map(|k| {
                k.map(|k| {
                    let pad = if matches!(k, CorrelationKernel::Tilt { .. }) { EMBEDDING_PAD } else { 2 };
                    WssSampler::new(&k, h, w, ds, pad)
                })
                .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { n_modes, h, w, pitch, aperture, noll, samplers })
    }

    /// From an optical configuration: Nyquist pitch and the spherical-wave
    /// Fried parameter.
    pub fn from_config(cfg: &OpticalConfig, n_modes: usize, h: usize, w: usize) -> Result<Self> {
        cfg.validate()?;
        let r0 = fried_parameter_for(cfg, WaveKind::Spherical);
        Self::new(n_modes, h, w, nyquist_pitch(cfg), cfg.aperture, cfg.aperture / r0)
    }

    /// Largest clipped spectral share over all modes.
    pub fn clipped_fraction(&self) -> f64 {
        self.samplers.iter().flatten().map(|s| s.clipped_fraction).fold(0.0, f64::max)
    }

    pub fn flagged(&self) -> bool {
        self.clipped_fraction() > 0.01 || self.noll.clipped
    }

    /// Unit-variance, unmixed field of mode `j` (two per draw).
    pub fn sample_mode_pair(&self, j: usize, seed: u64, index: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = stream(seed, "zernike-mode", index * 1024 + j as u64);
        self.samplers[j - 1].as_ref().expect("piston has no field").sample_pair(&mut rng)
    }

    /// Two independent realizations.
    pub fn sample_pair(&self, seed: u64) -> (ZernikeField, ZernikeField) {
        let pairs: Vec<(Array2<f64>, Array2<f64>)> = (2..=self.n_modes)
            .into_par_iter()
            .map(|j| self.sample_mode_pair(j, seed, 0))
            .collect();
        let a: Vec<&Array2<f64>> = pairs.iter().map(|p| &p.0).collect();
        let b: Vec<&Array2<f64>> = pairs.iter().map(|p| &p.1).collect();
        (self.mix(&a), self.mix(&b))
    }

    pub fn sample(&self, seed: u64) -> ZernikeField {
        self.sample_pair(seed).0
    }

    fn mix(&self, white: &[&Array2<f64>]) -> ZernikeField {
        let n = self.n_modes;
        let mut modes = vec![Array2::zeros((self.h, self.w)); n];
        let l = &self.noll.chol;
        for r in 1..n {
            let out = &mut modes[r];
            for c in 1..=r {
                let coef = l[(r, c)];
                if coef != 0.0 {
                    out.scaled_add(coef, white[c - 1]);
                }
            }
        }
        ZernikeField { modes, pitch: self.pitch, aperture: self.aperture, d_over_r0: self.noll.d_over_r0 }
    }
}

/// One Zernike-space realization for `cfg` at Nyquist pitch.
pub fn sample_zernike_space(cfg: &OpticalConfig, n_modes: usize, h: usize, w: usize, seed: u64) -> Result<Flagged<ZernikeField>> {
    let space = ZernikeSpace::from_config(cfg, n_modes, h, w)?;
    Ok(Flagged { value: space.sample(seed), flagged: space.flagged() })
}

/// Radially binned lag statistic.
#[derive(Debug, Clone)]
pub struct LagCurve {
    /// Pair-weighted mean lag [pixels] of bin `b` (lags with
    /// `round(|r|) = b`).
    pub lag: Vec<f64>,
    pub value: Vec<f64>,
    pub pairs: Vec<f64>,
}

/// Accumulates zero-padded FFT lag sums over equally sized fields:
/// `sum f(x) f(x + r)` and `sum (f(x) - f(x + r))^2`.
pub struct LagAccumulator {
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    max_lag: usize,
    mask_spec: Array2<Complex64>,
    auto: Array2<Complex64>,
    diff: Array2<Complex64>,
    fields: usize,
}

impl LagAccumulator {
    pub fn new(h: usize, w: usize, max_lag: usize) -> Self {
        let max_lag = max_lag.min(h.min(w) - 1);
        let ph = (h + max_lag + 1).next_multiple_of(8);
        let pw = (w + max_lag + 1).next_multiple_of(8);
        let mut mask = Array2::<Complex64>::zeros((ph, pw));
        mask.slice_mut(ndarray::s![..h, ..w]).fill(Complex64::new(1.0, 0.0));
        fft2_inplace(&mut mask);
        Self { h, w, ph, pw, max_lag, mask_spec: mask, auto: Array2::zeros((ph, pw)), diff: Array2::zeros((ph, pw)), fields: 0 }
    }

    pub fn fields(&self) -> usize {
        self.fields
    }

    pub fn add(&mut self, f: &Array2<f64>) {
        assert_eq!(f.dim(), (self.h, self.w), "field size mismatch");
        let (ph, pw) = (self.ph, self.pw);
        let mut z = Array2::<Complex64>::zeros((ph, pw));
        for ((r, c), v) in f.indexed_iter() {
            z[[r, c]] = Complex64::new(*v, v * v);
        }
        fft2_inplace(&mut z);
        for r in 0..ph {
            for c in 0..pw {
                let zk = z[[r, c]];
                let zm = z[[(ph - r) % ph, (pw - c) % pw]].conj();
                let a = 0.5 * (zk + zm);
                let b = (zk - zm) * Complex64::new(0.0, -0.5);
                let m = self.mask_spec[[r, c]];
                let aa = a.norm_sqr();
                self.auto[[r, c]] += aa;
                self.diff[[r, c]] += b.conj() * m + m.conj() * b - 2.0 * aa;
            }
        }
        self.fields += 1;
    }

    /// Lag vectors `(dy, dx)` of each radial bin with their pair counts per
    /// field.
    pub fn bins(&self) -> Vec<Vec<(isize, isize, f64)>> {
        let (ph, pw) = (self.ph, self.pw);
        let mut counts = self.mask_spec.mapv(|m| Complex64::new(m.norm_sqr(), 0.0));
        ifft2_inplace(&mut counts);
        let ml = self.max_lag as isize;
        let mut bins = vec![Vec::new(); self.max_lag + 1];
        for dy in -ml..=ml {
            for dx in -ml..=ml {
                let b = ((dy * dy + dx * dx) as f64).sqrt().round() as usize;
                if b > self.max_lag {
                    continue;
                }
                let n = counts[[dy.rem_euclid(ph as isize) as usize, dx.rem_euclid(pw as isize) as usize]].re.round();
                if n > 0.0 {
                    bins[b].push((dy, dx, n));
                }
            }
        }
        bins
    }

    fn curve(&self, spec: &Array2<Complex64>) -> LagCurve {
        let mut sums = spec.clone();
        ifft2_inplace(&mut sums);
        let (ph, pw) = (self.ph as isize, self.pw as isize);
        let bins = self.bins();
        let mut out = LagCurve { lag: vec![0.0; bins.len()], value: vec![0.0; bins.len()], pairs: vec![0.0; bins.len()] };
        for (b, lags) in bins.iter().enumerate() {
            let (mut v, mut n, mut r) = (0.0, 0.0, 0.0);
            for &(dy, dx, cnt) in lags {
                v += sums[[dy.rem_euclid(ph) as usize, dx.rem_euclid(pw) as usize]].re;
                let c = cnt * self.fields as f64;
                n += c;
                r += c * ((dy * dy + dx * dx) as f64).sqrt();
            }
            if n > 0.0 {
                out.value[b] = v / n;
                out.lag[b] = r / n;
                out.pairs[b] = n;
            }
        }
        out
    }

    /// Empirical `E[f(x) f(x + r)]`.
    pub fn autocovariance(&self) -> LagCurve {
        self.curve(&self.auto)
    }

    /// Empirical `E[(f(x) - f(x + r))^2]`.
    pub fn structure(&self) -> LagCurve {
        self.curve(&self.diff)
    }

    /// A lag function averaged over each bin exactly as the estimator
    /// averages: weighted by pair counts.
    pub fn binned_theory<F: Fn(isize, isize) -> f64>(&self, f: F) -> Vec<f64> {
        self.bins()
            .iter()
            .map(|lags| {
                let n: f64 = lags.iter().map(|l| l.2).sum();
                if n == 0.0 {
                    0.0
                } else {
                    lags.iter().map(|&(dy, dx, c)| c * f(dy, dx)).sum::<f64>() / n
                }
            })
            .collect()
    }
}

fn tilt_stat(fields: &[Array2<f64>], max_lag: usize) -> Result<LagAccumulator> {
    if fields.len() < 100 {
        return config(format!("tilt statistics need at least 100 realizations, got {}", fields.len()));
    }
    let (h, w) = fields[0].dim();
    let mut acc = LagAccumulator::new(h, w, max_lag);
    for f in fields {
        if f.dim() != (h, w) {
            return config("tilt fields must share one size");
        }
        acc.add(f);
    }
    Ok(acc)
}

/// Z-tilt `E[alpha(u) alpha(u')]` over tilt fields in pixels.
pub fn ztilt_stat(fields: &[Array2<f64>], max_lag: usize) -> Result<LagCurve> {
    Ok(tilt_stat(fields, max_lag)?.autocovariance())
}

/// D-tilt `E[(alpha(u) - alpha(u'))^2]` over tilt fields in pixels.
pub fn dtilt_stat(fields: &[Array2<f64>], max_lag: usize) -> Result<LagCurve> {
    Ok(tilt_stat(fields, max_lag)?.structure())
}

/// `sqrt(mean (a - b)^2) / sqrt(mean b^2)`.
pub fn relative_rms(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tilt_integrals_match_oracle() {
        let cases = [
            (0.0, 0.0577784750106, 0.0),
            (0.5, 0.048633407124694571, 0.0040782929715266844),
            (1.0, 0.038625619675206228, 0.0064163090896220209),
            (2.0, 0.030512867498584630, 0.0058660734427677296),
        ];
        for (s, i0, i2) in cases {
            let (a, b) = tilt_kernel_integrals(s).unwrap();
            assert!((a - i0).abs() < 1e-8 * i0, "I0({s}) = {a}");
            assert!((b - i2).abs() < 1e-8 * i0, "I2({s}) = {b}");
        }
    }

    #[test]
    fn halton_points() {
        assert_eq!(halton(1, 2), 0.5);
        assert_eq!(halton(3, 2), 0.75);
        assert!((halton(2, 3) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn kernel_table_interpolates_nodes() {
        let t = KernelTable { s_max: 1.0, radial: 3, angular: 2, values: vec![1.0, 1.0, 0.5, 0.3, 0.0, 0.0] };
        assert_eq!(t.eval(0.0, 0.0), 1.0);
        assert!((t.eval(0.0, 0.5) - 0.5).abs() < 1e-12);
        assert!((t.eval(0.5, 0.0) - 0.3).abs() < 1e-12);
        assert_eq!(t.eval(0.0, 2.0), 0.0);
    }
}
