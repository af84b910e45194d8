//! Zernike polynomials in Noll ordering, the intermodal (Noll) covariance
//! of Kolmogorov phase, and Gaussian draws of coefficient vectors.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use crate::error::{domain, Result};
use crate::optics::pupil_center;
use crate::rng::{normal, stream};
use crate::special::gamma;
use crate::Flagged;

/// Coefficients `a_j` [rad] for `j = 1..=len`; slot 0 is piston and is kept
/// at zero by every sampler here.
pub type ZernikeVector = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Parity {
    Cos,
    Sin,
    /// Rotationally symmetric (`m = 0`).
    Even,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NollIndex {
    pub j: usize,
    pub n: usize,
    pub m: usize,
    pub parity: Parity,
}

/// `(n, m, parity)` of Noll index `j >= 1`.
pub fn noll_unindex(j: usize) -> Result<NollIndex> {
    if j == 0 {
        return domain("Noll indices start at 1");
    }
    let mut n = 0usize;
    while (n + 1) * (n + 2) / 2 < j {
        n += 1;
    }
    let p = j - n * (n + 1) / 2 - 1;
    let m = if n % 2 == 0 { 2 * ((p + 1) / 2) } else { 2 * (p / 2) + 1 };
    let parity = if m == 0 {
        Parity::Even
    } else if j % 2 == 0 {
        Parity::Cos
    } else {
        Parity::Sin
    };
    Ok(NollIndex { j, n, m, parity })
}

/// Inverse of [`noll_unindex`].
pub fn noll_index(n: usize, m: usize, parity: Parity) -> Result<usize> {
    if m > n || (n - m) % 2 != 0 {
        return domain(format!("invalid Zernike order (n={n}, m={m})"));
    }
    if (m == 0) != (parity == Parity::Even) {
        return domain(format!("parity {parity:?} does not fit m={m}"));
    }
    for j in n * (n + 1) / 2 + 1..=(n + 1) * (n + 2) / 2 {
        let idx = noll_unindex(j)?;
        if idx.m == m && idx.parity == parity {
            return Ok(j);
        }
    }
    unreachable!("every valid (n, m, parity) has a Noll index")
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

/// Radial polynomial `R_n^m(rho)`.
pub fn radial(n: usize, m: usize, rho: f64) -> f64 {
    let mut sum = 0.0;
    for s in 0..=(n - m) / 2 {
        let c = factorial(n - s) / (factorial(s) * factorial((n + m) / 2 - s) * factorial((n - m) / 2 - s));
        let sign = if s % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign * c * rho.powi((n - 2 * s) as i32);
    }
    sum
}

fn eval_unchecked(idx: &NollIndex, rho: f64, theta: f64) -> f64 {
    let r = radial(idx.n, idx.m, rho);
    match idx.parity {
        Parity::Even => ((idx.n + 1) as f64).sqrt() * r,
        Parity::Cos => (2.0 * (idx.n + 1) as f64).sqrt() * r * (idx.m as f64 * theta).cos(),
        Parity::Sin => (2.0 * (idx.n + 1) as f64).sqrt() * r * (idx.m as f64 * theta).sin(),
    }
}

/// `Z_j(rho, theta)` normalized so that `(1/pi) * integral over the unit disk
/// of Z_j^2 = 1`; `theta` is measured from the x axis.
pub fn zernike_eval(j: usize, rho: f64, theta: f64) -> Result<f64> {
    if !(0.0..=1.0 + 1e-12).contains(&rho) {
        return domain(format!("rho = {rho} outside the unit disk"));
    }
    Ok(eval_unchecked(&noll_unindex(j)?, rho.min(1.0), theta))
}

/// Unit-disk coordinates of the pupil samples of an `n x n` grid with a
/// `d`-sample diameter: `(row, col, rho, theta)` for every sample whose
/// center lies within the disk. Rows run along +y.
pub(crate) fn disk_samples(n: usize, d: usize) -> Vec<(usize, usize, f64, f64)> {
    let c = pupil_center(n, d);
    let r = d as f64 / 2.0;
    let mut out = Vec::new();
    for i in 0..n {
        for k in 0..n {
            let y = (i as f64 - c) / r;
            let x = (k as f64 - c) / r;
            let rho = (x * x + y * y).sqrt();
            if rho <= 1.0 {
                out.push((i, k, rho, y.atan2(x)));
            }
        }
    }
    out
}

/// `phi = sum_j a_j Z_j` on the pupil support of an `n x n` grid with
/// diameter `d` samples; zero outside.
pub fn phase_from_coeffs(a: &[f64], n: usize, d: usize) -> Result<Array2<f64>> {
    let idx: Vec<NollIndex> = (1..=a.len()).map(noll_unindex).collect::<Result<_>>()?;
    let mut phase = Array2::zeros((n, n));
    for (i, k, rho, theta) in disk_samples(n, d) {
        phase[[i, k]] = a.iter().zip(&idx).filter(|(c, _)| **c != 0.0).map(|(c, z)| c * eval_unchecked(z, rho, theta)).sum();
    }
    Ok(phase)
}

/// Least-squares Zernike fit on a sampled pupil.
///
/// On a pixel lattice the sampled polynomials are not exactly orthogonal,
/// so plain inner products leak between modes; solving with the sampled
/// Gram matrix makes projection the exact inverse of [`phase_from_coeffs`].
#[derive(Debug, Clone)]
pub struct ZernikeProjector {
    n: usize,
    samples: Vec<(usize, usize)>,
    /// Sampled modes, one column per mode.
    basis: DMatrix<f64>,
    gram_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl ZernikeProjector {
    pub fn new(n: usize, d: usize, n_modes: usize) -> Result<Self> {
        let pts = disk_samples(n, d);
        if pts.len() < n_modes {
            return domain("pupil has fewer samples than modes");
        }
        let idx: Vec<NollIndex> = (1..=n_modes).map(noll_unindex).collect::<Result<_>>()?;
        let basis = DMatrix::from_fn(pts.len(), n_modes, |r, c| {
            let (_, _, rho, th) = pts[r];
            eval_unchecked(&idx[c], rho, th)
        });
        let gram = basis.transpose() * &basis;
        let gram_chol = gram.cholesky().ok_or_else(|| crate::Error::Numerical("singular Zernike Gram matrix".into()))?;
        Ok(Self { n, samples: pts.iter().map(|p| (p.0, p.1)).collect(), basis, gram_chol })
    }

    pub fn n_modes(&self) -> usize {
        self.basis.ncols()
    }

    /// `sum_j a_j Z_j` on the projector's pupil; `a` may be shorter than
    /// the mode count.
    pub fn synthesize(&self, a: &[f64]) -> Result<Array2<f64>> {
        if a.len() > self.n_modes() {
            return domain(format!("{} coefficients for a {}-mode projector", a.len(), self.n_modes()));
        }
        let mut phase = Array2::zeros((self.n, self.n));
        for (k, &(i, j)) in self.samples.iter().enumerate() {
            phase[[i, j]] = a.iter().enumerate().filter(|(_, c)| **c != 0.0).map(|(m, c)| c * self.basis[(k, m)]).sum();
        }
        Ok(phase)
    }

    pub fn project(&self, phase: &Array2<f64>) -> Result<ZernikeVector> {
        if phase.dim() != (self.n, self.n) {
            return domain("phase grid does not match projector grid");
        }
        let v = DVector::from_iterator(self.samples.len(), self.samples.iter().map(|&(i, k)| phase[[i, k]]));
        let rhs = self.basis.transpose() * v;
        Ok(self.gram_chol.solve(&rhs).iter().copied().collect())
    }
}

/// Which selection rule zeroes intermodal covariances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParityRule {
    /// Zero whenever `i - j` is odd, including `m = 0` pairs such as
    /// defocus and spherical aberration.
    #[default]
    OddIndexZero,
    /// Zero for odd `i - j` only when `m != 0` (sin/cos mismatch).
    AzimuthalOnly,
}

/// Intermodal covariance `E[a_i a_j]` of Kolmogorov phase over a circular
/// aperture, using the `2.2698` closed form.
pub fn noll_covariance(i: usize, j: usize, d_over_r0: f64) -> Result<f64> {
    noll_covariance_with(i, j, d_over_r0, ParityRule::OddIndexZero)
}

pub fn noll_covariance_with(i: usize, j: usize, d_over_r0: f64, rule: ParityRule) -> Result<f64> {
    if i < 2 || j < 2 {
        return domain("piston is excluded from the intermodal covariance");
    }
    let a = noll_unindex(i)?;
    let b = noll_unindex(j)?;
    if a.m != b.m {
        return Ok(0.0);
    }
    if (i + j) % 2 == 1 && (rule == ParityRule::OddIndexZero || a.m != 0) {
        return Ok(0.0);
    }
    let (ni, nj) = (a.n as f64, b.n as f64);
    let sign = if ((a.n + b.n - 2 * a.m) / 2) % 2 == 0 { 1.0 } else { -1.0 };
    let num = 2.2698 * sign * ((ni + 1.0) * (nj + 1.0)).sqrt() * gamma((ni + nj - 5.0 / 3.0) / 2.0);
    let den = gamma((ni + nj + 23.0 / 3.0) / 2.0) * gamma((nj - ni + 17.0 / 3.0) / 2.0) * gamma((ni - nj + 17.0 / 3.0) / 2.0);
    Ok(num / den * d_over_r0.powf(5.0 / 3.0))
}

/// Noll matrix over modes `1..=n_modes` (row/column 0 is piston, all zero)
/// with a cached lower-triangular factor.
#[derive(Debug, Clone)]
pub struct NollMatrix {
    pub d_over_r0: f64,
    pub sigma: DMatrix<f64>,
    pub chol: DMatrix<f64>,
    /// Set when the factorization needed eigenvalue clipping.
    pub clipped: bool,
}

impl NollMatrix {
    pub fn new(n_modes: usize, d_over_r0: f64) -> Result<Self> {
        Self::with_rule(n_modes, d_over_r0, ParityRule::default())
    }

    pub fn with_rule(n_modes: usize, d_over_r0: f64, rule: ParityRule) -> Result<Self> {
        if n_modes < 3 {
            return domain("need at least the two tilt modes");
        }
        let k = n_modes - 1;
        let mut unit = DMatrix::zeros(k, k);
        for r in 0..k {
            for c in 0..=r {
                let v = noll_covariance_with(r + 2, c + 2, 1.0, rule)?;
                unit[(r, c)] = v;
                unit[(c, r)] = v;
            }
        }
        let (lower, clipped) = factor_psd(&unit);
        let scale = d_over_r0.powf(5.0 / 3.0);
        let mut sigma = DMatrix::zeros(n_modes, n_modes);
        let mut chol = DMatrix::zeros(n_modes, n_modes);
        sigma.view_mut((1, 1), (k, k)).copy_from(&(unit * scale));
        chol.view_mut((1, 1), (k, k)).copy_from(&(lower * scale.sqrt()));
        Ok(Self { d_over_r0, sigma, chol, clipped })
    }

    pub fn n_modes(&self) -> usize {
        self.sigma.nrows()
    }

    /// Apply the factor to a vector of independent unit normals.
    pub fn mix(&self, white: &[f64]) -> ZernikeVector {
        let n = self.n_modes();
        let mut out = vec![0.0; n];
        for r in 1..n {
            out[r] = (1..=r).map(|c| self.chol[(r, c)] * white[c]).sum();
        }
        out
    }
}

/// Lower factor `L` with `L L^T = a`: Cholesky when it succeeds, otherwise
/// a symmetric eigendecomposition with negative eigenvalues set to zero
/// (reported through the flag).
pub(crate) fn factor_psd(a: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if let Some(c) = a.clone().cholesky() {
        return (c.l(), false);
    }
    let eig = a.clone().symmetric_eigen();
    let clipped = eig.eigenvalues.iter().any(|&v| v < 0.0);
    let sq = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    (&eig.eigenvectors * sq, clipped)
}

/// One zero-mean Gaussian draw with covariance `sigma`.
pub fn sample_intermodal(sigma: &NollMatrix, seed: u64) -> Flagged<ZernikeVector> {
    let mut rng = stream(seed, "intermodal", 0);
    let white: Vec<f64> = (0..sigma.n_modes()).map(|_| normal(&mut rng)).collect();
    Flagged { value: sigma.mix(&white), flagged: sigma.clipped }
}

/// Tilt coefficient [rad] to image displacement [pixels] at Nyquist pixel
/// pitch `lambda L / (2D)`.
pub fn tilt_to_pixels(a: f64) -> f64 {
    4.0 / PI * a
}
