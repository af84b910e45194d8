//! PSF dictionary and the fast image-formation path: tilt-free PSF
//! datasets, a PCA basis, coefficient projection, the scattering-form
//! spatially varying convolution `mean * I + sum_m phi_m * (beta_m . I)`,
//! and a small phase-to-space regressor from Zernike coefficients to basis
//! coefficients.

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::atmosphere::OpticalConfig;
use crate::error::{config, Error, Result};
use crate::fft::convolve_same;
use crate::optics::{crop_psf, make_pupil, psf_from_phase, Pupil, PupilShape};
use crate::rng::{normal, stream};
use crate::restore::{apply_tilt, TiltMap};
use crate::zernike::{tilt_to_pixels, NollMatrix, ZernikeProjector};
use crate::zfield::ZernikeField;

/// First Noll index carried by PSF datasets; piston and tilts are excluded.
pub const FIRST_HIGH_ORDER: usize = 4;

/// Tilt-free PSFs from Zernike coefficients on the configuration's pupil.
#[derive(Debug, Clone)]
pub struct PsfSynth {
    pub n_modes: usize,
    projector: ZernikeProjector,
    pupil: Pupil,
}

impl PsfSynth {
    pub fn new(cfg: &OpticalConfig, n_modes: usize) -> Result<Self> {
        cfg.validate()?;
        if n_modes < FIRST_HIGH_ORDER {
            return config(format!("need at least {FIRST_HIGH_ORDER} modes, got {n_modes}"));
        }
        let d = (cfg.aperture / cfg.dx).round() as usize;
        let pupil = make_pupil(PupilShape::Circle, cfg.n, d)?;
        Ok(Self { n_modes, projector: ZernikeProjector::new(cfg.n, d, n_modes)?, pupil })
    }

    /// Number of high-order inputs, `n_modes - 3`.
    pub fn inputs(&self) -> usize {
        self.n_modes - FIRST_HIGH_ORDER + 1
    }

    /// Full-grid, unit-sum PSF of the high-order coefficients
    /// (modes `4..=n_modes`).
    pub fn psf(&self, high: &[f64]) -> Result<Array2<f64>> {
        if high.len() != self.inputs() {
            return config(format!("expected {} high-order coefficients, got {}", self.inputs(), high.len()));
        }
        let mut a = vec![0.0; FIRST_HIGH_ORDER - 1];
        a.extend_from_slice(high);
        let phase = self.projector.synthesize(&a)?;
        psf_from_phase(&self.pupil, &phase, 1)
    }
}

#[derive(Debug, Clone)]
pub struct PsfSample {
    /// Coefficients of modes `4..=n_modes` [rad].
    pub coeffs: Vec<f64>,
    pub d_over_r0: f64,
    /// Cropped, unit-sum PSF.
    pub psf: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct PsfDataset {
    pub n_modes: usize,
    pub dr0_range: (f64, f64),
    pub kernel_size: usize,
    pub samples: Vec<PsfSample>,
}

/// Smallest odd window side whose centered `k x k` crop holds `fraction`
/// of a centered PSF's energy.
pub fn energy_kernel_size(psf: &Array2<f64>, fraction: f64) -> usize {
    let n = psf.nrows();
    let c = n / 2;
    let total = psf.sum();
    let mut k = 1;
    while k + 2 <= n {
        let h = k / 2;
        let inner: f64 = psf.slice(ndarray::s![c - h..c + h + 1, c - h..c + h + 1]).sum();
        if inner >= fraction * total {
            return k;
        }
        k += 2;
    }
    k
}

/// Energy share that sets the automatic kernel size.
pub const KERNEL_ENERGY: f64 = 0.999;

/// `count` tilt-free PSFs with `D/r0` uniform on `dr0_range` and Noll
/// statistics for modes `4..=n_modes`. With `kernel_size = None` the crop
/// is the smallest odd size holding [`KERNEL_ENERGY`] of the worst
/// sample's energy.
pub fn generate_psf_dataset(
    cfg: &OpticalConfig,
    n_modes: usize,
    count: usize,
    dr0_range: (f64, f64),
    kernel_size: Option<usize>,
    seed: u64,
) -> Result<PsfDataset> {
    if count == 0 {
        return config("dataset needs at least one sample");
    }
    let (lo, hi) = dr0_range;
    if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
        return config(format!("invalid D/r0 range ({lo}, {hi})"));
    }
    let synth = PsfSynth::new(cfg, n_modes)?;
    let unit = NollMatrix::new(n_modes, 1.0)?;
    let draw = |i: usize| -> Result<(Vec<f64>, f64, Array2<f64>)> {
        let mut rng = stream(seed, "psf-dataset", i as u64);
        let x = lo + (hi - lo) * rng.random::<f64>();
        let white: Vec<f64> = (0..n_modes).map(|_| normal(&mut rng)).collect();
        let scale = x.powf(5.0 / 6.0);
        let high: Vec<f64> = unit.mix(&white)[FIRST_HIGH_ORDER - 1..].iter().map(|v| v * scale).collect();
        let psf = synth.psf(&high)?;
        Ok((high, x, psf))
    };
    let n = cfg.n;
    let k = match kernel_size {
        Some(k) if k % 2 == 1 && k < n => k,
        Some(k) => return config(format!("kernel size {k} must be odd and below the grid size {n}")),
        // sizing pass; full-grid PSFs are redrawn below rather than kept
        None => (0..count)
            .into_par_iter()
            .map(|i| draw(i).map(|s| energy_kernel_size(&s.2, KERNEL_ENERGY)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .max()
            .unwrap_or(1)
            .min(n - 1),
    };
    let samples = (0..count)
        .into_par_iter()
        .map(|i| draw(i).map(|(coeffs, d_over_r0, psf)| PsfSample { coeffs, d_over_r0, psf: crop_psf(&psf, k) }))
        .collect::<Result<_>>()?;
    Ok(PsfDataset { n_modes, dr0_range, kernel_size: k, samples })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisProvenance {
    pub n_modes: usize,
    pub dr0_range: (f64, f64),
    pub samples: usize,
}

/// Principal kernels of a PSF dataset.
#[derive(Debug, Clone)]
pub struct PsfBasis {
    /// Orthonormal basis kernels `phi_m`, `K x K`.
    pub kernels: Vec<Array2<f64>>,
    pub mean: Array2<f64>,
    /// Standard deviation of each kernel's coefficient over the dataset.
    pub sigma: Vec<f64>,
    /// Every principal variance of the dataset, descending.
    pub variances: Vec<f64>,
    pub provenance: BasisProvenance,
}

impl PsfBasis {
    pub fn m(&self) -> usize {
        self.kernels.len()
    }

    pub fn kernel_size(&self) -> usize {
        self.mean.nrows()
    }

    /// Share of the dataset variance captured by the first `m` kernels.
    pub fn explained_variance(&self, m: usize) -> f64 {
        let total: f64 = self.variances.iter().sum();
        if total <= 0.0 {
            return 1.0;
        }
        self.variances.iter().take(m).sum::<f64>() / total
    }

    /// Largest `|<phi_i, phi_j> - delta_ij|`.
    pub fn gram_deviation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.m() {
            for j in 0..=i {
                let d = (&self.kernels[i] * &self.kernels[j]).sum() - if i == j { 1.0 } else { 0.0 };
                worst = worst.max(d.abs());
            }
        }
        worst
    }

    /// `mean + sum_m beta_m phi_m`.
    pub fn reconstruct(&self, beta: &[f64]) -> Array2<f64> {
        let mut out = self.mean.clone();
        for (b, k) in beta.iter().zip(&self.kernels) {
            out.scaled_add(*b, k);
        }
        out
    }

    /// The basis restricted to its first `m` kernels.
    pub fn truncated(&self, m: usize) -> PsfBasis {
        let m = m.min(self.m());
        PsfBasis {
            kernels: self.kernels[..m].to_vec(),
            mean: self.mean.clone(),
            sigma: self.sigma[..m].to_vec(),
            variances: self.variances.clone(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Top-`m` principal kernels of the mean-centered dataset PSFs.
pub fn fit_pca(dataset: &PsfDataset, m: usize) -> Result<PsfBasis> {
    let k = dataset.kernel_size;
    fit_pca_route(dataset, m, dataset.samples.len() < k * k)
}

fn fit_pca_route(dataset: &PsfDataset, m: usize, via_gram: bool) -> Result<PsfBasis> {
    let p = dataset.samples.len();
    if m == 0 || m > p {
        return config(format!("cannot fit {m} components to {p} samples"));
    }
    let k = dataset.kernel_size;
    let dim = k * k;
    if m > dim {
        return config(format!("cannot fit {m} components to {k}x{k} kernels"));
    }
    let mut x = DMatrix::from_fn(p, dim, |r, c| dataset.samples[r].psf[[c / k, c % k]]);
    let mean: Vec<f64> = (0..dim).map(|c| x.column(c).sum() / p as f64).collect();
    for (c, mu) in mean.iter().enumerate() {
        x.column_mut(c).add_scalar_mut(-mu);
    }
    // principal directions: eigenvectors of X^T X, through the smaller Gram
    // matrix when there are fewer samples than pixels
    let (values, mut dirs): (Vec<f64>, Vec<Vec<f64>>) = if via_gram {
        let eig = (&x * x.transpose()).symmetric_eigen();
        let order = descending(eig.eigenvalues.as_slice());
        let tol = eig.eigenvalues.max().max(0.0) * 1e-12 * p as f64;
        let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let dirs = order
            .iter()
            .take(m)
            .filter(|&&i| eig.eigenvalues[i] > tol)
            .map(|&i| {
                let v = x.transpose() * eig.eigenvectors.column(i);
                let norm = v.norm();
                v.iter().map(|e| e / norm).collect()
            })
            .collect();
        (values, dirs)
    } else {
        let eig = (x.transpose() * &x).symmetric_eigen();
        let order = descending(eig.eigenvalues.as_slice());
        let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let dirs = order.iter().take(m).map(|&i| eig.eigenvectors.column(i).iter().copied().collect()).collect();
        (values, dirs)
    };
    complete_orthonormal(&mut dirs, m, dim);
    for d in dirs.iter_mut() {
        let lead = d.iter().copied().fold(0.0, |a: f64, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            d.iter_mut().for_each(|e| *e = -*e);
        }
    }
    let variances: Vec<f64> = values.iter().map(|v| v / p as f64).collect();
    let kernels: Vec<Array2<f64>> = dirs.into_iter().map(|d| Array2::from_shape_vec((k, k), d).expect("kernel shape")).collect();
    let sigma = (0..m).map(|i| variances.get(i).copied().unwrap_or(0.0).sqrt().max(f64::MIN_POSITIVE)).collect();
    Ok(PsfBasis {
        kernels,
        mean: Array2::from_shape_vec((k, k), mean).expect("kernel shape"),
        sigma,
        variances,
        provenance: BasisProvenance { n_modes: dataset.n_modes, dr0_range: dataset.dr0_range, samples: p },
    })
}

fn descending(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}

/// Re-orthonormalize `dirs` (modified Gram-Schmidt, twice) and extend it
/// to `m` vectors with unit vectors when the data has fewer directions.
fn complete_orthonormal(dirs: &mut Vec<Vec<f64>>, m: usize, dim: usize) {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut candidates: Vec<Vec<f64>> = std::mem::take(dirs);
    candidates.extend((0..dim).map(|i| {
        let mut e = vec![0.0; dim];
        e[i] = 1.0;
        e
    }));
    for mut v in candidates {
        if out.len() == m {
            break;
        }
        for _ in 0..2 {
            for u in &out {
                let c = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            out.push(v);
        }
    }
    *dirs = out;
}

/// `beta_m = <psf - mean, phi_m>`.
pub fn project(psf: &Array2<f64>, basis: &PsfBasis) -> Result<Vec<f64>> {
    if psf.dim() != basis.mean.dim() {
        return config(format!("PSF is {:?}, basis kernels are {:?}", psf.dim(), basis.mean.dim()));
    }
    let centered = psf - &basis.mean;
    Ok(basis.kernels.iter().map(|k| (&centered * k).sum()).collect())
}

/// Clip negative kernel values and rescale to unit sum; returns the kernel
/// and the clipped share of its absolute mass.
pub fn clip_renormalize(kernel: &Array2<f64>) -> (Array2<f64>, f64) {
    let neg: f64 = kernel.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    let abs: f64 = kernel.iter().map(|v| v.abs()).sum();
    let mut out = kernel.mapv(|v| v.max(0.0));
    let s = out.sum();
    if s > 0.0 {
        out.mapv_inplace(|v| v / s);
    }
    (out, if abs > 0.0 { neg / abs } else { 0.0 })
}

/// Scattering-form spatially varying blur with per-pixel kernels
/// `mean + sum_m beta_m(u) phi_m`:
/// `mean * I + sum_m phi_m * (beta_m . I)`, zero outside the image.
pub fn approx_sv_convolve(image: &Array2<f64>, beta: &[Array2<f64>], basis: &PsfBasis) -> Result<Array2<f64>> {
    if beta.len() > basis.m() {
        return config(format!("{} coefficient fields for a {}-kernel basis", beta.len(), basis.m()));
    }
    if let Some(b) = beta.iter().find(|b| b.dim() != image.dim()) {
        return config(format!("coefficient field is {:?}, image is {:?}", b.dim(), image.dim()));
    }
    let terms: Vec<Array2<f64>> = beta.par_iter().zip(basis.kernels.par_iter()).map(|(b, k)| convolve_same(&(b * image), k)).collect();
    let mut out = convolve_same(image, &basis.mean);
    for t in &terms {
        out += t;
    }
    Ok(out)
}

/// Per-pixel basis coefficients of a Zernike field by direct projection of
/// each pixel's tilt-free PSF.
pub fn beta_field_projected(field: &ZernikeField, synth: &PsfSynth, basis: &PsfBasis) -> Result<Vec<Array2<f64>>> {
    let (h, w) = field.dim();
    let k = basis.kernel_size();
    let per_pixel: Vec<Vec<f64>> = (0..h * w)
        .into_par_iter()
        .map(|i| {
            let a = field.vector_at(i / w, i % w);
            let high = high_order(&a, synth.n_modes);
            project(&crop_psf(&synth.psf(&high)?, k), basis)
        })
        .collect::<Result<_>>()?;
    Ok(unpack_fields(&per_pixel, h, w, basis.m()))
}

/// Modes `4..=n` of a full coefficient vector, zero-padded.
pub fn high_order(a: &[f64], n_modes: usize) -> Vec<f64> {
    (FIRST_HIGH_ORDER..=n_modes).map(|j| a.get(j - 1).copied().unwrap_or(0.0)).collect()
}

fn unpack_fields(per_pixel: &[Vec<f64>], h: usize, w: usize, m: usize) -> Vec<Array2<f64>> {
    (0..m).map(|k| Array2::from_shape_fn((h, w), |(r, c)| per_pixel[r * w + c][k])).collect()
}

/// Hidden-layer nonlinearity of the regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn slope(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Where per-pixel basis coefficients come from.
#[derive(Clone, Copy)]
pub enum BetaSource<'a> {
    /// Form each pixel's PSF and project it (reference path).
    Projection(&'a PsfSynth),
    /// Regress coefficients from the Zernike vector.
    P2S(&'a P2SModel),
}

/// Per-pixel tilt map of a Zernike field: `a2` moves along columns, `a3`
/// along rows.
pub fn field_tilts(field: &ZernikeField) -> TiltMap {
    TiltMap { dy: field.modes[2].mapv(tilt_to_pixels), dx: field.modes[1].mapv(tilt_to_pixels) }
}

/// One frame of the propagation-free simulator: warp the ideal image by
/// the field's tilts, blur with per-pixel kernels from the basis, and
/// rescale to the ideal image's mean.
pub fn zernike_frame(ideal: &Array2<f64>, field: &ZernikeField, basis: &PsfBasis, source: BetaSource) -> Result<Array2<f64>> {
    if ideal.dim() != field.dim() {
        return config(format!("image is {:?}, Zernike field is {:?}", ideal.dim(), field.dim()));
    }
    let warped = apply_tilt(ideal, &field_tilts(field))?;
    let beta = match source {
        BetaSource::Projection(synth) => beta_field_projected(field, synth, basis)?,
        BetaSource::P2S(model) => {
            if model.outputs() > basis.m() {
                return config(format!("regressor predicts {} coefficients for a {}-kernel basis", model.outputs(), basis.m()));
            }
            beta_field_p2s(field, model)
        }
    };
    let mut out = approx_sv_convolve(&warped, &beta, basis)?;
    let (want, got) = (ideal.sum(), out.sum());
    if got != 0.0 && want != 0.0 {
        out *= want / got;
    }
    Ok(out)
}

/// Training settings of the phase-to-space regressor.
#[derive(Debug, Clone)]
pub struct P2SHyper {
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// The learning rate is halved after every `halve_every` epochs.
    pub halve_every: usize,
    /// Share of the pairs held out for validation.
    pub validation: f64,
    pub seed: u64,
}

impl Default for P2SHyper {
    fn default() -> Self {
        Self { hidden: vec![34, 100], activation: Activation::Tanh, epochs: 200, batch: 16, learning_rate: 1.0, halve_every: 50, validation: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs x inputs`.
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Dense {
    fn forward(&self, x: &[f64], y: &mut [f64]) {
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.w[o * self.inputs..(o + 1) * self.inputs];
            *yo = self.b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// Fully connected network from standardized high-order Zernike
/// coefficients to basis coefficients scaled by the leading basis
/// deviation.
#[derive(Debug, Clone)]
pub struct P2SModel {
    layers: Vec<Dense>,
    pub activation: Activation,
    pub input_scale: Vec<f64>,
    pub output_scale: f64,
    /// Mean `|beta_hat - beta|` over mean `|beta|` on the held-out pairs.
    pub validation_error: f64,
    /// Mean squared (scaled) training loss after each epoch.
    pub loss_history: Vec<f64>,
}

impl P2SModel {
    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.inputs()];
        w.extend(self.layers.iter().map(|l| l.outputs));
        w
    }

    /// Every weight and bias, layer by layer.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(&l.b).copied()).collect()
    }

    /// Rebuild from [`P2SModel::widths`] and [`P2SModel::parameters`].
    pub fn from_parameters(widths: &[usize], params: &[f64], activation: Activation, input_scale: Vec<f64>, output_scale: f64, validation_error: f64) -> Result<Self> {
        if widths.len() < 2 || input_scale.len() != widths[0] {
            return Err(Error::Format("P2S model shape mismatch".into()));
        }
        let mut layers = Vec::new();
        let mut at = 0;
        for w in widths.windows(2) {
            let (i, o) = (w[0], w[1]);
            let need = i * o + o;
            if at + need > params.len() {
                return Err(Error::Format("P2S parameter block too short".into()));
            }
            layers.push(Dense { inputs: i, outputs: o, w: params[at..at + i * o].to_vec(), b: params[at + i * o..at + need].to_vec() });
            at += need;
        }
        if at != params.len() {
            return Err(Error::Format("P2S parameter block too long".into()));
        }
        Ok(Self { layers, activation, input_scale, output_scale, validation_error, loss_history: Vec::new() })
    }

    fn forward_all(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for (i, l) in self.layers.iter().enumerate() {
            let mut y = vec![0.0; l.outputs];
            l.forward(acts.last().unwrap(), &mut y);
            if i + 1 < self.layers.len() {
                y.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            acts.push(y);
        }
        acts
    }
}

/// Regressor input of a full coefficient vector (modes `1..=n_modes`):
/// every mode except the two tilts, so `n_modes - 2` values.
pub fn p2s_input(a: &[f64], n_modes: usize) -> Vec<f64> {
    (1..=n_modes).filter(|&j| j != 2 && j != 3).map(|j| a.get(j - 1).copied().unwrap_or(0.0)).collect()
}

/// Basis coefficients predicted for a tilt-excluded coefficient vector
/// (see [`p2s_input`]).
pub fn p2s_infer(model: &P2SModel, a: &[f64]) -> Vec<f64> {
    let x: Vec<f64> = a.iter().zip(&model.input_scale).map(|(v, s)| v / s).collect();
    let acts = model.forward_all(&x);
    acts.last().unwrap().iter().map(|v| v * model.output_scale).collect()
}

/// Per-pixel basis coefficients of a Zernike field through the regressor.
pub fn beta_field_p2s(field: &ZernikeField, model: &P2SModel) -> Vec<Array2<f64>> {
    let (h, w) = field.dim();
    let n_modes = model.inputs() + 2;
    let per_pixel: Vec<Vec<f64>> = (0..h * w).into_par_iter().map(|i| p2s_infer(model, &p2s_input(&field.vector_at(i / w, i % w), n_modes))).collect();
    unpack_fields(&per_pixel, h, w, model.outputs())
}

/// Mini-batch SGD on the mean squared error between predicted and
/// projected basis coefficients. Deterministic: initialization and batch
/// order come from `hyper.seed`.
pub fn p2s_train(dataset: &PsfDataset, basis: &PsfBasis, hyper: &P2SHyper) -> Result<P2SModel> {
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = dataset
        .samples
        .par_iter()
        .map(|s| {
            let mut a = vec![0.0; FIRST_HIGH_ORDER - 1];
            a.extend_from_slice(&s.coeffs);
            project(&s.psf, basis).map(|b| (p2s_input(&a, dataset.n_modes), b))
        })
        .collect::<Result<_>>()?;
    p2s_train_pairs(&pairs, hyper)
}

/// [`p2s_train`] on precomputed `(coefficients, beta)` pairs.
pub fn p2s_train_pairs(pairs: &[(Vec<f64>, Vec<f64>)], hyper: &P2SHyper) -> Result<P2SModel> {
    let n_val = ((pairs.len() as f64) * hyper.validation).round() as usize;
    if pairs.len() < 2 || n_val == 0 || n_val >= pairs.len() {
        return config("P2S training needs at least one training and one validation pair");
    }
    if hyper.batch == 0 || hyper.epochs == 0 {
        return config("batch size and epoch count must be positive");
    }
    let (val, train) = pairs.split_at(n_val);
    let n_in = train[0].0.len();
    let n_out = train[0].1.len();
    let input_scale: Vec<f64> = (0..n_in)
        .map(|i| {
            let ms = train.iter().map(|p| p.0[i] * p.0[i]).sum::<f64>() / train.len() as f64;
            if ms > 0.0 {
                ms.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let output_scale = {
        let ms = train.iter().map(|p| p.1.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / (train.len() * n_out) as f64;
        if ms > 0.0 {
            ms.sqrt()
        } else {
            1.0
        }
    };
    let scale = |p: &(Vec<f64>, Vec<f64>)| -> (Vec<f64>, Vec<f64>) {
        (p.0.iter().zip(&input_scale).map(|(v, s)| v / s).collect(), p.1.iter().map(|v| v / output_scale).collect())
    };
    let data: Vec<(Vec<f64>, Vec<f64>)> = train.iter().map(scale).collect();

    let mut widths = vec![n_in];
    widths.extend(&hyper.hidden);
    widths.push(n_out);
    let mut rng = stream(hyper.seed, "p2s-init", 0);
    let layers = widths
        .windows(2)
        .map(|w| {
            let (i, o) = (w[0], w[1]);
            let lim = (6.0 / (i + o) as f64).sqrt();
            Dense { inputs: i, outputs: o, w: (0..i * o).map(|_| lim * (2.0 * rng.random::<f64>() - 1.0)).collect(), b: vec![0.0; o] }
        })
        .collect();
    let mut model = P2SModel { layers, activation: hyper.activation, input_scale: input_scale.clone(), output_scale, validation_error: f64::NAN, loss_history: Vec::new() };

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut lr = hyper.learning_rate;
    for epoch in 0..hyper.epochs {
        if epoch > 0 && hyper.halve_every > 0 && epoch % hyper.halve_every == 0 {
            lr *= 0.5;
        }
        order.shuffle(&mut stream(hyper.seed, "p2s-shuffle", epoch as u64));
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(hyper.batch).enumerate() {
            let mut grads: Vec<(Vec<f64>, Vec<f64>)> = model.layers.iter().map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()])).collect();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (x, y) = &data[i];
                let acts = model.forward_all(x);
                let out = acts.last().unwrap();
                let mut delta: Vec<f64> = out.iter().zip(y).map(|(o, t)| o - t).collect();
                batch_loss += delta.iter().map(|d| d * d).sum::<f64>() / n_out as f64;
                // d(mean over outputs of squared error)/d(out) = 2 (out - y) / n_out
                delta.iter_mut().for_each(|d| *d *= 2.0 / n_out as f64);
                for li in (0..model.layers.len()).rev() {
                    let l = &model.layers[li];
                    let input = &acts[li];
                    let (gw, gb) = &mut grads[li];
                    for o in 0..l.outputs {
                        gb[o] += delta[o];
                        let row = &mut gw[o * l.inputs..(o + 1) * l.inputs];
                        row.iter_mut().zip(input).for_each(|(g, a)| *g += delta[o] * a);
                    }
                    if li > 0 {
                        let mut prev = vec![0.0; l.inputs];
                        for o in 0..l.outputs {
                            let row = &l.w[o * l.inputs..(o + 1) * l.inputs];
                            prev.iter_mut().zip(row).for_each(|(p, w)| *p += delta[o] * w);
                        }
                        let act = model.activation;
                        prev.iter_mut().zip(input).for_each(|(p, a)| *p *= act.slope(*a));
                        delta = prev;
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!("P2S loss became non-finite at epoch {epoch}, batch {bi} (learning rate {lr})")));
            }
            epoch_loss += batch_loss;
            let step = lr / chunk.len() as f64;
            for (l, (gw, gb)) in model.layers.iter_mut().zip(&grads) {
                l.w.iter_mut().zip(gw).for_each(|(w, g)| *w -= step * g);
                l.b.iter_mut().zip(gb).for_each(|(b, g)| *b -= step * g);
            }
        }
        model.loss_history.push(epoch_loss / data.len() as f64);
    }
    model.validation_error = relative_beta_error(&model, val);
    Ok(model)
}

/// Mean `|beta_hat - beta|` over mean `|beta|`.
pub fn relative_beta_error(model: &P2SModel, pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (mut err, mut tot) = (0.0, 0.0);
    for (a, b) in pairs {
        let p = p2s_infer(model, a);
        err += norm(&p.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());
        tot += norm(b);
    }
    if tot > 0.0 {
        err / tot
    } else {
        0.0
    }
}
