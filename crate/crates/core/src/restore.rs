//! Classical restoration: tilt and blur operators and their ordering,
//! lucky-imaging sharpness and fusion, reference frames, and blind
//! deconvolution with a kernel prior on PSF-basis coefficients.

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{config, domain, Error, Result};
use crate::fft::convolve_same;
use crate::optics::{sv_convolve_scatter, Boundary, KernelField};
use crate::psfbasis::{clip_renormalize, PsfBasis};
use crate::rng::derive_seed;
use crate::zernike::{sample_intermodal, NollMatrix};

/// `T` frames of equal shape.
#[derive(Debug, Clone)]
pub struct FrameStack {
    pub frames: Vec<Array2<f64>>,
}

impl FrameStack {
    pub fn new(frames: Vec<Array2<f64>>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return config("frame stack is empty");
        };
        let dim = first.dim();
        if frames.iter().any(|f| f.dim() != dim) {
            return config("frames differ in shape");
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.frames[0].dim()
    }

    /// `size x size` patch of frame `t` with top-left corner `(r, c)`.
    pub fn patch(&self, t: usize, r: usize, c: usize, size: usize) -> ArrayView2<'_, f64> {
        self.frames[t].slice(s![r..r + size, c..c + size])
    }
}

/// Per-pixel displacement in pixels (`dy` along rows, `dx` along columns).
#[derive(Debug, Clone)]
pub struct TiltMap {
    pub dy: Array2<f64>,
    pub dx: Array2<f64>,
}

impl TiltMap {
    /// Checks shapes, finiteness and `|t| <= max_shift`.
    pub fn new(dy: Array2<f64>, dx: Array2<f64>, max_shift: f64) -> Result<Self> {
        if dy.dim() != dx.dim() {
            return config("tilt components differ in shape");
        }
        for (a, b) in dy.iter().zip(dx.iter()) {
            if !a.is_finite() || !b.is_finite() {
                return domain("tilt map has non-finite entries");
            }
            if a.hypot(*b) > max_shift {
                return domain(format!("tilt {} exceeds the bound {max_shift}", a.hypot(*b)));
            }
        }
        Ok(Self { dy, dx })
    }

    /// The same shift everywhere.
    pub fn uniform(h: usize, w: usize, dy: f64, dx: f64) -> Self {
        Self { dy: Array2::from_elem((h, w), dy), dx: Array2::from_elem((h, w), dx) }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.dy.dim()
    }
}

/// Forward warp: every pixel's value is splatted bilinearly onto the four
/// pixels around its displaced position. Splat weights sum to one, so flux
/// is conserved except for what lands outside the image.
pub fn apply_tilt(image: &Array2<f64>, tilt: &TiltMap) -> Result<Array2<f64>> {
    if image.dim() != tilt.dim() {
        return config(format!("image is {:?}, tilt map is {:?}", image.dim(), tilt.dim()));
    }
    let (h, w) = image.dim();
    let mut out = Array2::zeros((h, w));
    for ((r, c), &v) in image.indexed_iter() {
        if v == 0.0 {
            continue;
        }
        let y = r as f64 + tilt.dy[[r, c]];
        let x = c as f64 + tilt.dx[[r, c]];
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        for (oy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (ox, wx) in [(0, 1.0 - fx), (1, fx)] {
                let wgt = wy * wx;
                if wgt == 0.0 {
                    continue;
                }
                let (ty, tx) = (y0 as isize + oy, x0 as isize + ox);
                if ty >= 0 && tx >= 0 && (ty as usize) < h && (tx as usize) < w {
                    out[[ty as usize, tx as usize]] += v * wgt;
                }
            }
        }
    }
    Ok(out)
}

/// Spatially varying blur in scattering form, zero outside the image.
pub fn apply_blur<K: KernelField + ?Sized>(image: &Array2<f64>, kernels: &K) -> Array2<f64> {
    sv_convolve_scatter(image, kernels, Boundary::Zero)
}

/// Matrix of a linear image operator on `h x w` images, column `j` being
/// the response to the unit image at raster index `j`.
pub fn operator_matrix<F: Fn(&Array2<f64>) -> Array2<f64>>(h: usize, w: usize, op: F) -> Array2<f64> {
    let n = h * w;
    let mut m = Array2::zeros((n, n));
    for j in 0..n {
        let mut e = Array2::zeros((h, w));
        e[[j / w, j % w]] = 1.0;
        let y = op(&e);
        for (i, v) in y.iter().enumerate() {
            m[[i, j]] = *v;
        }
    }
    m
}

/// Tilt-then-blur operator built from its definition for integer shifts:
/// the pixel at `u_j` moves to `u_k = u_j + t_j` and is spread there by
/// the kernel attached to `u_k`. Pixels leaving the image are dropped.
pub fn tilt_then_blur_matrix<K: KernelField + ?Sized>(h: usize, w: usize, shift: [isize; 2], kernels: &K) -> Array2<f64> {
    let n = h * w;
    let (kh, kw) = kernels.kernel_dim();
    let mut m = Array2::zeros((n, n));
    for j in 0..n {
        let (r, c) = ((j / w) as isize + shift[0], (j % w) as isize + shift[1]);
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            continue;
        }
        let k = kernels.kernel_at(r as usize, c as usize);
        for a in 0..kh {
            for b in 0..kw {
                let (y, x) = (r + a as isize - (kh / 2) as isize, c + b as isize - (kw / 2) as isize);
                if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                    m[[y as usize * w + x as usize, j]] += k[[a, b]];
                }
            }
        }
    }
    m
}

/// Anisotropic total variation with forward differences; the difference
/// past the last row or column is zero (replicate boundary).
pub fn sharpness_tv(patch: &ArrayView2<f64>) -> f64 {
    let (h, w) = patch.dim();
    let mut tv = 0.0;
    for r in 0..h {
        for c in 0..w {
            let v = patch[[r, c]];
            if c + 1 < w {
                tv += (patch[[r, c + 1]] - v).abs();
            }
            if r + 1 < h {
                tv += (patch[[r + 1, c]] - v).abs();
            }
        }
    }
    tv
}

/// Population variance of the patch intensities.
pub fn sharpness_var(patch: &ArrayView2<f64>) -> f64 {
    let n = patch.len() as f64;
    let mean = patch.sum() / n;
    patch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Top-left patch offsets along one axis: every `stride`, plus one flush
/// with the far edge.
fn patch_starts(n: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=n - size).step_by(stride.max(1)).collect();
    if *v.last().unwrap() != n - size {
        v.push(n - size);
    }
    v
}

fn check_patch(dim: (usize, usize), patch: usize, stride: usize) -> Result<()> {
    if patch == 0 || stride == 0 || patch > dim.0 || patch > dim.1 {
        return config(format!("patch {patch} with stride {stride} does not fit {dim:?}"));
    }
    Ok(())
}

/// Accumulates patches and averages where they overlap.
struct Assembler {
    sum: Array2<f64>,
    count: Array2<f64>,
}

impl Assembler {
    fn new(dim: (usize, usize)) -> Self {
        Self { sum: Array2::zeros(dim), count: Array2::zeros(dim) }
    }

    fn add(&mut self, r: usize, c: usize, p: &Array2<f64>) {
        let (ph, pw) = p.dim();
        let mut s = self.sum.slice_mut(s![r..r + ph, c..c + pw]);
        s += p;
        self.count.slice_mut(s![r..r + ph, c..c + pw]).mapv_inplace(|v| v + 1.0);
    }

    fn finish(self) -> Array2<f64> {
        self.sum / self.count
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceMethod {
    TemporalMean,
    /// Patch-wise weighted average over time around frame `anchor`, each
    /// frame contributing its best-matching patch within `search` pixels
    /// with weight `exp(-beta * d)`, `d` being the match's mean squared
    /// difference. `beta = None` uses the inverse of the patch's mean
    /// match distance.
    NonLocal { anchor: usize, patch: usize, stride: usize, search: usize, beta: Option<f64> },
}

impl ReferenceMethod {
    pub fn nonlocal(stack: &FrameStack) -> Self {
        ReferenceMethod::NonLocal { anchor: stack.len() / 2, patch: 16, stride: 8, search: 8, beta: None }
    }
}

pub fn reference_frame(stack: &FrameStack, method: ReferenceMethod) -> Result<Array2<f64>> {
    match method {
        ReferenceMethod::TemporalMean => {
            let mut acc = Array2::zeros(stack.dim());
            for f in &stack.frames {
                acc += f;
            }
            Ok(acc / stack.len() as f64)
        }
        ReferenceMethod::NonLocal { anchor, patch, stride, search, beta } => {
            if stack.len() < 2 {
                return config("non-local reference needs at least two frames");
            }
            if anchor >= stack.len() {
                return config(format!("anchor frame {anchor} out of range"));
            }
            let (h, w) = stack.dim();
            check_patch((h, w), patch, stride)?;
            let rows = patch_starts(h, patch, stride);
            let cols = patch_starts(w, patch, stride);
            let tiles: Vec<(usize, usize)> = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
            let patches: Vec<Array2<f64>> = tiles
                .par_iter()
                .map(|&(r, c)| {
                    let target = stack.patch(anchor, r, c, patch);
                    let matches: Vec<(f64, ArrayView2<f64>)> = (0..stack.len()).map(|t| best_match(stack, t, &target, r, c, patch, search)).collect();
                    let others: Vec<f64> = matches.iter().enumerate().filter(|(t, _)| *t != anchor).map(|(_, m)| m.0).collect();
                    let mean_d = others.iter().sum::<f64>() / others.len() as f64;
                    let b = beta.unwrap_or(if mean_d > 0.0 { 1.0 / mean_d } else { 0.0 });
                    let mut acc = Array2::zeros((patch, patch));
                    let mut total = 0.0;
                    for (d, p) in &matches {
                        let wgt = (-b * d).exp();
                        acc.scaled_add(wgt, p);
                        total += wgt;
                    }
                    acc / total
                })
                .collect();
            let mut asm = Assembler::new((h, w));
            for (&(r, c), p) in tiles.iter().zip(&patches) {
                asm.add(r, c, p);
            }
            Ok(asm.finish())
        }
    }
}

/// Best match of `target` in frame `t` within `search` pixels of `(r, c)`:
/// mean squared difference and the matching patch. Ties keep the smallest
/// displacement.
fn best_match<'a>(stack: &'a FrameStack, t: usize, target: &ArrayView2<f64>, r: usize, c: usize, size: usize, search: usize) -> (f64, ArrayView2<'a, f64>) {
    let (h, w) = stack.dim();
    let mut best = (f64::INFINITY, usize::MAX, stack.patch(t, r, c, size));
    let n = (size * size) as f64;
    for rr in r.saturating_sub(search)..=(r + search).min(h - size) {
        for cc in c.saturating_sub(search)..=(c + search).min(w - size) {
            let p = stack.patch(t, rr, cc, size);
            let d = p.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
            let dist = rr.abs_diff(r).max(cc.abs_diff(c));
            if d < best.0 || (d == best.0 && dist < best.1) {
                best = (d, dist, p);
            }
        }
    }
    (best.0, best.2)
}

/// Fused image and the number of patches whose weights all underflowed
/// and fell back to the temporal mean.
#[derive(Debug, Clone)]
pub struct Fused {
    pub image: Array2<f64>,
    pub fallback_patches: usize,
}

/// Per-patch log weights `-alpha1 ||P_t - R||^2 + alpha2 TV(P_t)`.
fn fusion_log_weights(stack: &FrameStack, reference: &Array2<f64>, alpha: (f64, f64), r: usize, c: usize, patch: usize) -> Vec<f64> {
    let rp = reference.slice(s![r..r + patch, c..c + patch]);
    (0..stack.len())
        .map(|t| {
            let p = stack.patch(t, r, c, patch);
            let dev: f64 = p.iter().zip(rp.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            -alpha.0 * dev + alpha.1 * sharpness_tv(&p)
        })
        .collect()
}

/// Normalized fusion weights of one patch, or `None` when every raw weight
/// underflows.
fn normalize_log_weights(logw: &[f64]) -> Option<Vec<f64>> {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || max < f64::MIN_POSITIVE.ln() {
        return None;
    }
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    Some(w.into_iter().map(|v| v / s).collect())
}

/// Fusion weights of every frame for the patch at `(r, c)`.
pub fn fusion_weights(stack: &FrameStack, reference: &Array2<f64>, alpha: (f64, f64), r: usize, c: usize, patch: usize) -> Option<Vec<f64>> {
    normalize_log_weights(&fusion_log_weights(stack, reference, alpha, r, c, patch))
}

/// Default `(alpha1, alpha2)`: each exponent term scaled to unit sample
/// variance over all patches and frames.
pub fn default_alphas(stack: &FrameStack, reference: &Array2<f64>, patch: usize, stride: usize) -> Result<(f64, f64)> {
    let (h, w) = stack.dim();
    check_patch((h, w), patch, stride)?;
    let (mut dev, mut tv) = (Vec::new(), Vec::new());
    for &r in &patch_starts(h, patch, stride) {
        for &c in &patch_starts(w, patch, stride) {
            let rp = reference.slice(s![r..r + patch, c..c + patch]);
            for t in 0..stack.len() {
                let p = stack.patch(t, r, c, patch);
                dev.push(p.iter().zip(rp.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
                tv.push(sharpness_tv(&p));
            }
        }
    }
    let inv_sd = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        if var > 0.0 {
            1.0 / var.sqrt()
        } else {
            0.0
        }
    };
    Ok((inv_sd(&dev), inv_sd(&tv)))
}

/// Patch-wise weighted temporal average with geometric-consistency and
/// sharpness weights, overlap-averaged.
pub fn lucky_fuse(stack: &FrameStack, reference: &Array2<f64>, alpha1: f64, alpha2: f64, patch: usize, stride: usize) -> Result<Fused> {
    let (h, w) = stack.dim();
    if reference.dim() != (h, w) {
        return config("reference frame shape differs from the stack");
    }
    check_patch((h, w), patch, stride)?;
    let rows = patch_starts(h, patch, stride);
    let cols = patch_starts(w, patch, stride);
    let tiles: Vec<(usize, usize)> = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    let fused: Vec<(Array2<f64>, bool)> = tiles
        .par_iter()
        .map(|&(r, c)| {
            let (weights, fallback) = match fusion_weights(stack, reference, (alpha1, alpha2), r, c, patch) {
                Some(wts) => (wts, false),
                None => (vec![1.0 / stack.len() as f64; stack.len()], true),
            };
            let mut acc = Array2::zeros((patch, patch));
            for (t, wgt) in weights.iter().enumerate() {
                acc.scaled_add(*wgt, &stack.patch(t, r, c, patch));
            }
            (acc, fallback)
        })
        .collect();
    let mut asm = Assembler::new((h, w));
    let mut fallback_patches = 0;
    for (&(r, c), (p, fb)) in tiles.iter().zip(&fused) {
        asm.add(r, c, p);
        fallback_patches += *fb as usize;
    }
    Ok(Fused { image: asm.finish(), fallback_patches })
}

/// Whether `sum_{j>=2} a_j^2 <= tau` (piston at index 0 is ignored).
pub fn lucky_event(a: &[f64], tau: f64) -> Result<bool> {
    if !(tau > 0.0) {
        return domain(format!("lucky threshold must be positive, got {tau}"));
    }
    Ok(a.iter().skip(1).map(|v| v * v).sum::<f64>() <= tau)
}

/// Share of `draws` intermodal samples that are lucky events.
pub fn lucky_rate(sigma: &NollMatrix, tau: f64, draws: usize, seed: u64) -> Result<f64> {
    if draws == 0 {
        return config("need at least one draw");
    }
    let hits = (0..draws)
        .into_par_iter()
        .map(|i| lucky_event(&sample_intermodal(sigma, derive_seed(seed, "lucky", i as u64)).value, tau).map(|b| b as usize))
        .sum::<Result<usize>>()?;
    Ok(hits as f64 / draws as f64)
}

/// Settings of [`blind_deconvolve`].
#[derive(Debug, Clone)]
pub struct DeconvParams {
    /// Weight of the image TV prior.
    pub lambda: f64,
    /// Weight of the kernel prior `sum |w_l| / sigma_l`.
    pub gamma: f64,
    pub outer: usize,
    /// Gradient steps per image update.
    pub inner: usize,
    /// Proximal-gradient steps per kernel update.
    pub kernel_steps: usize,
    /// Smoothing of the TV prior, `sqrt(d^2 + eps^2)`.
    pub tv_eps: f64,
    /// Initial kernel coefficients; zeros (the mean kernel) when `None`.
    pub w0: Option<Vec<f64>>,
}

impl Default for DeconvParams {
    fn default() -> Self {
        Self { lambda: 1e-3, gamma: 1e-4, outer: 30, inner: 10, kernel_steps: 1, tv_eps: 1e-2, w0: None }
    }
}

#[derive(Debug, Clone)]
pub struct Deconvolved {
    pub image: Array2<f64>,
    pub w: Vec<f64>,
    /// `mean + sum w_l phi_l`, clipped at zero and renormalized.
    pub kernel: Array2<f64>,
    /// Objective after initialization and after every outer iteration.
    pub objective: Vec<f64>,
}

/// Allowed objective rise per step.
pub const OBJECTIVE_SLACK: f64 = 1e-9;

fn flip(k: &Array2<f64>) -> Array2<f64> {
    let (h, w) = k.dim();
    Array2::from_shape_fn((h, w), |(r, c)| k[[h - 1 - r, w - 1 - c]])
}

/// Smoothed anisotropic TV (forward differences, replicate boundary) and
/// its gradient.
fn smooth_tv(j: &Array2<f64>, eps: f64) -> (f64, Array2<f64>) {
    let (h, w) = j.dim();
    let mut val = 0.0;
    let mut grad = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let v = j[[r, c]];
            for (nr, nc) in [(r, c + 1), (r + 1, c)] {
                if nr < h && nc < w {
                    let d = j[[nr, nc]] - v;
                    let s = (d * d + eps * eps).sqrt();
                    val += s - eps;
                    let g = d / s;
                    grad[[nr, nc]] += g;
                    grad[[r, c]] -= g;
                }
            }
        }
    }
    (val, grad)
}

struct DeconvProblem<'a> {
    observed: &'a Array2<f64>,
    basis: &'a PsfBasis,
    p: &'a DeconvParams,
}

impl DeconvProblem<'_> {
    fn kernel(&self, w: &[f64]) -> Array2<f64> {
        self.basis.reconstruct(w)
    }

    fn data(&self, j: &Array2<f64>, h: &Array2<f64>) -> (f64, Array2<f64>) {
        let res = convolve_same(j, h) - self.observed;
        (0.5 * res.mapv(|v| v * v).sum(), res)
    }

    fn prior_w(&self, w: &[f64]) -> f64 {
        self.p.gamma * w.iter().zip(&self.basis.sigma).map(|(a, s)| a.abs() / s).sum::<f64>()
    }

    fn objective(&self, j: &Array2<f64>, w: &[f64]) -> f64 {
        let (d, _) = self.data(j, &self.kernel(w));
        d + self.p.lambda * smooth_tv(j, self.p.tv_eps).0 + self.prior_w(w)
    }
}

/// Alternating minimization of
/// `0.5 ||I - h(w) * J||^2 + lambda TV(J) + gamma sum |w_l| / sigma_l`
/// with `h(w) = mean + sum w_l phi_l`. The image step is gradient descent
/// on the first two terms; the kernel step is proximal gradient with
/// per-mode soft thresholds. Convolutions use zero boundaries.
pub fn blind_deconvolve(observed: &Array2<f64>, basis: &PsfBasis, params: &DeconvParams) -> Result<Deconvolved> {
    if !(params.lambda >= 0.0 && params.gamma >= 0.0 && params.tv_eps > 0.0) {
        return config("lambda and gamma must be nonnegative and tv_eps positive");
    }
    let m = basis.m();
    let mut w = params.w0.clone().unwrap_or_else(|| vec![0.0; m]);
    if w.len() != m {
        return config(format!("{} initial coefficients for a {m}-kernel basis", w.len()));
    }
    let prob = DeconvProblem { observed, basis, p: params };
    let mut j = observed.clone();
    let mut obj = prob.objective(&j, &w);
    let mut history = vec![obj];
    for it in 0..params.outer {
        // image step
        let h = prob.kernel(&w);
        let hf = flip(&h);
        let l1: f64 = h.iter().map(|v| v.abs()).sum();
        let mut step = 1.0 / (l1 * l1 + 8.0 * params.lambda / params.tv_eps).max(1e-300);
        for _ in 0..params.inner {
            let (_, res) = prob.data(&j, &h);
            let (_, gtv) = smooth_tv(&j, params.tv_eps);
            let grad = convolve_same(&res, &hf) + gtv * params.lambda;
            let mut failures = 0;
            loop {
                let cand = &j - &(&grad * step);
                let cand_obj = prob.objective(&cand, &w);
                if cand_obj <= obj + OBJECTIVE_SLACK {
                    j = cand;
                    obj = cand_obj;
                    break;
                }
                failures += 1;
                if failures == 3 {
                    return Err(Error::Numerical(format!(
                        "image step diverged at outer iteration {it}: objective {obj:.6e} -> {cand_obj:.6e} with step {step:.3e}, w = {w:?}"
                    )));
                }
                step *= 0.5;
            }
        }
        // kernel step: the data term is quadratic in w with columns
        // a_l = phi_l * J, so its gradient is G w - b with G = A^T A and
        // b = A^T (I - mean * J)
        let cols: Vec<Array2<f64>> = basis.kernels.par_iter().map(|k| convolve_same(&j, k)).collect();
        let g = nalgebra::DMatrix::from_fn(m, m, |a, b| (&cols[a] * &cols[b]).sum());
        let lip = g.clone().symmetric_eigen().eigenvalues.iter().copied().fold(0.0, f64::max);
        if lip > 0.0 {
            let target = observed - &convolve_same(&j, &basis.mean);
            let b: Vec<f64> = cols.iter().map(|c| (c * &target).sum()).collect();
            let s = 1.0 / lip;
            let mut wk = w.clone();
            for _ in 0..params.kernel_steps {
                let gw = &g * nalgebra::DVector::from_column_slice(&wk);
                wk = (0..m)
                    .map(|l| {
                        let v = wk[l] - s * (gw[l] - b[l]);
                        let t = s * params.gamma / basis.sigma[l];
                        v.signum() * (v.abs() - t).max(0.0)
                    })
                    .collect();
            }
            let next_obj = prob.objective(&j, &wk);
            if next_obj <= obj + OBJECTIVE_SLACK {
                w = wk;
                obj = next_obj;
            }
        }
        if !obj.is_finite() {
            return Err(Error::Numerical(format!("objective became non-finite at outer iteration {it}")));
        }
        history.push(obj);
    }
    let (kernel, _) = clip_renormalize(&prob.kernel(&w));
    Ok(Deconvolved { image: j, w, kernel, objective: history })
}

/// Peak signal-to-noise ratio [dB] of `x` against `truth`, peak being the
/// largest truth value.
pub fn psnr(x: &Array2<f64>, truth: &Array2<f64>) -> f64 {
    let mse = (x - truth).mapv(|v| v * v).mean().unwrap_or(0.0);
    let peak = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    10.0 * (peak * peak / mse).log10()
}

/// Pearson correlation of two equally shaped arrays.
pub fn correlation(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt()
}
