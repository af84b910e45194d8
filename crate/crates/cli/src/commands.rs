//! Simulation, basis and restoration commands. Each writes its products
//! into an output directory and returns the paths written.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use turbsim::atmosphere::fried_parameter;
use turbsim::io::{basis_from_container, basis_to_container, p2s_from_container, p2s_to_container, read_pgm_unit, write_csv, write_pgm16, ArrayContainer};
use turbsim::psfbasis::{fit_pca, generate_psf_dataset, p2s_train, zernike_frame, BetaSource, P2SHyper, P2SModel, PsfBasis, PsfSynth};
use turbsim::restore::{blind_deconvolve, default_alphas, lucky_fuse, psnr, reference_frame, DeconvParams, FrameStack, ReferenceMethod};
use turbsim::rng::derive_seed;
use turbsim::screens::{sample_screen, ScreenSpectrum};
use turbsim::splitstep::{pixel_pitch, simulate_image, SplitStepOptions, SplitStepPlan};
use turbsim::zfield::ZernikeSpace;

use crate::config::{BetaKind, Mode, RunConfig, Scene};
use crate::{CliError, CliResult};

/// Output directory plus the run's provenance stamp.
pub struct Sink<'a> {
    pub dir: PathBuf,
    pub cfg: &'a RunConfig,
    pub written: Vec<PathBuf>,
}

impl<'a> Sink<'a> {
    pub fn new(dir: &Path, cfg: &'a RunConfig) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), cfg, written: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Stamps the config hash and every resolved key.
    pub fn stamp(&self, mut c: ArrayContainer) -> ArrayContainer {
        c = c.with("config_hash", self.cfg.hash());
        for (k, v) in &self.cfg.resolved {
            c = c.with(&format!("config.{k}"), v);
        }
        c
    }

    pub fn container(&mut self, name: &str, c: ArrayContainer) -> CliResult<()> {
        let p = self.path(name);
        self.stamp(c).write(&p)?;
        self.written.push(p);
        Ok(())
    }

    /// Exact `.tsim` copy and a `.pgm` viewable of one image.
    pub fn image(&mut self, stem: &str, img: &Array2<f64>, range: Option<(f64, f64)>, meta: &[(&str, String)]) -> CliResult<()> {
        let mut c = ArrayContainer::from_2d(img);
        for (k, v) in meta {
            c = c.with(k, v);
        }
        self.container(&format!("{stem}.tsim"), c)?;
        let p = self.path(&format!("{stem}.pgm"));
        write_pgm16(&p, img, range)?;
        self.written.push(p);
        Ok(())
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> CliResult<()> {
        let p = self.path(name);
        write_csv(&p, header, rows)?;
        self.written.push(p);
        Ok(())
    }
}

fn require_file(p: &Path) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Io(format!("missing input {}", p.display())))
    }
}

/// Built-in scenes: bars and disks on a gray floor, or one point source.
pub fn builtin_scene(scene: Scene, h: usize, w: usize) -> Array2<f64> {
    match scene {
        Scene::Point => {
            let mut a = Array2::zeros((h, w));
            a[[h / 2, w / 2]] = 1.0;
            a
        }
        Scene::Bars => Array2::from_shape_fn((h, w), |(r, c)| {
            let (y, x) = (r as f64 / h as f64, c as f64 / w as f64);
            let mut v = 0.2;
            if (0.15..0.45).contains(&y) && (0.2..0.6).contains(&x) {
                v += 0.6;
            }
            if (y - 0.7).hypot(x - 0.62) < 0.14 {
                v += 0.5;
            }
            // bar triplets of decreasing period
            if (0.15..0.45).contains(&y) && x > 0.7 && ((x * w as f64) as usize / 2) % 2 == 0 {
                v += 0.4;
            }
            if (0.75..0.81).contains(&y) && (0.1..0.9).contains(&x) {
                v += 0.3;
            }
            v
        }),
    }
}

pub fn ideal_image(cfg: &RunConfig) -> CliResult<Array2<f64>> {
    let Some(p) = &cfg.image else {
        return Ok(builtin_scene(cfg.scene, cfg.height, cfg.width));
    };
    require_file(p)?;
    let img = read_pgm_unit(p)?;
    if img.dim() != (cfg.height, cfg.width) {
        return Err(CliError::Config(format!("{} is {:?}, configured size is {}x{}", p.display(), img.dim(), cfg.height, cfg.width)));
    }
    Ok(img)
}

fn display_range(ideal: &Array2<f64>) -> Option<(f64, f64)> {
    Some((0.0, ideal.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE)))
}

pub fn cmd_screen(cfg: &RunConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let mut sink = Sink::new(out, cfg)?;
    let r0 = fried_parameter(&cfg.optics);
    let (n, dx) = (cfg.optics.n, cfg.optics.dx);
    let screens = (0..cfg.frames)
        .into_par_iter()
        .map(|i| sample_screen(n, dx, ScreenSpectrum::kolmogorov(r0), cfg.subharmonics, derive_seed(cfg.seed, "cli-screen", i as u64)))
        .collect::<turbsim::Result<Vec<_>>>()?;
    for (i, s) in screens.iter().enumerate() {
        sink.image(&format!("screen_{i:04}"), &s.phase, None, &[("dx", format!("{dx:?}")), ("r0", format!("{r0:?}")), ("index", i.to_string())])?;
    }
    Ok(sink.written)
}

fn splitstep_frames(cfg: &RunConfig, ideal: &Array2<f64>, label: &str) -> CliResult<Vec<Array2<f64>>> {
    let opts = SplitStepOptions { screens: cfg.screens, subharmonic_levels: cfg.subharmonics, kernel_size: cfg.kernel_size, stride: cfg.stride, lens_cancel: true };
    Ok((0..cfg.frames)
        .into_par_iter()
        .map(|i| {
            let plan = SplitStepPlan::new(&cfg.optics, ideal.dim(), &opts, derive_seed(cfg.seed, label, i as u64))?;
            simulate_image(&plan, ideal)
        })
        .collect::<turbsim::Result<Vec<_>>>()?)
}

pub fn cmd_splitstep(cfg: &RunConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let ideal = ideal_image(cfg)?;
    let frames = splitstep_frames(cfg, &ideal, "cli-splitstep")?;
    let mut sink = Sink::new(out, cfg)?;
    let range = display_range(&ideal);
    sink.image("ideal", &ideal, range, &[])?;
    let pitch = format!("{:?}", pixel_pitch(&cfg.optics));
    for (i, f) in frames.iter().enumerate() {
        sink.image(&format!("frame_{i:04}"), f, range, &[("simulator", "splitstep".into()), ("pixel_pitch", pitch.clone()), ("index", i.to_string())])?;
    }
    Ok(sink.written)
}

fn fit_basis(cfg: &RunConfig) -> CliResult<(PsfBasis, Option<P2SModel>, Vec<f64>)> {
    let ds = generate_psf_dataset(&cfg.optics, cfg.n_modes, cfg.basis_samples, cfg.dr0_range, Some(cfg.kernel_size), derive_seed(cfg.seed, "cli-basis", 0))?;
    let basis = fit_pca(&ds, cfg.basis_components)?;
    let explained = (1..=basis.m()).map(|m| basis.explained_variance(m)).collect();
    let model = if cfg.train_p2s {
        let hyper = P2SHyper { epochs: cfg.p2s_epochs, halve_every: (cfg.p2s_epochs / 4).max(1), seed: derive_seed(cfg.seed, "cli-p2s", 0), ..Default::default() };
        Some(p2s_train(&ds, &basis, &hyper).map_err(|e| CliError::Config(format!("P2S training: {e}")))?)
    } else {
        None
    };
    Ok((basis, model, explained))
}

/// Basis from `input.basis`, or fitted from the `[basis]` settings.
pub fn load_basis(cfg: &RunConfig) -> CliResult<PsfBasis> {
    match &cfg.basis_path {
        Some(p) => {
            require_file(p)?;
            Ok(basis_from_container(&ArrayContainer::read(p)?)?)
        }
        None => Ok(fit_basis(&RunConfig { train_p2s: false, ..cfg.clone() })?.0),
    }
}

pub fn cmd_basis(cfg: &RunConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let (basis, model, explained) = fit_basis(cfg)?;
    let mut sink = Sink::new(out, cfg)?;
    sink.container("basis.tsim", basis_to_container(&basis))?;
    let p = sink.path("basis_mean.pgm");
    write_pgm16(&p, &basis.mean, None)?;
    sink.written.push(p);
    let rows: Vec<Vec<f64>> = explained.iter().enumerate().map(|(i, e)| vec![(i + 1) as f64, *e]).collect();
    sink.csv("explained_variance.csv", &["components", "explained"], &rows)?;
    if let Some(m) = model {
        sink.container("p2s.tsim", p2s_to_container(&m))?;
        let rows: Vec<Vec<f64>> = m.loss_history.iter().enumerate().map(|(i, l)| vec![(i + 1) as f64, *l]).collect();
        sink.csv("p2s_loss.csv", &["epoch", "loss"], &rows)?;
        println!("P2S validation relative error {:.4}", m.validation_error);
    }
    Ok(sink.written)
}

fn zernike_frames(cfg: &RunConfig, ideal: &Array2<f64>, basis: &PsfBasis, label: &str) -> CliResult<Vec<Array2<f64>>> {
    let space = ZernikeSpace::from_config(&cfg.optics, cfg.n_modes, ideal.nrows(), ideal.ncols())?;
    if space.flagged() {
        eprintln!("warning: correlation spectra clipped by {:.2}%", 100.0 * space.clipped_fraction());
    }
    let model = match (&cfg.beta, &cfg.p2s_path) {
        (BetaKind::P2S, Some(p)) => {
            require_file(p)?;
            let m = p2s_from_container(&ArrayContainer::read(p)?)?;
            if m.inputs() != cfg.n_modes - 2 || m.outputs() != basis.m() {
                return Err(CliError::Config(format!("P2S model maps {} -> {}, run needs {} -> {}", m.inputs(), m.outputs(), cfg.n_modes - 2, basis.m())));
            }
            Some(m)
        }
        _ => None,
    };
    let synth = PsfSynth::new(&cfg.optics, cfg.n_modes)?;
    let source = match &model {
        Some(m) => BetaSource::P2S(m),
        None => BetaSource::Projection(&synth),
    };
    Ok((0..cfg.frames)
        .into_par_iter()
        .map(|i| zernike_frame(ideal, &space.sample(derive_seed(cfg.seed, label, i as u64)), basis, source))
        .collect::<turbsim::Result<Vec<_>>>()?)
}

pub fn cmd_zsim(cfg: &RunConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let ideal = ideal_image(cfg)?;
    let basis = load_basis(cfg)?;
    let frames = zernike_frames(cfg, &ideal, &basis, "cli-zsim")?;
    let mut sink = Sink::new(out, cfg)?;
    let range = display_range(&ideal);
    sink.image("ideal", &ideal, range, &[])?;
    for (i, f) in frames.iter().enumerate() {
        sink.image(&format!("frame_{i:04}"), f, range, &[("simulator", "zernike".into()), ("index", i.to_string())])?;
    }
    Ok(sink.written)
}

pub fn cmd_restore(cfg: &RunConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let (frames, ideal) = if cfg.input_frames.is_empty() {
        let ideal = ideal_image(cfg)?;
        let frames = match cfg.mode {
            Mode::SplitStep => splitstep_frames(cfg, &ideal, "cli-restore")?,
            Mode::Zernike => zernike_frames(cfg, &ideal, &load_basis(cfg)?, "cli-restore")?,
        };
        (frames, Some(ideal))
    } else {
        let mut frames = Vec::new();
        for p in &cfg.input_frames {
            require_file(p)?;
            let c = ArrayContainer::read(p)?;
            if c.get("config_hash").is_some_and(|h| h != cfg.hash()) {
                eprintln!("note: {} was produced under a different configuration", p.display());
            }
            frames.push(c.to_2d()?);
        }
        (frames, None)
    };
    if frames.len() < 2 {
        return Err(CliError::Config("restoration needs at least two frames".into()));
    }
    let stack = FrameStack::new(frames)?;
    let reference = reference_frame(&stack, ReferenceMethod::nonlocal(&stack))?;
    let (a1, a2) = default_alphas(&stack, &reference, cfg.patch, cfg.patch_stride)?;
    let fused = lucky_fuse(&stack, &reference, a1, a2, cfg.patch, cfg.patch_stride)?;

    let mut sink = Sink::new(out, cfg)?;
    let range = display_range(&stack.frames[0]);
    sink.image("reference", &reference, range, &[])?;
    sink.image("fused", &fused.image, range, &[("fallback_patches", fused.fallback_patches.to_string())])?;
    let mut metrics = vec![vec![0.0, psnr_or_nan(&stack.frames[0], &ideal)], vec![1.0, psnr_or_nan(&fused.image, &ideal)]];
    if cfg.deconvolve {
        let basis = load_basis(cfg)?;
        let basis = basis.truncated(cfg.deconv_components.min(basis.m()));
        let d = blind_deconvolve(&fused.image, &basis, &DeconvParams::default())?;
        sink.image("restored", &d.image, range, &[])?;
        sink.container("kernel.tsim", ArrayContainer::from_2d(&d.kernel))?;
        let rows: Vec<Vec<f64>> = d.objective.iter().enumerate().map(|(i, v)| vec![i as f64, *v]).collect();
        sink.csv("objective.csv", &["iteration", "objective"], &rows)?;
        metrics.push(vec![2.0, psnr_or_nan(&d.image, &ideal)]);
    }
    // stage 0 = first frame, 1 = fused, 2 = deconvolved
    sink.csv("psnr.csv", &["stage", "psnr_db"], &metrics)?;
    Ok(sink.written)
}

fn psnr_or_nan(x: &Array2<f64>, ideal: &Option<Array2<f64>>) -> f64 {
    ideal.as_ref().map_or(f64::NAN, |t| psnr(x, t))
}
