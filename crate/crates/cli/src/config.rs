//! Run configuration: flat `key = value` text grouped in `[section]`s.
//!
//! Every key is listed in [`KEYS`] with its default and units. The resolved
//! configuration (file, then command-line overrides, then defaults) is
//! rendered canonically as `section.key=value` lines; its SHA-256 is the
//! config hash stamped on every output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use turbsim::atmosphere::{Cn2Profile, OpticalConfig, WaveKind};
use turbsim::io::config_hash;

use crate::CliError;

/// `(section, key, default, description)`.
pub const KEYS: &[(&str, &str, &str, &str)] = &[
    ("optics", "wavelength", "525e-9", "wavelength [m]"),
    ("optics", "aperture", "0.2034", "aperture diameter D [m]"),
    ("optics", "path_length", "7000", "propagation distance L [m]"),
    ("optics", "cn2", "1e-15", "constant Cn2 along the path [m^-2/3]; 0 for vacuum"),
    ("optics", "r0", "", "Fried parameter [m]; overrides cn2 with the equivalent constant profile, inf for vacuum"),
    ("optics", "wave", "spherical", "spherical | plane"),
    ("optics", "grid", "128", "aperture-plane grid N (power of two)"),
    ("optics", "aperture_samples", "64", "samples across the aperture; dx = D / aperture_samples"),
    ("simulation", "mode", "zernike", "zernike | splitstep"),
    ("simulation", "seed", "0", "top-level seed"),
    ("simulation", "frames", "4", "frames per run"),
    ("simulation", "height", "64", "image rows [pixels]"),
    ("simulation", "width", "64", "image columns [pixels]"),
    ("simulation", "modes", "36", "Zernike modes per pixel, piston included"),
    ("simulation", "screens", "10", "split-step phase screens M"),
    ("simulation", "subharmonics", "3", "subharmonic levels added to each screen"),
    ("simulation", "kernel_size", "33", "side of cropped PSF kernels [pixels], odd"),
    ("simulation", "stride", "8", "split-step PSF grid spacing [pixels]; 1 = one PSF per pixel"),
    ("simulation", "beta", "projection", "projection | p2s: source of the basis weights in Zernike mode"),
    ("input", "image", "", "ideal image (PGM, 8 or 16 bit); empty for the built-in scene"),
    ("input", "scene", "bars", "built-in scene: bars | point"),
    ("input", "basis", "", "PSF basis container; empty to fit one from [basis]"),
    ("input", "p2s", "", "P2S model container (required for beta = p2s)"),
    ("input", "frames", "", "comma-separated frame containers for restore; empty to simulate"),
    ("basis", "samples", "2000", "PSF dataset size"),
    ("basis", "components", "100", "basis kernels M"),
    ("basis", "dr0_min", "0", "lower end of the D/r0 range"),
    ("basis", "dr0_max", "5", "upper end of the D/r0 range"),
    ("basis", "p2s", "false", "also train a P2S regressor"),
    ("basis", "epochs", "200", "P2S training epochs"),
    ("restore", "patch", "16", "fusion patch side [pixels]"),
    ("restore", "stride", "8", "fusion patch stride [pixels]"),
    ("restore", "deconvolve", "true", "run blind deconvolution on the fused frame"),
    ("restore", "components", "10", "basis kernels used by the deconvolution"),
    ("verify", "level", "fast", "fast | full"),
    ("verify", "frames", "0", "PSF ensemble size for the OTF checks; 0 = 100 (fast) or 500 (full)"),
    ("verify", "inputs", "", "comma-separated containers that must carry this config hash"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Zernike,
    SplitStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyLevel {
    Fast,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaKind {
    Projection,
    P2S,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scene {
    Bars,
    Point,
}

/// Overrides taken from command-line flags.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub frames: Option<usize>,
    pub mode: Option<Mode>,
    pub verify_level: Option<VerifyLevel>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub optics: OpticalConfig,
    pub mode: Mode,
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub n_modes: usize,
    pub screens: usize,
    pub subharmonics: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub beta: BetaKind,
    pub image: Option<PathBuf>,
    pub scene: Scene,
    pub basis_path: Option<PathBuf>,
    pub p2s_path: Option<PathBuf>,
    pub input_frames: Vec<PathBuf>,
    pub basis_samples: usize,
    pub basis_components: usize,
    pub dr0_range: (f64, f64),
    pub train_p2s: bool,
    pub p2s_epochs: usize,
    pub patch: usize,
    pub patch_stride: usize,
    pub deconvolve: bool,
    pub deconv_components: usize,
    pub verify_level: VerifyLevel,
    pub verify_frames: usize,
    pub verify_inputs: Vec<PathBuf>,
    /// Resolved `section.key=value` pairs in [`KEYS`] order.
    pub resolved: Vec<(String, String)>,
}

impl RunConfig {
    pub fn canonical(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        config_hash(&self.canonical())
    }

    /// `D/r0` for the configured wave kind; 0 without turbulence.
    pub fn d_over_r0(&self) -> f64 {
        self.optics.aperture / turbsim::atmosphere::fried_parameter(&self.optics)
    }
}

fn err<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Config(msg.into()))
}

/// Section/key/value triples of a configuration text.
pub fn parse_text(text: &str) -> Result<BTreeMap<(String, String), String>, CliError> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                return err(format!("line {}: unterminated section header", i + 1));
            };
            section = name.trim().to_string();
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return err(format!("line {}: expected key = value", i + 1));
        };
        let k = k.trim().to_string();
        if !KEYS.iter().any(|(s, key, _, _)| *s == section && *key == k) {
            return err(format!("line {}: unknown key {section}.{k}", i + 1));
        }
        if out.insert((section.clone(), k.clone()), v.trim().to_string()).is_some() {
            return err(format!("line {}: duplicate key {section}.{k}", i + 1));
        }
    }
    Ok(out)
}

struct Values(BTreeMap<(String, String), String>);

impl Values {
    fn raw(&self, s: &str, k: &str) -> &str {
        self.0.get(&(s.to_string(), k.to_string())).map(String::as_str).unwrap_or("")
    }

    fn get<T: std::str::FromStr>(&self, s: &str, k: &str) -> Result<T, CliError> {
        let v = self.raw(s, k);
        v.parse().or_else(|_| err(format!("{s}.{k}: cannot parse {v:?}")))
    }

    fn paths(&self, s: &str, k: &str) -> Vec<PathBuf> {
        self.raw(s, k).split(',').map(str::trim).filter(|p| !p.is_empty()).map(PathBuf::from).collect()
    }

    fn path(&self, s: &str, k: &str) -> Option<PathBuf> {
        Some(self.raw(s, k)).filter(|v| !v.is_empty()).map(PathBuf::from)
    }
}

/// Reads `path` (or uses defaults only), applies `over`, validates.
pub fn load(path: Option<&Path>, over: &Overrides) -> Result<RunConfig, CliError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    resolve(&text, over)
}

pub fn resolve(text: &str, over: &Overrides) -> Result<RunConfig, CliError> {
    let mut map = parse_text(text)?;
    let mut set = |s: &str, k: &str, v: String| {
        map.insert((s.to_string(), k.to_string()), v);
    };
    if let Some(seed) = over.seed {
        set("simulation", "seed", seed.to_string());
    }
    if let Some(f) = over.frames {
        set("simulation", "frames", f.to_string());
    }
    if let Some(m) = over.mode {
        set("simulation", "mode", if m == Mode::Zernike { "zernike" } else { "splitstep" }.into());
    }
    if let Some(l) = over.verify_level {
        set("verify", "level", if l == VerifyLevel::Fast { "fast" } else { "full" }.into());
    }
    for (s, k, d, _) in KEYS {
        map.entry((s.to_string(), k.to_string())).or_insert_with(|| d.to_string());
    }
    let resolved = KEYS.iter().map(|(s, k, _, _)| (format!("{s}.{k}"), map[&(s.to_string(), k.to_string())].clone())).collect();
    let v = Values(map);

    let aperture: f64 = v.get("optics", "aperture")?;
    let samples: usize = v.get("optics", "aperture_samples")?;
    let wave = match v.raw("optics", "wave") {
        "spherical" => WaveKind::Spherical,
        "plane" => WaveKind::Plane,
        other => return err(format!("optics.wave: expected spherical or plane, got {other:?}")),
    };
    let mut optics = OpticalConfig::new(v.get("optics", "wavelength")?, aperture, v.get("optics", "path_length")?, Cn2Profile::Constant(v.get("optics", "cn2")?));
    optics.wave = wave;
    optics.n = v.get("optics", "grid")?;
    optics.dx = aperture / samples.max(1) as f64;
    optics.validate()?;
    if samples == 0 || samples > optics.n / 2 {
        return err(format!("optics.aperture_samples must be in 1..={}", optics.n / 2));
    }
    if !v.raw("optics", "r0").is_empty() {
        let r0: f64 = v.get("optics", "r0")?;
        if !(r0 > 0.0) {
            return err("optics.r0 must be positive (inf for vacuum)");
        }
        optics.profile = Cn2Profile::Constant(equivalent_cn2(&optics, r0));
    }
    optics.validate()?;

    let choice = |s: &str, k: &str, opts: &[&str]| -> Result<usize, CliError> {
        let raw = v.raw(s, k);
        opts.iter().position(|o| *o == raw).map_or_else(|| err(format!("{s}.{k}: expected one of {opts:?}, got {raw:?}")), Ok)
    };
    let boolean = |s: &str, k: &str| choice(s, k, &["false", "true"]).map(|i| i == 1);

    let cfg = RunConfig {
        optics,
        mode: [Mode::Zernike, Mode::SplitStep][choice("simulation", "mode", &["zernike", "splitstep"])?],
        seed: v.get("simulation", "seed")?,
        frames: v.get("simulation", "frames")?,
        height: v.get("simulation", "height")?,
        width: v.get("simulation", "width")?,
        n_modes: v.get("simulation", "modes")?,
        screens: v.get("simulation", "screens")?,
        subharmonics: v.get("simulation", "subharmonics")?,
        kernel_size: v.get("simulation", "kernel_size")?,
        stride: v.get("simulation", "stride")?,
        beta: [BetaKind::Projection, BetaKind::P2S][choice("simulation", "beta", &["projection", "p2s"])?],
        image: v.path("input", "image"),
        scene: [Scene::Bars, Scene::Point][choice("input", "scene", &["bars", "point"])?],
        basis_path: v.path("input", "basis"),
        p2s_path: v.path("input", "p2s"),
        input_frames: v.paths("input", "frames"),
        basis_samples: v.get("basis", "samples")?,
        basis_components: v.get("basis", "components")?,
        dr0_range: (v.get("basis", "dr0_min")?, v.get("basis", "dr0_max")?),
        train_p2s: boolean("basis", "p2s")?,
        p2s_epochs: v.get("basis", "epochs")?,
        patch: v.get("restore", "patch")?,
        patch_stride: v.get("restore", "stride")?,
        deconvolve: boolean("restore", "deconvolve")?,
        deconv_components: v.get("restore", "components")?,
        verify_level: [VerifyLevel::Fast, VerifyLevel::Full][choice("verify", "level", &["fast", "full"])?],
        verify_frames: v.get("verify", "frames")?,
        verify_inputs: v.paths("verify", "inputs"),
        resolved,
    };
    validate(&cfg)?;
    Ok(cfg)
}

/// Constant `Cn2` giving Fried parameter `r0` for the configured wave kind.
fn equivalent_cn2(optics: &OpticalConfig, r0: f64) -> f64 {
    if r0.is_infinite() {
        return 0.0;
    }
    let mut unit = optics.clone();
    unit.profile = Cn2Profile::Constant(1.0);
    let k = optics.wavenumber();
    4.0 * std::f64::consts::PI.powi(2) / (k * k) * (0.185 / r0).powf(5.0 / 3.0) / unit.turbulence_integral(optics.wave)
}

fn validate(c: &RunConfig) -> Result<(), CliError> {
    if c.frames == 0 {
        return err("simulation.frames must be at least 1");
    }
    if c.height < 8 || c.width < 8 {
        return err("images must be at least 8 x 8");
    }
    if c.n_modes < 4 {
        return err("simulation.modes must be at least 4");
    }
    if c.kernel_size % 2 == 0 || c.kernel_size > c.optics.n {
        return err("simulation.kernel_size must be odd and at most the grid size");
    }
    if c.stride == 0 || c.screens == 0 {
        return err("simulation.stride and simulation.screens must be positive");
    }
    if c.basis_components == 0 || c.basis_components > c.basis_samples {
        return err("basis.components must be in 1..=basis.samples");
    }
    if !(c.dr0_range.0 >= 0.0 && c.dr0_range.1 > c.dr0_range.0 && c.dr0_range.1.is_finite()) {
        return err("basis D/r0 range must satisfy 0 <= dr0_min < dr0_max");
    }
    if c.patch == 0 || c.patch_stride == 0 || c.patch > c.height.min(c.width) {
        return err("restore.patch and restore.stride must be positive and fit the image");
    }
    if c.beta == BetaKind::P2S && c.p2s_path.is_none() {
        return err("beta = p2s needs input.p2s");
    }
    Ok(())
}

/// Annotated template listing every key with its default.
pub fn template() -> String {
    let mut out = String::new();
    let mut section = "";
    for (s, k, d, doc) in KEYS {
        if *s != section {
            if !section.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("[{s}]\n"));
            section = s;
        }
        out.push_str(&format!("# {doc}\n{k} = {d}\n"));
    }
    out
}
