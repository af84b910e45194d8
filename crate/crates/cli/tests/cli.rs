use std::path::Path;
use std::process::Command;

use ndarray::Array2;
use turbsim::fft::{convolve_same, fft2_real};
use turbsim::io::ArrayContainer;
use turbsim::optics::crop_psf;
use turbsim::psfbasis::{project, PsfSynth};
use turbsim::zfield::relative_rms;
use turbsim_cli::commands::{cmd_basis, cmd_splitstep, cmd_zsim, ideal_image, load_basis};
use turbsim_cli::config::{resolve, Overrides};

const SMALL: &str = "[optics]\ngrid = 64\naperture_samples = 32\n[simulation]\nframes = 2\nheight = 24\nwidth = 24\nmodes = 10\nkernel_size = 11\n[basis]\nsamples = 120\ncomponents = 12\n";

fn turbsim(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_turbsim")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    assert_eq!(turbsim(&["zsim", "--config", "/nonexistent/run.cfg", "--out", out]).0, 2);
    let bad = write(dir.path(), "bad.cfg", "[optics]\nwavelength = -1\n");
    assert_eq!(turbsim(&["zsim", "--config", &bad, "--out", out]).0, 1);
    let unknown = write(dir.path(), "unknown.cfg", "[optics]\ncolour = red\n");
    assert_eq!(turbsim(&["screen", "--config", &unknown, "--out", out]).0, 1);
    let missing = write(dir.path(), "missing.cfg", &format!("{SMALL}[input]\nbasis = /nonexistent/basis.tsim\n"));
    assert_eq!(turbsim(&["zsim", "--config", &missing, "--out", out]).0, 2);
    let (code, _) = turbsim(&["template"]);
    assert_eq!(code, 0);
}

#[test]
fn verify_refuses_outputs_of_another_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.cfg", SMALL);
    let out = dir.path().join("screens");
    assert_eq!(turbsim(&["screen", "--config", &cfg, "--seed", "1", "--out", out.to_str().unwrap()]).0, 0);
    let screen = out.join("screen_0000.tsim");
    let checked = write(dir.path(), "check.cfg", &format!("{SMALL}[verify]\ninputs = {}\n", screen.display()));
    let (code, err) = turbsim(&["verify", "--config", &checked, "--seed", "2", "--out", dir.path().join("v").to_str().unwrap()]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("config hash"));
}

#[test]
fn zsim_is_byte_identical_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.cfg", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(turbsim(&["zsim", "--config", &cfg, "--seed", "5", "--out", d.to_str().unwrap()]).0, 0);
    }
    for name in ["frame_0000.tsim", "frame_0001.tsim", "frame_0001.pgm"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    // every container re-encodes to the same bytes
    let bytes = std::fs::read(a.join("frame_0000.tsim")).unwrap();
    assert_eq!(ArrayContainer::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
    let c = ArrayContainer::from_bytes(&bytes).unwrap();
    let cfg = resolve(SMALL, &Overrides { seed: Some(5), ..Default::default() }).unwrap();
    assert_eq!(c.get("config_hash"), Some(cfg.hash().as_str()));
    assert_eq!(c.get("config.simulation.seed"), Some("5"));
}

#[test]
fn zsim_without_turbulence_is_the_diffraction_blur() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = resolve(&SMALL.replace("[optics]\n", "[optics]\nr0 = inf\n"), &Overrides::default()).unwrap();
    assert_eq!(cfg.d_over_r0(), 0.0);
    cmd_zsim(&cfg, dir.path()).unwrap();
    let ideal = ideal_image(&cfg).unwrap();
    let basis = load_basis(&cfg).unwrap();
    let synth = PsfSynth::new(&cfg.optics, cfg.n_modes).unwrap();
    let diffraction = crop_psf(&synth.psf(&vec![0.0; cfg.n_modes - 3]).unwrap(), cfg.kernel_size);
    let mut want = convolve_same(&ideal, &basis.reconstruct(&project(&diffraction, &basis).unwrap()));
    want *= ideal.sum() / want.sum();
    for i in 0..cfg.frames {
        let got = ArrayContainer::read(&dir.path().join(format!("frame_{i:04}.tsim"))).unwrap().to_2d().unwrap();
        let err = (&got - &want).mapv(|v| v * v).mean().unwrap().sqrt();
        assert!(err < 1e-12, "frame {i}: {err}");
    }
}

#[test]
fn zero_turbulence_verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "vac.cfg", "[optics]\ncn2 = 0\n[simulation]\nheight = 24\nwidth = 24\nmodes = 10\nkernel_size = 11\n[basis]\nsamples = 120\ncomponents = 12\n[verify]\nframes = 10\n");
    let out = dir.path().join("v");
    for mode in ["zernike", "splitstep"] {
        let (code, err) = turbsim(&["verify", "--config", &cfg, "--mode", mode, "--out", out.to_str().unwrap()]);
        assert_eq!(code, 0, "{mode}: {err}");
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("vacuum_otf_rms,") && l.ends_with(",pass")), "{summary}");
}

/// Radially averaged OTF modulus of the mean frame, unit at zero frequency.
fn mean_frame_otf(dir: &Path, frames: usize) -> Vec<f64> {
    let mut mean = Array2::<f64>::zeros((64, 64));
    for i in 0..frames {
        mean += &ArrayContainer::read(&dir.join(format!("frame_{i:04}.tsim"))).unwrap().to_2d().unwrap();
    }
    let spec = fft2_real(&mean).mapv(|v| v.norm());
    let mut sums = vec![0.0; 32];
    let mut counts = vec![0.0; 32];
    for ((r, c), v) in spec.indexed_iter() {
        let fy = if r < 32 { r as f64 } else { r as f64 - 64.0 };
        let fx = if c < 32 { c as f64 } else { c as f64 - 64.0 };
        let q = fy.hypot(fx).round() as usize;
        if q < 32 {
            sums[q] += v / spec[[0, 0]];
            counts[q] += 1.0;
        }
    }
    sums.iter().zip(&counts).map(|(s, n)| s / n).collect()
}

#[test]
fn simulators_agree_on_long_exposure_otf() {
    let dir = tempfile::tempdir().unwrap();
    let b = dir.path().join("b");
    let text = format!(
        "[simulation]\nframes = 500\nheight = 64\nwidth = 64\nstride = 64\nbeta = p2s\n[input]\nscene = point\nbasis = {0}/basis.tsim\np2s = {0}/p2s.tsim\n[basis]\nsamples = 2000\ncomponents = 40\np2s = true\nepochs = 50\n",
        b.display()
    );
    let mut basis_cfg = text.replace("beta = p2s\n", "");
    basis_cfg = basis_cfg.replace(&format!("basis = {0}/basis.tsim\np2s = {0}/p2s.tsim\n", b.display()), "");
    cmd_basis(&resolve(&basis_cfg, &Overrides::default()).unwrap(), &b).unwrap();
    let cfg = resolve(&text, &Overrides::default()).unwrap();
    let (z, s) = (dir.path().join("z"), dir.path().join("s"));
    cmd_zsim(&cfg, &z).unwrap();
    cmd_splitstep(&cfg, &s).unwrap();
    let (oz, os) = (mean_frame_otf(&z, 500), mean_frame_otf(&s, 500));
    let err = relative_rms(&oz, &os);
    assert!(err <= 0.10, "long-exposure OTF gap {err}");
}
