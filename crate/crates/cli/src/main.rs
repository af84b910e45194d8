use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use turbsim_cli::config::{self, Mode, Overrides, VerifyLevel};
use turbsim_cli::{commands, verify, CliError, CliResult};

#[derive(Parser)]
#[command(name = "turbsim", version, about = "Simulate and verify imaging through atmospheric turbulence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file (sectioned key = value); defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed, overrides simulation.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Simulator used by restore and verify, overrides simulation.mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Frames per run, overrides simulation.frames.
    #[arg(long, global = true)]
    frames: Option<usize>,
    #[arg(long, global = true, value_enum)]
    verify_level: Option<LevelArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Kolmogorov phase screens.
    Screen,
    /// Frames from the split-step propagation simulator.
    Splitstep,
    /// Frames from the Zernike-space simulator.
    Zsim,
    /// PSF dataset, PCA basis and (optionally) the P2S regressor.
    Basis,
    /// Reference frame, lucky fusion and blind deconvolution.
    Restore,
    /// Empirical statistics against closed-form theory.
    Verify,
    /// Print an annotated configuration with every default.
    Template,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Splitstep,
    Zernike,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Fast,
    Full,
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Command::Template = cli.command {
        print!("{}", config::template());
        return Ok(());
    }
    let over = Overrides {
        seed: cli.seed,
        frames: cli.frames,
        mode: cli.mode.map(|m| match m {
            ModeArg::Splitstep => Mode::SplitStep,
            ModeArg::Zernike => Mode::Zernike,
        }),
        verify_level: cli.verify_level.map(|l| match l {
            LevelArg::Fast => VerifyLevel::Fast,
            LevelArg::Full => VerifyLevel::Full,
        }),
    };
    let cfg = config::load(cli.config.as_deref(), &over)?;
    eprintln!("config hash {}", cfg.hash());
    let written = match cli.command {
        Command::Screen => commands::cmd_screen(&cfg, &cli.out)?,
        Command::Splitstep => commands::cmd_splitstep(&cfg, &cli.out)?,
        Command::Zsim => commands::cmd_zsim(&cfg, &cli.out)?,
        Command::Basis => commands::cmd_basis(&cfg, &cli.out)?,
        Command::Restore => commands::cmd_restore(&cfg, &cli.out)?,
        Command::Verify => {
            let (checks, written) = verify::cmd_verify(&cfg, &cli.out)?;
            let mut failed = Vec::new();
            for c in &checks {
                let tag = match c.pass {
                    Some(true) => "PASS",
                    Some(false) => "FAIL",
                    None => "SKIP",
                };
                println!("{tag} {:<28} {:>10.4} (limit {})", c.name, c.value, c.tolerance);
                if c.pass == Some(false) {
                    failed.push(c.name.clone());
                }
            }
            println!("report in {}", cli.out.display());
            if !failed.is_empty() {
                return Err(CliError::Verify(failed.join(", ")));
            }
            written
        }
        Command::Template => unreachable!(),
    };
    eprintln!("wrote {} files to {}", written.len(), cli.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("turbsim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
