//! `eprsim` — simulate, process and analyze temporally multiplexed
//! two-mode squeezing experiments from the command line.
//!
//! The usual flow writes everything into one run directory:
//!
//! ```text
//! eprsim simulate --out run/
//! eprsim process  --data run/ --out run/
//! eprsim analyze  --data run/ --out run/
//! eprsim fit      --spectra run/ --out run/
//! eprsim report   --artifacts run/ --out run/
//! ```

mod ops;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use epr_core::Error;

#[derive(Parser)]
#[command(name = "eprsim", version, about = "Desk-scale EPR-state experiment simulator")]
struct Cli {
    /// Experiment profile (TOML); defaults to the built-in measured profile
    /// or, for analysis commands, a `profile.toml` next to the data.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the profile's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (outputs are independent of this).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AngleSetArg {
    Set1,
    Set2,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize trigger-aligned trace files and calibration sets.
    Simulate {
        /// Output directory for trace files.
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one tomography angle set.
        #[arg(long, value_enum, default_value = "both")]
        angle_set: AngleSetArg,
    },
    /// Slope- and ripple-compensate trace files; emit spectra CSVs.
    Process {
        /// Directory holding simulated trace files.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for processed traces and spectra.
        #[arg(long)]
        out: PathBuf,
    },
    /// Tomography table, covariance reconstruction and criteria report.
    Analyze {
        /// Directory holding processed trace files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reconstruction frequency in MHz (default: first configured).
        #[arg(long)]
        freq: Option<f64>,
    },
    /// Fit phase-fluctuation widths to the four squeezing spectra.
    Fit {
        /// Directory holding the cardinal-angle spectra CSVs.
        #[arg(long)]
        spectra: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Measured unpumped spectrum of the direct line (CSV, MHz/rel).
        #[arg(long)]
        unpumped_direct: Option<PathBuf>,
        /// Measured unpumped spectrum of the delay line (CSV, MHz/rel).
        #[arg(long)]
        unpumped_delay: Option<PathBuf>,
        /// Lower fit band edge, MHz. The first spectral bin sits inside the
        /// regression filter's bite and is excluded by default.
        #[arg(long, default_value_t = 2.0)]
        fmin: f64,
        /// Upper fit band edge, MHz.
        #[arg(long, default_value_t = 20.0)]
        fmax: f64,
    },
    /// Consolidated report and figure-data CSVs from a run directory.
    Report {
        /// Directory holding simulate/process/analyze/fit outputs.
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("eprsim: thread pool: {e}");
            return ExitCode::from(1);
        }
    }

    let result = match &cli.command {
        Command::Simulate { out, angle_set } => {
            ops::simulate(&cli, out, *angle_set)
        }
        Command::Process { data, out } => ops::process_dir(data, out),
        Command::Analyze { data, out, freq } => ops::analyze(&cli, data, out, *freq),
        Command::Fit {
            spectra,
            out,
            unpumped_direct,
            unpumped_delay,
            fmin,
            fmax,
        } => ops::fit(
            &cli,
            spectra,
            out,
            unpumped_direct.as_deref(),
            unpumped_delay.as_deref(),
            *fmin,
            *fmax,
        ),
        Command::Report { artifacts, out } => ops::report(&cli, artifacts, out),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("eprsim: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(error: &Error) -> u8 {
    match error {
        Error::Config(_) | Error::InvalidParameter { .. } => 2,
        Error::Data(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::TraceMismatch(_)
        | Error::MissingRows(_)
        | Error::EmptyGrid => 3,
        _ => 1,
    }
}

impl Cli {
    /// Resolve the experiment profile: explicit flag, then a `profile.toml`
    /// stored next to the data, then the built-in default; the `--seed`
    /// override applies last.
    fn load_config(
        &self,
        data_dir: Option<&std::path::Path>,
    ) -> epr_core::Result<epr_core::config::ExperimentConfig> {
        let mut config = if let Some(path) = &self.config {
            epr_core::config::ExperimentConfig::from_path(path)?
        } else if let Some(stored) = data_dir
            .map(|d| d.join("profile.toml"))
            .filter(|p| p.exists())
        {
            epr_core::config::ExperimentConfig::from_path(&stored)?
        } else {
            epr_core::config::ExperimentConfig::paper_default()
        };
        if let Some(seed) = self.seed {
            config.master_seed = seed;
        }
        Ok(config)
    }
}
