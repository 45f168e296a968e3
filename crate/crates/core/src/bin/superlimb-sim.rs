use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use superlimb::emg_pipeline::{self, EmgConfig, EmgTrace};
use superlimb::sim_harness::{self, SimError};

#[derive(Parser)]
#[command(name = "superlimb-sim", version, about = "Simulate and analyse a human-mounted supernumerary limb")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its log as CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Process an sEMG trace into activation, force and equilibrium shift.
    EmgPipeline {
        #[arg(long = "in")]
        input: PathBuf,
        /// Yaw stream `t,yaw_rad`; without it the gate stays open.
        #[arg(long)]
        motion: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSON pipeline settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Report the quasi-static stiffness matrix of a support posture.
    AnalyzeStability {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a synthetic sEMG trace from an activation schedule.
    GenEmg {
        /// CSV `t,activation`.
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000.0)]
        fs: f64,
        #[arg(long, default_value_t = 1.0)]
        mvc: f64,
    },
}

fn open(path: &Path) -> Result<File, SimError> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => SimError::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, SimError> {
    Ok(BufWriter::new(File::create(path)?))
}

fn run(command: Command) -> Result<(), SimError> {
    match command {
        Command::Run { config, out } => {
            let scenario = sim_harness::load_scenario(&config)?;
            let rows = sim_harness::run_scenario_to_csv(&scenario, create(&out)?)?;
            log::info!("wrote {rows} rows to {}", out.display());
        }
        Command::EmgPipeline {
            input,
            motion,
            out,
            config,
        } => {
            let cfg: EmgConfig = match config {
                Some(p) => serde_json::from_reader(open(&p)?)
                    .map_err(|e| SimError::ParseError {
                        key: "pipeline".into(),
                        reason: e.to_string(),
                    })?,
                None => EmgConfig::default(),
            };
            let trace = EmgTrace::read_csv(open(&input)?)?;
            let motion = match motion {
                Some(p) => Some(emg_pipeline::read_motion_csv(open(&p)?)?),
                None => None,
            };
            let rows = emg_pipeline::run_pipeline(&cfg, &trace, motion.as_deref())?;
            emg_pipeline::write_pipeline_csv(&rows, create(&out)?)?;
            log::info!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::AnalyzeStability { config } => {
            let cfg = sim_harness::load_stability_config(&config)?;
            let (report, servo) = cfg.analyze()?;
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(sim_harness::stability_report_text(&report, servo).as_bytes())?;
        }
        Command::GenEmg {
            profile,
            seed,
            out,
            fs,
            mvc,
        } => {
            let schedule = sim_harness::read_profile_csv(open(&profile)?)?;
            let trace = sim_harness::generate_emg(&schedule, fs, seed, mvc)?;
            trace.write_csv(create(&out)?)?;
            log::info!("wrote {} samples to {}", trace.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SUPERLIMB_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
