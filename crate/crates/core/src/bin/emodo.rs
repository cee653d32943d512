//! `emodo`: dataset simulation, pipeline runs, trajectory evaluation and map export.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage error, 3 I/O error,
//! 4 malformed input file, 5 evaluation error.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use emodo::dataset::{read_tum, write_tum, Dataset, DatasetError};
use emodo::elevation_map::{ElevationGrid, MapError};
use emodo::eval::{evaluate, Alignment, EvalConfig, EvalError};
use emodo::pipeline::{run, write_records_csv, Mode, PipelineConfig, PipelineError};
use emodo::sim::{generate_dataset, Scenario, SimError};

const EXIT_INTERNAL: u8 = 1;
const EXIT_IO: u8 = 3;
const EXIT_MALFORMED: u8 = 4;
const EXIT_EVAL: u8 = 5;

#[derive(Parser)]
#[command(name = "emodo", version, about = "Elevation-map odometry for legged robots")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    ExperimentOne,
    FlatFloor,
    TwoRamps,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    ProprioceptiveOnly,
    IcpFused,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignmentArg {
    Se3,
    PositionYaw,
    None,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a scenario file or a built-in preset.
    Sim {
        /// Scenario TOML file.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset directory to create.
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the pipeline over a dataset directory.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        /// Pipeline TOML file; defaults to the dataset's own settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Output directory for trajectory.tum, frames.csv and map.emap.
        #[arg(long)]
        output: PathBuf,
    },
    /// Compare an estimated trajectory against ground truth (both TUM files).
    Eval {
        estimate: PathBuf,
        ground_truth: PathBuf,
        #[arg(long, default_value_t = 4.0)]
        window_m: f64,
        #[arg(long, value_enum, default_value = "se3")]
        alignment: AlignmentArg,
        /// Largest timestamp gap when pairing poses, seconds.
        #[arg(long, default_value_t = 0.02)]
        max_time_diff: f64,
        /// Write the report as key=value lines; per-pose errors go next to it as CSV.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Render a map snapshot as a 16-bit PGM.
    ExportMap {
        snapshot: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Elevation range mapped to the gray scale, meters; defaults to the map's range.
        #[arg(long, num_args = 2, value_names = ["LOW", "HIGH"], allow_negative_numbers = true)]
        range: Option<Vec<f64>>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        let code = match e {
            DatasetError::Io { .. } => EXIT_IO,
            _ => EXIT_MALFORMED,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<MapError> for Failure {
    fn from(e: MapError) -> Self {
        let code = match e {
            MapError::Io(_) => EXIT_IO,
            MapError::Format(_) => EXIT_MALFORMED,
            _ => EXIT_INTERNAL,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Dataset(d) => d.into(),
            PipelineError::Map(m) => m.into(),
            PipelineError::Config(_) => Failure::new(EXIT_MALFORMED, e.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Dataset(d) => d.into(),
            _ => Failure::new(EXIT_MALFORMED, e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(EXIT_IO, format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| io_failure(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_failure(path, e))
}

fn cmd_sim(config: Option<PathBuf>, preset: Option<Preset>, seed: Option<u64>, output: &Path) -> Result<(), Failure> {
    let mut scenario = match (config, preset) {
        (Some(path), _) => Scenario::from_toml(&read_text(&path)?)
            .map_err(|e| Failure::new(EXIT_MALFORMED, format!("{}: {e}", path.display())))?,
        (None, Some(Preset::ExperimentOne)) => Scenario::experiment_one(0),
        (None, Some(Preset::FlatFloor)) => Scenario::flat_floor(0),
        (None, Some(Preset::TwoRamps)) => Scenario::two_ramps(0),
        (None, None) => return Err(Failure::new(2, "sim needs --config or --preset")),
    };
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let dataset = generate_dataset(&scenario)?;
    dataset.write(output)?;
    println!(
        "wrote {} odometry increments and {} frames to {}",
        dataset.odometry.len(),
        dataset.frames.len(),
        output.display()
    );
    Ok(())
}

fn cmd_run(dataset_dir: &Path, config: Option<PathBuf>, mode: Option<ModeArg>, output: &Path) -> Result<(), Failure> {
    let dataset = Dataset::read(dataset_dir)?;
    let mut cfg = match config {
        Some(path) => PipelineConfig::from_toml(&read_text(&path)?)
            .map_err(|e| Failure::new(EXIT_MALFORMED, format!("{}: {e}", path.display())))?,
        None => dataset.config.clone().unwrap_or_default(),
    };
    if let Some(m) = mode {
        cfg.mode = match m {
            ModeArg::ProprioceptiveOnly => Mode::ProprioceptiveOnly,
            ModeArg::IcpFused => Mode::IcpFused,
        };
    }
    let out = run(&dataset, &cfg)?;
    fs::create_dir_all(output).map_err(|e| io_failure(output, e))?;
    write_tum(&output.join("trajectory.tum"), &out.trajectory)?;
    let frames_path = output.join("frames.csv");
    write_records_csv(create(&frames_path)?, &out.records).map_err(|e| io_failure(&frames_path, e))?;
    let map_path = output.join("map.emap");
    out.grid.write_snapshot(create(&map_path)?)?;
    let fused = out.records.iter().filter(|r| r.status.as_str() == "fused").count();
    println!(
        "mode {}: {} frames ({} fused), {} poses, {} occupied cells",
        cfg.mode.as_str(),
        out.records.len(),
        fused,
        out.trajectory.len(),
        out.grid.occupied_count()
    );
    Ok(())
}

fn cmd_eval(
    estimate: &Path,
    ground_truth: &Path,
    cfg: EvalConfig,
    output: Option<PathBuf>,
) -> Result<(), Failure> {
    let est = read_tum(estimate)?;
    let gt = read_tum(ground_truth)?;
    let report = evaluate(&est, &gt, &cfg).map_err(|e| match e {
        EvalError::InvalidParameter(_) => Failure::new(2, e.to_string()),
        _ => Failure::new(EXIT_EVAL, e.to_string()),
    })?;
    println!("{report}");
    if let Some(path) = output {
        report
            .write_key_values(create(&path)?)
            .map_err(|e| io_failure(&path, e))?;
        let errors_path = path.with_extension("errors.csv");
        report
            .write_errors_csv(create(&errors_path)?)
            .map_err(|e| io_failure(&errors_path, e))?;
    }
    Ok(())
}

fn cmd_export_map(snapshot: &Path, output: &Path, range: Option<Vec<f64>>) -> Result<(), Failure> {
    let file = File::open(snapshot).map_err(|e| io_failure(snapshot, e))?;
    let grid = ElevationGrid::read_snapshot(BufReader::new(file))
        .map_err(|e| Failure::from(e).with_path(snapshot))?;
    let range = range.map(|r| (r[0], r[1]));
    if let Some((lo, hi)) = range {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Failure::new(2, format!("invalid range {lo} {hi}")));
        }
    }
    grid.write_pgm(create(output)?, range)?;
    println!(
        "{}×{} render of {} occupied cells written to {}",
        grid.side_cells(),
        grid.side_cells(),
        grid.occupied_count(),
        output.display()
    );
    Ok(())
}

impl Failure {
    fn with_path(self, path: &Path) -> Self {
        Self {
            code: self.code,
            message: format!("{}: {}", path.display(), self.message),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sim {
            config,
            preset,
            seed,
            output,
        } => cmd_sim(config, preset, seed, &output),
        Command::Run {
            dataset,
            config,
            mode,
            output,
        } => cmd_run(&dataset, config, mode, &output),
        Command::Eval {
            estimate,
            ground_truth,
            window_m,
            alignment,
            max_time_diff,
            output,
        } => {
            let alignment = match alignment {
                AlignmentArg::Se3 => Alignment::Se3,
                AlignmentArg::PositionYaw => Alignment::PositionYaw,
                AlignmentArg::None => Alignment::None,
            };
            cmd_eval(
                &estimate,
                &ground_truth,
                EvalConfig {
                    window_m,
                    alignment,
                    max_time_diff,
                },
                output,
            )
        }
        Command::ExportMap {
            snapshot,
            output,
            range,
        } => cmd_export_map(&snapshot, &output, range),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("emodo: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
