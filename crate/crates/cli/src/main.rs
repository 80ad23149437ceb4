//! `colfig`: batch front end for inference, evaluation, quantization,
//! complexity reports and ablation tables.
//!
//! Exit codes: 0 success, 1 usage, 2 data or validation error, 3 I/O error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use colfig_core::colorspace::load_ppm;
use colfig_core::metrics::{det_csv, det_curve, read_score_csv, synth_scores, write_score_csv};
use colfig_core::model::{ablate, ablation_csv, init_weights, score_rows_csv, GridEntry};
use colfig_core::quant::quantize_model;
use colfig_core::weights;
use colfig_core::{model_complexity, Error, EvalReport, Model, ModelConfig, QuantPolicy};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "colfig",
    version,
    about = "Finger photo presentation attack detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded initial weights for a configuration.
    Init {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score PPM images; writes `path,score` CSV.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Weight file; seeded weights from the config when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// EER and BPCER at fixed APCER from a `label,score` CSV.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long = "apcer", default_values_t = [0.05, 0.10])]
        apcer: Vec<f64>,
        /// Also write the DET curve as CSV.
        #[arg(long)]
        det: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quantize a weight file to int8; prints the reconstruction report.
    Quantize {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `default`, `none`, `all` or a comma-separated list of name patterns.
        #[arg(long, default_value = "default")]
        policy: String,
    },
    /// MAC and parameter report for a configuration.
    Gmacs {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ablation table over a grid of configurations.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// Base directory for relative score/image paths (default: the grid's directory).
        #[arg(long)]
        scores_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic Gaussian scores as `label,score` CSV.
    SynthScores {
        #[arg(long, allow_hyphen_values = true)]
        mu_bonafide: f64,
        #[arg(long, allow_hyphen_values = true)]
        mu_attack: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_io() { EXIT_IO } else { EXIT_DATA },
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_IO,
        message: format!("{}: {e}", path.display()),
    }
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| io_failure(path, e))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| io_failure(path, e))
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match out {
        Some(p) => fs::write(p, bytes).map_err(|e| io_failure(p, e)),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| io_failure(Path::new("<stdout>"), e)),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<ModelConfig> {
    match path {
        Some(p) => Ok(ModelConfig::from_json(&read_text(p)?)?),
        None => Ok(ModelConfig::default()),
    }
}

fn load_weight_set(path: &Path) -> CliResult<colfig_core::WeightSet> {
    Ok(weights::decode(&read(path)?)?)
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Init { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let bytes = weights::encode(&init_weights(&cfg)?);
            fs::write(&out, bytes).map_err(|e| io_failure(&out, e))
        }
        Command::Infer {
            config,
            weights: weight_path,
            images,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let model = match &weight_path {
                Some(p) => Model::from_weights(&cfg, load_weight_set(p)?)?,
                None => colfig_core::build_model(&cfg)?,
            };
            let mut rows = Vec::with_capacity(images.len());
            for path in &images {
                let img = load_ppm(&read(path)?).map_err(|e| Failure {
                    code: EXIT_DATA,
                    message: format!("{}: {e}", path.display()),
                })?;
                rows.push((path.display().to_string(), model.forward(&img)?));
            }
            emit(out.as_deref(), score_rows_csv(&rows).as_bytes())
        }
        Command::Eval {
            scores,
            apcer,
            det,
            out,
        } => {
            let set = read_score_csv(read(&scores)?.as_slice()).map_err(|e| Failure {
                code: if e.is_io() { EXIT_IO } else { EXIT_DATA },
                message: format!("{}: {e}", scores.display()),
            })?;
            let report = EvalReport::compute(&set, &apcer)?;
            if let Some(p) = &det {
                fs::write(p, det_csv(&det_curve(&set))).map_err(|e| io_failure(p, e))?;
            }
            emit(out.as_deref(), report.to_json().as_bytes())
        }
        Command::Quantize {
            weights: input,
            out,
            policy,
        } => {
            let set = load_weight_set(&input)?;
            let (quantized, report) = quantize_model(&set, &QuantPolicy::parse(&policy))?;
            fs::write(&out, weights::encode(&quantized)).map_err(|e| io_failure(&out, e))?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            emit(None, report.to_json().as_bytes())
        }
        Command::Gmacs { config, out } => {
            let cfg = load_config(config.as_deref())?;
            emit(out.as_deref(), model_complexity(&cfg)?.to_json().as_bytes())
        }
        Command::Ablate {
            grid,
            scores_dir,
            out,
        } => {
            let entries = GridEntry::parse_grid(&read_text(&grid)?)?;
            let base = scores_dir
                .unwrap_or_else(|| grid.parent().map(Path::to_path_buf).unwrap_or_default());
            let rows = ablate(&entries, &base)?;
            emit(out.as_deref(), ablation_csv(&rows).as_bytes())
        }
        Command::SynthScores {
            mu_bonafide,
            mu_attack,
            sigma,
            n,
            seed,
            out,
        } => {
            let set = synth_scores(mu_bonafide, mu_attack, sigma, n, seed)?;
            emit(out.as_deref(), write_score_csv(&set).as_bytes())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
