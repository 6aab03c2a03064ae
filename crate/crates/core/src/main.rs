use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nsd_core::cli::{self, DetectOptions, EXIT_THRESHOLDS};
use nsd_core::config::PipelineConfig;
use nsd_core::detector::Layer;
use nsd_core::eval::{render_table, Stage};
use nsd_core::{Error, Result};

#[derive(Parser)]
#[command(name = "nsd", version, about = "Network service detection pipeline")]
struct Args {
    /// Pipeline configuration (JSON). Defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled synthetic captures and a manifest.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Split a manifest into train and test manifests by capture.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        test_out: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one layer's model from a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = parse_layer)]
        layer: Layer,
        #[arg(long)]
        out: PathBuf,
        /// Training parameters (JSON); overrides the config's `train` block.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Write a bundle manifest for three trained models.
    Bundle {
        #[arg(long)]
        l1: PathBuf,
        #[arg(long)]
        l2rt: PathBuf,
        #[arg(long)]
        l2nrt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run streaming detection over one or more captures.
    Detect {
        #[arg(long, required = true, num_args = 1..)]
        capture: Vec<PathBuf>,
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Sensor trace (JSONL of step, gaming_flag, camera_active).
        #[arg(long)]
        sensors: Option<PathBuf>,
        /// Pace replay at one step per step period.
        #[arg(long)]
        realtime: bool,
        /// Replace both L2 models with uninformative ones.
        #[arg(long)]
        ablate_l2: bool,
        /// Output file; standard output if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score detection output against a manifest.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// JSON object of minimum accuracies per layer.
        #[arg(long)]
        thresholds: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Stage::Fused)]
        stage: Stage,
        /// Also write the reports as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn parse_layer(s: &str) -> std::result::Result<Layer, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(args: Args) -> Result<i32> {
    let cfg = match &args.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    match args.command {
        Command::Generate { spec, out, seed } => print_json(&cli::cmd_generate(&spec, &out, seed)?)?,
        Command::Split {
            manifest,
            train_out,
            test_out,
            fraction,
            seed,
        } => print_json(&cli::cmd_split(&manifest, &train_out, &test_out, fraction, seed)?)?,
        Command::Train {
            manifest,
            layer,
            out,
            params,
        } => print_json(&cli::cmd_train(&cfg, &manifest, layer, &out, params.as_deref())?)?,
        Command::Bundle { l1, l2rt, l2nrt, out } => cli::cmd_bundle(&l1, &l2rt, &l2nrt, &out)?,
        Command::Detect {
            capture,
            bundle,
            sensors,
            realtime,
            ablate_l2,
            out,
        } => {
            let bundle = bundle
                .or_else(|| cfg.bundle.clone())
                .ok_or_else(|| Error::Config("no bundle given and none configured".into()))?;
            let opts = DetectOptions {
                sensors,
                realtime,
                ablate_l2,
            };
            let summary = match out {
                Some(p) => cli::cmd_detect(&cfg, &capture, &bundle, &opts, &mut create(&p)?)?,
                None => cli::cmd_detect(&cfg, &capture, &bundle, &opts, &mut std::io::stdout().lock())?,
            };
            log::info!(
                "{} records over {} steps, slowest step {:.3} ms",
                summary.records,
                summary.steps,
                summary.max_step_ms
            );
        }
        Command::Evaluate {
            pred,
            manifest,
            thresholds,
            stage,
            json,
        } => {
            let ev = cli::cmd_evaluate(&cfg, &pred, &manifest, thresholds.as_deref(), stage)?;
            for r in &ev.reports {
                println!("{}", render_table(r));
            }
            if let Some(p) = json {
                let mut f = create(&p)?;
                let text = serde_json::to_string_pretty(&ev)? + "\n";
                f.write_all(text.as_bytes()).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            }
            if !ev.passed {
                for f in &ev.failures {
                    eprintln!("threshold not met: {f}");
                }
                return Ok(EXIT_THRESHOLDS);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Args::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
