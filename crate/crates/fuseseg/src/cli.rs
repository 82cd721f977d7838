//! The `fuseseg` command line.

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use fuseseg_core::model::{ModelSpec, Variant};
use fuseseg_core::objectives::aggregate;
use fuseseg_core::synth::generate_dataset;
use fuseseg_core::model::analytic_param_count;

use crate::config::{help_text, RunConfig, Settings};
use crate::dataset::{read_dataset, write_dataset, MANIFEST};
use crate::error::{Error, Result};
use crate::format::load_checkpoint;
use crate::trainer::{self, MODEL_FILE, RESULTS_FILE};

#[derive(Debug, Parser)]
#[command(name = "fuseseg", version, about = "Two-modality fusion segmentation on synthetic phantoms")]
pub struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output root; defaults to $FUSESEG_OUT, then the `out` key.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Shorthand for --set seed=N.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Single-threaded execution. Every command already runs on one thread,
    /// so this only documents intent.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset into `dataset`.
    Generate,
    /// Train `variant` on the dataset into <out>/train/<variant>.
    Train {
        /// Continue from the saved state in the run directory, if any.
        #[arg(long)]
        resume: bool,
    },
    /// Train every entry of `variants` for `runs` seeds and tabulate.
    Benchmark,
    /// Write the attention maps of a trained model on one sample as PGM files.
    ExportAttention {
        /// Defaults to <out>/train/<variant>/model.fckp.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "ID")]
        sample: String,
        /// Defaults to <out>/attention/<ID>.
        #[arg(long, value_name = "DIR")]
        dir: Option<PathBuf>,
    },
    /// Print parameter counts, at the configured width and at full size.
    ParamCount {
        /// One variant; all when omitted.
        variant: Option<String>,
    },
}

pub fn main() -> ExitCode {
    let matches = Cli::command().after_help(help_text()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let stdout = io::stdout();
    match run(&cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Layers defaults, $FUSESEG_OUT, the config file, `--set`, then the
/// dedicated flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut settings = Settings::default();
    if let Some(out) = std::env::var_os("FUSESEG_OUT").filter(|v| !v.is_empty()) {
        settings.set("out", &out.to_string_lossy())?;
    }
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        settings.apply_text(&text, &path.display().to_string())?;
    }
    for pair in &cli.set {
        settings.set_pair(pair)?;
    }
    if let Some(out) = &cli.out {
        settings.set("out", &out.to_string_lossy())?;
    }
    if let Some(seed) = cli.seed {
        settings.set("seed", &seed.to_string())?;
    }
    settings.resolve()
}

fn io_err(e: io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn load_dataset(dir: &Path) -> Result<Vec<fuseseg_core::synth::SegmentationSample>> {
    if !dir.join(MANIFEST).exists() {
        return Err(Error::io(
            dir.join(MANIFEST),
            io::Error::new(io::ErrorKind::NotFound, "no dataset here; run `fuseseg generate` first"),
        ));
    }
    read_dataset(dir)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    if let Command::ParamCount { variant } = &cli.command {
        return param_count(cli, variant.as_deref(), out);
    }
    let config = resolve_config(cli)?;
    match &cli.command {
        Command::Generate => {
            let samples = generate_dataset(&config.phantom, config.n_samples)?;
            write_dataset(&samples, &config.phantom, &config.dataset)?;
            writeln!(out, "wrote {} samples to {}", samples.len(), config.dataset.display()).map_err(io_err)
        }
        Command::Train { resume } => {
            let data = load_dataset(&config.dataset)?;
            let dir = config.out.join("train").join(config.variant.name());
            let report = trainer::train_to_dir(&config, &data, &dir, *resume, out)?;
            match report.metrics {
                Some(m) => {
                    let records: Vec<_> = m.into_iter().map(|(_, r)| r).collect();
                    let s = aggregate(&[records])?;
                    writeln!(
                        out,
                        "held-out Dice {:.1}%  sensitivity {:.1}%  RAD {:.1}%  ({})",
                        100.0 * s.dice.mean,
                        100.0 * s.sensitivity.mean,
                        100.0 * s.relative_area_difference.mean,
                        dir.display()
                    )
                    .map_err(io_err)
                }
                None => writeln!(
                    out,
                    "stopped after epoch {} of {}; continue with --resume ({})",
                    report.session.epoch,
                    config.train.epochs,
                    dir.display()
                )
                .map_err(io_err),
            }
        }
        Command::Benchmark => {
            let data = load_dataset(&config.dataset)?;
            let dir = config.out.join("benchmark");
            let rows = trainer::benchmark(&config, &data, &dir, out)?;
            write!(out, "{}", trainer::results_table(&rows)).map_err(io_err)?;
            writeln!(out, "wrote {}", dir.join(RESULTS_FILE).display()).map_err(io_err)
        }
        Command::ExportAttention {
            checkpoint,
            sample,
            dir,
        } => {
            let spec = config.spec(config.variant)?;
            if !config.variant.has_attention() {
                return Err(Error::Validation(format!(
                    "{} has no spatial attention to export",
                    config.variant
                )));
            }
            let ckpt = checkpoint
                .clone()
                .unwrap_or_else(|| config.out.join("train").join(config.variant.name()).join(MODEL_FILE));
            let model = load_checkpoint(&spec, &ckpt)?;
            let data = load_dataset(&config.dataset)?;
            let item = data
                .iter()
                .find(|s| &s.sample_id == sample)
                .ok_or_else(|| Error::Validation(format!("no sample {sample:?} in {}", config.dataset.display())))?;
            let target = dir.clone().unwrap_or_else(|| config.out.join("attention").join(sample));
            for m in trainer::export_attention(&model, item, &target)? {
                let shape = m.map.shape();
                writeln!(out, "{} ({}x{})", m.path.display(), shape[3], shape[2]).map_err(io_err)?;
            }
            Ok(())
        }
        Command::ParamCount { .. } => unreachable!("handled above"),
    }
}

fn param_count(cli: &Cli, variant: Option<&str>, out: &mut dyn Write) -> Result<()> {
    let variants = match variant {
        Some(name) => vec![name.parse::<Variant>()?],
        None => Variant::ALL.to_vec(),
    };
    let config = resolve_config(cli)?;
    writeln!(
        out,
        "{:<14} {:>12} {:>12} {:>9} {:>10}",
        "variant",
        format!("width {}", config.width),
        "full size",
        "millions",
        "reference"
    )
    .map_err(io_err)?;
    for v in variants {
        let here = analytic_param_count(&config.spec(v)?);
        let full = analytic_param_count(&ModelSpec::full_size(v));
        let reference = v.reference_millions().map_or("n/a".into(), |m| format!("{m:.1}M"));
        writeln!(
            out,
            "{:<14} {:>12} {:>12} {:>8.1}M {:>10}",
            v.name(),
            here,
            full,
            full as f64 / 1e6,
            reference
        )
        .map_err(io_err)?;
    }
    Ok(())
}
