use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use coperception::config::{emit_config, resolve_config, ExperimentConfig, OUTPUT_ENV};
use coperception::error::{Error, Result};
use coperception::eval::{CollabMode, EvalSetting};
use coperception::experiment::{
    compression_settings, eval_settings, export_dataset, export_heatmaps, generate, noise_settings, render_reports,
    save_checkpoint, train, train_log_csv, validate_tag, write_atomic, Layout, LoadedModels, ModelSpec,
};
use coperception::gradsuite::run_gradient_suite;
use coperception::trainer::ModelKind;

#[derive(Parser)]
#[command(name = "coperception", version, about = "Collaborative BEV perception experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// `key=value` overrides such as `train.epochs=5`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SeedArgs {
    /// Run a single seed instead of every configured one.
    #[arg(long)]
    seed: Option<u64>,
    /// Variant name of the fusion model, e.g. an ablation.
    #[arg(long)]
    tag: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Single,
    Early,
    Intermediate,
}

impl From<Model> for ModelKind {
    fn from(m: Model) -> Self {
        match m {
            Model::Single => ModelKind::Single,
            Model::Early => ModelKind::Early,
            Model::Intermediate => ModelKind::Intermediate,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test splits and write them to disk.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model kind and write its checkpoint and loss log.
    Train {
        #[arg(long, value_enum)]
        model: Model,
        #[command(flatten)]
        seeds: SeedArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate every configured mode without pose noise.
    Eval {
        #[command(flatten)]
        seeds: SeedArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate the fusion model at every configured compression ratio.
    SweepCompression {
        #[command(flatten)]
        seeds: SeedArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate every configured mode at every configured pose-noise level.
    SweepNoise {
        #[command(flatten)]
        seeds: SeedArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference checks of every primitive and composite gradient.
    GradCheck {
        /// Random seeds per check.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Write the per-sender fusion weights of one test frame as CSV grids.
    ExportHeatmaps {
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, default_value_t = 0)]
        ego: usize,
        #[command(flatten)]
        seeds: SeedArgs,
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let text = match &common.config {
        Some(path) => Some(std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing {
                what: "config file".into(),
                path: path.clone(),
            },
            _ => e.into(),
        })?),
        None => None,
    };
    let env = std::env::var(OUTPUT_ENV).ok();
    resolve_config(text.as_deref(), env.as_deref(), &common.overrides)
}

fn seeds_of(config: &ExperimentConfig, args: &SeedArgs) -> Result<Vec<u64>> {
    if let Some(tag) = &args.tag {
        validate_tag(tag)?;
    }
    Ok(match args.seed {
        Some(s) => vec![s],
        None => config.seeds.clone(),
    })
}

fn evaluate_and_write(
    common: &Common,
    args: &SeedArgs,
    report: &str,
    settings: fn(&ExperimentConfig) -> Vec<EvalSetting>,
) -> Result<()> {
    let config = load(common)?;
    let layout = Layout::new(&config.output_dir);
    let seeds = seeds_of(&config, args)?;
    let tag = args.tag.as_deref();
    let settings = settings(&config);
    let models = seeds
        .iter()
        .map(|&s| LoadedModels::load(&config, &layout, &settings, s, tag))
        .collect::<Result<Vec<_>>>()?;
    let data = generate(&config)?;
    for (&seed, models) in seeds.iter().zip(&models) {
        let reports = models.evaluate(&config, &settings, &data.test, seed, tag)?;
        let (csv, json) = render_reports(&reports)?;
        let (csv_path, json_path) = layout.report(report, seed, tag);
        write_atomic(&csv_path, &csv)?;
        write_atomic(&json_path, &json)?;
        for r in &reports {
            println!(
                "seed {seed} {:<12} r=1/{:<3} noise={:.2} ap50={:.4} ap70={:.4} bytes={}",
                r.label,
                1u64 << r.setting.compression_exponent,
                r.setting.noise_std,
                r.ap50,
                r.ap70,
                r.comm_bytes
            );
        }
        println!("wrote {}", csv_path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { common } => {
            let config = load(&common)?;
            let layout = Layout::new(&config.output_dir);
            let data = generate(&config)?;
            let files = export_dataset(&layout, &data)?;
            write_atomic(&layout.config_snapshot(), emit_config(&config)?.as_bytes())?;
            println!(
                "{} train and {} test scenes, {files} files under {}",
                data.train.len(),
                data.test.len(),
                layout.data_dir("").display()
            );
        }
        Command::Train { model, seeds, common } => {
            let config = load(&common)?;
            let layout = Layout::new(&config.output_dir);
            let seed_list = seeds_of(&config, &seeds)?;
            let spec = ModelSpec::new(model.into(), config.net.compression_exponent, seeds.tag.as_deref());
            let data = generate(&config)?;
            for seed in seed_list {
                let start = Instant::now();
                let outcome = train(&config, &spec, &data.train, seed)?;
                for r in &outcome.log {
                    eprintln!(
                        "{} seed {seed} epoch {:>3}: total {:.5} cls {:.5} reg {:.5} mi {:.5} ({:.1}s)",
                        spec.stem(),
                        r.epoch,
                        r.loss.total,
                        r.loss.cls,
                        r.loss.reg,
                        r.loss.mi,
                        r.wall_seconds
                    );
                }
                let path = layout.checkpoint(&spec, seed);
                save_checkpoint(&path, &outcome.params)?;
                write_atomic(&layout.train_log(&spec, seed), &train_log_csv(&outcome.log)?)?;
                let mut snapshot = path.clone();
                snapshot.set_extension("toml");
                write_atomic(&snapshot, emit_config(&config)?.as_bytes())?;
                println!("wrote {} in {:.1}s", path.display(), start.elapsed().as_secs_f64());
            }
        }
        Command::Eval { seeds, common } => evaluate_and_write(&common, &seeds, "eval", eval_settings)?,
        Command::SweepCompression { seeds, common } => {
            evaluate_and_write(&common, &seeds, "sweep-compression", compression_settings)?
        }
        Command::SweepNoise { seeds, common } => evaluate_and_write(&common, &seeds, "sweep-noise", noise_settings)?,
        Command::GradCheck { seeds } => {
            let results = run_gradient_suite(0..seeds)?;
            for r in &results {
                println!(
                    "{} {:<55} worst={:.3e} tol={:.0e}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.worst,
                    r.tolerance
                );
            }
            return Ok(results.iter().all(|r| r.passed()));
        }
        Command::ExportHeatmaps { scene, ego, seeds, common } => {
            let config = load(&common)?;
            let layout = Layout::new(&config.output_dir);
            let seed_list = seeds_of(&config, &seeds)?;
            let tag = seeds.tag.as_deref();
            let setting = EvalSetting {
                compression_exponent: config.net.compression_exponent,
                ..EvalSetting::new(CollabMode::Intermediate)
            };
            let spec = ModelSpec::for_mode(setting.mode, setting.compression_exponent, tag);
            let models = seed_list
                .iter()
                .map(|&s| LoadedModels::load(&config, &layout, &[setting], s, tag))
                .collect::<Result<Vec<_>>>()?;
            let data = generate(&config)?;
            let sample = data.test.get(scene).ok_or_else(|| {
                Error::config("scene", format!("index {scene} exceeds the {} test scenes", data.test.len()))
            })?;
            for (&seed, models) in seed_list.iter().zip(&models) {
                for path in export_heatmaps(&config, &layout, models, &spec, sample, ego, seed)? {
                    println!("wrote {}", path.display());
                }
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.kind());
            ExitCode::from(2)
        }
    }
}
