use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use poselift::attention::dump_attention;
use poselift::checkpoint::Checkpoint;
use poselift::config::RunConfig;
use poselift::data::{generate_synthetic, load_dataset, save_dataset, PoseSequenceRecord, SyntheticConfig};
use poselift::diagnostics::{gradcheck_suite, CheckTarget};
use poselift::model::{count_parameters, ModelConfig, PoseModel};
use poselift::par;
use poselift::skeleton::SkeletonTopology;
use poselift::train::{evaluate, predict_samples, samples_from_records, train, write_curve_csv, Sample};
use poselift::{Error, Result};

/// Gradient-check failures above this relative error exit nonzero.
const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "poselift", version, about = "2D-to-3D human pose lifting")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Module {
    All,
    Spatial,
    Temporal,
    Model,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of articulated skeletons.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Builtin topology name or JSON file.
        #[arg(long, default_value = "h36m17")]
        topology: String,
        #[arg(long, default_value_t = 32)]
        sequences: usize,
        #[arg(long, default_value_t = 9)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// 2D noise standard deviation, in skeleton-scale units.
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        /// Peak joint rotation in radians.
        #[arg(long, default_value_t = 0.5)]
        amplitude: f64,
    },
    /// Train a model; keeps the checkpoint with the lowest evaluation MPJPE.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluation set (default: the training data).
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: Option<PathBuf>,
        #[arg(long)]
        curve_csv: Option<PathBuf>,
    },
    /// Report MPJPE and P-MPJPE of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report_json: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Write the predicted 3D pose of every record.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_poses: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Run config whose model section is checked (default: tiny config).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        module: Module,
        #[arg(long, default_value_t = 1e-6)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Count learnable parameters.
    ParamCount {
        #[arg(long)]
        config: PathBuf,
        /// Recount with these frame counts (input frames, no dropping).
        #[arg(long, value_delimiter = ',')]
        sweep_frames: Vec<usize>,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Write per-record attention maps as JSON.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only the first N records.
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("POSELIFT_LOG", "warn")).init();
    let cli = Cli::parse();
    if cli.threads == Some(0) {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    match par::with_threads(cli.threads, || run(cli.command, cli.threads)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(PoseModel, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let model = PoseModel::new(ck.config.clone())?;
    Ok((model, ck))
}

fn load_records(path: &Path, model: &PoseModel) -> Result<Vec<PoseSequenceRecord>> {
    load_dataset(path, Some(model.topology()))
}

fn load_samples(path: &Path, model: &PoseModel) -> Result<Vec<Sample>> {
    let records = load_records(path, model)?;
    if records.is_empty() {
        return Err(Error::Config(format!("{} has no records", path.display())));
    }
    samples_from_records(&records, model.target_root())
}

fn run(command: Command, threads: Option<usize>) -> Result<ExitCode> {
    match command {
        Command::GenData {
            out,
            topology,
            sequences,
            frames,
            seed,
            noise,
            amplitude,
        } => {
            let topo = SkeletonTopology::resolve(&topology)?;
            let cfg = SyntheticConfig {
                sequences,
                frames,
                seed,
                noise,
                amplitude,
            };
            let records = generate_synthetic(&cfg, &topo, &topology)?;
            save_dataset(&out, &records)?;
            println!("wrote {} sequences to {}", records.len(), out.display());
        }
        Command::Train {
            config,
            data,
            eval_data,
            out_checkpoint,
            curve_csv,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if threads.is_some() {
                cfg.train.threads = threads;
            }
            let data = data
                .or(cfg.paths.train_data.clone())
                .ok_or_else(|| Error::Config("no training data given (--data or paths.train_data)".into()))?;
            let model = PoseModel::new(cfg.model.clone())?;
            let train_set = load_samples(&data, &model)?;
            let eval_set = match eval_data.or(cfg.paths.eval_data.clone()) {
                Some(p) => Some(load_samples(&p, &model)?),
                None => None,
            };
            let mut store = model.init_params();
            let outcome = train(&model, &mut store, &train_set, eval_set.as_deref(), &cfg.train)?;
            if let Some(path) = out_checkpoint.or(cfg.paths.checkpoint.clone()) {
                Checkpoint::new(cfg.model.clone(), outcome.best.clone()).save(&path)?;
            }
            if let Some(path) = curve_csv.or(cfg.paths.curve_csv.clone()) {
                write_curve_csv(&path, &outcome.curve)?;
            }
            println!(
                "best eval MPJPE {} at epoch {}",
                outcome.best_mpjpe, outcome.best_epoch
            );
        }
        Command::Eval {
            checkpoint,
            data,
            report_json,
            batch_size,
        } => {
            let (model, ck) = load_checkpoint(&checkpoint)?;
            let samples = load_samples(&data, &model)?;
            let report = evaluate(&model, &ck.params, &samples, batch_size)?;
            match report.p_mpjpe {
                Some(p) => println!("MPJPE {} P-MPJPE {}", report.mpjpe, p),
                None => println!("MPJPE {} P-MPJPE n/a", report.mpjpe),
            }
            if let Some(path) = report_json {
                write_json(&path, &report)?;
            }
        }
        Command::Predict {
            checkpoint,
            data,
            out_poses,
            batch_size,
        } => {
            #[derive(Serialize)]
            struct Prediction {
                id: String,
                pose: Vec<Vec<f64>>,
            }
            let (model, ck) = load_checkpoint(&checkpoint)?;
            let records = load_records(&data, &model)?;
            let samples: Vec<Sample> = records
                .iter()
                .map(|r| {
                    Ok(Sample {
                        id: r.id.clone(),
                        input: r.input_tensor()?,
                        target: poselift::Tensor::zeros(&[model.num_joints(), 3]),
                    })
                })
                .collect::<Result<_>>()?;
            let preds = predict_samples(&model, &ck.params, &samples, batch_size)?;
            let out: Vec<Prediction> = samples
                .iter()
                .zip(preds)
                .map(|(s, p)| Prediction {
                    id: s.id.clone(),
                    pose: p.to_rows(),
                })
                .collect();
            write_json(&out_poses, &out)?;
            println!("wrote {} poses to {}", out.len(), out_poses.display());
        }
        Command::Gradcheck {
            config,
            module,
            epsilon,
            seed,
        } => {
            let model_cfg = match config {
                Some(p) => RunConfig::load(&p)?.model,
                None => ModelConfig::tiny(),
            };
            let model = PoseModel::new(model_cfg)?;
            let target = match module {
                Module::All => CheckTarget::All,
                Module::Spatial => CheckTarget::Spatial,
                Module::Temporal => CheckTarget::Temporal,
                Module::Model => CheckTarget::Model,
            };
            let mut worst: f64 = 0.0;
            for r in gradcheck_suite(&model, target, epsilon, seed)? {
                println!(
                    "{:<9} max relative error {:.3e} over {} coordinates (worst: {}[{}])",
                    r.name,
                    r.report.max_rel_error,
                    r.report.coordinates,
                    r.worst_input(),
                    r.report.worst.1
                );
                worst = worst.max(r.report.max_rel_error);
            }
            println!("max relative error {worst:.3e}");
            if worst >= GRADCHECK_TOLERANCE {
                eprintln!("error: gradient check above tolerance {GRADCHECK_TOLERANCE:e}");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ParamCount {
            config,
            sweep_frames,
            json,
        } => {
            let cfg = RunConfig::load(&config)?;
            let count_for = |model_cfg: ModelConfig| -> Result<poselift::model::ParamCount> {
                Ok(count_parameters(&PoseModel::new(model_cfg)?.init_params()))
            };
            if sweep_frames.is_empty() {
                let count = count_for(cfg.model)?;
                if json {
                    println!("{}", serde_json::to_string_pretty(&count)?);
                } else {
                    for e in &count.entries {
                        println!("{:<32} {:>14} {:>10}", e.path, format!("{:?}", e.shape), e.count);
                    }
                    println!("total {}", count.total);
                }
            } else {
                #[derive(Serialize)]
                struct SweepRow {
                    frames: usize,
                    total: usize,
                }
                let mut rows = Vec::new();
                for &t in &sweep_frames {
                    let model_cfg = ModelConfig {
                        input_frames: t,
                        drop_rate: 0,
                        ..cfg.model.clone()
                    };
                    rows.push(SweepRow {
                        frames: t,
                        total: count_for(model_cfg)?.total,
                    });
                }
                if json {
                    println!("{}", serde_json::to_string_pretty(&rows)?);
                } else {
                    for r in &rows {
                        println!("frames {} total {}", r.frames, r.total);
                    }
                }
            }
        }
        Command::DumpAttention {
            checkpoint,
            data,
            out,
            limit,
        } => {
            let (model, ck) = load_checkpoint(&checkpoint)?;
            let records = load_records(&data, &model)?;
            let take = limit.unwrap_or(records.len());
            let dumps = records
                .iter()
                .take(take)
                .map(|r| dump_attention(&model, &ck.params, &r.id, &r.input_tensor()?))
                .collect::<Result<Vec<_>>>()?;
            write_json(&out, &dumps)?;
            println!("wrote attention maps for {} records to {}", dumps.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}
