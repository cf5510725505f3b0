//! Command-line entry points: dataset generation, two-stage training,
//! retrieval evaluation, single-query retrieval, and the gradient-check
//! suite.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semi3::config::RunConfig;
use semi3::data;
use semi3::error::Result;
use semi3::eval::{self, FeatureSource};
use semi3::gradcheck;
use semi3::model::Semi3Model;
use semi3::trainer::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "semi3", about = "Three-branch cross-domain embedding for sketch-based image retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic image/sketch/edgemap dataset.
    GenData {
        /// Run configuration file (the dataset keys are used).
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage one: per-branch cross-entropy pretraining, then tying.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint written after pretraining and tying.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage two: joint training under the combined loss.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint from `pretrain` to start from.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log (CSV). Falls back to the config's log_csv.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate retrieval MAP over the held-out sketch queries.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Gallery feature source: image | edgemap.
        #[arg(long, default_value = "image")]
        source: String,
    },
    /// Rank the gallery against one sketch query.
    Retrieve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Sample id whose sketch is the query.
        #[arg(long)]
        query: usize,
        /// Number of hits to print.
        #[arg(long)]
        top: usize,
        #[arg(long, default_value = "image")]
        source: String,
    },
    /// Run the finite-difference gradient suite; nonzero exit on failure.
    GradCheck {
        #[arg(long, default_value_t = 0xC0FFEE)]
        seed: u64,
    },
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::GenData { spec, out } => {
            let run = RunConfig::parse_file(&spec)?;
            data::generate_dataset(&run.synthetic_spec(), &out)?;
            let n = run.num_categories * run.per_category;
            println!("wrote {n} samples to {}", out.display());
            Ok(true)
        }
        Command::Pretrain { data: dir, config, out } => {
            let run = RunConfig::parse_file(&config)?;
            let dataset = data::load_dataset(&dir)?;
            let mut model = Semi3Model::new(&run)?;
            let cfg = TrainConfig::from_run(&run);
            let log = trainer::pretrain(&mut model, &dataset, &cfg)?;
            model.save_checkpoint(&out)?;
            let last = log.rows.last().map(|r| r.total).unwrap_or(f64::NAN);
            println!(
                "pretrained {} steps, final cross-entropy sum {last:.6}; checkpoint {}",
                log.rows.len(),
                out.display()
            );
            Ok(true)
        }
        Command::Train { data: dir, config, init, out, log } => {
            let run = RunConfig::parse_file(&config)?;
            let dataset = data::load_dataset(&dir)?;
            let mut model = Semi3Model::load_checkpoint(&init)?;
            if model.run.backbone() != run.backbone() || model.run.image_size != run.image_size {
                return Err(semi3::Error::Config(
                    "training config architecture differs from the checkpoint".into(),
                ));
            }
            if model.strategy != run.share_plan {
                return Err(semi3::Error::Config(
                    "training config share_plan differs from the checkpoint".into(),
                ));
            }
            // refresh run-time knobs (toggles, weights, logging) from the config
            model.toggles.use_co_attention = run.use_co_attention;
            model.toggles.weights = run.loss_weights();
            model.run = run.clone();
            let cfg = TrainConfig::from_run(&run);
            let every = run.checkpoint_every;
            let out_path = out.clone();
            let train_log = trainer::train_joint_with(&mut model, &dataset, &cfg, |epoch, m| {
                if every > 0 && (epoch + 1) % every == 0 {
                    m.save_checkpoint(&out_path)?;
                }
                Ok(())
            })?;
            model.save_checkpoint(&out)?;
            let log_path = log.or_else(|| {
                (!run.log_csv.is_empty()).then(|| PathBuf::from(&run.log_csv))
            });
            if let Some(p) = log_path {
                if let Some(parent) = p.parent() {
                    if !parent.as_os_str().is_empty() {
                        std::fs::create_dir_all(parent)?;
                    }
                }
                train_log.write_csv(&p)?;
            }
            let last = train_log.rows.last().map(|r| r.total).unwrap_or(f64::NAN);
            println!(
                "joint-trained {} steps, final total {last:.6}; checkpoint {}",
                train_log.rows.len(),
                out.display()
            );
            Ok(true)
        }
        Command::Eval { data: dir, ckpt, source } => {
            let source = FeatureSource::parse(&source)?;
            let dataset = data::load_dataset(&dir)?;
            let model = Semi3Model::load_checkpoint(&ckpt)?;
            let map = eval::evaluate(&model, &dataset, source)?;
            println!("MAP={map:.6}");
            Ok(true)
        }
        Command::Retrieve { data: dir, ckpt, query, top, source } => {
            let source = FeatureSource::parse(&source)?;
            let dataset = data::load_dataset(&dir)?;
            let model = Semi3Model::load_checkpoint(&ckpt)?;
            let (ranking, index) = eval::retrieve_by_id(&model, &dataset, query, source)?;
            for (pos, (&gal, &dist)) in ranking
                .order
                .iter()
                .zip(&ranking.distances)
                .take(top)
                .enumerate()
            {
                println!("{},{},{:.6}", pos + 1, index.ids[gal], dist);
            }
            Ok(true)
        }
        Command::GradCheck { seed } => {
            let report = gradcheck::full_suite(seed)?;
            for line in report.lines() {
                println!("{line}");
            }
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
