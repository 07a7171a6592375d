use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use attention_transfer::config::RunConfig;
use attention_transfer::pipeline;
use attention_transfer::Result;

#[derive(Parser)]
#[command(
    name = "attn",
    version,
    about = "Cross-domain video recognition from still-image attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-domain synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory for frames and the manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the frame classifier on the labeled still images.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Where to write the classifier checkpoint.
        #[arg(long)]
        net_out: PathBuf,
    },
    /// Precompute attention maps for every frame in the manifest.
    Cache {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Classifier checkpoint to take attention from.
        #[arg(long)]
        net: PathBuf,
        /// Where to write the attention cache.
        #[arg(long)]
        cache_out: PathBuf,
    },
    /// Score held-out videos by peak attention evidence (no video training).
    ClassifyUnatt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        /// Where to write per-video scores (JSON lines).
        #[arg(long)]
        scores_out: PathBuf,
    },
    /// Train the energy model on the few labeled target videos.
    TrainEnergynet {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        /// Where to write the energy model.
        #[arg(long)]
        model_out: PathBuf,
        /// Where to write the training loss log (JSON lines).
        #[arg(long)]
        log_out: PathBuf,
    },
    /// Score held-out videos by mean learned energy per concept.
    ClassifyEnergynet {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scores_out: PathBuf,
    },
    /// Score held-out videos directly with the frame classifier.
    ClassifyCnn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        scores_out: PathBuf,
        /// Average logits over all frames instead of majority voting.
        #[arg(long)]
        average_all: bool,
    },
    /// Evaluate a score file against the manifest's held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        /// Where to write the evaluation report (JSON).
        #[arg(long)]
        report_out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out } => {
            let cfg = common.load()?;
            let manifest = pipeline::run_synth(&cfg, &out)?;
            println!("wrote {}", manifest.display());
        }
        Command::Pretrain {
            common,
            manifest,
            net_out,
        } => {
            let cfg = common.load()?;
            let outcome = pipeline::run_pretrain(&cfg, &manifest, &net_out)?;
            let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} epochs, final loss {last:.6}",
                outcome.losses.len()
            );
            println!("wrote {}", net_out.display());
        }
        Command::Cache {
            common,
            manifest,
            net,
            cache_out,
        } => {
            let cfg = common.load()?;
            let entries = pipeline::run_cache(&cfg, &manifest, &net, &cache_out)?;
            println!("cached {entries} attention maps");
            println!("wrote {}", cache_out.display());
        }
        Command::ClassifyUnatt {
            common,
            manifest,
            cache,
            scores_out,
        } => {
            let cfg = common.load()?;
            let rows = pipeline::run_classify_unatt(&cfg, &manifest, &cache, &scores_out)?;
            println!("classified {} videos", rows.len());
            println!("wrote {}", scores_out.display());
        }
        Command::TrainEnergynet {
            common,
            manifest,
            cache,
            model_out,
            log_out,
        } => {
            let cfg = common.load()?;
            let training =
                pipeline::run_train_energynet(&cfg, &manifest, &cache, &model_out, &log_out)?;
            let last = training.log.last().map(|e| e.joint_loss).unwrap_or(f64::NAN);
            println!(
                "trained {} iterations, final joint loss {last:.6}",
                training.log.len()
            );
            println!("wrote {}", model_out.display());
            println!("wrote {}", log_out.display());
        }
        Command::ClassifyEnergynet {
            common,
            manifest,
            cache,
            model,
            scores_out,
        } => {
            let cfg = common.load()?;
            let rows =
                pipeline::run_classify_energynet(&cfg, &manifest, &cache, &model, &scores_out)?;
            println!("classified {} videos", rows.len());
            println!("wrote {}", scores_out.display());
        }
        Command::ClassifyCnn {
            common,
            manifest,
            net,
            scores_out,
            average_all,
        } => {
            let cfg = common.load()?;
            let rows =
                pipeline::run_classify_cnn(&cfg, &manifest, &net, &scores_out, average_all)?;
            println!("classified {} videos", rows.len());
            println!("wrote {}", scores_out.display());
        }
        Command::Eval {
            common,
            manifest,
            scores,
            report_out,
        } => {
            let cfg = common.load()?;
            let report = pipeline::run_eval(&cfg, &manifest, &scores, &report_out)?;
            println!(
                "mean_ap {:.4} top1 {:.4} top3 {:.4} over {} videos",
                report.mean_ap, report.top1, report.top3, report.videos
            );
            println!("wrote {}", report_out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
