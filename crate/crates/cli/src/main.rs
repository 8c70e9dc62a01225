use std::path::PathBuf;

use anyhow::{Context, Result};
use avsr::config::{ExperimentConfig, Preset};
use avsr::decoding::DecodeConfig;
use avsr::pipeline::{fusion_system, Run, CONFIG_FILE};
use avsr::training::Init;
use clap::{Parser, Subcommand, ValueEnum};

/// Audio-visual speech recognition recipe on a synthetic corpus.
///
/// Every flag marked [env: ...] can also be set through that variable.
#[derive(Parser, Debug)]
#[command(name = "avsr", version)]
struct Cli {
    /// Experiment config (TOML). Defaults to the run directory's recorded
    /// config, then to the desk preset.
    #[arg(long, global = true, env = "AVSR_CONFIG")]
    config: Option<PathBuf>,
    /// Built-in config, used when --config is absent.
    #[arg(long, global = true, env = "AVSR_PRESET")]
    preset: Option<PresetArg>,
    #[arg(long, global = true, env = "AVSR_RUN_DIR", default_value = "run")]
    run_dir: PathBuf,
    /// Overrides the master seed.
    #[arg(long, global = true, env = "AVSR_SEED")]
    seed: Option<u64>,
    /// Accept artifacts produced under a different config hash.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    PaperScaleValidate,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Scratch,
    Audio,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved config as TOML.
    ShowConfig,
    /// Generate the training and test corpora.
    MakeData,
    /// Flat-start and EM-train the GMM-HMM.
    TrainGmm,
    /// Force-align the training split into senone labels.
    Align,
    PretrainAudio,
    /// Frame-level senone classification from video.
    PretrainVideo,
    /// Train the transcript language model.
    TrainLm,
    TrainFusion {
        /// Which pre-trained networks initialize the fusion model.
        #[arg(long, value_enum, default_value = "both")]
        init: InitArg,
    },
    /// Beam-search a trained system over a split.
    Decode {
        /// pretrain_audio or fusion_{both,audio,scratch}.
        #[arg(long, default_value = "fusion_both")]
        system: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        ctc_weight: Option<f64>,
        #[arg(long)]
        lm_weight: Option<f64>,
    },
    /// Combine hypothesis files by voting; alignment follows argument order.
    Rover {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true, num_args = 2..)]
        hyps: Vec<PathBuf>,
    },
    /// Score a hypothesis file; prints and writes a JSON report.
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Scatter plot of visual frontend embeddings projected by PCA.
    InspectEmbeddings {
        #[arg(long, default_value = "pretrain_video")]
        system: String,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 20)]
        max_utts: usize,
        #[arg(long, default_value = "embeddings.png")]
        out: PathBuf,
    },
    /// Run every stage and report test CER per system.
    Recipe,
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let recorded = cli.run_dir.join(CONFIG_FILE);
    let cfg = if let Some(p) = &cli.config {
        ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?
    } else if let Some(p) = cli.preset {
        ExperimentConfig::preset(match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::PaperScaleValidate => Preset::PaperScaleValidate,
        })
    } else if recorded.exists() {
        ExperimentConfig::load(&recorded)?
    } else {
        ExperimentConfig::desk()
    };
    let cfg = match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = resolve_config(&cli)?;
    let run = Run::new(&cli.run_dir, cfg)?.with_force(cli.force);
    match &cli.cmd {
        Command::ShowConfig => print!("{}", run.cfg.to_toml()?),
        Command::MakeData => {
            let (train, test) = run.make_data()?;
            println!("wrote {train} training and {test} test utterances (config {})", run.hash);
        }
        Command::TrainGmm => {
            let obj = run.train_gmm()?;
            println!("EM objective: {:.2} -> {:.2}", obj[0], obj[obj.len() - 1]);
        }
        Command::Align => {
            let r = run.align()?;
            println!(
                "boundary agreement {:.4} ({}/{}) within 2 frames of gold",
                r.agreement, r.boundary_hits, r.boundary_total
            );
        }
        Command::PretrainAudio => report_steps(&run.pretrain_audio()?),
        Command::PretrainVideo => report_steps(&run.pretrain_video()?),
        Command::TrainLm => report_steps(&run.train_lm()?),
        Command::TrainFusion { init } => {
            let init = match init {
                InitArg::Scratch => Init::Scratch,
                InitArg::Audio => Init::AudioOnly,
                InitArg::Both => Init::Both,
            };
            let (audit, recs) = run.train_fusion(init)?;
            println!(
                "{}: {} parameters mapped, {} fresh",
                fusion_system(init),
                audit.mapped.len(),
                audit.fresh.len()
            );
            report_steps(&recs);
        }
        Command::Decode {
            system,
            split,
            beam,
            ctc_weight,
            lm_weight,
        } => {
            let d = &run.cfg.decode;
            let dc = DecodeConfig {
                beam: beam.unwrap_or(d.beam),
                ctc_weight: ctc_weight.unwrap_or(d.ctc_weight),
                lm_weight: lm_weight.unwrap_or(d.lm_weight),
                ..d.clone()
            };
            let out = run.decode(system, split, &dc)?;
            println!("wrote {}", out.display());
        }
        Command::Rover { out, hyps } => {
            run.rover(hyps, out)?;
            println!("wrote {}", out.display());
        }
        Command::Eval { hyp, split } => {
            let (rep, out) = run.eval(hyp, split)?;
            println!("{}", serde_json::json!({"overall_cer": rep.overall_cer, "report": out}));
        }
        Command::InspectEmbeddings {
            system,
            split,
            max_utts,
            out,
        } => {
            let n = run.inspect_embeddings(system, split, *max_utts, out)?;
            println!("plotted {n} frames to {}", out.display());
        }
        Command::Recipe => {
            let s = run.recipe()?;
            for (k, v) in &s.cer {
                println!("{k:>16}  CER {:.4}", v);
            }
        }
    }
    Ok(())
}

fn report_steps(recs: &[avsr::training::StepRecord]) {
    match (recs.first(), recs.last()) {
        (Some(a), Some(b)) => println!("{} steps, loss {:.4} -> {:.4}", recs.len(), a.loss, b.loss),
        _ => println!("0 steps"),
    }
}
