mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use medvl::corpus::VqaKind;
use medvl::trainer::Stage;

use config::{RunConfig, Scale};

/// Image-report pretraining with hierarchical alignment and a distilled
/// captioning decoder.
#[derive(Parser, Debug)]
#[command(name = "medvl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML file layered over the scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Toy dimensions (default).
    #[arg(long, global = true, conflicts_with = "paper_scale")]
    toy: bool,
    /// Full-size dimensions.
    #[arg(long, global = true)]
    paper_scale: bool,
}

impl Common {
    fn scale(&self) -> Option<Scale> {
        if self.paper_scale {
            Some(Scale::Paper)
        } else if self.toy {
            Some(Scale::Toy)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Objective {
    Contrast,
    Cap,
    Sum,
    Kd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Question {
    Shape,
    Location,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus.
    SynthData {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the text stack and summarization branch.
    PretrainStage1 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional initial weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Joint contrastive and generative training from a stage-1 checkpoint.
    PretrainStage2 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint; its summarization branch is the teacher.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Turn an objective off (repeatable).
        #[arg(long, value_enum)]
        ablate: Vec<Objective>,
        #[command(flatten)]
        common: Common,
    },
    /// Classify images by similarity to class prompts.
    EvalZeroshot {
        #[command(flatten)]
        eval: EvalArgs,
        /// JSON prompt file; defaults to the built-in templates.
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
    /// Linear probe on frozen global image embeddings.
    Probe {
        #[command(flatten)]
        eval: EvalArgs,
        /// Labelled training fraction (repeatable; default 0.01, 0.1, 1).
        #[arg(long)]
        fraction: Vec<f64>,
    },
    /// Closed-set question answering over the captioning branch.
    Vqa {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_enum, default_value = "shape")]
        question: Question,
    },
    /// Write captioning cross-attention heatmaps.
    ExportAttn {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value = "findings suggesting")]
        prompt: String,
        /// Number of images (default all).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Write global image embeddings as CSV.
    ExportEmb {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Finite-difference checks of every training objective.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Require the checkpoint to come from this stage.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: Option<u8>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthData { .. } => "synth-data",
            Command::PretrainStage1 { .. } => "pretrain-stage1",
            Command::PretrainStage2 { .. } => "pretrain-stage2",
            Command::EvalZeroshot { .. } => "eval-zeroshot",
            Command::Probe { .. } => "probe",
            Command::Vqa { .. } => "vqa",
            Command::ExportAttn { .. } => "export-attn",
            Command::ExportEmb { .. } => "export-emb",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

fn resolve(common: &Common, stage: Stage) -> anyhow::Result<RunConfig> {
    RunConfig::resolve(common.config.as_deref(), common.scale(), stage, common.seed)
}

fn run_eval(eval: &EvalArgs) -> anyhow::Result<(RunConfig, medvl::Model, medvl::corpus::Dataset)> {
    let mut cfg = resolve(&eval.common, Stage::Two)?;
    let (model, data) = commands::load_for_eval(&mut cfg, &eval.data, &eval.checkpoint, eval.stage, Some(&eval.out))?;
    Ok((cfg, model, data))
}

fn run(cmd: &Command) -> anyhow::Result<()> {
    match cmd {
        Command::SynthData { n, out, common } => {
            let mut cfg = resolve(common, Stage::One)?;
            if let Some(n) = n {
                cfg.synthetic.n_samples = *n;
            }
            cfg.validate()?;
            cfg.echo(Some(out))?;
            commands::synth_data(&cfg, out)
        }
        Command::PretrainStage1 { data, out, checkpoint, common } => {
            let mut cfg = resolve(common, Stage::One)?;
            commands::pretrain_cmd(&mut cfg, Stage::One, data, out, checkpoint.as_deref())
        }
        Command::PretrainStage2 { data, out, checkpoint, ablate, common } => {
            let mut cfg = resolve(common, Stage::Two)?;
            for a in ablate {
                let name = match a {
                    Objective::Contrast => "contrast",
                    Objective::Cap => "cap",
                    Objective::Sum => "sum",
                    Objective::Kd => "kd",
                };
                cfg.train.ablation.disable(name)?;
            }
            commands::pretrain_cmd(&mut cfg, Stage::Two, data, out, checkpoint.as_deref())
        }
        Command::EvalZeroshot { eval, prompts } => {
            let (cfg, model, data) = run_eval(eval)?;
            commands::eval_zeroshot(&cfg, &model, &data, prompts.as_deref(), &eval.out)
        }
        Command::Probe { eval, fraction } => {
            let (cfg, model, data) = run_eval(eval)?;
            commands::probe(&cfg, &model, &data, fraction, &eval.out)
        }
        Command::Vqa { eval, question } => {
            let (cfg, model, data) = run_eval(eval)?;
            let kind = match question {
                Question::Shape => VqaKind::Shape,
                Question::Location => VqaKind::Location,
            };
            commands::vqa(&cfg, &model, &data, &eval.data, kind, &eval.out)
        }
        Command::ExportAttn { eval, prompt, n } => {
            let (cfg, model, data) = run_eval(eval)?;
            commands::export_attn(&cfg, &model, &data, &eval.data, prompt, *n, &eval.out)
        }
        Command::ExportEmb { eval } => {
            let (cfg, model, data) = run_eval(eval)?;
            commands::export_emb(&cfg, &model, &data, &eval.out)
        }
        Command::Gradcheck { out, common } => {
            let cfg = resolve(common, Stage::One)?;
            cfg.echo(out.as_deref())?;
            commands::gradcheck_cmd(cfg.seed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // Usage errors exit with 2 through clap.
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e:#}", cli.command.name());
            ExitCode::from(1)
        }
    }
}
