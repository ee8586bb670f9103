use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use draftflow::flowfield::Variant;
use draftflow::pipeline::{cmd_eval, cmd_generate_corpus, cmd_infer, cmd_train, ReportKind, RunConfig, Stage};
use draftflow::Result;

#[derive(Parser)]
#[command(name = "draftflow", version, about = "Draft-conditioned latent refinement experiments")]
struct Cli {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; takes precedence over DRAFTFLOW_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Writes the train and validation splits and the vocabulary.
    GenerateCorpus,
    /// Trains one stage, resuming a partial checkpoint.
    Train {
        /// ae, draftprior or flow
        #[arg(long)]
        stage: String,
        /// Stop after this optimiser step and keep a resumable checkpoint.
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Produces a report under <out>/reports.
    Eval {
        /// corruption_curve, stage2_matrix, interpolation, sweep or dissociation
        #[arg(long)]
        report: String,
    },
    /// Refines a single draft and prints the decoded suffix as JSON.
    Infer {
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value = "")]
        draft: String,
        /// Reference continuation for recoverability scoring.
        #[arg(long)]
        reference: Option<String>,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        #[arg(long)]
        variant: Option<String>,
    },
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.validate()?;
    }
    cfg.resolve_paths(cli.out.clone());
    Ok(cfg)
}

fn json<S: serde::Serialize>(v: &S) -> String {
    serde_json::to_string_pretty(v).unwrap_or_else(|e| format!("{{\"error\": \"{e}\"}}"))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    match &cli.cmd {
        Cmd::GenerateCorpus => println!("{}", json(&cmd_generate_corpus(&cfg)?)),
        Cmd::Train { stage, stop_at } => {
            for s in cmd_train(Stage::parse(stage)?, &cfg, *stop_at)? {
                println!("{}", json(&s));
            }
        }
        Cmd::Eval { report } => {
            let r = cmd_eval(ReportKind::parse(report)?, &cfg)?;
            print!("{}", r.csv);
        }
        Cmd::Infer { prompt, draft, reference, steps, variant } => {
            let v = variant.as_deref().map(Variant::parse).transpose()?;
            let out = cmd_infer(&cfg, prompt, draft, reference.as_deref(), *steps, v)?;
            println!("{}", json(&out));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
