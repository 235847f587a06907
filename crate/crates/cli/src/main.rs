//! `hyperehr`: synthesize or preprocess a corpus, pretrain embeddings, train
//! and evaluate the recommender.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration, 3 data, 4 numeric
//! failure, 5 I/O or checkpoint.

use std::fs;
use std::io::Read as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hyperehr_core::metrics::EvalReport;
use hyperehr_core::pipeline::{self, RunConfig};
use hyperehr_core::Error;

#[derive(Parser)]
#[command(name = "hyperehr", version, about = "Hypergraph pretraining and retrieval-augmented medication recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, env = "HYPEREHR_OUT")]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Disable the similar-visit channel.
    #[arg(long, global = true)]
    no_sim: bool,
    /// Disable the history channel.
    #[arg(long, global = true)]
    no_hist: bool,
    /// Train from random tables; the pretrained checkpoint is never read.
    #[arg(long, global = true)]
    medrep_none: bool,
    /// Keep the pretrained tables fixed while training the recommender.
    #[arg(long, global = true)]
    medrep_fixed: bool,
    /// Same as `--medrep-fixed`.
    #[arg(long, global = true)]
    freeze_embeddings: bool,
    #[arg(long, global = true)]
    no_knowledge_bias: bool,
    /// Similar visits retrieved per query.
    #[arg(long, global = true, value_name = "K")]
    top_n: Option<usize>,
    /// Past visits attended by the history channel.
    #[arg(long, global = true, value_name = "W")]
    window: Option<usize>,
    /// Draw fresh augmented views every pretraining epoch.
    #[arg(long, global = true)]
    resample_views: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-cluster synthetic corpus.
    Synth,
    /// Filter and split `paths.raw_corpus`, printing its statistics.
    Preprocess,
    /// Contrastive pretraining of entity and visit embeddings.
    Pretrain,
    /// Train the recommender.
    Train,
    /// Bootstrap evaluation on the test split.
    Evaluate {
        /// Score only each test patient's first visit.
        #[arg(long)]
        cold_start: bool,
    },
    /// Recommend for JSON-lines requests read from a file or stdin.
    Recommend {
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// Write per-visit gate weights of the test split as CSV.
    Gates,
}

fn build_config(c: &Common) -> Result<(RunConfig, PathBuf), Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.set_seed(s);
    }
    let s = &mut cfg.simmr;
    s.no_sim |= c.no_sim;
    s.no_hist |= c.no_hist;
    s.freeze_embeddings |= c.medrep_fixed || c.freeze_embeddings;
    if let Some(k) = c.top_n {
        s.k_sim = k;
    }
    if let Some(w) = c.window {
        s.window = w;
    }
    cfg.medrep_none |= c.medrep_none;
    cfg.encoder.no_knowledge_bias |= c.no_knowledge_bias;
    cfg.contrastive.resample_views |= c.resample_views;
    cfg.validate()?;
    for w in cfg.range_warnings() {
        log::warn!("{w}");
    }
    let out = c
        .out
        .clone()
        .or_else(|| cfg.paths.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(), Error> {
    let (cfg, out) = build_config(&cli.common)?;
    match cli.command {
        Command::Synth => {
            let bundle = pipeline::run_synth(&cfg, &out)?;
            println!(
                "wrote {} patients to {}",
                bundle.corpus.patients.len(),
                cfg.corpus_dir(&out).display()
            );
        }
        Command::Preprocess => {
            let stats = pipeline::run_preprocess(&cfg, &out)?;
            print!("{}", stats.to_table());
        }
        Command::Pretrain => {
            let outcome = pipeline::run_pretrain(&cfg, &out)?;
            if let Some(last) = outcome.loss_history.last() {
                println!("final contrastive loss diag {:.4} proc {:.4} med {:.4}", last[0], last[1], last[2]);
            }
        }
        Command::Train => {
            let (_, report) = pipeline::run_train(&cfg, &out)?;
            match (report.best_epoch, report.best_val_jaccard) {
                (Some(e), Some(j)) => println!("kept epoch {e} (validation Jaccard {j:.4})"),
                _ => println!("trained {} epochs", report.epochs.len()),
            }
        }
        Command::Evaluate { cold_start } => {
            let artifact = pipeline::run_evaluate(&cfg, &out, cold_start)?;
            print!("{}", EvalReport::table(&[("model", &artifact.report)]));
        }
        Command::Recommend { input } => {
            let text = match input {
                Some(p) => fs::read_to_string(&p)?,
                None => {
                    let mut s = String::new();
                    std::io::stdin().read_to_string(&mut s)?;
                    s
                }
            };
            let requests = pipeline::parse_requests(&text)?;
            let records = pipeline::run_recommend(&cfg, &out, &requests)?;
            println!("{}", serde_json::to_string_pretty(&records)?);
        }
        Command::Gates => {
            print!("{}", pipeline::run_gates(&cfg, &out)?);
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Parse { .. }
        | Error::Record { .. }
        | Error::CorpusExhausted
        | Error::HierarchyCycle(_)
        | Error::OutOfBounds { .. }
        | Error::Dimension(_)
        | Error::Input(_)
        | Error::Lineage(_) => 3,
        Error::Numeric(_) => 4,
        Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
