use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dyntok::corpus::{read_corpus, write_corpus, Utterance};
use dyntok::harness::experiment::{checkpoint_path, plan};
use dyntok::harness::{
    discrim_probe, evaluate_transcripts, flow_probe, read_token_stream, reconstruct_utterances, report, summarize_recon,
    test_split, tokenize_utterances, train, train_split, write_jsonl, Checkpoint, RunConfig, TokenStreamRecord, Variant,
};
use dyntok::probes::discrim::write_tasks;
use dyntok::probes::majority_tasks;
use dyntok::Result;

#[derive(Parser)]
#[command(name = "dyntok", version, about = "Dynamic-rate speech tokenizer lab")]
struct Cli {
    /// TOML run configuration; built-in defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    All,
    Train,
    Test,
}

#[derive(clap::Args)]
struct Source {
    /// Checkpoint to load; defaults to `<out_dir>/<variant>/checkpoint.json`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Variant whose default checkpoint is used.
    #[arg(long)]
    variant: Option<String>,
    /// Token stream to use instead of tokenizing on the fly.
    #[arg(long)]
    tokens: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the corpus into `data_dir`.
    GenCorpus,
    /// Train one variant, or every run of the experiment with `--experiment`.
    Train {
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, conflicts_with = "variant")]
        experiment: bool,
    },
    /// Write a token stream (JSONL) for a corpus split.
    Tokenize {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct held-out mels from tokens and write per-utterance metrics (JSONL).
    Reconstruct {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the conditional flow-matching probe on frozen tokens.
    ProbeFlow {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the frozen-backbone majority-symbol probe.
    ProbeDiscrim {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transcribe held-out utterances and report CER (JSONL).
    Evaluate {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate every experiment checkpoint under `out_dir` and print the comparison.
    Report {
        /// Also run the flow probe on the dynamic variant.
        #[arg(long)]
        flow: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_corpus(cfg: &RunConfig) -> Result<Vec<Utterance>> {
    read_corpus(&cfg.data_dir)
}

fn load_checkpoint(cfg: &RunConfig, source: &Source) -> Result<Checkpoint> {
    let path = match (&source.checkpoint, &source.variant) {
        (Some(p), _) => p.clone(),
        (None, Some(v)) => checkpoint_path(&cfg.out_dir, Variant::parse(v)?.name()),
        (None, None) => checkpoint_path(&cfg.out_dir, cfg.variant.name()),
    };
    Checkpoint::load(&path)
}

fn tokens_for(ckpt: &Checkpoint, source: &Source, utts: &[Utterance]) -> Result<Vec<TokenStreamRecord>> {
    match &source.tokens {
        Some(p) => read_token_stream(p, &ckpt.config.fsq),
        None => tokenize_utterances(ckpt, utts),
    }
}

fn default_out(ckpt_dir: &Path, name: &str, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| ckpt_dir.join(name))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenCorpus => {
            let utts = cfg.corpus.generate()?;
            let manifest = write_corpus(&cfg.data_dir, &utts)?;
            print_json(&serde_json::json!({ "utterances": utts.len(), "manifest": manifest }))
        }
        Command::Train { variant, experiment } => {
            let utts = load_corpus(&cfg)?;
            let runs = if experiment {
                plan(&cfg).0.into_iter().map(|r| (r.name, r.cfg)).collect()
            } else {
                let v = variant.as_deref().map(Variant::parse).transpose()?.unwrap_or(cfg.variant);
                vec![(v.name().to_string(), cfg.for_variant(v))]
            };
            for (name, run_cfg) in runs {
                let dir = cfg.out_dir.join(&name);
                let outcome = train(&run_cfg, &utts, Some(&dir.join("train_log.jsonl")), Some(&checkpoint_path(&cfg.out_dir, &name)))?;
                let last = outcome.log.last();
                print_json(&serde_json::json!({
                    "run": name,
                    "steps": outcome.checkpoint.step,
                    "final_loss": last.map(|r| r.loss),
                    "checkpoint": checkpoint_path(&cfg.out_dir, &name),
                }))?;
            }
            Ok(())
        }
        Command::Tokenize { source, split, out } => {
            let ckpt = load_checkpoint(&cfg, &source)?;
            let utts = load_corpus(&cfg)?;
            let utts = match split {
                Split::All => utts,
                Split::Train => train_split(&ckpt.config, &utts),
                Split::Test => test_split(&ckpt.config, &utts),
            };
            let records = tokenize_utterances(&ckpt, &utts)?;
            let path = default_out(&cfg.out_dir.join(ckpt.config.variant.name()), "tokens.jsonl", out);
            write_jsonl(&path, &records)?;
            print_json(&serde_json::json!({ "records": records.len(), "tokens": path }))
        }
        Command::Reconstruct { source, out } => {
            let ckpt = load_checkpoint(&cfg, &source)?;
            let test = test_split(&ckpt.config, &load_corpus(&cfg)?);
            let records = tokens_for(&ckpt, &source, &test)?;
            let recon = reconstruct_utterances(&ckpt, &test, &records)?;
            let path = default_out(&cfg.out_dir.join(ckpt.config.variant.name()), "recon.jsonl", out);
            write_jsonl(&path, &recon)?;
            print_json(&summarize_recon(&recon)?)
        }
        Command::ProbeFlow { source, out } => {
            let ckpt = load_checkpoint(&cfg, &source)?;
            let utts = load_corpus(&cfg)?;
            let f = &ckpt.config.flow_train;
            let train_utts: Vec<Utterance> = train_split(&ckpt.config, &utts).into_iter().take(f.train_utts).collect();
            let eval_utts: Vec<Utterance> = test_split(&ckpt.config, &utts).into_iter().take(f.eval_utts).collect();
            let mut used = train_utts.clone();
            used.extend(eval_utts.iter().cloned());
            let records = tokens_for(&ckpt, &source, &used)?;
            let rep = flow_probe(&ckpt, &train_utts, &eval_utts, &records)?;
            let path = default_out(&cfg.out_dir.join(ckpt.config.variant.name()), "probe_flow.jsonl", out);
            write_jsonl(&path, &rep.per_utterance)?;
            print_json(&serde_json::json!({
                "aligned_fm_loss": rep.aligned_fm_loss,
                "permuted_fm_loss": rep.permuted_fm_loss,
                "condition_sensitive": rep.condition_sensitive(),
                "aligned": rep.aligned,
                "permuted": rep.permuted,
                "epoch_losses": rep.epoch_losses,
            }))
        }
        Command::ProbeDiscrim { source, out } => {
            let ckpt = load_checkpoint(&cfg, &source)?;
            let utts = load_corpus(&cfg)?;
            let records = tokens_for(&ckpt, &source, &utts)?;
            let dir = cfg.out_dir.join(ckpt.config.variant.name());
            let tasks = majority_tasks(&utts, ckpt.config.corpus.symbols, ckpt.config.discrim.options, ckpt.config.discrim.seed)?;
            std::fs::create_dir_all(&dir)?;
            write_tasks(&dir.join("probe_tasks.jsonl"), &tasks)?;
            let rep = discrim_probe(&ckpt.config, &utts, &records)?;
            write_jsonl(&default_out(&dir, "probe_discrim.jsonl", out), std::slice::from_ref(&rep))?;
            print_json(&rep)
        }
        Command::Evaluate { source, out } => {
            let ckpt = load_checkpoint(&cfg, &source)?;
            let test = test_split(&ckpt.config, &load_corpus(&cfg)?);
            let records = tokens_for(&ckpt, &source, &test)?;
            let (transcripts, summary) = evaluate_transcripts(&ckpt, &test, &records)?;
            let path = default_out(&cfg.out_dir.join(ckpt.config.variant.name()), "transcripts.jsonl", out);
            write_jsonl(&path, &transcripts)?;
            print_json(&summary)
        }
        Command::Report { flow } => {
            let utts = load_corpus(&cfg)?;
            let rep = report(&cfg, &utts, &cfg.out_dir, flow)?;
            print!("{}", rep.table());
            Ok(())
        }
    }
}
