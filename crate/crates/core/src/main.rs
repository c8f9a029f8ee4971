use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::json;

use memt5::config::RunConfig;
use memt5::data::read_documents;
use memt5::error::{Error, Result};
use memt5::graph::ChunkLayout;
use memt5::mem::{build_mem_attention_mask, chunk_input};
use memt5::model::Model;
use memt5::tokenizer::Vocab;
use memt5::train::{check_vocab, evaluate, load_dataset, Outcome, TrainState, Trainer};
use memt5::verify::cost::count_attention_cost;
use memt5::verify::gradcheck::{layer_cases, model_case, run_cases};
use memt5::verify::oracle_sweep;
use memt5::verify::report::OracleReport;
use memt5::Variant;

#[derive(Parser)]
#[command(name = "memt5", version, about = "Train and inspect memory-slot chunked encoder-decoder models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration key, e.g. `--set model.d_model=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let cfg = RunConfig::load(&self.config)?.with_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Learn a byte-level BPE vocabulary from text files.
    TrainTokenizer {
        #[arg(long, num_args = 1.., required = true)]
        corpus: Vec<PathBuf>,
        #[arg(long, default_value_t = 32000)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Span-corruption pretraining.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps (overrides `train.max_steps`).
        #[arg(long)]
        max_steps: Option<u64>,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Question-answering fine-tuning from a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate a checkpoint on the `train` or `valid` data of a config.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "valid")]
        split: String,
    },
    /// Greedy generation from a checkpoint.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: String,
        #[arg(long, default_value_t = 40)]
        max_len: usize,
        /// Vocabulary file; defaults to the one named in the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Write the encoder attention mask and its score counts.
    DumpAttention {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Oracle comparisons and finite-difference gradient checks.
    Gradcheck {
        /// Also check every full model variant.
        #[arg(long)]
        full: bool,
        /// Write the report CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config_keys_help() -> String {
    let mut s = String::from("Configuration keys (dotted, for --set):\n");
    for (k, v) in RunConfig::keys() {
        let _ = writeln!(s, "  {k} = {v}");
    }
    s
}

fn main() -> ExitCode {
    let keys = config_keys_help();
    let command = Cli::command().after_help(keys.clone()).mut_subcommands(|c| c.after_help(keys.clone()));
    let matches = match command.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainTokenizer { corpus, vocab_size, out } => {
            let docs = read_documents(&corpus)?;
            let vocab = Vocab::train(docs.iter().map(String::as_str), vocab_size)?;
            vocab.save(&out)?;
            println!("wrote {} entries to {}", vocab.len(), out.display());
            Ok(())
        }
        Command::Pretrain { cfg, resume, max_steps, dry_run } => {
            let mut config = cfg.resolve()?;
            if max_steps.is_some() {
                config.train.max_steps = max_steps;
            }
            println!("{}", config.to_json());
            if dry_run {
                return Ok(());
            }
            let trainer = match resume {
                Some(p) => Trainer::resume(config.clone(), TrainState::load(&p)?)?,
                None => Trainer::new(config.clone())?,
            };
            train(config, trainer)
        }
        Command::Finetune { cfg, init, max_steps, dry_run } => {
            let mut config = cfg.resolve()?;
            if max_steps.is_some() {
                config.train.max_steps = max_steps;
            }
            println!("{}", config.to_json());
            if dry_run {
                return Ok(());
            }
            let state = TrainState::load(&init)?;
            let trainer = Trainer::from_params(config.clone(), state.params)?;
            train(config, trainer)
        }
        Command::Eval { cfg, ckpt, split } => {
            let config = cfg.resolve()?;
            let state = TrainState::load(&ckpt)?;
            let vocab = load_vocab(&config)?;
            check_vocab(&vocab, state.progress.vocab_fingerprint, config.model.vocab_size)?;
            let model = Model::from_params(config.model.clone(), state.params)?;
            let paths = match split.as_str() {
                "train" => &config.data.train,
                "valid" => &config.data.valid,
                other => return Err(Error::Config(format!("unknown split `{other}` (train or valid)"))),
            };
            let data = load_dataset(&config, &vocab, paths)?;
            let m = evaluate(&model, &config, &data, Some(&vocab))?;
            let mut out = json!({
                "split": split,
                "examples": data.len(),
                "loss": m.loss,
                "accuracy": m.accuracy,
                "perplexity": m.perplexity,
            });
            if let Some(q) = m.qa {
                out["exact_match"] = json!(q.exact_match);
                out["f1"] = json!(q.f1);
                out["precision"] = json!(q.precision);
                out["recall"] = json!(q.recall);
            }
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(())
        }
        Command::Generate { ckpt, input, max_len, vocab } => {
            let state = TrainState::load(&ckpt)?;
            let path = vocab.or_else(|| state.config.data.vocab.clone());
            let m = &state.config.model;
            let model = Model::from_params(m.clone(), state.params)?;
            let (ids, vocab) = match path {
                Some(p) => {
                    let v = Vocab::load(&p)?;
                    check_vocab(&v, state.progress.vocab_fingerprint, m.vocab_size)?;
                    let mut ids = v.encode(&input);
                    ids.push(memt5::tokenizer::EOS_ID);
                    (ids, Some(v))
                }
                None => (parse_ids(&input, m.vocab_size)?, None),
            };
            let source = chunk_input(&ids, m.chunk_len, m.n_chunks, true)?;
            let out = model.greedy_decode(&source, max_len)?.remove(0);
            match vocab {
                Some(v) => println!("{}", v.decode_until_eos(&out)?),
                None => println!("{}", out.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")),
            }
            Ok(())
        }
        Command::DumpAttention { cfg, out } => dump_attention(&cfg.resolve()?, &out),
        Command::Gradcheck { full, out } => gradcheck(full, out.as_deref()),
    }
}

fn load_vocab(config: &RunConfig) -> Result<Vocab> {
    let path = config
        .data
        .vocab
        .as_ref()
        .ok_or_else(|| Error::Config("data.vocab is required".into()))?;
    Vocab::load(path)
}

/// Whitespace-separated token ids, for checkpoints without a vocabulary.
fn parse_ids(input: &str, vocab_size: usize) -> Result<Vec<u32>> {
    input
        .split_whitespace()
        .map(|t| {
            let id: u32 = t
                .parse()
                .map_err(|_| Error::Config(format!("without a vocabulary --input takes token ids, got `{t}`")))?;
            if id as usize >= vocab_size {
                return Err(Error::IdOutOfRange { id, size: vocab_size });
            }
            Ok(id)
        })
        .collect()
}

fn train(config: RunConfig, trainer: Trainer) -> Result<()> {
    let vocab = load_vocab(&config)?;
    let train_data = load_dataset(&config, &vocab, &config.data.train)?;
    let valid_data = if config.data.valid.is_empty() {
        None
    } else {
        Some(load_dataset(&config, &vocab, &config.data.valid)?)
    };
    let mut trainer = trainer.with_vocab(vocab)?.with_output_dir(&config.train.output_dir);
    eprintln!(
        "{} training examples, {} steps per epoch",
        train_data.len(),
        trainer.steps_per_epoch(train_data.len())
    );
    let report = trainer.run(&train_data, valid_data.as_ref())?;
    for row in report.history.iter().filter(|r| r.split != "train") {
        eprintln!("{}", row.csv());
    }
    let status = match report.outcome {
        Outcome::Completed => "completed",
        Outcome::Stopped => "stopped at max_steps",
    };
    println!(
        "{status} at step {}; outputs in {}",
        report.global_step,
        config.train.output_dir.display()
    );
    Ok(())
}

fn dump_attention(config: &RunConfig, out: &Path) -> Result<()> {
    let m = &config.model;
    let (n, mem) = if m.variant == Variant::Baseline { (1, 0) } else { (m.n_chunks, m.mem_tokens) };
    let cl = m.source_len() / n;
    let layout = ChunkLayout {
        n_chunks: n,
        mem,
        chunk_len: cl,
    };
    let mask = build_mem_attention_mask(layout, &vec![true; n * cl])?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let t = layout.total();
    let mut csv = String::with_capacity(t * t * 2);
    for row in mask.data().chunks(t) {
        let line: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "0" }).collect();
        csv.push_str(&line.join(","));
        csv.push('\n');
    }
    let mask_path = out.join("encoder_mask.csv");
    std::fs::write(&mask_path, csv).map_err(|e| Error::io(&mask_path, e))?;
    let cost = count_attention_cost(n, cl, mem)?;
    let summary = json!({
        "variant": m.variant,
        "n_chunks": n,
        "chunk_len": cl,
        "mem_tokens": mem,
        "rows": t,
        "cost": cost,
    });
    let summary_path = out.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")
        .map_err(|e| Error::io(&summary_path, e))?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn gradcheck(full: bool, out: Option<&Path>) -> Result<()> {
    let mut reports: Vec<OracleReport> = oracle_sweep(0)?;
    reports.extend(run_cases(&layer_cases(0), 1e-5, 1e-4)?);
    if full {
        let cases = [Variant::Baseline, Variant::Mem, Variant::MemWs, Variant::MemWsWma]
            .into_iter()
            .map(|v| model_case(v, 0))
            .collect::<Result<Vec<_>>>()?;
        reports.extend(run_cases(&cases, 1e-5, 1e-4)?);
    }
    let mut text = String::from(OracleReport::CSV_HEADER);
    text.push('\n');
    for r in &reports {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    match out {
        Some(p) => std::fs::write(p, &text).map_err(|e| Error::io(p, e))?,
        None => print!("{text}"),
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.case.as_str()).collect();
    if failed.is_empty() {
        eprintln!("{} checks passed", reports.len());
        Ok(())
    } else {
        Err(Error::Verification(format!("failed: {}", failed.join(", "))))
    }
}
