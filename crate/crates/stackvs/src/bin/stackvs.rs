//! Batch front door: generate data, train, caption, evaluate, trace, and
//! self-check. Logs go to standard error; machine-readable results go to
//! standard output. Exit codes are a stable contract: 0 ok, 1 selfcheck
//! failure, 2 usage, 3 data/I-O, 4 numeric.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use stackvs::data::{
    export_trace, gen_synthetic, load_checkpoint, load_dataset, Dataset, SyntheticSpec,
};
use stackvs::metrics::{bleu, build_idf, cider, rouge_l, tokenize, ROUGE_BETA};
use stackvs::stack::{decode_beam, decode_greedy, StackConfig};
use stackvs::tensor::Tensor;
use stackvs::trainer::{train, Phase, TrainConfig};
use stackvs::{Error, Result};

const EXIT_SELFCHECK: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "stackvs", about = "Coarse-to-fine stacked visual-semantic captioning", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Xe,
    Scst,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        n_v: usize,
        #[arg(long, default_value_t = 8)]
        d_v: usize,
        #[arg(long, default_value_t = 3)]
        n_e: usize,
        #[arg(long, default_value_t = 5)]
        n_attributes: usize,
        #[arg(long, default_value_t = 20)]
        vocab_size: usize,
        #[arg(long, default_value_t = 6)]
        caption_len: usize,
    },
    /// Train from a JSON config file against a dataset manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        phase: PhaseArg,
    },
    /// Decode one caption per record with beam search (beam 1 is greedy).
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a candidate file against a dataset's references.
    Eval {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// Comma-separated subset of bleu,rouge,cider.
        #[arg(long, default_value = "bleu,rouge,cider")]
        metrics: String,
    },
    /// Export the greedy attention trace for one image as CSV.
    Trace {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        image_id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient-check suite and metric oracles.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deliberately corrupt one gradient to prove the suite catches it.
        #[arg(long, hide = true)]
        corrupt_grad: bool,
    },
}

/// One JSON document holding the model and training configuration.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    stack: StackConfig,
    #[serde(default)]
    train: TrainConfig,
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Shape(_) | Error::Data(_) | Error::Format(_) | Error::Io(_) => EXIT_DATA,
    }
}

fn thread_budget() -> Result<usize> {
    match std::env::var("STACKVS_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("STACKVS_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CandidateEntry {
    image_id: String,
    caption: String,
}

fn feature_rows(features: &Tensor) -> Vec<Tensor> {
    let (n, d) = (features.rows(), features.cols());
    (0..n).map(|r| Tensor::vector(features.values()[r * d..(r + 1) * d].to_vec())).collect()
}

fn run_caption(ckpt: &PathBuf, data: &PathBuf, beam: usize, out: &PathBuf) -> Result<()> {
    if beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let ckpt = load_checkpoint(ckpt)?;
    let vocab = ckpt
        .vocab
        .ok_or_else(|| Error::Data("checkpoint carries no vocabulary; cannot decode".into()))?;
    let ds = load_dataset(data)?;
    check_dims(&ckpt.config, &ds)?;
    let mut entries = Vec::with_capacity(ds.records.len());
    for record in &ds.records {
        let v0 = feature_rows(&record.features);
        let rollout = if beam == 1 {
            decode_greedy(&ckpt.params, &ckpt.config, &v0, &record.attribute_ids)?
        } else {
            decode_beam(&ckpt.params, &ckpt.config, &v0, &record.attribute_ids, beam)?
        };
        entries.push(CandidateEntry {
            image_id: record.image_id.clone(),
            caption: vocab.decode(&rollout.tokens)?,
        });
    }
    let json = serde_json::to_string_pretty(&entries).expect("candidates serialize");
    fs::write(out, &json)?;
    println!("{}", serde_json::json!({"records": entries.len(), "out": out}));
    Ok(())
}

fn check_dims(cfg: &StackConfig, ds: &Dataset) -> Result<()> {
    if cfg.n_v != ds.n_v || cfg.d_v != ds.d_v || cfg.n_e != ds.n_e {
        return Err(Error::Data(format!(
            "checkpoint expects (n_v={}, d_v={}, n_e={}), dataset has (n_v={}, d_v={}, n_e={})",
            cfg.n_v, cfg.d_v, cfg.n_e, ds.n_v, ds.d_v, ds.n_e
        )));
    }
    Ok(())
}

fn run_eval(candidates: &PathBuf, references: &PathBuf, metrics: &str) -> Result<()> {
    let wanted: Vec<&str> = metrics.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    for m in &wanted {
        if !["bleu", "rouge", "cider"].contains(m) {
            return Err(Error::Config(format!("unknown metric {m:?}")));
        }
    }
    if wanted.is_empty() {
        return Err(Error::Config("no metrics requested".into()));
    }
    let text = fs::read_to_string(candidates)?;
    let entries: Vec<CandidateEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("bad candidates file: {e}")))?;
    let ds = load_dataset(references)?;
    let mut cands = Vec::with_capacity(ds.records.len());
    let mut refs = Vec::with_capacity(ds.records.len());
    for record in &ds.records {
        let entry = entries
            .iter()
            .find(|e| e.image_id == record.image_id)
            .ok_or_else(|| Error::Data(format!("no candidate for image {:?}", record.image_id)))?;
        cands.push(tokenize(&entry.caption));
        refs.push(record.references.iter().map(|c| tokenize(c)).collect::<Vec<_>>());
    }
    let mut scores = serde_json::Map::new();
    for m in wanted {
        match m {
            "bleu" => {
                let b = bleu(&cands, &refs, 4)?;
                for (n, s) in b.iter().enumerate() {
                    scores.insert(format!("bleu{}", n + 1), (*s).into());
                }
            }
            "rouge" => {
                let mean = cands
                    .iter()
                    .zip(&refs)
                    .map(|(c, r)| rouge_l(c, r, ROUGE_BETA))
                    .sum::<Result<f64>>()?
                    / cands.len() as f64;
                scores.insert("rouge_l".into(), mean.into());
            }
            "cider" => {
                let idf = build_idf(&refs)?;
                let (_, mean) = cider(&cands, &refs, &idf)?;
                scores.insert("cider".into(), mean.into());
            }
            _ => unreachable!("validated above"),
        }
    }
    println!("{}", serde_json::Value::Object(scores));
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    let threads = thread_budget()?;
    eprintln!("stackvs: thread budget {threads}");
    match cmd {
        Command::GenSynthetic {
            out,
            images,
            seed,
            n_v,
            d_v,
            n_e,
            n_attributes,
            vocab_size,
            caption_len,
        } => {
            let spec = SyntheticSpec {
                n_images: images,
                n_v,
                d_v,
                n_e,
                n_attributes,
                vocab_size,
                caption_len,
            };
            let manifest = gen_synthetic(&spec, seed, &out)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Train { config, data, out, resume, phase } => {
            let text = fs::read_to_string(&config)?;
            let run_cfg: RunConfig = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("bad config {}: {e}", config.display())))?;
            let dataset = load_dataset(&data)?;
            let phase = match phase {
                PhaseArg::Xe => Phase::Xe,
                PhaseArg::Scst => Phase::Scst,
                PhaseArg::Both => Phase::Both,
            };
            let outcome =
                train(&run_cfg.stack, &run_cfg.train, &dataset, &out, resume.as_deref(), phase)?;
            eprintln!("stackvs: trained {} epochs", outcome.epochs_run);
            println!(
                "{}",
                serde_json::json!({
                    "final_checkpoint": outcome.final_checkpoint,
                    "epochs_run": outcome.epochs_run,
                    "xe_loss": outcome.last_xe_loss,
                })
            );
            Ok(())
        }
        Command::Caption { ckpt, data, beam, out } => run_caption(&ckpt, &data, beam, &out),
        Command::Eval { candidates, references, metrics } => {
            run_eval(&candidates, &references, &metrics)
        }
        Command::Trace { ckpt, data, image_id, out } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&data)?;
            check_dims(&ckpt.config, &ds)?;
            let record = ds.find(&image_id)?;
            let v0 = feature_rows(&record.features);
            let rollout = decode_greedy(&ckpt.params, &ckpt.config, &v0, &record.attribute_ids)?;
            export_trace(&rollout.trace, &out)?;
            println!(
                "{}",
                serde_json::json!({"rows": rollout.trace.rows.len(), "out": out})
            );
            Ok(())
        }
        Command::Selfcheck { .. } => unreachable!("handled in main"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Selfcheck { seed, corrupt_grad } = cli.command {
        let results = stackvs::selfcheck::run_all(seed, corrupt_grad);
        let mut failed = 0;
        for r in &results {
            match &r.error {
                None => println!("ok {}", r.name),
                Some(detail) => {
                    failed += 1;
                    println!("FAIL {}: {detail}", r.name);
                }
            }
        }
        eprintln!("stackvs: selfcheck {} passed, {failed} failed", results.len() - failed);
        return if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(EXIT_SELFCHECK) };
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stackvs: error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
