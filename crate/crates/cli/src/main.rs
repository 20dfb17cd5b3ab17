use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use glance_core::data::{
    load_features, load_full_annotations, load_glance_annotations, load_word_vectors,
    sample_glance, tokenize_and_embed, write_jsonl,
};
use glance_core::evaluation::{evaluate_dataset, EvalReport, DEFAULT_THRESHOLDS};
use glance_core::harness::{
    benchmark_data, benchmark_training, evaluate, load_checkpoint, load_words, save_checkpoint,
    synthetic_splits, train, write_splits, BenchmarkConfig, Dataset, TrainConfig, TrainState,
};
use glance_core::inference::{
    load_predictions, retrieve_with_output, write_predictions, ProposalConfig, ProposalMode,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Glance-supervised video moment retrieval.
#[derive(Parser, Debug)]
#[command(name = "glance", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Replace full annotations with a single glance drawn inside each moment.
    Reannotate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic dataset directory.
    Synth {
        /// Benchmark JSON (`synth` and `splits`); the built-in benchmark when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on `<data-dir>/train.jsonl`, validating on `val.jsonl` each epoch.
    Train {
        /// Training JSON; missing fields take the preset's values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        #[arg(long)]
        data_dir: PathBuf,
        /// Output directory for checkpoints, metrics and the resolved config.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a split, or a predictions file against annotations.
    Eval {
        #[arg(long, requires = "data_dir")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "qagi")]
        mode: ProposalMode,
        /// Training JSON whose proposal settings are used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "ckpt", requires = "annotations")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Also write the predictions as JSON Lines.
        #[arg(long)]
        write_predictions: Option<PathBuf>,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Localize one query in one feature file.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        query: String,
        /// Word-vector table; `<dir>/words.txt` style text file.
        #[arg(long)]
        words: PathBuf,
        #[arg(long, default_value = "qagi")]
        mode: ProposalMode,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the guidance attention vector as JSON.
        #[arg(long)]
        dump_attention: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Desk,
    Benchmark,
    Paper,
}

impl Preset {
    fn config(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(),
            Preset::Benchmark => benchmark_training(),
            Preset::Paper => TrainConfig::paper(),
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Reads a training config on top of `base`: keys present in the file win.
fn read_train_config(path: &Path, base: TrainConfig) -> Result<TrainConfig> {
    let overrides: serde_json::Value = read_json(path)?;
    if !overrides.is_object() {
        bail!("{} must contain a JSON object", path.display());
    }
    let mut merged = serde_json::to_value(base)?;
    merge(&mut merged, overrides);
    serde_json::from_value(merged).with_context(|| format!("parsing {}", path.display()))
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn proposals(config: Option<&Path>, mode: ProposalMode) -> Result<ProposalConfig> {
    let base = match config {
        Some(p) => read_train_config(p, TrainConfig::desk())?.proposals(),
        None => ProposalConfig::default(),
    };
    Ok(base.with_mode(mode))
}

fn print_report(report: &EvalReport, json: bool) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string(report)?);
    } else {
        print!("{report}");
    }
    Ok(())
}

fn reannotate(input: &Path, out: &Path, seed: u64) -> Result<()> {
    let full = load_full_annotations(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let glances: Vec<_> = full.iter().map(|a| sample_glance(a, &mut rng)).collect();
    write_jsonl(out, &glances)?;
    eprintln!(
        "wrote {} glance annotations to {}",
        glances.len(),
        out.display()
    );
    Ok(())
}

fn synth(config: Option<&Path>, out_dir: &Path, seed: u64) -> Result<()> {
    let cfg: BenchmarkConfig = match config {
        Some(p) => read_json(p)?,
        None => benchmark_data(),
    };
    let splits = synthetic_splits(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    write_splits(out_dir, &splits)?;
    eprintln!(
        "wrote {} / {} / {} examples to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        out_dir.display()
    );
    Ok(())
}

fn run_train(
    config: Option<&Path>,
    preset: Preset,
    data_dir: &Path,
    out: &Path,
    seed: Option<u64>,
    resume: Option<&Path>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => read_train_config(p, preset.config())?,
        None => preset.config(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let words = load_words(data_dir)?;
    let train_set = Dataset::load_split(data_dir, "train", &words)?;
    let val_set = Dataset::load_split(data_dir, "val", &words)?;
    let state = match resume {
        Some(p) => {
            let expected = cfg
                .model
                .resolve(train_set.feature_dim(), words.dimension());
            Some(load_checkpoint(p, Some(&expected))?)
        }
        None => None,
    };

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let metrics_path = out.join("metrics.jsonl");
    let metrics = if resume.is_some() {
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)
    } else {
        File::create(&metrics_path)
    }
    .with_context(|| format!("opening {}", metrics_path.display()))?;
    let mut metrics = BufWriter::new(metrics);
    let best_path = out.join("best.ckpt");

    let outcome = train(
        &cfg,
        &train_set,
        &val_set,
        state,
        |log, state: &TrainState| {
            let line = serde_json::to_string(log).expect("epoch log serializes");
            writeln!(metrics, "{line}")
                .and_then(|_| metrics.flush())
                .map_err(|source| glance_core::data::DataError::Io {
                    path: metrics_path.clone(),
                    source,
                })?;
            if log.improved {
                save_checkpoint(state, &best_path)?;
            }
            eprintln!(
                "epoch {:>3}  lr {:.2e}  loss {:.4}  val mIoU {:6.2}{}",
                log.epoch,
                log.learning_rate,
                log.mean_loss,
                log.val_miou,
                if log.improved { "  *" } else { "" }
            );
            Ok(())
        },
    )?;
    save_checkpoint(&outcome.state, out.join("last.ckpt"))?;
    eprintln!(
        "best val mIoU {:.2}; checkpoints in {}",
        outcome.best_val_miou,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    ckpt: Option<&Path>,
    data_dir: Option<&Path>,
    split: &str,
    mode: ProposalMode,
    config: Option<&Path>,
    predictions: Option<&Path>,
    annotations: Option<&Path>,
    write_to: Option<&Path>,
    json: bool,
) -> Result<()> {
    match (ckpt, data_dir, predictions, annotations) {
        (Some(ckpt), Some(dir), None, _) => {
            let words = load_words(dir)?;
            let data = Dataset::load_split(dir, split, &words)?;
            let state = load_checkpoint(ckpt, None)?;
            let (report, preds) = evaluate(
                &state.params,
                &state.model,
                &data,
                &proposals(config, mode)?,
            )?;
            if let Some(p) = write_to {
                write_predictions(p, &preds)?;
            }
            print_report(&report, json)
        }
        (None, _, Some(preds), Some(anns)) => {
            let preds = load_predictions(preds)?;
            let anns = load_glance_annotations(anns)?;
            let report = evaluate_dataset(&preds, &anns, &DEFAULT_THRESHOLDS)?;
            print_report(&report, json)
        }
        _ => bail!("give either --ckpt with --data-dir, or --predictions with --annotations"),
    }
}

fn infer(
    ckpt: &Path,
    features: &Path,
    query: &str,
    words: &Path,
    mode: ProposalMode,
    config: Option<&Path>,
    dump_attention: Option<&Path>,
) -> Result<()> {
    let state = load_checkpoint(ckpt, None)?;
    let video = load_features(features)?;
    let table = load_word_vectors(words)?;
    let tokens = tokenize_and_embed(query, &table)?;
    let (result, output) = retrieve_with_output(
        &video,
        &tokens,
        &state.params,
        &state.model,
        &proposals(config, mode)?,
    )?;
    if let Some(p) = dump_attention {
        std::fs::write(p, serde_json::to_string(&output.guidance_attention)?)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{}", serde_json::to_string(&result)?);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Reannotate { input, out, seed } => reannotate(&input, &out, seed),
        Command::Synth {
            config,
            out_dir,
            seed,
        } => synth(config.as_deref(), &out_dir, seed),
        Command::Train {
            config,
            preset,
            data_dir,
            out,
            seed,
            resume,
        } => run_train(
            config.as_deref(),
            preset,
            &data_dir,
            &out,
            seed,
            resume.as_deref(),
        ),
        Command::Eval {
            ckpt,
            data_dir,
            split,
            mode,
            config,
            predictions,
            annotations,
            write_predictions,
            json,
        } => eval(
            ckpt.as_deref(),
            data_dir.as_deref(),
            &split,
            mode,
            config.as_deref(),
            predictions.as_deref(),
            annotations.as_deref(),
            write_predictions.as_deref(),
            json,
        ),
        Command::Infer {
            ckpt,
            features,
            query,
            words,
            mode,
            config,
            dump_attention,
        } => infer(
            &ckpt,
            &features,
            &query,
            &words,
            mode,
            config.as_deref(),
            dump_attention.as_deref(),
        ),
    }
}
