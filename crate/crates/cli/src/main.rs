//! `fusebed` command-line driver.
//!
//! Settings come from built-in defaults, then an optional `--config` JSON
//! record, then flags. Logs go to stderr; results go to stdout or `--out`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fusebed::data::{generate_synthetic, load_dataset, Dataset, Item, MetadataKind, Split};
use fusebed::eval::{build_index, evaluate_items, rank_items, EvalReport, RowInput};
use fusebed::experiment::{compare_modes, degradation_experiment, seed_list, train_model, ExperimentConfig};
use fusebed::model::{FusionMode, HybridModel};
use fusebed::train::{build_vocabulary, load_checkpoint, save_checkpoint, Checkpoint};
use fusebed_server::{ServiceState, DEFAULT_CONCURRENCY, DEFAULT_PORT};
use log::info;

const CHECKPOINT_FILE: &str = "model.ckpt";
const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Parser)]
#[command(name = "fusebed", version, about = "Hybrid audio + metadata text-to-audio retrieval")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON record with optional `synth`, `model` and `train` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<FusionMode>,
    #[arg(long, global = true, value_parser = parse_metadata)]
    metadata: Option<MetadataKind>,
    #[arg(long, global = true, default_value_t = 10)]
    k: usize,
    #[arg(long, global = true, default_value_t = 3)]
    seeds: usize,
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    GenData {
        /// Total number of items.
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        test_items: Option<usize>,
        #[arg(long)]
        rho: Option<f64>,
        /// Spell training captions out from tags.
        #[arg(long)]
        caption_from_tags: bool,
    },
    /// Train on a dataset's training split; writes a checkpoint and per-epoch metrics.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint (or an untrained model) on one split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Omit to evaluate a freshly initialized model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Print the top-k items for a query.
    Rank {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        query: String,
    },
    /// Train and evaluate every fusion mode on shared seeds.
    Compare {
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Content-only vs tag-fused models trained on captions made from tags.
    Degradation,
    /// Serve a checkpoint over HTTP.
    Serve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = DEFAULT_CONCURRENCY)]
        concurrency: usize,
    },
}

fn parse_mode(s: &str) -> Result<FusionMode, String> {
    s.parse().map_err(|e: fusebed::error::Error| e.to_string())
}

fn parse_metadata(s: &str) -> Result<MetadataKind, String> {
    s.parse().map_err(|e: fusebed::error::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(format!("expected train|val|test, got `{other}`")),
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(mode) = common.mode {
        cfg.model.mode = mode;
    }
    if let Some(kind) = common.metadata {
        cfg.train.metadata = kind;
    }
    if common.k == 0 {
        bail!("k: must be at least 1");
    }
    if common.seeds == 0 {
        bail!("seeds: must be at least 1");
    }
    Ok(cfg)
}

/// Writes to `--out` when given, stdout otherwise.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn load_data(dir: &Path) -> Result<Dataset> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn report_text(report: &EvalReport) -> Result<String> {
    Ok(report.to_jsonl()?)
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.common;
    let mut cfg = load_config(&common)?;
    match cli.command {
        Command::GenData {
            items,
            test_items,
            rho,
            caption_from_tags,
        } => {
            let synth = &mut cfg.synth;
            if let Some(n) = items {
                synth.n_items = n;
            }
            if let Some(n) = test_items {
                synth.test_items = n;
            }
            if let Some(r) = rho {
                synth.rho = r;
            }
            if let Some(s) = common.seed {
                synth.seed = s;
            }
            synth.caption_from_tags |= caption_from_tags;
            let dir = common.out.context("gen-data needs --out DIR")?;
            let ds = generate_synthetic(synth)?;
            ds.save(&dir)?;
            info!("wrote {} items to {}", ds.len(), dir.display());
        }
        Command::Train { data, epochs } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            let ds = load_data(&data)?;
            if let Some(w) = ds.frame_width() {
                cfg.model.frame_width = w;
            }
            cfg.validate()?;
            let dir = common.out.context("train needs --out DIR")?;
            let (trainer, stats) = train_model(&ds, &cfg.model, &cfg.train)?;
            fs::create_dir_all(&dir)?;
            save_checkpoint(
                &dir.join(CHECKPOINT_FILE),
                &trainer.model,
                &trainer.optimizer,
                &trainer.config,
                trainer.epochs_done(),
            )?;
            let mut lines = String::new();
            for s in &stats {
                lines.push_str(&serde_json::to_string(s)?);
                lines.push('\n');
            }
            fs::write(dir.join(METRICS_FILE), lines)?;
            info!("wrote {}", dir.join(CHECKPOINT_FILE).display());
        }
        Command::Evaluate {
            data,
            checkpoint,
            split,
        } => {
            let ds = load_data(&data)?;
            let (model, kind, seed) = match checkpoint {
                Some(path) => {
                    let ck = load_model(&path)?;
                    let kind = common.metadata.unwrap_or(ck.train.metadata);
                    (ck.model, kind, ck.train.seed)
                }
                None => {
                    if let Some(w) = ds.frame_width() {
                        cfg.model.frame_width = w;
                    }
                    cfg.validate()?;
                    let seed = common.seed.unwrap_or(cfg.train.seed);
                    let train_items = ds.split(Split::Train);
                    let vocab_items = if train_items.is_empty() { ds.items().iter().collect() } else { train_items };
                    let vocab = build_vocabulary(&vocab_items, cfg.model.mode);
                    (HybridModel::new(cfg.model.clone(), vocab, seed)?, cfg.train.metadata, seed)
                }
            };
            let items = ds.split(split);
            let run = evaluate_items(&model, &items, kind, common.k)?;
            let report = EvalReport::new(
                common.k,
                vec![RowInput {
                    label: model.mode().to_string(),
                    mode: model.mode(),
                    metadata: kind,
                    seeds: vec![seed],
                    runs: vec![run],
                }],
            )?;
            eprint!("{}", report.to_table());
            emit(common.out.as_deref(), &report_text(&report)?)?;
        }
        Command::Rank {
            data,
            checkpoint,
            query,
        } => {
            let ds = load_data(&data)?;
            let ck = load_model(&checkpoint)?;
            let kind = common.metadata.unwrap_or(ck.train.metadata);
            let items: Vec<&Item> = ds.items().iter().collect();
            let index = build_index(&items, &ck.model, kind)?;
            let mut text = String::new();
            for hit in rank_items(&index, &query, &ck.model, common.k)? {
                text.push_str(&serde_json::to_string(&hit)?);
                text.push('\n');
            }
            emit(common.out.as_deref(), &text)?;
        }
        Command::Compare { data } => {
            let ds = match data {
                Some(dir) => load_data(&dir)?,
                None => generate_synthetic(&cfg.synth)?,
            };
            if let Some(w) = ds.frame_width() {
                cfg.model.frame_width = w;
            }
            cfg.validate()?;
            let seeds = seed_list(common.seed.unwrap_or(0), common.seeds);
            let report = compare_modes(&ds, &cfg.model, &cfg.train, &seeds, common.k)?;
            print!("{}", report.to_table());
            if let Some(out) = common.out.as_deref() {
                emit(Some(out), &report_text(&report)?)?;
            }
        }
        Command::Degradation => {
            cfg.model.frame_width = cfg.synth.frame_width;
            cfg.validate()?;
            let seeds = seed_list(common.seed.unwrap_or(0), common.seeds);
            let report = degradation_experiment(&cfg.synth, &cfg.model, &cfg.train, &seeds, common.k)?;
            print!("{}", report.to_table());
            if let Some(out) = common.out.as_deref() {
                emit(Some(out), &report_text(&report)?)?;
            }
        }
        Command::Serve {
            data,
            checkpoint,
            port,
            host,
            concurrency,
        } => {
            let state = ServiceState::from_files(&checkpoint, &data, common.mode, common.metadata, concurrency)
                .context("building the service index")?;
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .with_context(|| format!("binding {host}:{port}"))?;
                let shutdown = async {
                    let _ = tokio::signal::ctrl_c().await;
                };
                fusebed_server::serve(listener, Arc::new(state), shutdown).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
