//! Train-then-evaluate runs over several seeds, and the multi-row reports
//! built from them.

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, Dataset, MetadataKind, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_items, EvalReport, RowInput, RunResult};
use crate::model::{FusionMode, ModelConfig};
use crate::train::{build_vocabulary, EpochStats, TrainConfig, Trainer};

/// Corpus, model and optimizer settings for one experiment. The defaults are
/// the reference setup: 512 training and 128 test items, small one-layer
/// encoders trained from scratch for 40 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            model: ModelConfig {
                width: 64,
                heads: 2,
                text_depth: 1,
                audio_depth: 1,
                fusion_depth: 1,
                ff_mult: 2,
                frame_width: synth.frame_width,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 40,
                lr_max: 1e-3,
                lr_min: 1e-6,
                ..TrainConfig::default()
            },
            synth,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()
    }
}

/// `n` consecutive seeds starting at `base`.
pub fn seed_list(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Trains on the dataset's training split.
pub fn train_model(dataset: &Dataset, model: &ModelConfig, train: &TrainConfig) -> Result<(Trainer, Vec<EpochStats>)> {
    let items = dataset.split(Split::Train);
    if items.is_empty() {
        return Err(Error::DatasetConsistency("training split is empty".into()));
    }
    if model.mode.uses_audio() && dataset.frame_width() != Some(model.frame_width) {
        return Err(Error::Config(format!(
            "frame_width: model expects {}, dataset has {:?}",
            model.frame_width,
            dataset.frame_width()
        )));
    }
    let vocab = build_vocabulary(&items, model.mode);
    let mut trainer = Trainer::new(train.clone(), model.clone(), vocab)?;
    let stats = trainer.fit(&items)?;
    Ok((trainer, stats))
}

/// Trains once per seed and evaluates each model on the test split.
pub fn run_seeds(
    dataset: &Dataset,
    label: &str,
    model: &ModelConfig,
    train: &TrainConfig,
    seeds: &[u64],
    k: usize,
) -> Result<RowInput> {
    let test = dataset.split(Split::Test);
    if test.is_empty() {
        return Err(Error::DatasetConsistency("test split is empty".into()));
    }
    let mut runs: Vec<RunResult> = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = TrainConfig {
            seed,
            ..train.clone()
        };
        let (trainer, stats) = train_model(dataset, model, &cfg)?;
        let run = evaluate_items(&trainer.model, &test, cfg.metadata, k)?;
        info!(
            "{label} seed {seed}: final loss {:.4}, map@{k} {:.4}",
            stats.last().map_or(f64::NAN, |s| s.loss),
            run.metrics.map
        );
        runs.push(run);
    }
    Ok(RowInput {
        label: label.to_string(),
        mode: model.mode,
        metadata: train.metadata,
        seeds: seeds.to_vec(),
        runs,
    })
}

/// Every fusion mode on shared seeds, content first so deltas are relative to
/// the audio-only baseline.
pub fn compare_modes(
    dataset: &Dataset,
    model: &ModelConfig,
    train: &TrainConfig,
    seeds: &[u64],
    k: usize,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(FusionMode::ALL.len());
    for mode in FusionMode::ALL {
        let cfg = ModelConfig {
            mode,
            ..model.clone()
        };
        rows.push(run_seeds(dataset, mode.as_str(), &cfg, train, seeds, k)?);
    }
    EvalReport::new(k, rows)
}

/// Trains content-only (`none`) and tag-fused late (`tags`) models on a corpus
/// whose training captions are spelled out from tags, then evaluates both on
/// natural test captions.
pub fn degradation_experiment(
    synth: &SynthConfig,
    model: &ModelConfig,
    train: &TrainConfig,
    seeds: &[u64],
    k: usize,
) -> Result<EvalReport> {
    let dataset = generate_synthetic(&SynthConfig {
        caption_from_tags: true,
        ..synth.clone()
    })?;
    let train = TrainConfig {
        metadata: MetadataKind::Cs,
        ..train.clone()
    };
    let none = ModelConfig {
        mode: FusionMode::Content,
        ..model.clone()
    };
    let tags = ModelConfig {
        mode: FusionMode::Late,
        ..model.clone()
    };
    EvalReport::new(
        k,
        vec![
            run_seeds(&dataset, "none", &none, &train, seeds, k)?,
            run_seeds(&dataset, "tags", &tags, &train, seeds, k)?,
        ],
    )
}
