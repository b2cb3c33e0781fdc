use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, lr_at, nt_xent_loss, spec_augment, OptimizerState, SpecAugmentConfig};
use crate::data::{fs_pair_indices, metadata_to_text, Item, MetadataKind};
use crate::error::{Error, Result};
use crate::model::{FusionMode, HybridModel, ModelConfig, PairBatch};
use crate::tensor::Module;
use crate::text::{preprocess_text, tokenize, TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub temperature: f64,
    pub seed: u64,
    pub metadata: MetadataKind,
    pub augment: SpecAugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 25,
            warmup_epochs: 1,
            lr_max: 2e-5,
            lr_min: 1e-7,
            temperature: 0.05,
            seed: 0,
            metadata: MetadataKind::Cs,
            augment: SpecAugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size: must be at least 2, got {}", self.batch_size)));
        }
        if !(self.lr_min > 0.0 && self.lr_max > self.lr_min && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "lr_max: need lr_max > lr_min > 0, got lr_max={} lr_min={}",
                self.lr_max, self.lr_min
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature: must be positive, got {}", self.temperature)));
        }
        if self.epochs == 0 || self.epochs < self.warmup_epochs {
            return Err(Error::Config(format!(
                "epochs: need epochs >= max(1, warmup_epochs={}), got {}",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean loss over the batches that were stepped.
    pub loss: f64,
    /// Learning rate of the last step.
    pub lr: f64,
    pub batches: usize,
    pub skipped: usize,
}

/// Word vocabulary over the training texts: every caption, plus tags when the
/// mode reads metadata. Content-only models never see tag words.
pub fn build_vocabulary(items: &[&Item], mode: FusionMode) -> Vocabulary {
    let mut texts: Vec<String> = items
        .iter()
        .flat_map(|i| i.captions.iter().map(|c| preprocess_text(c)))
        .collect();
    if mode.uses_metadata() {
        texts.extend(items.iter().map(|i| preprocess_text(&i.tags.join(" "))));
    }
    Vocabulary::build(texts)
}

/// Owns a model, its optimizer state and the data-order generator.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: HybridModel,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: TrainConfig, model_config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let model = HybridModel::new(model_config, vocab, config.seed)?;
        Ok(Self::from_parts(model, None, config))
    }

    /// Wraps an existing model, e.g. one restored from a checkpoint.
    pub fn from_parts(model: HybridModel, optimizer: Option<OptimizerState>, config: TrainConfig) -> Self {
        let optimizer = optimizer.unwrap_or_else(|| OptimizerState::new(&model));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Self {
            model,
            optimizer,
            config,
            rng,
            epoch: 0,
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.batch_size)
    }

    /// One pass over `items` in a freshly shuffled order.
    pub fn train_epoch(&mut self, items: &[&Item]) -> Result<EpochStats> {
        if items.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mode = self.model.mode();
        let kind = self.config.metadata;
        if mode.uses_audio() {
            let expected = self.model.config.frame_width;
            if let Some(bad) = items.iter().find(|i| i.frames.rows() == 0 || i.frames.cols() != expected) {
                return Err(Error::Ingest(format!(
                    "item `{}` has a {}x{} frame sequence, model expects width {expected}",
                    bad.id,
                    bad.frames.rows(),
                    bad.frames.cols()
                )));
            }
        }
        let per_epoch = self.steps_per_epoch(items.len());
        let total = per_epoch * self.config.epochs;
        let warmup = per_epoch * self.config.warmup_epochs;

        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut self.rng);
        let mut loss_sum = 0.0;
        let mut stats = EpochStats {
            epoch: self.epoch,
            loss: 0.0,
            lr: 0.0,
            batches: 0,
            skipped: 0,
        };
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            if chunk.len() < 2 {
                warn!("epoch {}: skipping batch of a single item", self.epoch);
                stats.skipped += 1;
                continue;
            }
            let batch = self.make_batch(items, chunk, mode, kind)?;
            self.model.zero_grad();
            let (scores, cache) = self.model.forward_batch(&batch)?;
            let (loss, d_scores) = nt_xent_loss(&scores, self.config.temperature)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("loss at epoch {} batch {b}", self.epoch)));
            }
            self.model.backward_batch(&cache, &d_scores);
            let step = self.epoch * per_epoch + b + 1;
            let lr = lr_at(step, total, warmup, self.config.lr_max, self.config.lr_min);
            adam_step(&mut self.model, &mut self.optimizer, lr)?;
            loss_sum += loss;
            stats.batches += 1;
            stats.lr = lr;
        }
        stats.loss = if stats.batches > 0 { loss_sum / stats.batches as f64 } else { f64::NAN };
        debug!("epoch {} loss {:.5} lr {:.3e}", self.epoch, stats.loss, stats.lr);
        self.epoch += 1;
        Ok(stats)
    }

    /// Runs the remaining epochs of the configured budget.
    pub fn fit(&mut self, items: &[&Item]) -> Result<Vec<EpochStats>> {
        let mut out = Vec::with_capacity(self.config.epochs.saturating_sub(self.epoch));
        while self.epoch < self.config.epochs {
            out.push(self.train_epoch(items)?);
        }
        Ok(out)
    }

    fn make_batch(&mut self, items: &[&Item], chunk: &[usize], mode: FusionMode, kind: MetadataKind) -> Result<PairBatch> {
        let vocab = &self.model.vocab;
        let mut batch = PairBatch::default();
        for &i in chunk {
            let item = items[i];
            let (query, meta) = if kind == MetadataKind::Fs {
                let (q, m) = fs_pair_indices(item.captions.len(), &mut self.rng)?;
                (&item.captions[q], Some(preprocess_text(&item.captions[m])))
            } else {
                let q = self.rng.random_range(0..item.captions.len());
                let meta = if mode.uses_metadata() {
                    Some(metadata_to_text(item, kind)?)
                } else {
                    None
                };
                (&item.captions[q], meta)
            };
            batch.queries.push(tokenize(&preprocess_text(query), vocab));
            if mode.uses_metadata() {
                batch.metadata.push(tokenize(meta.as_deref().unwrap_or(""), vocab));
            } else {
                batch.metadata.push(TokenSequence::new(vec![crate::text::CLS])?);
            }
            if mode.uses_audio() {
                let frames = if self.config.augment.enabled {
                    spec_augment(&item.frames, &mut self.rng, &self.config.augment)
                } else {
                    item.frames.clone()
                };
                batch.frames.push(frames);
            }
        }
        Ok(batch)
    }
}
