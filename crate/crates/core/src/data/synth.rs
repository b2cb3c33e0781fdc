//! Latent-topic synthetic corpus.
//!
//! Every item draws a topic and a small set of descriptor words from a shared
//! noise pool. Frames are noisy copies of the topic's mean vector, so audio
//! identifies the topic but nothing finer. Captions mix topic keywords with the
//! item's descriptors; tags are drawn from the caption vocabulary with
//! probability `rho` each, otherwise from words the captions never use.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Item, MetadataKind, Splits};
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Keywords per topic.
pub const TOPIC_POOL_SIZE: usize = 8;
/// Share of caption tokens drawn from the topic pool.
const TOPIC_SHARE: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_items: usize,
    pub val_items: usize,
    pub test_items: usize,
    pub n_topics: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub frame_width: usize,
    /// Std of the per-frame noise around the topic mean.
    pub frame_noise: f64,
    /// Total number of distinct words: topic keywords plus the noise pool.
    pub vocab_size: usize,
    pub min_caption_len: usize,
    pub max_caption_len: usize,
    pub captions_per_item: usize,
    pub tags_per_item: usize,
    pub descriptors_per_item: usize,
    /// Probability that a tag is taken from the item's caption vocabulary.
    pub rho: f64,
    /// Replace training-split captions with captions spelled out from tags.
    pub caption_from_tags: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_items: 640,
            val_items: 0,
            test_items: 128,
            n_topics: 16,
            min_frames: 8,
            max_frames: 16,
            frame_width: 16,
            frame_noise: 1.0,
            vocab_size: 192,
            min_caption_len: 6,
            max_caption_len: 12,
            captions_per_item: 5,
            tags_per_item: 6,
            descriptors_per_item: 4,
            rho: 0.8,
            caption_from_tags: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn noise_pool_size(&self) -> usize {
        self.vocab_size.saturating_sub(self.n_topics * TOPIC_POOL_SIZE)
    }

    pub fn train_items(&self) -> usize {
        self.n_items.saturating_sub(self.val_items + self.test_items)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho", format!("must lie in [0, 1], got {}", self.rho));
        }
        if self.n_topics < 2 {
            return bad("n_topics", format!("need at least 2, got {}", self.n_topics));
        }
        if self.n_items == 0 {
            return bad("n_items", "must be positive".into());
        }
        if self.val_items + self.test_items > self.n_items {
            return bad("test_items", "val and test splits exceed n_items".into());
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("min_frames", format!("need 1 <= min_frames <= max_frames ({})", self.max_frames));
        }
        if self.frame_width == 0 {
            return bad("frame_width", "must be positive".into());
        }
        if !(self.frame_noise >= 0.0 && self.frame_noise.is_finite()) {
            return bad("frame_noise", "must be finite and non-negative".into());
        }
        if self.min_caption_len == 0 || self.min_caption_len > self.max_caption_len {
            return bad(
                "min_caption_len",
                format!("need 1 <= min_caption_len <= max_caption_len ({})", self.max_caption_len),
            );
        }
        if self.captions_per_item == 0 {
            return bad("captions_per_item", "must be positive".into());
        }
        if self.descriptors_per_item == 0 {
            return bad("descriptors_per_item", "must be positive".into());
        }
        if self.caption_from_tags && self.tags_per_item == 0 {
            return bad("tags_per_item", "caption_from_tags needs at least one tag".into());
        }
        if self.noise_pool_size() < self.descriptors_per_item + self.tags_per_item {
            return bad(
                "vocab_size",
                format!(
                    "{} leaves a noise pool of {} words, need at least {}",
                    self.vocab_size,
                    self.noise_pool_size(),
                    self.descriptors_per_item + self.tags_per_item
                ),
            );
        }
        Ok(())
    }
}

fn topic_word(topic: usize, k: usize) -> String {
    format!("t{topic}k{k}")
}

fn noise_word(k: usize) -> String {
    format!("n{k}")
}

/// Generates a dataset declared as closed-set tags. The first
/// `train_items()` items form the training split, then validation, then test.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means: Vec<Vec<f64>> = (0..cfg.n_topics)
        .map(|_| (0..cfg.frame_width).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let all_words: Vec<String> = (0..cfg.n_topics)
        .flat_map(|t| (0..TOPIC_POOL_SIZE).map(move |k| topic_word(t, k)))
        .chain((0..cfg.noise_pool_size()).map(noise_word))
        .collect();

    let n_train = cfg.train_items();
    let width = cfg.n_items.to_string().len();
    let mut items = Vec::with_capacity(cfg.n_items);
    let mut splits = Splits::default();
    for i in 0..cfg.n_items {
        let id = format!("item{i:0width$}");
        let topic = rng.random_range(0..cfg.n_topics);

        let t = rng.random_range(cfg.min_frames..=cfg.max_frames);
        let mut frames = Tensor2D::zeros(t, cfg.frame_width);
        for r in 0..t {
            for (c, m) in frames.row_mut(r).iter_mut().zip(&means[topic]) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *c = m + cfg.frame_noise * z;
            }
        }

        let descriptors: Vec<String> = sample(&mut rng, cfg.noise_pool_size(), cfg.descriptors_per_item)
            .into_iter()
            .map(noise_word)
            .collect();
        let mut captions: Vec<String> = (0..cfg.captions_per_item)
            .map(|_| {
                let len = rng.random_range(cfg.min_caption_len..=cfg.max_caption_len);
                (0..len)
                    .map(|_| {
                        if rng.random_bool(TOPIC_SHARE) {
                            topic_word(topic, rng.random_range(0..TOPIC_POOL_SIZE))
                        } else {
                            descriptors[rng.random_range(0..descriptors.len())].clone()
                        }
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();

        let caption_vocab: BTreeSet<&str> = captions.iter().flat_map(|c| c.split_whitespace()).collect();
        let mut inside: Vec<String> = caption_vocab.iter().map(|s| s.to_string()).collect();
        let mut outside: Vec<String> = all_words
            .iter()
            .filter(|w| !caption_vocab.contains(w.as_str()))
            .cloned()
            .collect();
        let mut tags = Vec::with_capacity(cfg.tags_per_item);
        for _ in 0..cfg.tags_per_item {
            let pool = if rng.random_bool(cfg.rho) { &mut inside } else { &mut outside };
            if !pool.is_empty() {
                let k = rng.random_range(0..pool.len());
                tags.push(pool.swap_remove(k));
            }
        }

        if i < n_train {
            if cfg.caption_from_tags {
                captions = (0..cfg.captions_per_item)
                    .map(|c| {
                        let mut rotated = tags.clone();
                        rotated.rotate_left(c % tags.len());
                        rotated.join(" ")
                    })
                    .collect();
            }
            splits.train.push(id.clone());
        } else if i < n_train + cfg.val_items {
            splits.val.push(id.clone());
        } else {
            splits.test.push(id.clone());
        }
        items.push(Item {
            id,
            frames,
            tags,
            captions,
        });
    }
    Dataset::new(items, MetadataKind::Cs, splits)
}
