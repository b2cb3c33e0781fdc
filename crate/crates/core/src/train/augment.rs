use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor2D;

/// Time/feature masking applied to frame sequences during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecAugmentConfig {
    pub enabled: bool,
    pub time_masks: usize,
    pub feature_masks: usize,
    /// Longest time mask as a fraction of the frame count.
    pub max_time_fraction: f64,
    /// Longest feature mask as a fraction of the feature width.
    pub max_feature_fraction: f64,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            time_masks: 2,
            feature_masks: 1,
            max_time_fraction: 0.1,
            max_feature_fraction: 0.1,
        }
    }
}

/// Zeroes up to `time_masks` spans of frames and `feature_masks` spans of
/// feature channels. Each span has a width drawn uniformly from
/// `0..=max_span` and a uniformly drawn start; time spans are drawn first.
pub fn spec_augment<R: Rng + ?Sized>(frames: &Tensor2D, rng: &mut R, cfg: &SpecAugmentConfig) -> Tensor2D {
    let mut out = frames.clone();
    if !cfg.enabled {
        return out;
    }
    let (t, f) = frames.shape();
    let max_t = (cfg.max_time_fraction * t as f64).floor() as usize;
    let max_f = (cfg.max_feature_fraction * f as f64).floor() as usize;
    for _ in 0..cfg.time_masks {
        let width = rng.random_range(0..=max_t.min(t));
        let start = rng.random_range(0..=t - width);
        for r in start..start + width {
            out.row_mut(r).fill(0.0);
        }
    }
    for _ in 0..cfg.feature_masks {
        let width = rng.random_range(0..=max_f.min(f));
        let start = rng.random_range(0..=f - width);
        for r in 0..t {
            out.row_mut(r)[start..start + width].fill(0.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(t: usize, f: usize) -> Tensor2D {
        Tensor2D::from_vec(t, f, (0..t * f).map(|v| v as f64 + 1.0).collect()).unwrap()
    }

    #[test]
    fn disabled_or_empty_masks_are_identity() {
        let x = ramp(20, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let off = SpecAugmentConfig {
            enabled: false,
            ..Default::default()
        };
        assert_eq!(spec_augment(&x, &mut rng, &off), x);
        let zero = SpecAugmentConfig {
            max_time_fraction: 0.0,
            max_feature_fraction: 0.0,
            ..Default::default()
        };
        assert_eq!(spec_augment(&x, &mut rng, &zero), x);
    }

    #[test]
    fn seeded_replay() {
        let cfg = SpecAugmentConfig {
            enabled: true,
            time_masks: 2,
            feature_masks: 1,
            max_time_fraction: 0.2,
            max_feature_fraction: 0.5,
        };
        let x = ramp(20, 8);
        let y = spec_augment(&x, &mut ChaCha8Rng::seed_from_u64(11), &cfg);

        // replay the draws: widths in 0..=4 (time) and 0..=4 (features)
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut masked = vec![vec![false; 8]; 20];
        for _ in 0..2 {
            let w: usize = rng.random_range(0..=4);
            let s: usize = rng.random_range(0..=20 - w);
            for row in masked.iter_mut().skip(s).take(w) {
                row.iter_mut().for_each(|m| *m = true);
            }
        }
        let w: usize = rng.random_range(0..=4);
        let s: usize = rng.random_range(0..=8 - w);
        for row in masked.iter_mut() {
            row[s..s + w].iter_mut().for_each(|m| *m = true);
        }
        for r in 0..20 {
            for c in 0..8 {
                let expected = if masked[r][c] { 0.0 } else { x.get(r, c) };
                assert_eq!(y.get(r, c), expected, "({r},{c})");
            }
        }
    }
}
