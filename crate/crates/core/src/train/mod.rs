//! Contrastive training: loss, optimizer, schedule, augmentation and the
//! epoch loop.

mod adam;
mod augment;
mod checkpoint;
mod loss;
mod schedule;
mod trainer;

pub use adam::{adam_step, OptimizerState, BETA1, BETA2, EPSILON};
pub use augment::{spec_augment, SpecAugmentConfig};
pub use loss::nt_xent_loss;
pub use schedule::lr_at;
pub use trainer::{build_vocabulary, EpochStats, TrainConfig, Trainer};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, MAGIC};
