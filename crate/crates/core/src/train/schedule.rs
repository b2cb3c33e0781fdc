use std::f64::consts::PI;

/// Linear warmup from 0 to `lr_max` over `warmup_steps`, then cosine decay to
/// `lr_min` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if step < warmup_steps {
        return lr_max * step as f64 / warmup_steps as f64;
    }
    let decay_steps = total_steps.saturating_sub(warmup_steps);
    if decay_steps == 0 {
        return lr_max;
    }
    let progress = ((step - warmup_steps) as f64 / decay_steps as f64).min(1.0);
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * progress).cos())
}
