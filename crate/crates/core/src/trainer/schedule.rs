use super::config::TrainConfig;

/// Linear warmup from 0, then constant, then a single step decay.
pub fn lr_schedule(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let spe = steps_per_epoch.max(1) as f64;
    let warmup = cfg.warmup_epochs * spe;
    let s = step as f64;
    let lr = if s < warmup {
        cfg.base_lr * s / warmup
    } else {
        cfg.base_lr
    };
    if step >= cfg.lr_decay_epoch * steps_per_epoch.max(1) {
        lr * cfg.lr_decay_factor
    } else {
        lr
    }
}
