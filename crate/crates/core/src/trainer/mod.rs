//! Two-stage training: supervised source-only training, then teacher–student
//! adaptation with pseudo labels, masked images and domain alignment.

mod batch;
mod config;
mod loss;
mod mask;
mod optim;
mod pseudo;
mod schedule;
mod stage;
mod step;

pub use batch::{batch_split, compose_batch, BatchComposer, EpochSampler, MixedBatch};
pub use config::{LossWeights, TrainConfig};
pub use loss::{term_coefficients, total_loss, LossBreakdown};
pub use mask::{apply_mask, generate_mask, BlockMask};
pub use optim::Sgd;
pub use pseudo::{filter_pseudo_labels, PseudoLabelSet};
pub use schedule::lr_schedule;
pub use stage::{
    evaluate_model, predict, supervised_loss, train_stage1, train_stage2, EpochMetrics, MetricsLog,
    Stage2Data, Stage2Outcome, StepRecord, TrainObserver,
};
pub use step::{composite_step, PreparedBatch, StepOutput};

use crate::detector::DetectorParams;
use crate::error::Result;

/// `teacher ← decay·teacher + (1 − decay)·student`, elementwise.
pub fn ema_update(
    teacher: &mut DetectorParams,
    student: &DetectorParams,
    decay: f64,
) -> Result<()> {
    teacher.blend_from(student, decay)
}
