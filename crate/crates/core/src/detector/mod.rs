//! A small two-stage detector: strided convolutional backbone, feature pyramid
//! and region proposal network with coordinate channels, a pooled-region
//! classification head and three domain discriminators.

pub mod boxes;
mod checkpoint;
mod config;
mod coord;
mod discriminator;
mod model;
mod params;
mod targets;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{CoordPlacement, DetectorConfig};
pub use coord::{coord_conv, make_coord_grid, CoordGrid, CoordMode};
pub use discriminator::{discriminate_domain, DomainLogits};
pub use model::{
    check_images, forward_detector, objectness_maps, DetectorOutput, FeaturePyramid, Proposal,
    ScoredBox,
};
pub use params::{Bound, DetectorParams};
pub use targets::{
    batch_terms, build_plan, AnchorSample, BatchRequest, BatchTerms, ImagePlan, RoiTarget,
    Supervision, TrainPlan, SMOOTH_L1_BETA,
};
