//! The fixed two-stage convolutional network with hand-written backward
//! passes, weight normalization and Adam.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use config::NetworkConfig;
pub use gradcheck::{check_objective, finite_diff_check, BatchObjective, GradCheckOptions, GradCheckReport, Objective};
pub use network::{ForwardCache, Gradients, Mode, Network};
pub use params::{LayerGrads, WnLayer};
