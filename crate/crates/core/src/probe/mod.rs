//! Per-token exit probe: model, loss, training and model files.

pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod train;

pub use io::{load_model, save_model, ModelFileError};
pub use loss::{class_weights, weighted_bce, ClassWeights};
pub use metrics::macro_f1;
pub use model::{predict, Arch, ProbeError, ProbeModel, DEFAULT_THRESHOLD};
pub use train::{train, TrainConfig, TrainExample, TrainReport};
