//! Bi-level architecture search on synthetic segmentation data, plus
//! retraining of decoded architectures.

mod config;
mod data;
mod metrics;
mod retrain;
mod search;

pub use config::{cosine_lr, parse_kv, parse_value, SearchConfig};
pub use data::{
    gen_toy_dataset, split_indices, split_train, Dataset, ShapeKind, ToyDatasetSpec, IMAGE_CHANNELS,
};
pub use metrics::{argmax_labels, miou, ConfusionMatrix};
pub use retrain::{majority_baseline_miou, retrain_decoded, RetrainConfig, RetrainReport};
pub use search::{
    fixed_minibatch_losses, run_search, run_search_observed, EpochRecord, SearchOutcome,
    SearchTrace, StepEvent, StepObserver, UpdateCounters, TRACE_CSV_HEADER,
};
