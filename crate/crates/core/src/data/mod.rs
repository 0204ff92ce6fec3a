//! Interaction logs, filtering, leave-one-out splitting and padding.

mod log;
mod sampling;
mod split;
pub mod synthetic;

pub use log::{filter_min_interactions, load_interactions, DatasetStats, InteractionLog, ItemId, UserHistory};
pub use sampling::negative_sample;
pub use split::{
    leave_one_out_split, pad_truncate, split_manifest, EvalExample, FixedSequence, ManifestEntry, SplitSet,
    TrainExample,
};
pub use synthetic::SyntheticSpec;
