//! Manifests, soft labels, fold plans and padded batches.

mod batch;
mod extract;
mod folds;
mod labels;
mod manifest;

pub use batch::{sample_batch, Batch, EpochShuffle, Item, SampleMode};
pub use extract::{clip_features, extract_manifest, EXTRACT_RATES};
pub use folds::{split_exp1, split_fig4, FoldPlan, Half, FIG4_BUDGETS};
pub use labels::{bin_ratings, class_weights, Binned, SoftLabel, LOW, MID, HIGH};
pub use manifest::{
    read_manifest, write_manifest, Corpus, DatasetSummary, DatasetTag, Utterance, UtteranceRecord,
};
