//! Evaluation, experiment protocols and the synthetic corpus.

mod metrics;
pub mod run;
pub mod synth;

pub use metrics::{uar, uar_over_present};
pub use synth::{synth_corpus, synth_generate, SynthDataset, SynthSpec};
pub use run::{
    load_corpus, mean_std, run_experiment, run_protocol, subject_report, thread_count, train_single, ExperimentPlan,
    ExperimentResult, Job, SubjectUarMatrix, REPORT_HEADER,
};
