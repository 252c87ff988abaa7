//! End-to-end experiments: black-box teacher, superfeatures, explaining
//! teacher, students, optional chimeric fine-tuning and evaluation.
//!
//! Each stage leaves its artifacts and a marker under the output directory.
//! A marker stores a fingerprint of the settings the stage depends on,
//! chained through the markers of its inputs, so a rerun skips every stage
//! whose fingerprint still matches.

mod config;
mod pipeline;

pub use config::{
    stage_seed, ChimericConfig, DatasetSource, ExperimentConfig, ModelShape, StageSchedule,
    SuperfeatureSource, Variant,
};
pub use pipeline::{
    random_partition, student_path, type_m_widths, FailureRecord, Pipeline, Stage, StageMarker,
    ACTUAL_PARTITION, BLACK_BOX_TEACHER, CHIMERIC_STUDENT, DEPENDENCY, FAILURE, PARTITION, REPORTS,
    SEARCH, TEST_DATA, TRAIN_DATA, TYPE_M_TEACHER,
};
