//! Synthetic corpus: scene generation, the calibrated noisy teacher,
//! dataset splitting, and the line-delimited dataset file format.

mod generate;
mod io;
mod scene;
mod split;
mod teacher;

pub use generate::{
    default_long_tail_prevalence, generate, generate_labels, prototypes, scene_id,
    GeneratorConfig,
};
pub use io::{read_dataset, write_dataset, DatasetHeader, FloatEncoding, DATASET_FORMAT_VERSION};
pub use scene::SceneRecord;
pub use split::{split, DatasetSplit, DEFAULT_SPLIT};
pub use teacher::{
    apply_teacher, expected_agreement_rates, expected_exact_match_rate, expected_group_macro_f1,
    PrTargets, TeacherCalibration, TeacherConfig,
};
