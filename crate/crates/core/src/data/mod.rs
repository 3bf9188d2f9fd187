//! Synthetic manipulation data, dataset and sequence files, stub embedders.

mod embed;
mod io;
mod synth;

pub use embed::{EmbeddingProvider, StubEmbedder};
pub use io::{
    condition_hash, generate_dataset, read_object, write_object, Dataset, SequenceFile,
    DATASET_VERSION, SEQUENCE_VERSION,
};
pub use synth::{
    default_hand_models, distance_fields, generate_sample, random_object, random_task,
    render_task, sample_seed, Family, GammaProfile, ObjectKind, Sample, SyntheticTask,
};
