//! Audio front-end: log-Mel feature extraction, recording segmentation,
//! SpecAugment-style masking, a synthetic desk-scale corpus generator, and
//! the flat binary tensor container used to cache features on disk.

pub mod augment;
pub mod container;
pub mod mel;
pub mod segment;
pub mod store;
pub mod synth;
pub mod wav;

pub use augment::{spec_augment, SpecAugmentConfig};
pub use container::{read_tensor, write_tensor};
pub use mel::{log_mel, FrontendConfig};
pub use segment::{
    load_annotations, load_recordings, read_clip_manifest, segment_dataset, segment_recording,
    write_clip_manifest, Annotation, Clip, RecordingAnnotations,
};
pub use store::{load_dataset, save_dataset, DatasetMeta};
pub use synth::{logistic_baseline_auroc, synthetic_corpus, Dataset, GeneratorConfig, Sample};
