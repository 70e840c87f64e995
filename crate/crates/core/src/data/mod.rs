//! Synthetic scenes, annotation ingestion, augmentation and metrics.

mod annotations;
mod augment;
mod dataset;
mod image;
mod metrics;
mod synth;

pub use annotations::{parse_annotations, parse_annotations_str, AnnotationRecord, ABSENT};
pub use augment::{augment, flip_gts, flip_image, flip_params, flip_predictions, AugmentOps};
pub use dataset::{
    load_dataset, write_dataset, Dataset, LaneRecord, Manifest, ManifestEntry, Sample,
    SceneRecord, ANNOTATIONS_FILE, MANIFEST_FILE,
};
pub use image::GrayImage;
pub use metrics::{
    evaluate, evaluate_with, scaled_threshold, ClipStats, EvalOptions, EvalResult,
    REFERENCE_HEIGHT, REFERENCE_THRESHOLD_PX,
};
pub use synth::{synth_generate, synth_scene, GenConfig, GroundShape, SyntheticScene};
