//! Manifest ingestion, preprocessing, patient-level splitting and a
//! synthetic stand-in dataset.

pub mod image;
pub mod loader;
pub mod manifest;
pub mod split;
pub mod synth;

pub use image::{augment, load_image, normalize, resize_bicubic, AugmentParams, ImageTensor};
pub use loader::{epoch_order, AugmentSeed, Dataset};
pub use manifest::{
    encode_label, match_manifest, read_cbis_ddsm, read_manifest, scan_images, write_manifest, Exclusions, ImageScan,
    ManifestRecord, ManifestRow, MatchKey, MatchOutcome,
};
pub use split::{class_fractions, stratified_split, Partition, SplitAssignment, DEFAULT_FRACTIONS};
pub use synth::{synth_dataset, Difficulty, SynthDataset};
