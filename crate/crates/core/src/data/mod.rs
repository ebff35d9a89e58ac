//! Face images, labels, and the synthetic face generator.

mod image;
mod manifest;
mod synth;

pub use image::{hash_images, quantize_u8, Image};
pub use manifest::{
    load_dataset, synth_faces, synth_faces_with, DatasetManifest, ImageSample, SampleSource, Split, SplitPlan,
    SynthOptions, DEFAULT_RESOLUTION,
};
pub use synth::{random_identity, SyntheticFaceSpec, IDENTITY_DIM};
