//! Physical-dynamics simulation: the degradation function, multi-position
//! augmentation of the generating set, and the synthetic multi-camera dataset.

mod augment;
mod degrade;
mod toy;

pub use augment::{apply_augment, synth_augment, AugmentParams, AugmentRanges, Augmented};
pub use degrade::{
    apply_degradation, degradation_vjp, degrade, gaussian_blur, gaussian_kernel, DegradeParams, DegradeSample,
};
pub use toy::{generate_toy_dataset, CameraStyle, ToyDatasetConfig};
