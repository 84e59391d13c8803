//! Disentangled perceptual learning at desk scale.
//!
//! An image-to-image generator is trained purely with feature-space losses
//! while a small feature-selection head on top of a frozen, pretrained
//! feature network is fine-tuned online with task-oriented triplets built
//! from the generator's own outputs.

pub mod tensor;
pub mod imaging;
pub mod networks;
pub mod losses;
pub mod trainer;
pub mod metrics;
pub mod testkit;
