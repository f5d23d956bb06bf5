//! Two-stage virtual try-on pipeline with a misalignment-free condition
//! generator, a segmentation-conditioned image generator, and a
//! discriminator rejection gate.

pub mod condgen;
pub mod data;
pub mod fields;
pub mod gradcheck;
pub mod harness;
pub mod imagegen;
pub mod kernels;
pub mod losses;
pub mod nn;
pub mod palette;
pub mod rejection;
pub mod tape;
pub mod tensor;
pub mod warp;
