//! Coarse-to-fine keypoint tracking between image pairs.
//!
//! Given two grayscale images and keypoints in the first, the tracker
//! predicts each keypoint's sub-pixel location in the second image or
//! flags it as occluded. Dense 1/8-resolution CNN features feed a linear
//! -attention transformer that matches keypoint descriptors against the
//! second image's patch grid (coarse stage), then a local refinement
//! module regresses a sub-patch offset (fine stage). Everything runs on
//! CPU over a small hand-rolled autograd tape; training data is
//! synthesized, no external datasets or weights are required.

pub mod attention;
pub mod coarse;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod features;
pub mod fine;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
