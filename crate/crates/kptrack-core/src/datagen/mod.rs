//! Supervised pair generation: synthetic primitive scenes with an
//! independently moving prism, and projectively warped crops of real (or
//! procedural) images, with occlusion labels, color jitter, and an on-disk
//! dataset format.

pub mod homography;
pub mod io;
pub mod jitter;
pub mod synth;
pub mod warped;

pub use homography::Homography;
pub use io::{load_pair, read_manifest, write_dataset, Manifest, StoredPair};
pub use jitter::{apply_jitter, JitterParams};
pub use synth::{gen_synthetic_pair, SynthConfig};
pub use warped::{gen_warped_pair, noise_image, WarpConfig};

use crate::error::{Error, Result};
use crate::features::{patch_center, Image, KeypointSet};

#[derive(Debug, Clone)]
pub enum Provenance {
    Synthetic {
        bg_shift: (f64, f64),
        cube_shift: (f64, f64),
    },
    Warped {
        homography: Homography,
    },
}

/// Flat grid index of the 8×8 patch containing `p` on a width-`w` image.
pub fn patch_index_of(p: (f64, f64), img_w: usize) -> usize {
    let col = (p.0 / 8.0).floor() as usize;
    let row = (p.1 / 8.0).floor() as usize;
    row * (img_w / 8) + col
}

/// One supervised image pair with per-keypoint ground truth.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub img1: Image,
    pub img2: Image,
    pub keypoints1: KeypointSet,
    /// Target positions under the generating motion; meaningful for every
    /// keypoint, inside img2 bounds iff not occluded.
    pub gt_positions2: Vec<(f64, f64)>,
    pub occluded: Vec<bool>,
    /// Grid cell containing the target, −1 for occluded points.
    pub gt_patch_index: Vec<isize>,
    pub provenance: Provenance,
}

impl ScenePair {
    pub fn new(
        img1: Image,
        img2: Image,
        keypoints1: KeypointSet,
        gt_positions2: Vec<(f64, f64)>,
        occluded: Vec<bool>,
        provenance: Provenance,
    ) -> Result<Self> {
        let m = keypoints1.count();
        if gt_positions2.len() != m || occluded.len() != m {
            return Err(Error::Contract(format!(
                "pair label arrays disagree: {m} keypoints, {} targets, {} flags",
                gt_positions2.len(),
                occluded.len()
            )));
        }
        let (w, h) = (img2.width(), img2.height());
        if w % 8 != 0 || h % 8 != 0 {
            return Err(Error::Contract(format!(
                "second image {w}x{h} is not 8-aligned"
            )));
        }
        let mut gt_patch_index = Vec::with_capacity(m);
        for i in 0..m {
            if occluded[i] {
                gt_patch_index.push(-1);
            } else {
                let (x, y) = gt_positions2[i];
                if !(x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64) {
                    return Err(Error::Contract(format!(
                        "visible keypoint {i} has target ({x}, {y}) outside {w}x{h}"
                    )));
                }
                gt_patch_index.push(patch_index_of((x, y), w) as isize);
            }
        }
        let pair = ScenePair {
            img1,
            img2,
            keypoints1,
            gt_positions2,
            occluded,
            gt_patch_index,
            provenance,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn len(&self) -> usize {
        self.keypoints1.count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn occluded_fraction(&self) -> f64 {
        if self.occluded.is_empty() {
            return 0.0;
        }
        self.occluded.iter().filter(|&&o| o).count() as f64 / self.occluded.len() as f64
    }

    /// Cross-check the stored patch indices against the feature grid's
    /// center arithmetic: every visible target must lie within half a
    /// patch of its cell center.
    pub fn validate(&self) -> Result<()> {
        let cols = self.img2.width() / 8;
        for i in 0..self.len() {
            if self.occluded[i] {
                if self.gt_patch_index[i] != -1 {
                    return Err(Error::Contract(format!(
                        "occluded keypoint {i} carries patch index {}",
                        self.gt_patch_index[i]
                    )));
                }
                continue;
            }
            let idx = self.gt_patch_index[i];
            if idx < 0 {
                return Err(Error::Contract(format!(
                    "visible keypoint {i} has no patch index"
                )));
            }
            let idx = idx as usize;
            let (cx, cy) = patch_center(idx / cols, idx % cols);
            let (x, y) = self.gt_positions2[i];
            if (x - cx).abs() > 4.0 || (y - cy).abs() > 4.0 {
                return Err(Error::Contract(format!(
                    "keypoint {i} target ({x}, {y}) is not inside patch {idx}"
                )));
            }
        }
        Ok(())
    }
}
