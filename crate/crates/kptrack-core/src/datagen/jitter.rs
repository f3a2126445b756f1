//! Photometric jitter: brightness, contrast, and Gaussian pixel noise.
//! Geometry is untouched, so ground-truth labels survive unchanged.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterParams {
    /// Additive brightness delta range.
    pub brightness: (f64, f64),
    /// Multiplicative contrast scale range (around the 0.5 pivot).
    pub contrast: (f64, f64),
    /// Per-pixel Gaussian noise sigma.
    pub noise_sigma: f64,
}

impl JitterParams {
    pub fn new(brightness: (f64, f64), contrast: (f64, f64), noise_sigma: f64) -> Result<Self> {
        let ordered = brightness.0 <= brightness.1 && contrast.0 <= contrast.1;
        let bounded = brightness.0 >= -1.0
            && brightness.1 <= 1.0
            && contrast.0 >= 0.0
            && contrast.1 <= 2.0
            && (0.0..=0.5).contains(&noise_sigma);
        if !ordered || !bounded {
            return Err(Error::InvalidInput(format!(
                "jitter ranges out of bounds: brightness {brightness:?}, contrast {contrast:?}, sigma {noise_sigma}"
            )));
        }
        Ok(JitterParams { brightness, contrast, noise_sigma })
    }

    /// The do-nothing jitter.
    pub fn none() -> Self {
        JitterParams { brightness: (0.0, 0.0), contrast: (1.0, 1.0), noise_sigma: 0.0 }
    }

    pub fn is_identity(&self) -> bool {
        self.brightness == (0.0, 0.0) && self.contrast == (1.0, 1.0) && self.noise_sigma == 0.0
    }
}

/// out = clamp(contrast·(img − 0.5) + 0.5 + brightness + noise, 0, 1).
/// Identity parameters return the input bit-exactly.
pub fn apply_jitter(img: &Image, jp: &JitterParams, seed: u64) -> Image {
    if jp.is_identity() {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta = rng.random_range(jp.brightness.0..=jp.brightness.1);
    let scale = rng.random_range(jp.contrast.0..=jp.contrast.1);
    let noise = if jp.noise_sigma > 0.0 {
        Some(Normal::new(0.0, jp.noise_sigma).expect("sigma validated"))
    } else {
        None
    };
    let px: Vec<f32> = img
        .pixels()
        .iter()
        .map(|&p| {
            let n = noise.map_or(0.0, |d| d.sample(&mut rng));
            (scale * (p as f64 - 0.5) + 0.5 + delta + n).clamp(0.0, 1.0) as f32
        })
        .collect();
    Image::new(img.height(), img.width(), px).expect("jitter output is clamped")
}
