//! Warped-crop pairs: crop a corner-dense region of a source image, apply
//! a random projective transform sampled by perturbing the crop corners,
//! and label detected corners with their exact warped positions.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::homography::Homography;
use super::{Provenance, ScenePair};
use crate::error::{Error, Result};
use crate::features::{detect_corners, shi_tomasi_response, Image, KeypointSet};

#[derive(Debug, Clone)]
pub struct WarpConfig {
    /// Side length of both crops, divisible by 8.
    pub crop: usize,
    /// Max corner perturbation as a fraction of the crop side
    /// (0.05 = easy, 0.15 = hard).
    pub difficulty: f64,
    /// Keypoint budget: strongest corners kept.
    pub m: usize,
    /// Fail generation when fewer corners than this are found.
    pub m_min: usize,
}

impl WarpConfig {
    pub fn new(crop: usize) -> Self {
        WarpConfig { crop, difficulty: 0.05, m: 512, m_min: 32 }
    }
}

fn crop_image(src: &Image, x0: usize, y0: usize, side: usize) -> Image {
    let mut px = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            px.push(src.pixel(x0 + x, y0 + y));
        }
    }
    Image::new(side, side, px).expect("crop stays in [0,1]")
}

/// Corner-densest crop window: integral-image count of strong Shi–Tomasi
/// responses over windows on an 8-px lattice; ties break toward the
/// top-left for determinism.
fn densest_window(src: &Image, side: usize) -> (usize, usize) {
    let (h, w) = (src.height(), src.width());
    if h == side && w == side {
        return (0, 0);
    }
    let resp = shi_tomasi_response(src);
    let peak = resp.iter().fold(0.0f32, |m, &v| m.max(v));
    let floor = peak * 1e-4;
    let mut integral = vec![0u64; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            let strong = (peak > 0.0 && resp[y * w + x] > floor) as u64;
            integral[(y + 1) * (w + 1) + x + 1] = strong
                + integral[y * (w + 1) + x + 1]
                + integral[(y + 1) * (w + 1) + x]
                - integral[y * (w + 1) + x];
        }
    }
    let count = |x0: usize, y0: usize| {
        integral[(y0 + side) * (w + 1) + x0 + side]
            + integral[y0 * (w + 1) + x0]
            - integral[y0 * (w + 1) + x0 + side]
            - integral[(y0 + side) * (w + 1) + x0]
    };
    let positions = |limit: usize| -> Vec<usize> {
        let mut v: Vec<usize> = (0..=limit).step_by(8).collect();
        if v.last() != Some(&limit) {
            v.push(limit);
        }
        v
    };
    let (mut best, mut best_pos) = (0u64, (0usize, 0usize));
    for &y0 in &positions(h - side) {
        for &x0 in &positions(w - side) {
            let c = count(x0, y0);
            if c > best {
                best = c;
                best_pos = (x0, y0);
            }
        }
    }
    best_pos
}

fn disc_sample(rng: &mut ChaCha8Rng, max_norm: f64) -> (f64, f64) {
    let r = max_norm * rng.random_range(0.0..1.0f64).sqrt();
    let th = rng.random_range(0.0..std::f64::consts::TAU);
    (r * th.cos(), r * th.sin())
}

/// Random projective transform in crop coordinates: each crop corner moves
/// uniformly inside a disc of radius difficulty·crop.
fn sample_homography(rng: &mut ChaCha8Rng, crop: f64, difficulty: f64) -> Result<Homography> {
    let corners = [(0.0, 0.0), (crop, 0.0), (crop, crop), (0.0, crop)];
    for _ in 0..16 {
        let mut dst = corners;
        for d in &mut dst {
            let (dx, dy) = disc_sample(rng, difficulty * crop);
            d.0 += dx;
            d.1 += dy;
        }
        if let Ok(h) = Homography::from_4pt(&corners, &dst) {
            return Ok(h);
        }
    }
    Err(Error::InvalidInput(
        "could not sample a non-degenerate homography".into(),
    ))
}

/// Deterministic warped pair for one (source, config, seed).
pub fn gen_warped_pair(src: &Image, cfg: &WarpConfig, seed: u64) -> Result<ScenePair> {
    if cfg.crop == 0 || cfg.crop % 8 != 0 {
        return Err(Error::InvalidInput(format!(
            "crop size {} is not a positive multiple of 8",
            cfg.crop
        )));
    }
    if src.width() < cfg.crop || src.height() < cfg.crop {
        return Err(Error::InvalidInput(format!(
            "source {}x{} smaller than crop {}",
            src.width(),
            src.height(),
            cfg.crop
        )));
    }
    if !(0.0..0.25).contains(&cfg.difficulty) {
        return Err(Error::InvalidInput(format!(
            "difficulty {} outside [0, 0.25)",
            cfg.difficulty
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = cfg.crop;
    let (x0, y0) = densest_window(src, side);
    let patch1 = crop_image(src, x0, y0, side);

    let h = sample_homography(&mut rng, side as f64, cfg.difficulty)?;
    let hinv = h.inverse()?;

    // inverse-warp the second patch straight from the full source so
    // content flowing in from outside the first crop is real
    let mut px = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let q = (x as f64 + 0.5, y as f64 + 0.5);
            let s = hinv.warp_point(q)?;
            px.push(src.sample_clamped(s.0 + x0 as f64, s.1 + y0 as f64));
        }
    }
    let patch2 = Image::new(side, side, px)?;

    let corners = detect_corners(&patch1, cfg.m, 4.0);
    if corners.len() < cfg.m_min {
        return Err(Error::InvalidInput(format!(
            "only {} corners found, need at least {}",
            corners.len(),
            cfg.m_min
        )));
    }

    let lim = side as f64;
    let mut gt = Vec::with_capacity(corners.len());
    let mut occluded = Vec::with_capacity(corners.len());
    for &p in &corners {
        let t = h.warp_point(p)?;
        occluded.push(!(t.0 >= 0.0 && t.0 < lim && t.1 >= 0.0 && t.1 < lim));
        gt.push(t);
    }

    ScenePair::new(
        patch1,
        patch2,
        KeypointSet::new(corners, side, side)?,
        gt,
        occluded,
        Provenance::Warped { homography: h },
    )
}

/// Procedural stand-in for a real photo: two octaves of value noise,
/// quantized to /255. Used by the ":noise" dataset source and by tests.
pub fn noise_image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coarse_n = size / 8 + 2;
    let coarse: Vec<f64> = (0..coarse_n * coarse_n)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let fine_n = size / 2 + 2;
    let fine: Vec<f64> = (0..fine_n * fine_n)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();

    let lerp_grid = |grid: &[f64], n: usize, x: f64, y: f64| -> f64 {
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (tx, ty) = (x - x0 as f64, y - y0 as f64);
        let at = |r: usize, c: usize| grid[r.min(n - 1) * n + c.min(n - 1)];
        let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
        let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
        top * (1.0 - ty) + bot * ty
    };

    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let c = lerp_grid(&coarse, coarse_n, x as f64 / 8.0, y as f64 / 8.0);
            let f = lerp_grid(&fine, fine_n, x as f64 / 2.0, y as f64 / 2.0);
            let v = 0.65 * c + 0.35 * f;
            px.push(((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32);
        }
    }
    Image::new(size, size, px).expect("noise stays in [0,1]")
}
