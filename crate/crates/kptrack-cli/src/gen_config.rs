//! Flat key=value configs for dataset generation, one schema per kind.

use std::fs;
use std::path::{Path, PathBuf};

use kptrack_core::datagen::{JitterParams, SynthConfig, WarpConfig};
use kptrack_core::{Error, Result};

fn bad(origin: &str, lineno: usize, msg: String) -> Error {
    Error::format(origin, format!("line {}: {msg}", lineno + 1))
}

/// Strips comments/blanks and yields (lineno, key, value) triples.
fn entries(text: &str, origin: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(origin, lineno, format!("expected key=value, got `{line}`")))?;
        out.push((lineno, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(origin: &str, lineno: usize, key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| bad(origin, lineno, format!("{key}: {e}")))
}

/// Synthetic-scene generation settings.
#[derive(Debug, Clone)]
pub struct SynthGenConfig {
    pub synth: SynthConfig,
    pub seed: u64,
}

impl SynthGenConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    /// One-line normal form for the dataset manifest: comments and
    /// formatting do not change a dataset's recorded identity.
    pub fn canonical(&self) -> String {
        let s = &self.synth;
        format!(
            "size={} bg_max={} cube_max={} max_keypoints={} drop_occluded={} seed={}",
            s.size, s.bg_max, s.cube_max, s.max_keypoints, s.drop_occluded, self.seed
        )
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut synth = SynthConfig::new(64);
        let mut seed = 0u64;
        for (lineno, key, value) in entries(text, origin)? {
            match key.as_str() {
                "size" => synth = SynthConfig { size: parse_num(origin, lineno, &key, &value)?, ..synth },
                "bg_max" => synth.bg_max = parse_num(origin, lineno, &key, &value)?,
                "cube_max" => synth.cube_max = parse_num(origin, lineno, &key, &value)?,
                "max_keypoints" => synth.max_keypoints = parse_num(origin, lineno, &key, &value)?,
                "drop_occluded" => synth.drop_occluded = parse_num(origin, lineno, &key, &value)?,
                "seed" => seed = parse_num(origin, lineno, &key, &value)?,
                _ => return Err(bad(origin, lineno, format!("unknown key `{key}`"))),
            }
        }
        Ok(SynthGenConfig { synth, seed })
    }
}

/// Warped-pair generation settings. Sources come from a directory of images
/// when `source_dir` is set, otherwise from procedural noise textures.
#[derive(Debug, Clone)]
pub struct WarpGenConfig {
    pub warp: WarpConfig,
    pub jitter: JitterParams,
    pub source_dir: Option<PathBuf>,
    pub source_size: usize,
    pub seed: u64,
}

impl WarpGenConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    /// One-line normal form for the dataset manifest.
    pub fn canonical(&self) -> String {
        let w = &self.warp;
        let source = match &self.source_dir {
            Some(dir) => dir.display().to_string(),
            None => format!("procedural:{}", self.source_size),
        };
        format!(
            "crop={} difficulty={} m={} m_min={} source={} brightness={:?} contrast={:?} noise_sigma={} seed={}",
            w.crop, w.difficulty, w.m, w.m_min, source,
            self.jitter.brightness, self.jitter.contrast, self.jitter.noise_sigma, self.seed
        )
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut warp = WarpConfig::new(64);
        let mut source_dir = None;
        let mut source_size = 128usize;
        let mut seed = 0u64;
        let mut brightness = 0.0f64;
        let mut contrast = 0.0f64;
        let mut noise_sigma = 0.0f64;
        for (lineno, key, value) in entries(text, origin)? {
            match key.as_str() {
                "crop" => warp.crop = parse_num(origin, lineno, &key, &value)?,
                "difficulty" => warp.difficulty = parse_num(origin, lineno, &key, &value)?,
                "m" => warp.m = parse_num(origin, lineno, &key, &value)?,
                "m_min" => warp.m_min = parse_num(origin, lineno, &key, &value)?,
                "source_dir" => source_dir = Some(PathBuf::from(&value)),
                "source_size" => source_size = parse_num(origin, lineno, &key, &value)?,
                "brightness" => brightness = parse_num(origin, lineno, &key, &value)?,
                "contrast" => contrast = parse_num(origin, lineno, &key, &value)?,
                "noise_sigma" => noise_sigma = parse_num(origin, lineno, &key, &value)?,
                "seed" => seed = parse_num(origin, lineno, &key, &value)?,
                _ => return Err(bad(origin, lineno, format!("unknown key `{key}`"))),
            }
        }
        // scalar knobs expand to symmetric ranges around the identity
        let jitter = JitterParams::new(
            (-brightness, brightness),
            (1.0 - contrast, 1.0 + contrast),
            noise_sigma,
        )?;
        Ok(WarpGenConfig { warp, jitter, source_dir, source_size, seed })
    }
}
