//! On-disk dataset layout: one directory per split holding
//! `NNNNNN_a.ppm`, `NNNNNN_b.ppm`, `NNNNNN_gt.csv` per pair and a
//! `manifest.txt` recording the generator kind, canonical config string,
//! its FNV-1a hash, and every seed.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use super::ScenePair;
use crate::error::{Error, Result};
use crate::features::{read_image, write_ppm_p5, Image};

pub const MANIFEST_NAME: &str = "manifest.txt";
const GT_HEADER: &str = "x1,y1,x2,y2,occluded";

/// 64-bit FNV-1a; tiny, stable, good enough to fingerprint a config line.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub kind: String,
    pub config: String,
    pub config_hash: u64,
    pub seeds: Vec<u64>,
}

impl Manifest {
    pub fn count(&self) -> usize {
        self.seeds.len()
    }
}

fn stem(dir: &Path, index: usize, suffix: &str) -> PathBuf {
    dir.join(format!("{index:06}_{suffix}"))
}

/// Write one pair's images and ground-truth table.
pub fn write_pair(dir: &Path, index: usize, pair: &ScenePair) -> Result<()> {
    write_ppm_p5(&stem(dir, index, "a.ppm"), &pair.img1)?;
    write_ppm_p5(&stem(dir, index, "b.ppm"), &pair.img2)?;
    let mut csv = String::from(GT_HEADER);
    csv.push('\n');
    for i in 0..pair.len() {
        let (x1, y1) = pair.keypoints1.positions()[i];
        let (x2, y2) = pair.gt_positions2[i];
        let occ = pair.occluded[i] as u8;
        csv.push_str(&format!("{x1},{y1},{x2},{y2},{occ}\n"));
    }
    fs::write(stem(dir, index, "gt.csv"), csv)?;
    Ok(())
}

/// A pair read back from disk. Ground-truth positions are retained even
/// for occluded points (they may fall outside the frame).
#[derive(Debug, Clone)]
pub struct StoredPair {
    pub img1: Image,
    pub img2: Image,
    pub keypoints: Vec<(f64, f64)>,
    pub gt: Vec<(f64, f64)>,
    pub occluded: Vec<bool>,
}

impl StoredPair {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn occluded_fraction(&self) -> f64 {
        if self.occluded.is_empty() {
            return 0.0;
        }
        self.occluded.iter().filter(|&&o| o).count() as f64 / self.occluded.len() as f64
    }
}

pub fn load_pair(dir: &Path, index: usize) -> Result<StoredPair> {
    let img1 = read_image(&stem(dir, index, "a.ppm"))?;
    let img2 = read_image(&stem(dir, index, "b.ppm"))?;
    let gt_path = stem(dir, index, "gt.csv");
    let text = fs::read_to_string(&gt_path)?;
    let path_str = gt_path.display().to_string();

    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == GT_HEADER => {}
        other => {
            return Err(Error::format(
                &path_str,
                format!("expected header `{GT_HEADER}`, got {other:?}"),
            ))
        }
    }
    let mut keypoints = Vec::new();
    let mut gt = Vec::new();
    let mut occluded = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::format(
                &path_str,
                format!("line {}: expected 5 fields, got {}", lineno + 2, fields.len()),
            ));
        }
        let num = |s: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| {
                Error::format(&path_str, format!("line {}: bad number `{s}`", lineno + 2))
            })
        };
        keypoints.push((num(fields[0])?, num(fields[1])?));
        gt.push((num(fields[2])?, num(fields[3])?));
        occluded.push(match fields[4].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::format(
                    &path_str,
                    format!("line {}: occluded flag `{other}` is not 0/1", lineno + 2),
                ))
            }
        });
    }
    Ok(StoredPair { img1, img2, keypoints, gt, occluded })
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    // line-oriented format: a multi-line kind or config would corrupt it
    if m.kind.contains('\n') || m.config.contains('\n') {
        return Err(Error::InvalidInput(
            "manifest kind/config must be single-line".into(),
        ));
    }
    let mut out = String::new();
    out.push_str(&format!("kind={}\n", m.kind));
    out.push_str(&format!("config={}\n", m.config));
    out.push_str(&format!("config_hash={:016x}\n", m.config_hash));
    out.push_str(&format!("count={}\n", m.seeds.len()));
    for (i, s) in m.seeds.iter().enumerate() {
        out.push_str(&format!("seed.{i:06}={s}\n"));
    }
    let path = dir.join(MANIFEST_NAME);
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    let path_str = path.display().to_string();
    let text = fs::read_to_string(&path)?;
    let mut kind = None;
    let mut config = None;
    let mut hash = None;
    let mut count = None;
    let mut seeds = Vec::new();
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::format(&path_str, format!("bad line `{line}`")));
        };
        match k {
            "kind" => kind = Some(v.to_string()),
            "config" => config = Some(v.to_string()),
            "config_hash" => {
                hash = Some(u64::from_str_radix(v, 16).map_err(|_| {
                    Error::format(&path_str, format!("bad config_hash `{v}`"))
                })?)
            }
            "count" => {
                count = Some(v.parse::<usize>().map_err(|_| {
                    Error::format(&path_str, format!("bad count `{v}`"))
                })?)
            }
            _ if k.starts_with("seed.") => {
                seeds.push(v.parse::<u64>().map_err(|_| {
                    Error::format(&path_str, format!("bad seed `{v}`"))
                })?)
            }
            _ => return Err(Error::format(&path_str, format!("unknown key `{k}`"))),
        }
    }
    let (kind, config, config_hash, count) = match (kind, config, hash, count) {
        (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
        _ => return Err(Error::format(&path_str, "missing manifest keys")),
    };
    if seeds.len() != count {
        return Err(Error::format(
            &path_str,
            format!("count says {count} but {} seeds listed", seeds.len()),
        ));
    }
    if fnv1a64(config.as_bytes()) != config_hash {
        return Err(Error::format(
            &path_str,
            "config_hash does not match the config line",
        ));
    }
    Ok(Manifest { kind, config, config_hash, seeds })
}

/// Generate and persist a whole split: one call to `gen` per seed, a
/// manifest at the end. The directory is created if missing.
pub fn write_dataset<F>(
    dir: &Path,
    kind: &str,
    config: &str,
    seeds: &[u64],
    mut gen: F,
) -> Result<Manifest>
where
    F: FnMut(u64) -> Result<ScenePair>,
{
    fs::create_dir_all(dir)?;
    for (i, &seed) in seeds.iter().enumerate() {
        let pair = gen(seed)?;
        write_pair(dir, i, &pair)?;
    }
    let manifest = Manifest {
        kind: kind.to_string(),
        config: config.to_string(),
        config_hash: fnv1a64(config.as_bytes()),
        seeds: seeds.to_vec(),
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}
