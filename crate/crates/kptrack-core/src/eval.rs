//! Held-out evaluation: matching accuracy under a strict 6-pixel radius,
//! occlusion precision/recall, and the coarse-vs-fine localization delta.

use std::path::Path;

use crate::coarse::Verdict;
use crate::datagen::io::StoredPair;
use crate::datagen::patch_index_of;
use crate::error::{Error, Result};
use crate::features::{write_ppm_p6, KeypointSet};
use crate::model::{Model, TrackOptions, TrackedPoint};
use crate::tensor::Params;
use crate::trainer::Dataset;

/// A match is correct only when its error is strictly below this radius.
pub const MATCH_RADIUS: f64 = 6.0;

/// At most this many keypoints per pair enter evaluation.
pub const MAX_KEYPOINTS: usize = 512;

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub threshold: f64,
    pub use_fine: bool,
    pub max_keypoints: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: 0.2,
            use_fine: true,
            max_keypoints: MAX_KEYPOINTS,
        }
    }
}

// ── per-pair scoring ────────────────────────────────────────────────────

/// Raw counts from one evaluated pair.
#[derive(Clone, Copy, Debug, Default)]
pub struct PairScore {
    /// PATCH verdicts that produced a position.
    pub emitted: usize,
    /// Emitted, ground truth visible, and error strictly under 6 px.
    pub correct: usize,
    /// Summed localization error over emitted matches with visible truth.
    pub loc_error_sum: f64,
    pub loc_error_count: usize,
    pub occ_tp: usize,
    pub occ_fp: usize,
    pub occ_fn: usize,
    /// Argmax class (patches + OCL) agreement; rejected points never count.
    pub cls_correct: usize,
    pub cls_total: usize,
}

/// Scores tracking output against a pair's labels. `points` must come from
/// tracking a prefix of `pair.keypoints` (indices address that prefix).
pub fn score_pair(pair: &StoredPair, points: &[TrackedPoint]) -> Result<PairScore> {
    let (w, h) = (pair.img2.width(), pair.img2.height());
    let ocl = (w / 8) * (h / 8);
    let mut s = PairScore::default();
    for p in points {
        let kp = p.kp_index;
        if kp >= pair.len() {
            return Err(Error::Contract(format!(
                "tracked point {kp} has no label (pair holds {})",
                pair.len()
            )));
        }
        let gt_occluded = pair.occluded[kp];
        let target = if gt_occluded {
            ocl
        } else {
            let (x, y) = pair.gt[kp];
            if !(x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64) {
                return Err(Error::Contract(format!(
                    "point {kp} marked visible but its ground truth ({x}, {y}) is outside {w}x{h}"
                )));
            }
            patch_index_of((x, y), w)
        };

        s.cls_total += 1;
        match p.verdict {
            Verdict::Patch(idx) => {
                if idx == target {
                    s.cls_correct += 1;
                }
                let (px, py) = p.position.ok_or_else(|| {
                    Error::Contract(format!("PATCH verdict without position for point {kp}"))
                })?;
                s.emitted += 1;
                if !gt_occluded {
                    let (gx, gy) = pair.gt[kp];
                    let err = ((px - gx).powi(2) + (py - gy).powi(2)).sqrt();
                    s.loc_error_sum += err;
                    s.loc_error_count += 1;
                    if err < MATCH_RADIUS {
                        s.correct += 1;
                    }
                }
                if gt_occluded {
                    s.occ_fn += 1;
                }
            }
            Verdict::Occluded => {
                if target == ocl {
                    s.cls_correct += 1;
                    s.occ_tp += 1;
                } else {
                    s.occ_fp += 1;
                }
            }
            Verdict::Rejected => {
                if gt_occluded {
                    s.occ_fn += 1;
                }
            }
        }
    }
    Ok(s)
}

// ── aggregate metrics ───────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EvalMetrics {
    pub tag: String,
    pub pairs: usize,
    /// Mean over pairs of (correct / emitted); a pair emitting nothing
    /// contributes zero.
    pub accuracy: f64,
    /// Mean correct matches per pair.
    pub mean_correct: f64,
    /// Pooled over points; an empty denominator scores 1.0 (nothing wrong).
    pub occ_precision: f64,
    pub occ_recall: f64,
    /// Pooled mean error of emitted matches with visible truth (0 if none).
    pub mean_loc_error: f64,
    /// Pooled argmax-class accuracy. Rejected verdicts count as wrong, so
    /// evaluate with threshold 0 to read pure classification quality.
    pub cls_accuracy: f64,
}

impl EvalMetrics {
    pub fn from_scores(tag: &str, scores: &[PairScore]) -> Result<EvalMetrics> {
        if scores.is_empty() {
            return Err(Error::InvalidInput("no pairs to aggregate".into()));
        }
        let n = scores.len() as f64;
        let accuracy = scores
            .iter()
            .map(|s| {
                if s.emitted == 0 {
                    0.0
                } else {
                    s.correct as f64 / s.emitted as f64
                }
            })
            .sum::<f64>()
            / n;
        let mean_correct = scores.iter().map(|s| s.correct as f64).sum::<f64>() / n;
        let (tp, fp, fnn) = scores.iter().fold((0, 0, 0), |(a, b, c), s| {
            (a + s.occ_tp, b + s.occ_fp, c + s.occ_fn)
        });
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let err_sum: f64 = scores.iter().map(|s| s.loc_error_sum).sum();
        let err_n: usize = scores.iter().map(|s| s.loc_error_count).sum();
        let cls_hit: usize = scores.iter().map(|s| s.cls_correct).sum();
        let cls_all: usize = scores.iter().map(|s| s.cls_total).sum();
        Ok(EvalMetrics {
            tag: tag.to_string(),
            pairs: scores.len(),
            accuracy,
            mean_correct,
            occ_precision: ratio(tp, tp + fp),
            occ_recall: ratio(tp, tp + fnn),
            mean_loc_error: if err_n == 0 { 0.0 } else { err_sum / err_n as f64 },
            cls_accuracy: ratio(cls_hit, cls_all),
        })
    }

    pub const CSV_HEADER: &'static str =
        "tag,pairs,accuracy,mean_correct,occ_precision,occ_recall,mean_loc_error,cls_accuracy";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.tag,
            self.pairs,
            self.accuracy,
            self.mean_correct,
            self.occ_precision,
            self.occ_recall,
            self.mean_loc_error,
            self.cls_accuracy
        )
    }

    pub fn table_header() -> String {
        format!(
            "{:<14} {:>5} {:>9} {:>9} {:>7} {:>7} {:>8} {:>8}",
            "tag", "pairs", "accuracy", "correct", "occ_P", "occ_R", "loc_err", "cls_acc"
        )
    }

    pub fn table_row(&self) -> String {
        format!(
            "{:<14} {:>5} {:>9.4} {:>9.2} {:>7.4} {:>7.4} {:>8.3} {:>8.4}",
            self.tag,
            self.pairs,
            self.accuracy,
            self.mean_correct,
            self.occ_precision,
            self.occ_recall,
            self.mean_loc_error,
            self.cls_accuracy
        )
    }
}

fn track_pair(
    model: &Model,
    params: &Params,
    pair: &StoredPair,
    opts: &EvalOptions,
) -> Result<Vec<TrackedPoint>> {
    let n = pair.len().min(opts.max_keypoints);
    let kps = KeypointSet::new(
        pair.keypoints[..n].to_vec(),
        pair.img1.width(),
        pair.img1.height(),
    )?;
    let result = model.track(
        params,
        &pair.img1,
        &pair.img2,
        &kps,
        TrackOptions {
            threshold: opts.threshold,
            use_fine: opts.use_fine,
        },
    )?;
    Ok(result.points)
}

/// Tracks every pair of a dataset; one score per pair, in dataset order.
pub fn score_dataset(
    model: &Model,
    params: &Params,
    data: &Dataset,
    opts: &EvalOptions,
) -> Result<Vec<PairScore>> {
    if opts.max_keypoints == 0 {
        return Err(Error::InvalidInput("max_keypoints must be positive".into()));
    }
    let mut scores = Vec::with_capacity(data.len());
    for pair in &data.pairs {
        let points = track_pair(model, params, pair, opts)?;
        scores.push(score_pair(pair, &points)?);
    }
    Ok(scores)
}

/// Tracks every pair of a dataset and aggregates the scores.
pub fn evaluate(
    model: &Model,
    params: &Params,
    data: &Dataset,
    opts: &EvalOptions,
    tag: &str,
) -> Result<EvalMetrics> {
    EvalMetrics::from_scores(tag, &score_dataset(model, params, data, opts)?)
}

/// Evaluates twice — refinement off, then on — over identical verdicts, so
/// the localization delta isolates the refinement head. Negative means the
/// refinement helped.
pub struct FineComparison {
    pub coarse: EvalMetrics,
    pub fine: EvalMetrics,
    pub delta_loc_error: f64,
}

pub fn compare_coarse_vs_fine(
    model: &Model,
    params: &Params,
    data: &Dataset,
    opts: &EvalOptions,
) -> Result<FineComparison> {
    let coarse = evaluate(model, params, data, &EvalOptions { use_fine: false, ..*opts }, "coarse")?;
    let fine = evaluate(model, params, data, &EvalOptions { use_fine: true, ..*opts }, "fine")?;
    let delta_loc_error = fine.mean_loc_error - coarse.mean_loc_error;
    Ok(FineComparison { coarse, fine, delta_loc_error })
}

// ── match rendering ─────────────────────────────────────────────────────

const GUTTER: usize = 8;
const GREEN: [u8; 3] = [0, 200, 0];
const RED: [u8; 3] = [220, 0, 0];
const BLUE: [u8; 3] = [64, 96, 255];

struct Canvas {
    w: usize,
    h: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn set(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x < 0 || y < 0 || x as usize >= self.w || y as usize >= self.h {
            return;
        }
        let i = (y as usize * self.w + x as usize) * 3;
        self.rgb[i..i + 3].copy_from_slice(&color);
    }

    fn line(&mut self, from: (f64, f64), to: (f64, f64), color: [u8; 3]) {
        let (mut x0, mut y0) = (from.0.round() as i64, from.1.round() as i64);
        let (x1, y1) = (to.0.round() as i64, to.1.round() as i64);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, color);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn cross(&mut self, at: (f64, f64), color: [u8; 3]) {
        let (x, y) = (at.0.round() as i64, at.1.round() as i64);
        for d in -2i64..=2 {
            self.set(x + d, y, color);
            self.set(x, y + d, color);
        }
    }
}

/// Renders one evaluated pair side by side: both frames in grayscale, a
/// green line per correct match, red per incorrect, and a blue cross on
/// every keypoint predicted occluded. Rejected points are left unmarked.
/// Output is a binary PPM; identical inputs produce identical bytes.
pub fn render_matches(
    model: &Model,
    params: &Params,
    pair: &StoredPair,
    opts: &EvalOptions,
    out_path: &Path,
) -> Result<()> {
    if pair.img1.height() != pair.img2.height() {
        return Err(Error::Contract(format!(
            "cannot compose frames of heights {} and {}",
            pair.img1.height(),
            pair.img2.height()
        )));
    }
    let points = track_pair(model, params, pair, opts)?;

    let (w1, w2, h) = (pair.img1.width(), pair.img2.width(), pair.img1.height());
    let w = w1 + GUTTER + w2;
    let mut canvas = Canvas { w, h, rgb: vec![24u8; w * h * 3] };
    let mut blit = |img: &crate::features::Image, x0: usize| {
        for y in 0..img.height() {
            for x in 0..img.width() {
                let v = (img.pixel(x, y).clamp(0.0, 1.0) * 255.0).round() as u8;
                let i = (y * w + x0 + x) * 3;
                canvas.rgb[i] = v;
                canvas.rgb[i + 1] = v;
                canvas.rgb[i + 2] = v;
            }
        }
    };
    blit(&pair.img1, 0);
    blit(&pair.img2, w1 + GUTTER);

    let right = (w1 + GUTTER) as f64;
    for p in &points {
        let from = pair.keypoints[p.kp_index];
        match (p.verdict, p.position) {
            (Verdict::Patch(_), Some((px, py))) => {
                let visible = !pair.occluded[p.kp_index];
                let correct = visible && {
                    let (gx, gy) = pair.gt[p.kp_index];
                    ((px - gx).powi(2) + (py - gy).powi(2)).sqrt() < MATCH_RADIUS
                };
                let color = if correct { GREEN } else { RED };
                canvas.line(from, (right + px, py), color);
            }
            (Verdict::Occluded, _) => canvas.cross(from, BLUE),
            _ => {}
        }
    }
    write_ppm_p6(out_path, w, h, &canvas.rgb)
}
