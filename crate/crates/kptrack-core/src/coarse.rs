//! Coarse matching: score every tracked descriptor against all patches of
//! the second image plus the occlusion token, then classify each keypoint
//! as a patch match, occluded, or rejected (low confidence).

use crate::attention::EncodedSet;
use crate::error::{Error, Result};
use crate::features::patch_center;
use crate::tensor::{Graph, NodeId};

/// Materialized similarity scores: one row per keypoint, one column per
/// patch of the second image (row-major grid order) plus a final OCL column.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    kp_count: usize,
    grid_rows: usize,
    grid_cols: usize,
    /// kp_count × (grid_rows·grid_cols + 1), row-major.
    scores: Vec<f32>,
}

impl SimilarityMatrix {
    pub fn new(kp_count: usize, grid_rows: usize, grid_cols: usize, scores: Vec<f32>) -> Result<Self> {
        let cols = grid_rows * grid_cols + 1;
        if scores.len() != kp_count * cols {
            return Err(Error::Contract(format!(
                "similarity matrix needs {} scores for {kp_count}x{cols}, got {}",
                kp_count * cols,
                scores.len()
            )));
        }
        Ok(SimilarityMatrix { kp_count, grid_rows, grid_cols, scores })
    }

    pub fn rows(&self) -> usize {
        self.kp_count
    }

    /// Total columns including the OCL column.
    pub fn cols(&self) -> usize {
        self.grid_rows * self.grid_cols + 1
    }

    /// Index of the occlusion column (always the last one).
    pub fn ocl_col(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.grid_rows, self.grid_cols)
    }

    pub fn score(&self, row: usize, col: usize) -> f32 {
        self.scores[row * self.cols() + col]
    }

    pub fn row_scores(&self, row: usize) -> &[f32] {
        let c = self.cols();
        &self.scores[row * c..(row + 1) * c]
    }
}

/// What happened to one keypoint at the coarse stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// Matched to the patch with this flat grid index.
    Patch(usize),
    /// Best match was the OCL column.
    Occluded,
    /// Best patch match fell below the confidence threshold.
    Rejected,
}

impl Verdict {
    pub fn label(&self) -> &'static str {
        match self {
            Verdict::Patch(_) => "PATCH",
            Verdict::Occluded => "OCCLUDED",
            Verdict::Rejected => "REJECTED",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CoarseMatch {
    pub kp_index: usize,
    pub verdict: Verdict,
    /// Row-softmax probability at the argmax column, whatever the verdict.
    pub confidence: f64,
    /// Patch center in pixels; present iff verdict is Patch.
    pub center: Option<(f64, f64)>,
}

/// S = F1·F2ᵀ/√D as a graph node, for training losses.
///
/// Dot products are scaled by 1/√D so early-training logits with D=64
/// don't saturate the row softmax.
pub fn similarity_node(g: &mut Graph, f1: &EncodedSet, f2: &EncodedSet) -> Result<NodeId> {
    if f1.dim != f2.dim {
        return Err(Error::ShapeMismatch {
            op: "similarity",
            lhs: vec![f1.count, f1.dim],
            rhs: vec![f2.count, f2.dim],
        });
    }
    if !f2.with_ocl {
        return Err(Error::Contract("similarity: F2 must carry the OCL token".into()));
    }
    if f1.with_ocl {
        return Err(Error::Contract("similarity: OCL belongs to F2 only".into()));
    }
    let f2t = g.transpose(f2.node)?;
    let raw = g.matmul(f1.node, f2t)?;
    g.scale(raw, 1.0 / (f1.dim as f32).sqrt())
}

/// Evaluate `similarity_node` and materialize it against a patch grid.
pub fn similarity(
    g: &mut Graph,
    f1: &EncodedSet,
    f2: &EncodedSet,
    grid_rows: usize,
    grid_cols: usize,
) -> Result<SimilarityMatrix> {
    if f2.count != grid_rows * grid_cols + 1 {
        return Err(Error::Contract(format!(
            "similarity: F2 has {} rows but grid {grid_rows}x{grid_cols} needs {}",
            f2.count,
            grid_rows * grid_cols + 1
        )));
    }
    let node = similarity_node(g, f1, f2)?;
    SimilarityMatrix::new(f1.count, grid_rows, grid_cols, g.value(node).to_vec())
}

/// Row softmax of the score matrix in f64, row-major.
pub fn softmax_probabilities(s: &SimilarityMatrix) -> Vec<f64> {
    let c = s.cols();
    let mut probs = vec![0.0f64; s.rows() * c];
    for i in 0..s.rows() {
        let row = s.row_scores(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let mut sum = 0.0;
        for j in 0..c {
            let e = ((row[j] as f64) - max).exp();
            probs[i * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            probs[i * c + j] /= sum;
        }
    }
    probs
}

/// Per keypoint: softmax the score row, take the argmax column. OCL column
/// wins → OCCLUDED (regardless of confidence); otherwise confidence below
/// `threshold` → REJECTED; else PATCH at that column's grid center.
pub fn classify(s: &SimilarityMatrix, threshold: f64) -> Result<Vec<CoarseMatch>> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Contract(format!(
            "confidence threshold must be in [0, 1), got {threshold}"
        )));
    }
    let c = s.cols();
    let probs = softmax_probabilities(s);
    let mut out = Vec::with_capacity(s.rows());
    for i in 0..s.rows() {
        let row = &probs[i * c..(i + 1) * c];
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        let confidence = row[best];
        let (verdict, center) = if best == s.ocl_col() {
            (Verdict::Occluded, None)
        } else if confidence < threshold {
            (Verdict::Rejected, None)
        } else {
            let (r, col) = (best / s.grid_cols, best % s.grid_cols);
            (Verdict::Patch(best), Some(patch_center(r, col)))
        };
        out.push(CoarseMatch { kp_index: i, verdict, confidence, center });
    }
    Ok(out)
}

/// Fraction of (keypoint, column) cells that are positive patch matches:
/// (1−occluded_fraction)·M·64/(H·W). Far below 1 in practice, which is why
/// the curriculum starts without occlusions.
pub fn imbalance_ratio(m: usize, h: usize, w: usize, occluded_fraction: f64) -> Result<f64> {
    if h == 0 || w == 0 {
        return Err(Error::Contract("imbalance_ratio: zero image area".into()));
    }
    if !(0.0..=1.0).contains(&occluded_fraction) {
        return Err(Error::Contract(format!(
            "occluded_fraction must be in [0, 1], got {occluded_fraction}"
        )));
    }
    Ok((1.0 - occluded_fraction) * m as f64 * 64.0 / (h as f64 * w as f64))
}
