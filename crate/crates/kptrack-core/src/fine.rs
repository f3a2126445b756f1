//! Sub-pixel refinement of coarse patch matches: a small attention stack
//! over the keypoint descriptor and the 3×3 patch neighborhood regresses
//! an offset strictly inside (−4, 4)².

use rand_chacha::ChaCha8Rng;

use crate::attention::{AamSpec, EncodedSet};
use crate::error::{Error, Result};
use crate::features::DenseFeatureGrid;
use crate::tensor::{Graph, MlpSpec, NodeId, Params};

/// Pixel offsets of the 3×3 neighbor window centers relative to the matched
/// patch center, row-major over (row, col): entry 3·(dr+1)+(dc+1) is
/// (8·dc, 8·dr). Index 4 is the matched patch itself.
pub const NEIGHBOR_OFFSETS: [(f64, f64); 9] = [
    (-8.0, -8.0),
    (0.0, -8.0),
    (8.0, -8.0),
    (-8.0, 0.0),
    (0.0, 0.0),
    (8.0, 0.0),
    (-8.0, 8.0),
    (0.0, 8.0),
    (8.0, 8.0),
];

/// Logit bias for replicated border cells; exp underflows to exactly zero
/// after softmax shifting.
const MASK_LOGIT: f32 = -1e9;

/// 3×3 descriptor window around a matched patch. Border windows replicate
/// the nearest valid cell and mark it invalid, keeping shapes static.
#[derive(Debug, Clone)]
pub struct NeighborWindow {
    pub dim: usize,
    /// 9×dim, row-major over the window.
    pub features: Vec<f32>,
    pub valid: [bool; 9],
}

/// Everything the refinement stack needs for one keypoint.
#[derive(Debug, Clone)]
pub struct FineContext {
    pub dim: usize,
    /// Keypoint descriptor sampled from the first image's feature grid.
    pub original: Vec<f32>,
    /// The same keypoint's embedding after the coarse attention stack.
    pub post_coarse: Vec<f32>,
    pub neighbors: Vec<f32>,
    pub offsets: [(f64, f64); 9],
    pub valid: [bool; 9],
}

impl FineContext {
    pub fn new(original: Vec<f32>, post_coarse: Vec<f32>, window: NeighborWindow) -> Result<Self> {
        let dim = window.dim;
        if original.len() != dim || post_coarse.len() != dim {
            return Err(Error::ShapeMismatch {
                op: "fine_context",
                lhs: vec![original.len(), post_coarse.len()],
                rhs: vec![dim, dim],
            });
        }
        if !window.valid[4] {
            return Err(Error::Contract("center neighbor must be valid".into()));
        }
        Ok(FineContext {
            dim,
            original,
            post_coarse,
            neighbors: window.features,
            offsets: NEIGHBOR_OFFSETS,
            valid: window.valid,
        })
    }
}

/// Regressed sub-pixel offset; both components strictly inside (−4, 4).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineOffset {
    pub dx: f64,
    pub dy: f64,
}

impl FineOffset {
    pub fn new(dx: f64, dy: f64) -> Result<Self> {
        if dx.abs() >= 4.0 || dy.abs() >= 4.0 || !dx.is_finite() || !dy.is_finite() {
            return Err(Error::Contract(format!(
                "fine offset ({dx}, {dy}) outside (-4, 4)"
            )));
        }
        Ok(FineOffset { dx, dy })
    }
}

/// Final position: patch center plus the regressed offset. May land in a
/// neighboring patch, which is intended — it can pull a near-miss coarse
/// match closer to the true point.
pub fn compose(center: (f64, f64), offset: FineOffset) -> (f64, f64) {
    (center.0 + offset.dx, center.1 + offset.dy)
}

/// Cut the 3×3 window centered on `patch_index` out of the grid,
/// replicate-padding and masking cells that fall outside.
pub fn gather_neighbors(grid: &DenseFeatureGrid, patch_index: usize) -> Result<NeighborWindow> {
    if patch_index >= grid.patch_count() {
        return Err(Error::Contract(format!(
            "patch index {patch_index} out of range for {}x{} grid",
            grid.rows(),
            grid.cols()
        )));
    }
    let (rows, cols, dim) = (grid.rows() as isize, grid.cols() as isize, grid.dim());
    let r = (patch_index / grid.cols()) as isize;
    let c = (patch_index % grid.cols()) as isize;
    let mut features = Vec::with_capacity(9 * dim);
    let mut valid = [false; 9];
    for dr in -1..=1isize {
        for dc in -1..=1isize {
            let idx = (3 * (dr + 1) + (dc + 1)) as usize;
            valid[idx] = (0..rows).contains(&(r + dr)) && (0..cols).contains(&(c + dc));
            let rr = (r + dr).clamp(0, rows - 1) as usize;
            let cc = (c + dc).clamp(0, cols - 1) as usize;
            features.extend_from_slice(grid.feature(rr, cc));
        }
    }
    Ok(NeighborWindow { dim, features, valid })
}

/// Intermediate nodes of one refinement, exposed for loss wiring and tests.
#[derive(Debug, Clone, Copy)]
pub struct Refinement {
    /// [1, 2] regressed offset, strictly inside (−4, 4) per component.
    pub offset: NodeId,
    /// [1, 9] softmax attention over the neighbor window; masked cells are
    /// exactly zero.
    pub weights: NodeId,
    /// [1, 2] softmax-weighted expectation over the neighbor offsets.
    pub expectation: NodeId,
}

#[derive(Debug, Clone)]
pub struct FineSpec {
    pub dim: usize,
    aam: AamSpec,
    head: MlpSpec,
}

impl FineSpec {
    /// `n_layers` attention blocks over the two query rows and the 9-row
    /// neighbor set, then a `dim+2 → head_hidden → 2` regression head.
    pub fn new(dim: usize, n_layers: usize, head_hidden: usize) -> Result<Self> {
        Ok(FineSpec {
            dim,
            aam: AamSpec::without_ocl("fine.aam", dim, n_layers),
            head: MlpSpec::new("fine.head", vec![dim + 2, head_hidden, 2])?,
        })
    }

    fn fuse_name(&self) -> &'static str {
        "fine.fuse"
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.aam.init(params, rng);
        params.init_matrix(self.fuse_name(), self.dim, self.dim, rng);
        self.head.init(params, rng);
    }

    /// Core graph builder. `query` is [2, D] — row 0 the original sampled
    /// descriptor, row 1 the post-coarse embedding; `neighbors` is [9, D].
    pub fn refine_nodes(
        &self,
        g: &mut Graph,
        params: &Params,
        query: NodeId,
        neighbors: NodeId,
        offsets: &[(f64, f64); 9],
        valid: &[bool; 9],
    ) -> Result<Refinement> {
        if g.shape(query) != (2, self.dim) || g.shape(neighbors) != (9, self.dim) {
            return Err(Error::ShapeMismatch {
                op: "refine",
                lhs: vec![g.shape(query).0, g.shape(query).1],
                rhs: vec![g.shape(neighbors).0, g.shape(neighbors).1],
            });
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::Contract("refine: every neighbor is masked".into()));
        }

        let sq = EncodedSet::new(g, query, false)?;
        let sn = EncodedSet::new(g, neighbors, false)?;
        let (rq, rn) = self.aam.forward(g, params, &sq, &sn)?;

        // fuse {original, post-coarse}: shared projection, then sum rows
        let fuse = g.param(params, self.fuse_name())?;
        let projected = g.matmul(rq.node, fuse)?;
        let q = g.sum_rows(projected)?; // [1, D]

        let nt = g.transpose(rn.node)?;
        let scores = g.matmul(q, nt)?; // [1, 9]
        let scaled = g.scale(scores, 1.0 / (self.dim as f32).sqrt())?;
        let mask: Vec<f32> = valid.iter().map(|&v| if v { 0.0 } else { MASK_LOGIT }).collect();
        let mask = g.leaf(1, 9, mask)?;
        let masked = g.add(scaled, mask)?;
        let weights = g.softmax_rows(masked)?;

        let off: Vec<f32> = offsets.iter().flat_map(|&(x, y)| [x as f32, y as f32]).collect();
        let off = g.leaf(9, 2, off)?;
        let expectation = g.matmul(weights, off)?; // [1, 2]

        let head_in = g.concat_cols(q, expectation)?;
        let raw = self.head.forward(g, params, head_in)?;
        // 4·tanh(clamp(·, −7, 7)): strictly inside (−4, 4) even in f32,
        // since tanh(7) < 1 by more than one ulp
        let clamped = g.clamp(raw, -7.0, 7.0)?;
        let squashed = g.tanh(clamped)?;
        let offset = g.scale(squashed, 4.0)?;

        Ok(Refinement { offset, weights, expectation })
    }

    pub fn refine(&self, g: &mut Graph, params: &Params, ctx: &FineContext) -> Result<Refinement> {
        if ctx.dim != self.dim {
            return Err(Error::ShapeMismatch {
                op: "refine",
                lhs: vec![ctx.dim],
                rhs: vec![self.dim],
            });
        }
        let mut qdata = ctx.original.clone();
        qdata.extend_from_slice(&ctx.post_coarse);
        let query = g.leaf(2, self.dim, qdata)?;
        let neighbors = g.leaf(9, self.dim, ctx.neighbors.clone())?;
        self.refine_nodes(g, params, query, neighbors, &ctx.offsets, &ctx.valid)
    }

    /// Read a refinement result out of the graph as a checked offset.
    pub fn read_offset(&self, g: &Graph, refinement: &Refinement) -> Result<FineOffset> {
        let v = g.value(refinement.offset);
        FineOffset::new(v[0] as f64, v[1] as f64)
    }
}
