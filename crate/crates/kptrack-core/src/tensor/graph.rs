use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Params;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Sparse row-mixing plan: output row r is a weighted sum of input rows.
/// CSR layout; `row_ptr.len() == out_rows + 1`.
#[derive(Clone, Debug)]
pub struct MixPlan {
    pub in_rows: usize,
    pub row_ptr: Vec<usize>,
    pub entries: Vec<(usize, f32)>,
}

impl MixPlan {
    pub fn new(in_rows: usize, rows: Vec<Vec<(usize, f32)>>) -> Result<Self> {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut entries = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for &(src, _) in &row {
                if src >= in_rows {
                    return Err(Error::Contract(format!(
                        "mix plan references row {src} of {in_rows}"
                    )));
                }
            }
            entries.extend(row);
            row_ptr.push(entries.len());
        }
        Ok(MixPlan {
            in_rows,
            row_ptr,
            entries,
        })
    }

    pub fn out_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }
}

/// 3x3-style patch extraction geometry. Input node is position-major
/// `[in_h*in_w, in_c]`; output is `[out_h*out_w, k*k*in_c]` with columns
/// ordered (ky, kx, channel). Out-of-bounds taps read zero.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.in_c
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRowBias { a: NodeId, bias: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f32 },
    Relu { a: NodeId },
    Tanh { a: NodeId },
    Clamp { a: NodeId, lo: f32, hi: f32 },
    EluPlusOne { a: NodeId },
    SoftmaxRows { a: NodeId },
    LayerNorm { a: NodeId, scale: NodeId, offset: NodeId },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    SumRows { a: NodeId },
    RowDiv { a: NodeId, den: NodeId },
    ConcatRows { a: NodeId, b: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    SliceRows { a: NodeId, r0: usize, r1: usize },
    SliceCols { a: NodeId, c0: usize, c1: usize },
    RowMix { a: NodeId, plan: Rc<MixPlan> },
    Im2Col { a: NodeId, geom: ConvGeom },
    CrossEntropyMean { logits: NodeId, targets: Rc<Vec<usize>> },
}

const LN_EPS: f32 = 1e-5;

/// elu(x)+1 feature map, strictly positive. The exp branch is floored at
/// the smallest positive normal so extreme negatives cannot reach zero.
pub(crate) fn elu_plus_one_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp().max(f32::MIN_POSITIVE)
    }
}

pub(crate) fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn transpose_raw(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

struct DropoutState {
    p: f32,
    rng: ChaCha8Rng,
}

/// Computation tape. Nodes are append-only; values are computed at
/// creation and never mutated, so a NodeId can be read at any time.
pub struct Graph {
    ops: Vec<Op>,
    shapes: Vec<(usize, usize)>,
    vals: Vec<Vec<f32>>,
    grads: Vec<Option<Vec<f32>>>,
    needs: Vec<bool>,
    leaf_names: Vec<Option<String>>,
    param_cache: BTreeMap<String, NodeId>,
    dropout: Option<DropoutState>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn add_grad(grads: &mut [Option<Vec<f32>>], id: NodeId, numel: usize, f: impl FnOnce(&mut [f32])) {
    let g = grads[id].get_or_insert_with(|| vec![0.0; numel]);
    f(g);
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            shapes: Vec::new(),
            vals: Vec::new(),
            grads: Vec::new(),
            needs: Vec::new(),
            leaf_names: Vec::new(),
            param_cache: BTreeMap::new(),
            dropout: None,
        }
    }

    /// Enables inverted dropout for subsequent `dropout` calls. Masks are
    /// drawn from `rng` in tape order, so builds are reproducible.
    pub fn set_dropout(&mut self, p: f32, rng: ChaCha8Rng) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout rate {p} outside [0,1)")));
        }
        self.dropout = if p == 0.0 {
            None
        } else {
            Some(DropoutState { p, rng })
        };
        Ok(())
    }

    fn push(
        &mut self,
        op: Op,
        rows: usize,
        cols: usize,
        data: Vec<f32>,
        needs: bool,
        name: Option<String>,
    ) -> NodeId {
        debug_assert_eq!(data.len(), rows * cols);
        let id = self.ops.len();
        self.ops.push(op);
        self.shapes.push((rows, cols));
        self.vals.push(data);
        self.grads.push(None);
        self.needs.push(needs);
        self.leaf_names.push(name);
        id
    }

    fn check_node(&self, id: NodeId, op: &'static str) -> Result<()> {
        if id >= self.ops.len() {
            return Err(Error::Contract(format!("{op}: node {id} does not exist")));
        }
        Ok(())
    }

    fn needs_any(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.needs[i])
    }

    // ── node constructors ──────────────────────────────────────────────

    /// Constant input leaf; no gradient is tracked through it.
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f32>) -> Result<NodeId> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "leaf data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(self.push(Op::Leaf, rows, cols, data, false, None))
    }

    /// Input leaf that participates in gradient computation (for tests and
    /// gradient checks on non-parameter inputs).
    pub fn leaf_grad(&mut self, rows: usize, cols: usize, data: Vec<f32>) -> Result<NodeId> {
        let id = self.leaf(rows, cols, data)?;
        self.needs[id] = true;
        Ok(id)
    }

    /// Leaf bound to a named parameter. Memoized per graph, so repeated
    /// lookups share one node and gradients accumulate once.
    pub fn param(&mut self, params: &Params, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_cache.get(name) {
            return Ok(id);
        }
        let t = params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        let id = self.push(
            Op::Leaf,
            t.rows(),
            t.cols(),
            t.data().to_vec(),
            t.requires_grad(),
            Some(name.to_string()),
        );
        self.param_cache.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.shapes[a];
        let (kb, n) = self.shapes[b];
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, ka],
                rhs: vec![kb, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(&self.vals[a], &self.vals[b], m, ka, n, &mut out);
        let needs = self.needs_any(&[a, b]);
        Ok(self.push(Op::Matmul { a, b }, m, n, out, needs, None))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shapes[a];
        let out = transpose_raw(&self.vals[a], r, c);
        let needs = self.needs[a];
        Ok(self.push(Op::Transpose { a }, c, r, out, needs, None))
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (ra, ca) = self.shapes[a];
        let (rb, cb) = self.shapes[b];
        if (ra, ca) != (rb, cb) {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: vec![ra, ca],
                rhs: vec![rb, cb],
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b)?;
        let (r, c) = self.shapes[a];
        let out: Vec<f32> = self.vals[a]
            .iter()
            .zip(&self.vals[b])
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs_any(&[a, b]);
        Ok(self.push(Op::Add { a, b }, r, c, out, needs, None))
    }

    /// `a[i,j] + bias[0,j]` for a `[1, n]` bias row.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.shapes[a];
        let (rb, cb) = self.shapes[bias];
        if rb != 1 || cb != c {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: vec![r, c],
                rhs: vec![rb, cb],
            });
        }
        let bias_v = &self.vals[bias];
        let mut out = self.vals[a].clone();
        for row in out.chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(bias_v) {
                *o += bv;
            }
        }
        let needs = self.needs_any(&[a, bias]);
        Ok(self.push(Op::AddRowBias { a, bias }, r, c, out, needs, None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b)?;
        let (r, c) = self.shapes[a];
        let out: Vec<f32> = self.vals[a]
            .iter()
            .zip(&self.vals[b])
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs_any(&[a, b]);
        Ok(self.push(Op::Sub { a, b }, r, c, out, needs, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b)?;
        let (r, c) = self.shapes[a];
        let out: Vec<f32> = self.vals[a]
            .iter()
            .zip(&self.vals[b])
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs_any(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, r, c, out, needs, None))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> Result<NodeId> {
        let (r, cc) = self.shapes[a];
        let out: Vec<f32> = self.vals[a].iter().map(|x| x * c).collect();
        let needs = self.needs[a];
        Ok(self.push(Op::Scale { a, c }, r, cc, out, needs, None))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shapes[a];
        let out: Vec<f32> = self.vals[a].iter().map(|x| x.max(0.0)).collect();
        let needs = self.needs[a];
        Ok(self.push(Op::Relu { a }, r, c, out, needs, None))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shapes[a];
        let out: Vec<f32> = self.vals[a].iter().map(|x| x.tanh()).collect();
        let needs = self.needs[a];
        Ok(self.push(Op::Tanh { a }, r, c, out, needs, None))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f32, hi: f32) -> Result<NodeId> {
        if !(lo < hi) {
            return Err(Error::Contract(format!("clamp bounds [{lo}, {hi}] empty")));
        }
        let (r, c) = self.shapes[a];
        let out: Vec<f32> = self.vals[a].iter().map(|x| x.clamp(lo, hi)).collect();
        let needs = self.needs[a];
        Ok(self.push(Op::Clamp { a, lo, hi }, r, c, out, needs, None))
    }

    pub fn elu_plus_one(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shapes[a];
        let out: Vec<f32> = self.vals[a].iter().map(|&x| elu_plus_one_scalar(x)).collect();
        let needs = self.needs[a];
        Ok(self.push(Op::EluPlusOne { a }, r, c, out, needs, None))
    }

    /// Numerically stable row-wise softmax (max-shifted).
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shapes[a];
        if c == 0 {
            return Err(Error::Contract("softmax over zero columns".into()));
        }
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &self.vals[a][i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let orow = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0f32;
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - m).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let needs = self.needs[a];
        Ok(self.push(Op::SoftmaxRows { a }, r, c, out, needs, None))
    }

    /// Row-wise layer normalization with learned scale/offset `[1, n]`.
    pub fn layer_norm(&mut self, a: NodeId, scale: NodeId, offset: NodeId) -> Result<NodeId> {
        let (r, c) = self.shapes[a];
        for &(v, nm) in &[(scale, "scale"), (offset, "offset")] {
            let (vr, vc) = self.shapes[v];
            if vr != 1 || vc != c {
                return Err(Error::Contract(format!(
                    "layer_norm {nm} must be [1, {c}], got [{vr}, {vc}]"
                )));
            }
        }
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &self.vals[a][i * c..(i + 1) * c];
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / c as f32;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv * self.vals[scale][j] + self.vals[offset][j];
            }
        }
        let needs = self.needs_any(&[a, scale, offset]);
        Ok(self.push(Op::LayerNorm { a, scale, offset }, r, c, out, needs, None))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f32 = self.vals[a].iter().sum();
        let needs = self.needs[a];
        Ok(self.push(Op::SumAll { a }, 1, 1, vec![s], needs, None))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.vals[a].len();
        if n == 0 {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let s: f32 = self.vals[a].iter().sum::<f32>() / n as f32;
        let needs = self.needs[a];
        Ok(self.push(Op::MeanAll { a }, 1, 1, vec![s], needs, None))
    }

    /// Column totals: `[m, n] -> [1, n]`.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let c = self.shapes[a].1;
        let mut out = vec![0.0f32; c];
        for row in self.vals[a].chunks(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let needs = self.needs[a];
        Ok(self.push(Op::SumRows { a }, 1, c, out, needs, None))
    }

    /// `out[i, j] = a[i, j] / den[i, 0]`. Caller guarantees nonzero rows.
    pub fn row_div(&mut self, a: NodeId, den: NodeId) -> Result<NodeId> {
        let (r, c) = self.shapes[a];
        let (rd, cd) = self.shapes[den];
        if rd != r || cd != 1 {
            return Err(Error::ShapeMismatch {
                op: "row_div",
                lhs: vec![r, c],
                rhs: vec![rd, cd],
            });
        }
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let d = self.vals[den][i];
            debug_assert!(d != 0.0, "row_div by zero at row {i}");
            for j in 0..c {
                out[i * c + j] = self.vals[a][i * c + j] / d;
            }
        }
        let needs = self.needs_any(&[a, den]);
        Ok(self.push(Op::RowDiv { a, den }, r, c, out, needs, None))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.shapes[a];
        let (rb, cb) = self.shapes[b];
        if ca != cb {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: vec![ra, ca],
                rhs: vec![rb, cb],
            });
        }
        let mut out = self.vals[a].clone();
        out.extend_from_slice(&self.vals[b]);
        let needs = self.needs_any(&[a, b]);
        Ok(self.push(Op::ConcatRows { a, b }, ra + rb, ca, out, needs, None))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.shapes[a];
        let (rb, cb) = self.shapes[b];
        if ra != rb {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: vec![ra, ca],
                rhs: vec![rb, cb],
            });
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&self.vals[a][i * ca..(i + 1) * ca]);
            out.extend_from_slice(&self.vals[b][i * cb..(i + 1) * cb]);
        }
        let needs = self.needs_any(&[a, b]);
        Ok(self.push(Op::ConcatCols { a, b }, ra, ca + cb, out, needs, None))
    }

    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> Result<NodeId> {
        let (r, c) = self.shapes[a];
        if r0 >= r1 || r1 > r {
            return Err(Error::Contract(format!(
                "slice_rows [{r0}, {r1}) out of range for {r} rows"
            )));
        }
        let out = self.vals[a][r0 * c..r1 * c].to_vec();
        let needs = self.needs[a];
        Ok(self.push(Op::SliceRows { a, r0, r1 }, r1 - r0, c, out, needs, None))
    }

    pub fn slice_cols(&mut self, a: NodeId, c0: usize, c1: usize) -> Result<NodeId> {
        let (r, c) = self.shapes[a];
        if c0 >= c1 || c1 > c {
            return Err(Error::Contract(format!(
                "slice_cols [{c0}, {c1}) out of range for {c} cols"
            )));
        }
        let mut out = Vec::with_capacity(r * (c1 - c0));
        for i in 0..r {
            out.extend_from_slice(&self.vals[a][i * c + c0..i * c + c1]);
        }
        let needs = self.needs[a];
        Ok(self.push(Op::SliceCols { a, c0, c1 }, r, c1 - c0, out, needs, None))
    }

    /// Gathers weighted combinations of input rows (bilinear sampling,
    /// neighbor windows). The plan is fixed data, not differentiated.
    pub fn row_mix(&mut self, a: NodeId, plan: MixPlan) -> Result<NodeId> {
        let (r, c) = self.shapes[a];
        if plan.in_rows != r {
            return Err(Error::ShapeMismatch {
                op: "row_mix",
                lhs: vec![plan.in_rows, c],
                rhs: vec![r, c],
            });
        }
        let out_rows = plan.out_rows();
        let mut out = vec![0.0f32; out_rows * c];
        for i in 0..out_rows {
            let orow = &mut out[i * c..(i + 1) * c];
            for &(src, w) in &plan.entries[plan.row_ptr[i]..plan.row_ptr[i + 1]] {
                let srow = &self.vals[a][src * c..(src + 1) * c];
                for (o, x) in orow.iter_mut().zip(srow) {
                    *o += w * x;
                }
            }
        }
        let needs = self.needs[a];
        Ok(self.push(
            Op::RowMix {
                a,
                plan: Rc::new(plan),
            },
            out_rows,
            c,
            out,
            needs,
            None,
        ))
    }

    pub fn im2col(&mut self, a: NodeId, geom: ConvGeom) -> Result<NodeId> {
        let (r, c) = self.shapes[a];
        if r != geom.in_h * geom.in_w || c != geom.in_c {
            return Err(Error::ShapeMismatch {
                op: "im2col",
                lhs: vec![r, c],
                rhs: vec![geom.in_h * geom.in_w, geom.in_c],
            });
        }
        let (oh, ow, pl) = (geom.out_h(), geom.out_w(), geom.patch_len());
        let mut out = vec![0.0f32; oh * ow * pl];
        let cin = geom.in_c;
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = (oy * ow + ox) * pl;
                for ky in 0..geom.k {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.in_h as isize {
                        continue;
                    }
                    for kx in 0..geom.k {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= geom.in_w as isize {
                            continue;
                        }
                        let src = (iy as usize * geom.in_w + ix as usize) * cin;
                        let dst = obase + (ky * geom.k + kx) * cin;
                        out[dst..dst + cin].copy_from_slice(&self.vals[a][src..src + cin]);
                    }
                }
            }
        }
        let needs = self.needs[a];
        Ok(self.push(Op::Im2Col { a, geom }, oh * ow, pl, out, needs, None))
    }

    /// Mean negative log-likelihood over rows of raw logits. Fused with
    /// softmax for numerical stability; output is scalar `[1, 1]`.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (r, c) = self.shapes[logits];
        if targets.len() != r {
            return Err(Error::Contract(format!(
                "cross_entropy_mean: {} targets for {} rows",
                targets.len(),
                r
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Contract(format!(
                "cross_entropy_mean: target class {t} out of {c}"
            )));
        }
        let mut total = 0.0f32;
        for (i, &t) in targets.iter().enumerate() {
            let row = &self.vals[logits][i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f32>().ln();
            total += lse - row[t];
        }
        let needs = self.needs[logits];
        Ok(self.push(
            Op::CrossEntropyMean {
                logits,
                targets: Rc::new(targets.to_vec()),
            },
            1,
            1,
            vec![total / r as f32],
            needs,
            None,
        ))
    }

    /// Inverted dropout; identity unless `set_dropout` armed a rate.
    pub fn dropout(&mut self, a: NodeId) -> Result<NodeId> {
        let Some(state) = self.dropout.as_mut() else {
            return Ok(a);
        };
        let (r, c) = self.shapes[a];
        let keep = 1.0 - state.p;
        let mask: Vec<f32> = (0..r * c)
            .map(|_| {
                if state.rng.random::<f32>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask_node = self.leaf(r, c, mask)?;
        self.mul(a, mask_node)
    }

    // ── introspection ──────────────────────────────────────────────────

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.vals[id]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.shapes[id]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads[id].as_deref()
    }

    pub fn node_count(&self) -> usize {
        self.ops.len()
    }

    /// Shapes of all nodes recorded so far, in tape order. Used by tests
    /// that assert no quadratic attention buffer was ever materialized.
    pub fn node_shapes(&self) -> Vec<(usize, usize)> {
        self.shapes.clone()
    }

    pub(crate) fn op(&self, id: NodeId) -> &Op {
        &self.ops[id]
    }

    pub fn leaf_name(&self, id: NodeId) -> Option<&str> {
        self.leaf_names[id].as_deref()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.ops[id], Op::Leaf)
    }

    // ── reverse pass ───────────────────────────────────────────────────

    /// Reverse-mode gradient walk seeded at a scalar loss. Each call uses
    /// fresh scratch buffers for the walk and then adds the results into
    /// the stored gradients, so repeated calls accumulate additively.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check_node(loss, "backward")?;
        let (r, c) = self.shapes[loss];
        if r * c != 1 {
            return Err(Error::Contract(format!(
                "backward requires scalar loss, got [{r}, {c}]"
            )));
        }
        let mut scratch: Vec<Option<Vec<f32>>> = vec![None; loss + 1];
        scratch[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            if !self.needs[id] {
                continue;
            }
            let Some(gout) = scratch[id].take() else {
                continue;
            };
            self.apply_backward(id, &gout, &mut scratch);
            let numel = gout.len();
            add_grad(&mut self.grads, id, numel, |g| {
                for (gi, di) in g.iter_mut().zip(&gout) {
                    *gi += di;
                }
            });
        }
        Ok(())
    }

    fn apply_backward(&mut self, id: NodeId, gout: &[f32], scratch: &mut [Option<Vec<f32>>]) {
        let (rows, cols) = self.shapes[id];
        let op = self.ops[id].clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.shapes[a];
                let n = self.shapes[b].1;
                if self.needs[a] {
                    // dA = G * B^T
                    let bt = transpose_raw(&self.vals[b], k, n);
                    let mut ga = vec![0.0f32; m * k];
                    matmul_raw(gout, &bt, m, n, k, &mut ga);
                    add_grad(scratch, a, m * k, |g| {
                        for (gi, di) in g.iter_mut().zip(&ga) {
                            *gi += di;
                        }
                    });
                }
                if self.needs[b] {
                    // dB = A^T * G
                    let at = transpose_raw(&self.vals[a], m, k);
                    let mut gb = vec![0.0f32; k * n];
                    matmul_raw(&at, gout, k, m, n, &mut gb);
                    add_grad(scratch, b, k * n, |g| {
                        for (gi, di) in g.iter_mut().zip(&gb) {
                            *gi += di;
                        }
                    });
                }
            }
            Op::Transpose { a } => {
                if self.needs[a] {
                    let gt = transpose_raw(gout, rows, cols);
                    add_grad(scratch, a, cols * rows, |g| {
                        for (gi, di) in g.iter_mut().zip(&gt) {
                            *gi += di;
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for t in [a, b] {
                    if self.needs[t] {
                        add_grad(scratch, t, rows * cols, |g| {
                            for (gi, di) in g.iter_mut().zip(gout) {
                                *gi += di;
                            }
                        });
                    }
                }
            }
            Op::AddRowBias { a, bias } => {
                if self.needs[a] {
                    add_grad(scratch, a, rows * cols, |g| {
                        for (gi, di) in g.iter_mut().zip(gout) {
                            *gi += di;
                        }
                    });
                }
                if self.needs[bias] {
                    add_grad(scratch, bias, cols, |g| {
                        for row in gout.chunks(cols) {
                            for (gi, di) in g.iter_mut().zip(row) {
                                *gi += di;
                            }
                        }
                    });
                }
            }
            Op::Sub { a, b } => {
                if self.needs[a] {
                    add_grad(scratch, a, rows * cols, |g| {
                        for (gi, di) in g.iter_mut().zip(gout) {
                            *gi += di;
                        }
                    });
                }
                if self.needs[b] {
                    add_grad(scratch, b, rows * cols, |g| {
                        for (gi, di) in g.iter_mut().zip(gout) {
                            *gi -= di;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                if self.needs[a] {
                    let bv = self.vals[b].clone();
                    add_grad(scratch, a, rows * cols, |g| {
                        for ((gi, di), xi) in g.iter_mut().zip(gout).zip(&bv) {
                            *gi += di * xi;
                        }
                    });
                }
                if self.needs[b] {
                    let av = self.vals[a].clone();
                    add_grad(scratch, b, rows * cols, |g| {
                        for ((gi, di), xi) in g.iter_mut().zip(gout).zip(&av) {
                            *gi += di * xi;
                        }
                    });
                }
            }
            Op::Scale { a, c } => {
                if self.needs[a] {
                    add_grad(scratch, a, rows * cols, |g| {
                        for (gi, di) in g.iter_mut().zip(gout) {
                            *gi += c * di;
                        }
                    });
                }
            }
            Op::Relu { a } => {
                if self.needs[a] {
                    let av = self.vals[a].clone();
                    add_grad(scratch, a, rows * cols, |g| {
                        for ((gi, di), &xi) in g.iter_mut().zip(gout).zip(&av) {
                            if xi > 0.0 {
                                *gi += di;
                            }
                        }
                    });
                }
            }
            Op::Tanh { a } => {
                if self.needs[a] {
                    let ov = self.vals[id].clone();
                    add_grad(scratch, a, rows * cols, |g| {
                        for ((gi, di), &t) in g.iter_mut().zip(gout).zip(&ov) {
                            *gi += di * (1.0 - t * t);
                        }
                    });
                }
            }
            Op::Clamp { a, lo, hi } => {
                if self.needs[a] {
                    let av = self.vals[a].clone();
                    add_grad(scratch, a, rows * cols, |g| {
                        for ((gi, di), &xi) in g.iter_mut().zip(gout).zip(&av) {
                            if xi > lo && xi < hi {
                                *gi += di;
                            }
                        }
                    });
                }
            }
            Op::EluPlusOne { a } => {
                if self.needs[a] {
                    let av = self.vals[a].clone();
                    let ov = self.vals[id].clone();
                    add_grad(scratch, a, rows * cols, |g| {
                        for (((gi, di), &xi), &oi) in g.iter_mut().zip(gout).zip(&av).zip(&ov) {
                            // d/dx = 1 for x >= 0, exp(x) = out otherwise
                            *gi += di * if xi >= 0.0 { 1.0 } else { oi };
                        }
                    });
                }
            }
            Op::SoftmaxRows { a } => {
                if self.needs[a] {
                    let p = self.vals[id].clone();
                    add_grad(scratch, a, rows * cols, |g| {
                        for i in 0..rows {
                            let prow = &p[i * cols..(i + 1) * cols];
                            let grow = &gout[i * cols..(i + 1) * cols];
                            let dot: f32 = prow.iter().zip(grow).map(|(pi, gi)| pi * gi).sum();
                            for j in 0..cols {
                                g[i * cols + j] += prow[j] * (grow[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { a, scale, offset } => {
                let av = self.vals[a].clone();
                let sv = self.vals[scale].clone();
                let n = cols as f32;
                // Recompute per-row statistics; cheaper than caching.
                let mut xhat = vec![0.0f32; rows * cols];
                let mut invs = vec![0.0f32; rows];
                for i in 0..rows {
                    let row = &av[i * cols..(i + 1) * cols];
                    let mean = row.iter().sum::<f32>() / n;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    invs[i] = inv;
                    for j in 0..cols {
                        xhat[i * cols + j] = (row[j] - mean) * inv;
                    }
                }
                if self.needs[scale] {
                    add_grad(scratch, scale, cols, |g| {
                        for i in 0..rows {
                            for j in 0..cols {
                                g[j] += gout[i * cols + j] * xhat[i * cols + j];
                            }
                        }
                    });
                }
                if self.needs[offset] {
                    add_grad(scratch, offset, cols, |g| {
                        for i in 0..rows {
                            for j in 0..cols {
                                g[j] += gout[i * cols + j];
                            }
                        }
                    });
                }
                if self.needs[a] {
                    add_grad(scratch, a, rows * cols, |g| {
                        for i in 0..rows {
                            let gy: Vec<f32> = (0..cols)
                                .map(|j| gout[i * cols + j] * sv[j])
                                .collect();
                            let mean_gy = gy.iter().sum::<f32>() / n;
                            let mean_gy_xhat = gy
                                .iter()
                                .zip(&xhat[i * cols..(i + 1) * cols])
                                .map(|(gj, xj)| gj * xj)
                                .sum::<f32>()
                                / n;
                            for j in 0..cols {
                                g[i * cols + j] += invs[i]
                                    * (gy[j] - mean_gy - xhat[i * cols + j] * mean_gy_xhat);
                            }
                        }
                    });
                }
            }
            Op::SumAll { a } => {
                if self.needs[a] {
                    let numel = {
                        let (r, c) = self.shapes[a];
                        r * c
                    };
                    let d = gout[0];
                    add_grad(scratch, a, numel, |g| {
                        for gi in g.iter_mut() {
                            *gi += d;
                        }
                    });
                }
            }
            Op::MeanAll { a } => {
                if self.needs[a] {
                    let (r, c) = self.shapes[a];
                    let numel = r * c;
                    let d = gout[0] / numel as f32;
                    add_grad(scratch, a, numel, |g| {
                        for gi in g.iter_mut() {
                            *gi += d;
                        }
                    });
                }
            }
            Op::SumRows { a } => {
                if self.needs[a] {
                    let (r, c) = self.shapes[a];
                    add_grad(scratch, a, r * c, |g| {
                        for row in g.chunks_mut(c) {
                            for (gi, di) in row.iter_mut().zip(gout) {
                                *gi += di;
                            }
                        }
                    });
                }
            }
            Op::RowDiv { a, den } => {
                let dv = self.vals[den].clone();
                if self.needs[a] {
                    add_grad(scratch, a, rows * cols, |g| {
                        for i in 0..rows {
                            for j in 0..cols {
                                g[i * cols + j] += gout[i * cols + j] / dv[i];
                            }
                        }
                    });
                }
                if self.needs[den] {
                    let ov = self.vals[id].clone();
                    add_grad(scratch, den, rows, |g| {
                        for i in 0..rows {
                            let dot: f32 = (0..cols)
                                .map(|j| gout[i * cols + j] * ov[i * cols + j])
                                .sum();
                            g[i] -= dot / dv[i];
                        }
                    });
                }
            }
            Op::ConcatRows { a, b } => {
                let (ra, c) = self.shapes[a];
                if self.needs[a] {
                    add_grad(scratch, a, ra * c, |g| {
                        for (gi, di) in g.iter_mut().zip(&gout[..ra * c]) {
                            *gi += di;
                        }
                    });
                }
                if self.needs[b] {
                    let (rb, _) = self.shapes[b];
                    add_grad(scratch, b, rb * c, |g| {
                        for (gi, di) in g.iter_mut().zip(&gout[ra * c..]) {
                            *gi += di;
                        }
                    });
                }
            }
            Op::ConcatCols { a, b } => {
                let (r, ca) = self.shapes[a];
                let cb = self.shapes[b].1;
                if self.needs[a] {
                    add_grad(scratch, a, r * ca, |g| {
                        for i in 0..r {
                            for j in 0..ca {
                                g[i * ca + j] += gout[i * (ca + cb) + j];
                            }
                        }
                    });
                }
                if self.needs[b] {
                    add_grad(scratch, b, r * cb, |g| {
                        for i in 0..r {
                            for j in 0..cb {
                                g[i * cb + j] += gout[i * (ca + cb) + ca + j];
                            }
                        }
                    });
                }
            }
            Op::SliceRows { a, r0, .. } => {
                if self.needs[a] {
                    let (ra, c) = self.shapes[a];
                    add_grad(scratch, a, ra * c, |g| {
                        for (gi, di) in g[r0 * c..].iter_mut().zip(gout) {
                            *gi += di;
                        }
                    });
                }
            }
            Op::SliceCols { a, c0, .. } => {
                if self.needs[a] {
                    let (ra, ca) = self.shapes[a];
                    add_grad(scratch, a, ra * ca, |g| {
                        for i in 0..rows {
                            for j in 0..cols {
                                g[i * ca + c0 + j] += gout[i * cols + j];
                            }
                        }
                    });
                }
            }
            Op::RowMix { a, plan } => {
                if self.needs[a] {
                    let (ra, c) = self.shapes[a];
                    add_grad(scratch, a, ra * c, |g| {
                        for i in 0..plan.out_rows() {
                            let grow = &gout[i * c..(i + 1) * c];
                            for &(src, w) in &plan.entries[plan.row_ptr[i]..plan.row_ptr[i + 1]] {
                                for (gi, di) in g[src * c..(src + 1) * c].iter_mut().zip(grow) {
                                    *gi += w * di;
                                }
                            }
                        }
                    });
                }
            }
            Op::Im2Col { a, geom } => {
                if self.needs[a] {
                    let (ra, ca) = self.shapes[a];
                    let (oh, ow, pl, cin) =
                        (geom.out_h(), geom.out_w(), geom.patch_len(), geom.in_c);
                    add_grad(scratch, a, ra * ca, |g| {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let obase = (oy * ow + ox) * pl;
                                for ky in 0..geom.k {
                                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                                    if iy < 0 || iy >= geom.in_h as isize {
                                        continue;
                                    }
                                    for kx in 0..geom.k {
                                        let ix =
                                            (ox * geom.stride + kx) as isize - geom.pad as isize;
                                        if ix < 0 || ix >= geom.in_w as isize {
                                            continue;
                                        }
                                        let dst = (iy as usize * geom.in_w + ix as usize) * cin;
                                        let src = obase + (ky * geom.k + kx) * cin;
                                        for t in 0..cin {
                                            g[dst + t] += gout[src + t];
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::CrossEntropyMean { logits, targets } => {
                if self.needs[logits] {
                    let (r, c) = self.shapes[logits];
                    let lv = self.vals[logits].clone();
                    let d = gout[0] / r as f32;
                    add_grad(scratch, logits, r * c, |g| {
                        for (i, &t) in targets.iter().enumerate() {
                            let row = &lv[i * c..(i + 1) * c];
                            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                            let sum: f32 = row.iter().map(|x| (x - m).exp()).sum();
                            for j in 0..c {
                                let p = (row[j] - m).exp() / sum;
                                let ind = if j == t { 1.0 } else { 0.0 };
                                g[i * c + j] += d * (p - ind);
                            }
                        }
                    });
                }
            }
        }
    }

    /// Adds each named trainable leaf's gradient onto its parameter.
    pub fn export_grads(&self, params: &mut Params) -> Result<()> {
        for id in 0..self.ops.len() {
            let Some(name) = self.leaf_names[id].as_deref() else {
                continue;
            };
            if !self.needs[id] {
                continue;
            }
            let Some(g) = self.grads[id].as_deref() else {
                continue;
            };
            let t = params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("parameter `{name}` vanished")))?;
            t.accumulate_grad(g)?;
        }
        Ok(())
    }
}
