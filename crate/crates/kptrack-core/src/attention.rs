//! Positional encoding, linear-attention layers, and the Attention
//! Aggregation Module (AAM) that exchanges information between the two
//! images' feature sets. Attention uses the kernel form
//! `out_i = phi(Q_i) (sum_j phi(K_j)^T V_j) / (phi(Q_i) sum_j phi(K_j))`
//! with `phi = elu + 1`, so no N x N weight matrix ever exists; the
//! denominator completes the kernel normalization the product form needs
//! for bounded activations.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, MlpSpec, NodeId, Params};

/// A feature set living on the tape: `count` rows of width `dim`.
/// `with_ocl` marks that the final row is the learned occlusion token.
#[derive(Clone, Copy, Debug)]
pub struct EncodedSet {
    pub node: NodeId,
    pub count: usize,
    pub dim: usize,
    pub with_ocl: bool,
}

impl EncodedSet {
    pub fn new(g: &Graph, node: NodeId, with_ocl: bool) -> Result<Self> {
        let (count, dim) = g.shape(node);
        if with_ocl && count == 0 {
            return Err(Error::Contract("empty set cannot carry OCL".into()));
        }
        Ok(EncodedSet {
            node,
            count,
            dim,
            with_ocl,
        })
    }
}

/// `feats + MLP(positions / (W, H))`. The MLP maps 2 -> ... -> dim;
/// positions are raw pixel coordinates of the same rows as `feats`.
pub fn encode_positions(
    g: &mut Graph,
    params: &Params,
    feats: NodeId,
    positions: &[(f64, f64)],
    img_w: usize,
    img_h: usize,
    mlp: &MlpSpec,
) -> Result<NodeId> {
    let (n, _d) = g.shape(feats);
    if positions.len() != n {
        return Err(Error::Contract(format!(
            "{} positions for {} feature rows",
            positions.len(),
            n
        )));
    }
    if img_w == 0 || img_h == 0 {
        return Err(Error::Contract("zero image extent".into()));
    }
    let mut data = Vec::with_capacity(n * 2);
    for &(x, y) in positions {
        data.push((x / img_w as f64) as f32);
        data.push((y / img_h as f64) as f32);
    }
    let pos = g.leaf(n, 2, data)?;
    let emb = mlp.forward(g, params, pos)?;
    g.add(feats, emb)
}

/// Appends the learned OCL row (`ocl_name`, a `[1, dim]` parameter).
pub fn append_ocl(
    g: &mut Graph,
    params: &Params,
    set: &EncodedSet,
    ocl_name: &str,
) -> Result<EncodedSet> {
    if set.with_ocl {
        return Err(Error::Contract("OCL token already appended".into()));
    }
    let ocl = g.param(params, ocl_name)?;
    let (r, c) = g.shape(ocl);
    if r != 1 || c != set.dim {
        return Err(Error::Contract(format!(
            "OCL token shape [{r}, {c}] does not match dim {}",
            set.dim
        )));
    }
    let node = g.concat_rows(set.node, ocl)?;
    Ok(EncodedSet {
        node,
        count: set.count + 1,
        dim: set.dim,
        with_ocl: true,
    })
}

/// Kernelized attention without the quadratic weight matrix.
pub fn linear_attention(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
    let (m, dq) = g.shape(q);
    let (nk, dk) = g.shape(k);
    let (nv, dv) = g.shape(v);
    if dq != dk {
        return Err(Error::ShapeMismatch {
            op: "linear_attention q/k",
            lhs: vec![m, dq],
            rhs: vec![nk, dk],
        });
    }
    if nk != nv {
        return Err(Error::ShapeMismatch {
            op: "linear_attention k/v",
            lhs: vec![nk, dk],
            rhs: vec![nv, dv],
        });
    }
    let start = g.node_count();
    let pq = g.elu_plus_one(q)?;
    let pk = g.elu_plus_one(k)?;
    let pkt = g.transpose(pk)?;
    let kv = g.matmul(pkt, v)?; // [dq, dv]
    let num = g.matmul(pq, kv)?; // [m, dv]
    let ksum = g.sum_rows(pk)?; // [1, dq]
    let ksumt = g.transpose(ksum)?;
    let den = g.matmul(pq, ksumt)?; // [m, 1]; phi > 0 keeps this nonzero
    let out = g.row_div(num, den)?;

    // Structural guarantee: every intermediate stays O(N*D + D*D).
    // Catches any accidental [m, n] buffer whenever the sets outgrow D.
    let cap = (m.max(nk) * dq.max(dv)).max(dq * dv);
    debug_assert!(
        (start..g.node_count()).all(|id| {
            let (r, c) = g.shape(id);
            r * c <= cap
        }),
        "linear_attention materialized a quadratic buffer"
    );
    Ok(out)
}

/// One post-norm attention layer: target' = LN2(h + FFN(h)) with
/// h = LN1(target + linatt(target Wq, source Wk, source Wv)).
/// Parameter names hang off `prefix`: wq/wk/wv, ffn.*, ln1.*, ln2.*.
#[derive(Clone, Debug)]
pub struct AttentionLayerSpec {
    pub prefix: String,
    pub dim: usize,
}

impl AttentionLayerSpec {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        AttentionLayerSpec {
            prefix: prefix.into(),
            dim,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        let d = self.dim;
        let p = &self.prefix;
        for w in ["wq", "wk", "wv"] {
            params.init_matrix(&format!("{p}.{w}"), d, d, rng);
        }
        params.init_matrix(&format!("{p}.ffn.w1"), d, 2 * d, rng);
        params.init_zeros(&format!("{p}.ffn.b1"), 1, 2 * d);
        params.init_matrix(&format!("{p}.ffn.w2"), 2 * d, d, rng);
        params.init_zeros(&format!("{p}.ffn.b2"), 1, d);
        for ln in ["ln1", "ln2"] {
            params.init_ones(&format!("{p}.{ln}.scale"), 1, d);
            params.init_zeros(&format!("{p}.{ln}.offset"), 1, d);
        }
    }

    /// Source is read-only; self-attention passes the same set twice.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &Params,
        target: &EncodedSet,
        source: &EncodedSet,
    ) -> Result<EncodedSet> {
        if target.dim != source.dim || target.dim != self.dim {
            return Err(Error::ShapeMismatch {
                op: "attention_layer",
                lhs: vec![target.count, target.dim],
                rhs: vec![source.count, source.dim],
            });
        }
        let p = &self.prefix;
        let wq = g.param(params, &format!("{p}.wq"))?;
        let wk = g.param(params, &format!("{p}.wk"))?;
        let wv = g.param(params, &format!("{p}.wv"))?;
        let q = g.matmul(target.node, wq)?;
        let k = g.matmul(source.node, wk)?;
        let v = g.matmul(source.node, wv)?;
        let att = linear_attention(g, q, k, v)?;

        let ln1s = g.param(params, &format!("{p}.ln1.scale"))?;
        let ln1o = g.param(params, &format!("{p}.ln1.offset"))?;
        let res1 = g.add(target.node, att)?;
        let h = g.layer_norm(res1, ln1s, ln1o)?;

        let w1 = g.param(params, &format!("{p}.ffn.w1"))?;
        let b1 = g.param(params, &format!("{p}.ffn.b1"))?;
        let w2 = g.param(params, &format!("{p}.ffn.w2"))?;
        let b2 = g.param(params, &format!("{p}.ffn.b2"))?;
        let mut f = g.matmul(h, w1)?;
        f = g.add_row_bias(f, b1)?;
        f = g.relu(f)?;
        f = g.dropout(f)?;
        f = g.matmul(f, w2)?;
        f = g.add_row_bias(f, b2)?;

        let ln2s = g.param(params, &format!("{p}.ln2.scale"))?;
        let ln2o = g.param(params, &format!("{p}.ln2.offset"))?;
        let res2 = g.add(h, f)?;
        let out = g.layer_norm(res2, ln2s, ln2o)?;

        Ok(EncodedSet {
            node: out,
            count: target.count,
            dim: target.dim,
            with_ocl: target.with_ocl,
        })
    }
}

/// Stack of `n_layers` blocks, each running self-attention on both sets
/// then cross-attention in both directions, sequentially. Layer i role
/// prefixes: `{prefix}.layer{i}.{self1|self2|cross1|cross2}`; the OCL
/// token parameter is `{prefix}.ocl`.
#[derive(Clone, Debug)]
pub struct AamSpec {
    pub prefix: String,
    pub dim: usize,
    pub n_layers: usize,
    /// Coarse matching appends an OCL token to F2; the fine refinement
    /// stack runs the same block structure without one.
    pub uses_ocl: bool,
}

impl AamSpec {
    pub fn new(prefix: impl Into<String>, dim: usize, n_layers: usize) -> Self {
        AamSpec {
            prefix: prefix.into(),
            dim,
            n_layers,
            uses_ocl: true,
        }
    }

    pub fn without_ocl(prefix: impl Into<String>, dim: usize, n_layers: usize) -> Self {
        AamSpec {
            uses_ocl: false,
            ..AamSpec::new(prefix, dim, n_layers)
        }
    }

    pub fn ocl_name(&self) -> String {
        format!("{}.ocl", self.prefix)
    }

    fn layer(&self, i: usize, role: &str) -> AttentionLayerSpec {
        AttentionLayerSpec::new(format!("{}.layer{i}.{role}", self.prefix), self.dim)
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        if self.uses_ocl {
            params.init_matrix(&self.ocl_name(), 1, self.dim, rng);
        }
        for i in 0..self.n_layers {
            for role in ["self1", "self2", "cross1", "cross2"] {
                self.layer(i, role).init(params, rng);
            }
        }
    }

    /// F2 must already carry the OCL token (unless this AAM runs without
    /// one); F1 must not.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &Params,
        f1: &EncodedSet,
        f2: &EncodedSet,
    ) -> Result<(EncodedSet, EncodedSet)> {
        if self.uses_ocl && !f2.with_ocl {
            return Err(Error::Contract("aam_forward: F2 is missing the OCL token".into()));
        }
        if !self.uses_ocl && f2.with_ocl {
            return Err(Error::Contract("aam_forward: this AAM takes no OCL token".into()));
        }
        if f1.with_ocl {
            return Err(Error::Contract("aam_forward: OCL belongs to F2 only".into()));
        }
        if f1.dim != f2.dim || f1.dim != self.dim {
            return Err(Error::ShapeMismatch {
                op: "aam_forward",
                lhs: vec![f1.count, f1.dim],
                rhs: vec![f2.count, f2.dim],
            });
        }
        let (mut a, mut b) = (*f1, *f2);
        for i in 0..self.n_layers {
            a = self.layer(i, "self1").forward(g, params, &a, &a)?;
            b = self.layer(i, "self2").forward(g, params, &b, &b)?;
            a = self.layer(i, "cross1").forward(g, params, &a, &b)?;
            b = self.layer(i, "cross2").forward(g, params, &b, &a)?;
        }
        Ok((a, b))
    }
}
