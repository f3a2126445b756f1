//! Gradient verification support. The recorded tape is re-evaluated in
//! f64 with individually perturbed leaves, which keeps central-difference
//! noise far below the tolerances being checked against the f32 backward
//! pass.

use std::collections::BTreeMap;

use super::graph::Op;
use super::{Graph, NodeId};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

fn matmul64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += aip * b[p * n + j];
            }
        }
    }
    out
}

/// Re-runs the tape forward in f64. `overrides` substitutes leaf values
/// (same length as the leaf's data); all other leaves use recorded data.
pub fn eval_f64(g: &Graph, overrides: &BTreeMap<NodeId, Vec<f64>>) -> Vec<Vec<f64>> {
    let n_nodes = g.node_count();
    let mut vals: Vec<Vec<f64>> = Vec::with_capacity(n_nodes);
    for id in 0..n_nodes {
        let (rows, cols) = g.shape(id);
        let v: Vec<f64> = match g.op(id) {
            Op::Leaf => match overrides.get(&id) {
                Some(o) => o.clone(),
                None => g.value(id).iter().map(|&x| x as f64).collect(),
            },
            Op::Matmul { a, b } => {
                let k = g.shape(*a).1;
                matmul64(&vals[*a], &vals[*b], rows, k, cols)
            }
            Op::Transpose { a } => {
                let (ar, ac) = g.shape(*a);
                let mut out = vec![0.0; ar * ac];
                for i in 0..ar {
                    for j in 0..ac {
                        out[j * ar + i] = vals[*a][i * ac + j];
                    }
                }
                out
            }
            Op::Add { a, b } => vals[*a].iter().zip(&vals[*b]).map(|(x, y)| x + y).collect(),
            Op::AddRowBias { a, bias } => {
                let mut out = vals[*a].clone();
                for row in out.chunks_mut(cols) {
                    for (o, bv) in row.iter_mut().zip(&vals[*bias]) {
                        *o += bv;
                    }
                }
                out
            }
            Op::Sub { a, b } => vals[*a].iter().zip(&vals[*b]).map(|(x, y)| x - y).collect(),
            Op::Mul { a, b } => vals[*a].iter().zip(&vals[*b]).map(|(x, y)| x * y).collect(),
            Op::Scale { a, c } => vals[*a].iter().map(|x| x * *c as f64).collect(),
            Op::Relu { a } => vals[*a].iter().map(|x| x.max(0.0)).collect(),
            Op::Tanh { a } => vals[*a].iter().map(|x| x.tanh()).collect(),
            Op::Clamp { a, lo, hi } => vals[*a]
                .iter()
                .map(|x| x.clamp(*lo as f64, *hi as f64))
                .collect(),
            Op::EluPlusOne { a } => vals[*a]
                .iter()
                .map(|&x| if x >= 0.0 { x + 1.0 } else { x.exp() })
                .collect(),
            Op::SoftmaxRows { a } => {
                let mut out = vec![0.0; rows * cols];
                for i in 0..rows {
                    let row = &vals[*a][i * cols..(i + 1) * cols];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let orow = &mut out[i * cols..(i + 1) * cols];
                    let mut sum = 0.0;
                    for (o, &x) in orow.iter_mut().zip(row) {
                        *o = (x - m).exp();
                        sum += *o;
                    }
                    for o in orow.iter_mut() {
                        *o /= sum;
                    }
                }
                out
            }
            Op::LayerNorm { a, scale, offset } => {
                let n = cols as f64;
                let mut out = vec![0.0; rows * cols];
                for i in 0..rows {
                    let row = &vals[*a][i * cols..(i + 1) * cols];
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    for j in 0..cols {
                        out[i * cols + j] =
                            (row[j] - mean) * inv * vals[*scale][j] + vals[*offset][j];
                    }
                }
                out
            }
            Op::SumAll { a } => vec![vals[*a].iter().sum()],
            Op::MeanAll { a } => vec![vals[*a].iter().sum::<f64>() / vals[*a].len() as f64],
            Op::SumRows { a } => {
                let mut out = vec![0.0; cols];
                for row in vals[*a].chunks(cols) {
                    for (o, x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                out
            }
            Op::RowDiv { a, den } => {
                let mut out = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        out[i * cols + j] = vals[*a][i * cols + j] / vals[*den][i];
                    }
                }
                out
            }
            Op::ConcatRows { a, b } => {
                let mut out = vals[*a].clone();
                out.extend_from_slice(&vals[*b]);
                out
            }
            Op::ConcatCols { a, b } => {
                let ca = g.shape(*a).1;
                let cb = g.shape(*b).1;
                let mut out = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    out.extend_from_slice(&vals[*a][i * ca..(i + 1) * ca]);
                    out.extend_from_slice(&vals[*b][i * cb..(i + 1) * cb]);
                }
                out
            }
            Op::SliceRows { a, r0, r1 } => {
                let c = g.shape(*a).1;
                vals[*a][r0 * c..r1 * c].to_vec()
            }
            Op::SliceCols { a, c0, c1 } => {
                let (ar, ac) = g.shape(*a);
                let mut out = Vec::with_capacity(ar * (c1 - c0));
                for i in 0..ar {
                    out.extend_from_slice(&vals[*a][i * ac + c0..i * ac + c1]);
                }
                out
            }
            Op::RowMix { a, plan } => {
                let mut out = vec![0.0; rows * cols];
                for i in 0..plan.out_rows() {
                    let orow = &mut out[i * cols..(i + 1) * cols];
                    for &(src, w) in &plan.entries[plan.row_ptr[i]..plan.row_ptr[i + 1]] {
                        for (o, x) in orow
                            .iter_mut()
                            .zip(&vals[*a][src * cols..(src + 1) * cols])
                        {
                            *o += w as f64 * x;
                        }
                    }
                }
                out
            }
            Op::Im2Col { a, geom } => {
                let (oh, ow, pl, cin) = (geom.out_h(), geom.out_w(), geom.patch_len(), geom.in_c);
                let mut out = vec![0.0; oh * ow * pl];
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
                                for t in 0..cin {
                                    out[dst + t] = vals[*a][src + t];
                                }
                            }
                        }
                    }
                }
                out
            }
            Op::CrossEntropyMean { logits, targets } => {
                let (r, c) = g.shape(*logits);
                let mut total = 0.0;
                for (i, &t) in targets.iter().enumerate() {
                    let row = &vals[*logits][i * c..(i + 1) * c];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                    total += lse - row[t];
                }
                vec![total / r as f64]
            }
        };
        debug_assert_eq!(v.len(), rows * cols);
        vals.push(v);
    }
    vals
}

/// Central finite difference of the loss w.r.t. one leaf coordinate.
pub fn finite_diff(g: &Graph, loss: NodeId, leaf: NodeId, coord: usize, h: f64) -> Result<f64> {
    if !g.is_leaf(leaf) {
        return Err(Error::Contract(format!(
            "finite_diff target node {leaf} is not a leaf"
        )));
    }
    let base: Vec<f64> = g.value(leaf).iter().map(|&x| x as f64).collect();
    if coord >= base.len() {
        return Err(Error::Contract(format!(
            "finite_diff coordinate {coord} out of {}",
            base.len()
        )));
    }
    let mut overrides = BTreeMap::new();

    let mut plus = base.clone();
    plus[coord] += h;
    overrides.insert(leaf, plus);
    let lp = eval_f64(g, &overrides)[loss][0];

    let mut minus = base;
    minus[coord] -= h;
    overrides.insert(leaf, minus);
    let lm = eval_f64(g, &overrides)[loss][0];

    Ok((lp - lm) / (2.0 * h))
}

/// Worst relative error between analytic gradients already stored on the
/// tape and finite differences, over up to `max_coords` evenly spaced
/// coordinates per leaf. Coordinates where both values sit below the
/// floor compare loosely by design; random inputs keep gradients O(1).
pub fn max_rel_err(
    g: &Graph,
    loss: NodeId,
    leaves: &[NodeId],
    h: f64,
    max_coords: usize,
) -> Result<f64> {
    let floor = 1e-3;
    let mut worst = 0.0f64;
    for &leaf in leaves {
        let numel = g.value(leaf).len();
        let grad = g
            .grad(leaf)
            .ok_or_else(|| Error::Contract(format!("leaf {leaf} has no gradient")))?
            .to_vec();
        let stride = numel.div_ceil(max_coords.max(1)).max(1);
        let mut coord = 0;
        while coord < numel {
            let fd = finite_diff(g, loss, leaf, coord, h)?;
            let an = grad[coord] as f64;
            let denom = an.abs().max(fd.abs()).max(floor);
            let err = (an - fd).abs() / denom;
            if err > worst {
                worst = err;
            }
            coord += stride;
        }
    }
    Ok(worst)
}
