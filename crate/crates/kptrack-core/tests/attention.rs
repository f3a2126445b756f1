use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use kptrack_core::attention::{
    append_ocl, encode_positions, linear_attention, AamSpec, AttentionLayerSpec, EncodedSet,
};
use kptrack_core::tensor::{check, Graph, MlpSpec, Params, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| r.random_range(-1.0..1.0f32)).collect()
}

/// Dense reference: explicit N x N weights W_ij = phi(q_i) . phi(k_j),
/// rows normalized, in f64.
fn dense_linear_attention(q: &[f32], k: &[f32], v: &[f32], m: usize, n: usize, d: usize, dv: usize) -> Vec<f64> {
    let phi = |x: f32| -> f64 {
        let x = x as f64;
        if x >= 0.0 {
            x + 1.0
        } else {
            x.exp()
        }
    };
    let mut out = vec![0.0f64; m * dv];
    for i in 0..m {
        let mut weights = vec![0.0f64; n];
        for j in 0..n {
            let mut dot = 0.0;
            for t in 0..d {
                dot += phi(q[i * d + t]) * phi(k[j * d + t]);
            }
            weights[j] = dot;
        }
        let wsum: f64 = weights.iter().sum();
        for j in 0..n {
            for t in 0..dv {
                out[i * dv + t] += weights[j] / wsum * v[j * dv + t] as f64;
            }
        }
    }
    out
}

// ── encode_positions ────────────────────────────────────────────────────

#[test]
fn zero_position_mlp_leaves_features_unchanged() {
    let mut params = Params::new();
    params.init_zeros("pos.l0.weight", 2, 4);
    params.init_zeros("pos.l0.bias", 1, 4);
    params.init_zeros("pos.l1.weight", 4, 4);
    params.init_zeros("pos.l1.bias", 1, 4);
    let mlp = MlpSpec::new("pos", vec![2, 4, 4]).unwrap();

    let mut g = Graph::new();
    let feats = g.leaf(3, 4, rand_vec(&mut rng(1), 12)).unwrap();
    let pts = [(10.0, 20.0), (3.5, 60.0), (0.0, 0.0)];
    let out = encode_positions(&mut g, &params, feats, &pts, 64, 64, &mlp).unwrap();
    assert_eq!(g.value(out), g.value(feats));
}

#[test]
fn identical_positions_get_identical_embeddings() {
    let mut params = Params::new();
    let mlp = MlpSpec::new("pos", vec![2, 8, 4]).unwrap();
    mlp.init(&mut params, &mut rng(2));

    let mut g = Graph::new();
    let feats = g.leaf(2, 4, vec![0.0; 8]).unwrap();
    let pts = [(12.25, 40.5), (12.25, 40.5)];
    let out = encode_positions(&mut g, &params, feats, &pts, 64, 64, &mlp).unwrap();
    let v = g.value(out);
    assert_eq!(&v[0..4], &v[4..8]);
}

#[test]
fn position_count_mismatch_errors() {
    let mut params = Params::new();
    let mlp = MlpSpec::new("pos", vec![2, 4]).unwrap();
    mlp.init(&mut params, &mut rng(3));
    let mut g = Graph::new();
    let feats = g.leaf(3, 4, vec![0.0; 12]).unwrap();
    assert!(encode_positions(&mut g, &params, feats, &[(1.0, 1.0)], 64, 64, &mlp).is_err());
}

#[test]
fn encode_positions_gradient_reaches_feats_and_mlp() {
    let mut params = Params::new();
    let mlp = MlpSpec::new("pos", vec![2, 6, 4]).unwrap();
    mlp.init(&mut params, &mut rng(4));

    let mut g = Graph::new();
    let mut r = rng(5);
    let feats = g.leaf_grad(3, 4, rand_vec(&mut r, 12)).unwrap();
    let pts = [(4.0, 4.0), (20.0, 12.0), (50.0, 60.0)];
    let out = encode_positions(&mut g, &params, feats, &pts, 64, 64, &mlp).unwrap();
    let sq = g.mul(out, out).unwrap();
    let loss = g.sum_all(sq).unwrap();
    g.backward(loss).unwrap();

    let mut leaves = vec![feats];
    for name in ["pos.l0.weight", "pos.l0.bias", "pos.l1.weight", "pos.l1.bias"] {
        leaves.push(g.param(&params, name).unwrap());
    }
    let err = check::max_rel_err(&g, loss, &leaves, 1e-3, 32).unwrap();
    assert!(err < 1e-3, "encode_positions rel err {err}");
}

// ── append_ocl ──────────────────────────────────────────────────────────

#[test]
fn append_ocl_extends_set_and_preserves_rows() {
    let mut params = Params::new();
    params.insert("aam.ocl", Tensor::new(1, 3, vec![9.0, 8.0, 7.0]).unwrap());
    let mut g = Graph::new();
    let rows = rand_vec(&mut rng(6), 15);
    let node = g.leaf(5, 3, rows.clone()).unwrap();
    let set = EncodedSet::new(&g, node, false).unwrap();

    let with = append_ocl(&mut g, &params, &set, "aam.ocl").unwrap();
    assert_eq!(with.count, 6);
    assert!(with.with_ocl);
    let v = g.value(with.node);
    for (a, b) in v[..15].iter().zip(&rows) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(&v[15..], &[9.0, 8.0, 7.0]);

    let err = append_ocl(&mut g, &params, &with, "aam.ocl")
        .unwrap_err()
        .to_string();
    assert!(err.contains("already"), "{err}");
}

// ── linear_attention ────────────────────────────────────────────────────

#[test]
fn single_key_forces_unit_weight() {
    let mut g = Graph::new();
    let q = g.leaf(4, 3, rand_vec(&mut rng(7), 12)).unwrap();
    let k = g.leaf(1, 3, vec![0.3, -0.2, 0.9]).unwrap();
    let v = g.leaf(1, 3, vec![5.0, -7.0, 11.0]).unwrap();
    let out = linear_attention(&mut g, q, k, v).unwrap();
    for row in g.value(out).chunks(3) {
        for (a, b) in row.iter().zip(&[5.0, -7.0, 11.0]) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn equal_keys_average_the_values() {
    let mut g = Graph::new();
    let q = g.leaf(2, 2, rand_vec(&mut rng(8), 4)).unwrap();
    let k = g.leaf(3, 2, vec![0.5, -0.5].repeat(3)).unwrap();
    let v = g.leaf(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let out = linear_attention(&mut g, q, k, v).unwrap();
    for row in g.value(out).chunks(2) {
        assert!((row[0] - 3.0).abs() < 1e-5);
        assert!((row[1] - 4.0).abs() < 1e-5);
    }
}

#[test]
fn matches_dense_oracle_within_1e5() {
    let mut r = rng(9);
    for case in 0..100 {
        let m = r.random_range(1..=16);
        let n = r.random_range(1..=16);
        let d = r.random_range(1..=8);
        let dv = r.random_range(1..=8);
        let qv = rand_vec(&mut r, m * d);
        let kv = rand_vec(&mut r, n * d);
        let vv = rand_vec(&mut r, n * dv);

        let mut g = Graph::new();
        let q = g.leaf(m, d, qv.clone()).unwrap();
        let k = g.leaf(n, d, kv.clone()).unwrap();
        let v = g.leaf(n, dv, vv.clone()).unwrap();
        let out = linear_attention(&mut g, q, k, v).unwrap();

        let expect = dense_linear_attention(&qv, &kv, &vv, m, n, d, dv);
        for (a, b) in g.value(out).iter().zip(&expect) {
            assert!(
                (*a as f64 - b).abs() < 1e-5,
                "case {case}: {a} vs {b} (m={m} n={n} d={d})"
            );
        }
    }
}

#[test]
fn never_materializes_quadratic_buffer() {
    // N far above D: any [N, N] intermediate would be caught here.
    let (n, d) = (32, 4);
    let mut r = rng(10);
    let mut g = Graph::new();
    let q = g.leaf(n, d, rand_vec(&mut r, n * d)).unwrap();
    let k = g.leaf(n, d, rand_vec(&mut r, n * d)).unwrap();
    let v = g.leaf(n, d, rand_vec(&mut r, n * d)).unwrap();
    let before = g.node_count();
    linear_attention(&mut g, q, k, v).unwrap();
    for (r_, c_) in g.node_shapes().into_iter().skip(before) {
        assert!(
            r_ * c_ <= n * d,
            "intermediate [{r_}, {c_}] exceeds O(N*D) memory"
        );
    }
}

#[test]
fn linear_attention_gradients_match_finite_differences() {
    let mut r = rng(11);
    let mut g = Graph::new();
    let q = g.leaf_grad(3, 4, rand_vec(&mut r, 12)).unwrap();
    let k = g.leaf_grad(5, 4, rand_vec(&mut r, 20)).unwrap();
    let v = g.leaf_grad(5, 4, rand_vec(&mut r, 20)).unwrap();
    let out = linear_attention(&mut g, q, k, v).unwrap();
    let sq = g.mul(out, out).unwrap();
    let loss = g.sum_all(sq).unwrap();
    g.backward(loss).unwrap();
    let err = check::max_rel_err(&g, loss, &[q, k, v], 1e-3, 60).unwrap();
    assert!(err < 1e-3, "linear_attention rel err {err}");
}

// ── attention_layer ─────────────────────────────────────────────────────

fn layer_norm_ref(x: &[f32], n_cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for (i, row) in x.chunks(n_cols).enumerate() {
        let mean = row.iter().sum::<f32>() / n_cols as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n_cols as f32;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for j in 0..n_cols {
            out[i * n_cols + j] = (row[j] - mean) * inv;
        }
    }
    out
}

#[test]
fn zeroed_layer_reduces_to_double_normalization() {
    let d = 4;
    let mut params = Params::new();
    let spec = AttentionLayerSpec::new("t", d);
    spec.init(&mut params, &mut rng(12));
    // zero out projections and FFN, keep LN at identity init
    for name in ["t.wq", "t.wk", "t.wv", "t.ffn.w1", "t.ffn.w2"] {
        let t = params.get_mut(name).unwrap();
        t.data_mut().fill(0.0);
    }

    let mut g = Graph::new();
    let data = rand_vec(&mut rng(13), 3 * d);
    let node = g.leaf(3, d, data.clone()).unwrap();
    let target = EncodedSet::new(&g, node, false).unwrap();
    let out = spec.forward(&mut g, &params, &target, &target).unwrap();

    let expect = layer_norm_ref(&layer_norm_ref(&data, d), d);
    for (a, b) in g.value(out.node).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn output_shape_tracks_target_for_any_source_length() {
    let d = 6;
    let mut params = Params::new();
    let spec = AttentionLayerSpec::new("t", d);
    spec.init(&mut params, &mut rng(14));
    let mut r = rng(15);
    for src_len in [1usize, 4, 33] {
        let mut g = Graph::new();
        let tnode = g.leaf(5, d, rand_vec(&mut r, 5 * d)).unwrap();
        let snode = g.leaf(src_len, d, rand_vec(&mut r, src_len * d)).unwrap();
        let target = EncodedSet::new(&g, tnode, false).unwrap();
        let source = EncodedSet::new(&g, snode, false).unwrap();
        let out = spec.forward(&mut g, &params, &target, &source).unwrap();
        assert_eq!(g.shape(out.node), (5, d));
    }
}

// ── aam_forward ─────────────────────────────────────────────────────────

fn random_sets(
    g: &mut Graph,
    params: &Params,
    r: &mut ChaCha8Rng,
    m: usize,
    n_patches: usize,
    d: usize,
) -> (EncodedSet, EncodedSet) {
    let f1 = g.leaf_grad(m, d, rand_vec(r, m * d)).unwrap();
    let f2 = g.leaf_grad(n_patches, d, rand_vec(r, n_patches * d)).unwrap();
    let s1 = EncodedSet::new(g, f1, false).unwrap();
    let s2 = EncodedSet::new(g, f2, false).unwrap();
    let s2 = append_ocl(g, params, &s2, "aam.ocl").unwrap();
    (s1, s2)
}

#[test]
fn zero_depth_aam_is_identity() {
    let spec = AamSpec::new("aam", 4, 0);
    let mut params = Params::new();
    spec.init(&mut params, &mut rng(16));
    let mut g = Graph::new();
    let mut r = rng(17);
    let (s1, s2) = random_sets(&mut g, &params, &mut r, 3, 6, 4);
    let (o1, o2) = spec.forward(&mut g, &params, &s1, &s2).unwrap();
    assert_eq!(o1.node, s1.node);
    assert_eq!(o2.node, s2.node);
}

#[test]
fn aam_preserves_shapes() {
    let spec = AamSpec::new("aam", 8, 2);
    let mut params = Params::new();
    spec.init(&mut params, &mut rng(18));
    let mut g = Graph::new();
    let mut r = rng(19);
    let (s1, s2) = random_sets(&mut g, &params, &mut r, 7, 64, 8);
    let (o1, o2) = spec.forward(&mut g, &params, &s1, &s2).unwrap();
    assert_eq!(g.shape(o1.node), (7, 8));
    assert_eq!(g.shape(o2.node), (65, 8));
    assert!(o2.with_ocl && !o1.with_ocl);
}

#[test]
fn aam_requires_ocl_on_f2_only() {
    let spec = AamSpec::new("aam", 4, 1);
    let mut params = Params::new();
    spec.init(&mut params, &mut rng(20));
    let mut g = Graph::new();
    let a = g.leaf(2, 4, vec![0.1; 8]).unwrap();
    let b = g.leaf(3, 4, vec![0.2; 12]).unwrap();
    let sa = EncodedSet::new(&g, a, false).unwrap();
    let sb = EncodedSet::new(&g, b, false).unwrap();
    let err = spec.forward(&mut g, &params, &sa, &sb).unwrap_err().to_string();
    assert!(err.contains("OCL"), "{err}");
}

#[test]
fn aam_is_equivariant_under_f2_row_permutation() {
    let d = 8;
    let n = 10;
    let spec = AamSpec::new("aam", d, 1);
    let mut params = Params::new();
    spec.init(&mut params, &mut rng(21));

    let mut r = rng(22);
    let f1_data = rand_vec(&mut r, 3 * d);
    let f2_data = rand_vec(&mut r, n * d);
    // rotate non-OCL rows by 3
    let perm: Vec<usize> = (0..n).map(|i| (i + 3) % n).collect();
    let mut f2_perm = vec![0.0; n * d];
    for (dst, &src) in perm.iter().enumerate() {
        f2_perm[dst * d..(dst + 1) * d].copy_from_slice(&f2_data[src * d..(src + 1) * d]);
    }

    let run = |f2: Vec<f32>| -> Vec<f32> {
        let mut g = Graph::new();
        let a = g.leaf(3, d, f1_data.clone()).unwrap();
        let b = g.leaf(n, d, f2).unwrap();
        let sa = EncodedSet::new(&g, a, false).unwrap();
        let sb = EncodedSet::new(&g, b, false).unwrap();
        let sb = append_ocl(&mut g, &params, &sb, "aam.ocl").unwrap();
        let (o1, o2) = spec.forward(&mut g, &params, &sa, &sb).unwrap();
        let mut out = g.value(o1.node).to_vec();
        out.extend_from_slice(g.value(o2.node));
        out
    };

    let base = run(f2_data.clone());
    let permuted = run(f2_perm);

    // F1 rows and the OCL row are position-independent
    for i in 0..3 * d {
        assert!((base[i] - permuted[i]).abs() <= 1e-5);
    }
    let ocl_base = &base[3 * d + n * d..];
    let ocl_perm = &permuted[3 * d + n * d..];
    for (a, b) in ocl_base.iter().zip(ocl_perm) {
        assert!((a - b).abs() <= 1e-5);
    }
    // un-permute F2 rows of the permuted run and compare
    for (dst, &src) in perm.iter().enumerate() {
        for t in 0..d {
            let a = base[3 * d + src * d + t];
            let b = permuted[3 * d + dst * d + t];
            assert!((a - b).abs() <= 1e-5, "row {src}: {a} vs {b}");
        }
    }
}

#[test]
fn tiny_aam_gradients_match_finite_differences() {
    let (m, n, d) = (3, 10, 8);
    let spec = AamSpec::new("aam", d, 1);
    let mut params = Params::new();
    spec.init(&mut params, &mut rng(23));

    let mut g = Graph::new();
    let mut r = rng(24);
    let (s1, s2) = random_sets(&mut g, &params, &mut r, m, n, d);
    let (o1, o2) = spec.forward(&mut g, &params, &s1, &s2).unwrap();
    let cat = g.concat_rows(o1.node, o2.node).unwrap();
    let sq = g.mul(cat, cat).unwrap();
    let loss = g.mean_all(sq).unwrap();
    g.backward(loss).unwrap();

    let mut leaves = vec![s1.node];
    for name in params.names() {
        if name.ends_with(".wq") || name.ends_with(".ffn.w1") || name.ends_with(".ln1.scale") || name == "aam.ocl" {
            leaves.push(g.param(&params, name).unwrap());
        }
    }
    let err = check::max_rel_err(&g, loss, &leaves, 1e-4, 16).unwrap();
    assert!(err < 1e-2, "aam rel err {err}");
}

#[test]
fn ocl_token_receives_gradient_from_occlusion_loss() {
    // stage-2-style loss: similarity rows against OCL-column targets
    let (m, n, d) = (4, 9, 8);
    let spec = AamSpec::new("aam", d, 1);
    let mut params = Params::new();
    spec.init(&mut params, &mut rng(25));

    let mut g = Graph::new();
    let mut r = rng(26);
    let (s1, s2) = random_sets(&mut g, &params, &mut r, m, n, d);
    let (o1, o2) = spec.forward(&mut g, &params, &s1, &s2).unwrap();
    let f2t = g.transpose(o2.node).unwrap();
    let sim = g.matmul(o1.node, f2t).unwrap();
    let scaled = g.scale(sim, 1.0 / (d as f32).sqrt()).unwrap();
    // keypoint 0 occluded (OCL column n), others matched to patches
    let loss = g.cross_entropy_mean(scaled, &[n, 0, 3, 7]).unwrap();
    g.backward(loss).unwrap();
    g.export_grads(&mut params).unwrap();

    let ocl_grad = params.get("aam.ocl").unwrap().grad().unwrap();
    assert!(
        ocl_grad.iter().any(|v| v.abs() > 1e-8),
        "OCL gradient is all zeros"
    );
}
