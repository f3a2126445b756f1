use std::fs;

use kptrack_core::coarse::Verdict;
use kptrack_core::datagen::io::write_dataset;
use kptrack_core::datagen::synth::{gen_synthetic_pair, SynthConfig};
use kptrack_core::datagen::{noise_image, patch_index_of, StoredPair};
use kptrack_core::eval::{
    compare_coarse_vs_fine, evaluate, render_matches, score_dataset, score_pair, EvalMetrics,
    EvalOptions, PairScore,
};
use kptrack_core::model::{Model, ModelConfig, TrackedPoint};
use kptrack_core::trainer::Dataset;

fn tiny_model() -> Model {
    Model::new(ModelConfig {
        dim: 8,
        widths: [4, 6, 8, 8],
        coarse_layers: 1,
        fine_layers: 1,
        pos_hidden: 4,
        head_hidden: 6,
    })
    .unwrap()
}

fn labeled_pair(kps: Vec<(f64, f64)>, gt: Vec<(f64, f64)>, occ: Vec<bool>) -> StoredPair {
    StoredPair {
        img1: noise_image(64, 21),
        img2: noise_image(64, 22),
        keypoints: kps,
        gt,
        occluded: occ,
    }
}

fn patch_point(kp: usize, pos: (f64, f64), patch: usize) -> TrackedPoint {
    TrackedPoint {
        kp_index: kp,
        verdict: Verdict::Patch(patch),
        confidence: 0.9,
        position: Some(pos),
    }
}

// ── pair scoring ────────────────────────────────────────────────────────

#[test]
fn exact_tracking_scores_perfectly() {
    let pair = labeled_pair(
        vec![(5.0, 5.0), (20.0, 30.0), (1.0, 1.0)],
        vec![(17.0, 9.0), (44.5, 52.25), (0.0, 0.0)],
        vec![false, false, true],
    );
    let points = vec![
        patch_point(0, (17.0, 9.0), patch_index_of((17.0, 9.0), 64)),
        patch_point(1, (44.5, 52.25), patch_index_of((44.5, 52.25), 64)),
        TrackedPoint {
            kp_index: 2,
            verdict: Verdict::Occluded,
            confidence: 0.8,
            position: None,
        },
    ];
    let s = score_pair(&pair, &points).unwrap();
    assert_eq!((s.emitted, s.correct), (2, 2));
    assert_eq!(s.loc_error_sum, 0.0);
    assert_eq!((s.occ_tp, s.occ_fp, s.occ_fn), (1, 0, 0));
    assert_eq!((s.cls_correct, s.cls_total), (3, 3));

    let m = EvalMetrics::from_scores("oracle", &[s]).unwrap();
    assert_eq!(m.accuracy, 1.0);
    assert_eq!(m.mean_correct, 2.0);
    assert_eq!(m.occ_precision, 1.0);
    assert_eq!(m.occ_recall, 1.0);
    assert_eq!(m.mean_loc_error, 0.0);
    assert_eq!(m.cls_accuracy, 1.0);
}

#[test]
fn six_pixel_radius_is_strictly_less_than() {
    let pair = labeled_pair(
        vec![(5.0, 5.0), (6.0, 6.0)],
        vec![(20.0, 20.0), (40.0, 40.0)],
        vec![false, false],
    );
    let points = vec![
        patch_point(0, (25.999, 20.0), patch_index_of((20.0, 20.0), 64)),
        patch_point(1, (46.0, 40.0), 0), // exactly 6 px out: not a match
    ];
    let s = score_pair(&pair, &points).unwrap();
    assert_eq!(s.emitted, 2);
    assert_eq!(s.correct, 1, "5.999 px counts, 6.0 px must not");
    assert_eq!(s.loc_error_count, 2);
    assert!((s.loc_error_sum - 11.999).abs() < 1e-9);
    assert_eq!(s.cls_correct, 1, "second point also named the wrong patch");

    let m = EvalMetrics::from_scores("edge", &[s]).unwrap();
    assert_eq!(m.accuracy, 0.5);
    assert!((m.mean_loc_error - 5.9995).abs() < 1e-9);
}

#[test]
fn occlusion_confusion_is_pooled() {
    // pair 1: one real occlusion found, one visible point falsely occluded
    let p1 = labeled_pair(
        vec![(1.0, 1.0), (2.0, 2.0)],
        vec![(0.0, 0.0), (10.0, 10.0)],
        vec![true, false],
    );
    let pts1 = vec![
        TrackedPoint { kp_index: 0, verdict: Verdict::Occluded, confidence: 0.9, position: None },
        TrackedPoint { kp_index: 1, verdict: Verdict::Occluded, confidence: 0.9, position: None },
    ];
    // pair 2: a missed occlusion (PATCH on an occluded point)
    let p2 = labeled_pair(vec![(3.0, 3.0)], vec![(5.0, 5.0)], vec![true]);
    let pts2 = vec![patch_point(0, (5.0, 5.0), 0)];

    let s1 = score_pair(&p1, &pts1).unwrap();
    let s2 = score_pair(&p2, &pts2).unwrap();
    let m = EvalMetrics::from_scores("occ", &[s1, s2]).unwrap();
    assert_eq!(m.occ_precision, 0.5, "1 TP, 1 FP");
    assert_eq!(m.occ_recall, 0.5, "1 TP, 1 FN");
    // the missed occlusion was emitted but has no visible truth: never correct
    assert_eq!(m.mean_correct, 0.0);
    assert_eq!(m.mean_loc_error, 0.0, "occluded truth contributes no distance");
}

#[test]
fn silent_pairs_average_as_zero_accuracy() {
    let perfect = PairScore {
        emitted: 4,
        correct: 4,
        loc_error_sum: 0.0,
        loc_error_count: 4,
        cls_correct: 4,
        cls_total: 4,
        ..Default::default()
    };
    let silent = PairScore { cls_total: 4, ..Default::default() };
    let m = EvalMetrics::from_scores("mixed", &[perfect, silent]).unwrap();
    assert_eq!(m.accuracy, 0.5, "a pair emitting nothing scores zero");
    assert_eq!(m.mean_correct, 2.0);
    assert_eq!(m.cls_accuracy, 0.5);
    assert_eq!(m.occ_precision, 1.0, "vacuously perfect with no predictions");
    assert_eq!(m.occ_recall, 1.0);

    assert!(EvalMetrics::from_scores("none", &[]).is_err());
}

#[test]
fn score_pair_rejects_inconsistent_input() {
    let pair = labeled_pair(vec![(1.0, 1.0)], vec![(2.0, 2.0)], vec![false]);
    let oob = vec![patch_point(1, (2.0, 2.0), 0)];
    assert!(score_pair(&pair, &oob).is_err());

    let no_pos = vec![TrackedPoint {
        kp_index: 0,
        verdict: Verdict::Patch(0),
        confidence: 0.9,
        position: None,
    }];
    let err = score_pair(&pair, &no_pos).unwrap_err();
    assert!(err.to_string().contains("position"), "{err}");
}

// ── dataset evaluation ──────────────────────────────────────────────────

#[test]
fn keypoint_cap_limits_scored_points() {
    let n = 600usize;
    let kps: Vec<(f64, f64)> = (0..n)
        .map(|i| (((i * 7) % 64) as f64, ((i * 13) % 64) as f64))
        .collect();
    let gt = kps.clone();
    let pair = StoredPair {
        img1: noise_image(64, 31),
        img2: noise_image(64, 32),
        keypoints: kps,
        gt,
        occluded: vec![false; n],
    };
    let data = Dataset { pairs: vec![pair] };

    let model = tiny_model();
    let params = model.init_params(2);
    let opts = EvalOptions { threshold: 0.0, ..Default::default() };
    let scores = score_dataset(&model, &params, &data, &opts).unwrap();
    assert_eq!(scores[0].cls_total, 512, "default cap");

    let opts5 = EvalOptions { max_keypoints: 5, ..opts };
    let scores = score_dataset(&model, &params, &data, &opts5).unwrap();
    assert_eq!(scores[0].cls_total, 5);

    let bad = EvalOptions { max_keypoints: 0, ..opts };
    assert!(score_dataset(&model, &params, &data, &bad).is_err());
}

fn synth_data(dir: &std::path::Path, count: usize) {
    let cfg = SynthConfig { cube_max: 10.0, ..SynthConfig::new(32) };
    let seeds: Vec<u64> = (700..700 + count as u64).collect();
    write_dataset(dir, "synthetic", "eval-test", &seeds, |s| {
        gen_synthetic_pair(&cfg, s)
    })
    .unwrap();
}

#[test]
fn evaluation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    synth_data(dir.path(), 2);
    let data = Dataset::load(dir.path()).unwrap();

    let model = tiny_model();
    let params = model.init_params(6);
    let opts = EvalOptions { threshold: 0.0, ..Default::default() };
    let a = evaluate(&model, &params, &data, &opts, "run").unwrap();
    let b = evaluate(&model, &params, &data, &opts, "run").unwrap();
    assert_eq!(a.csv_line(), b.csv_line());
    assert_eq!(a.pairs, 2);
    for v in [a.accuracy, a.occ_precision, a.occ_recall, a.cls_accuracy] {
        assert!((0.0..=1.0).contains(&v), "{v}");
    }
}

#[test]
fn coarse_vs_fine_differ_only_in_positions() {
    let dir = tempfile::tempdir().unwrap();
    synth_data(dir.path(), 2);
    let data = Dataset::load(dir.path()).unwrap();

    let model = tiny_model();
    let params = model.init_params(6);
    let opts = EvalOptions { threshold: 0.0, ..Default::default() };
    let cmp = compare_coarse_vs_fine(&model, &params, &data, &opts).unwrap();

    assert_eq!(cmp.coarse.tag, "coarse");
    assert_eq!(cmp.fine.tag, "fine");
    // refinement never changes verdicts, only positions
    assert_eq!(cmp.coarse.cls_accuracy, cmp.fine.cls_accuracy);
    assert_eq!(cmp.coarse.occ_precision, cmp.fine.occ_precision);
    assert_eq!(cmp.coarse.occ_recall, cmp.fine.occ_recall);
    let expect = cmp.fine.mean_loc_error - cmp.coarse.mean_loc_error;
    assert_eq!(cmp.delta_loc_error, expect);
    assert!(cmp.delta_loc_error.is_finite());
}

#[test]
fn rendering_is_deterministic_and_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    synth_data(dir.path(), 1);
    let data = Dataset::load(dir.path()).unwrap();
    let pair = &data.pairs[0];

    let model = tiny_model();
    let params = model.init_params(6);
    let opts = EvalOptions { threshold: 0.0, ..Default::default() };
    let out1 = dir.path().join("r1.ppm");
    let out2 = dir.path().join("r2.ppm");
    render_matches(&model, &params, pair, &opts, &out1).unwrap();
    render_matches(&model, &params, pair, &opts, &out2).unwrap();

    let b1 = fs::read(&out1).unwrap();
    assert_eq!(b1, fs::read(&out2).unwrap(), "render must be deterministic");

    let header = format!("P6\n{} {}\n255\n", 32 + 8 + 32, 32);
    assert!(b1.starts_with(header.as_bytes()), "side-by-side composite size");
    let rgb = &b1[header.len()..];
    assert_eq!(rgb.len(), 72 * 32 * 3);
    // with threshold 0 every point gets a verdict, so something is drawn
    let colored = rgb
        .chunks_exact(3)
        .any(|px| px[0] != px[1] || px[1] != px[2]);
    assert!(colored, "expected at least one match line or occlusion marker");
}

#[test]
fn metrics_formatting_round_trips() {
    let s = PairScore {
        emitted: 3,
        correct: 2,
        loc_error_sum: 4.5,
        loc_error_count: 3,
        occ_tp: 1,
        occ_fp: 1,
        occ_fn: 0,
        cls_correct: 3,
        cls_total: 4,
    };
    let m = EvalMetrics::from_scores("check", &[s]).unwrap();
    let line = m.csv_line();
    assert_eq!(line.split(',').count(), EvalMetrics::CSV_HEADER.split(',').count());
    assert!(line.starts_with("check,1,"));
    assert_eq!(EvalMetrics::table_header().len(), m.table_row().len());
}
