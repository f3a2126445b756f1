use kptrack_core::coarse::{softmax_probabilities, Verdict};
use kptrack_core::datagen::warped::noise_image;
use kptrack_core::features::{patch_center, KeypointSet};
use kptrack_core::model::{
    fine_trained, set_stage_ordinal, stage_ordinal, write_matches, Model, ModelConfig,
    TrackOptions, TrackResult, TrackedPoint, FINE_STAGE_ORDINAL,
};
use kptrack_core::tensor::{load_checkpoint, save_checkpoint, Graph};

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        dim: 8,
        widths: [4, 6, 8, 8],
        coarse_layers: 1,
        fine_layers: 1,
        pos_hidden: 4,
        head_hidden: 6,
    }
}

fn tiny_setup() -> (Model, kptrack_core::tensor::Params) {
    let model = Model::new(tiny_cfg()).unwrap();
    let params = model.init_params(7);
    (model, params)
}

fn test_inputs() -> (
    kptrack_core::features::Image,
    kptrack_core::features::Image,
    KeypointSet,
) {
    let img1 = noise_image(32, 1);
    let img2 = noise_image(32, 2);
    let kps = KeypointSet::new(vec![(5.5, 9.25), (20.0, 3.0), (31.0, 31.0)], 32, 32).unwrap();
    (img1, img2, kps)
}

#[test]
fn config_round_trips_through_checkpoint_metadata() {
    let cfg = ModelConfig {
        dim: 16,
        widths: [4, 8, 12, 16],
        coarse_layers: 3,
        fine_layers: 2,
        pos_hidden: 5,
        head_hidden: 9,
    };
    let model = Model::new(cfg).unwrap();
    let params = model.init_params(0);
    let rebuilt = Model::from_params(&params).unwrap();
    assert_eq!(rebuilt.cfg, cfg);
}

#[test]
fn config_rejects_width_dim_mismatch() {
    let cfg = ModelConfig {
        widths: [16, 32, 64, 32],
        ..ModelConfig::default()
    };
    assert!(Model::new(cfg).is_err());
}

#[test]
fn initialization_is_seed_deterministic() {
    let model = Model::new(tiny_cfg()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb, pc) = (
        dir.path().join("a.trkf"),
        dir.path().join("b.trkf"),
        dir.path().join("c.trkf"),
    );
    save_checkpoint(&pa, &model.init_params(3)).unwrap();
    save_checkpoint(&pb, &model.init_params(3)).unwrap();
    save_checkpoint(&pc, &model.init_params(4)).unwrap();
    let bytes = |p: &std::path::Path| std::fs::read(p).unwrap();
    assert_eq!(bytes(&pa), bytes(&pb));
    assert_ne!(bytes(&pa), bytes(&pc));
}

#[test]
fn coarse_forward_produces_the_contracted_shapes() {
    let (model, params) = tiny_setup();
    let (img1, img2, kps) = test_inputs();
    let mut g = Graph::new();
    let fwd = model.forward_coarse(&mut g, &params, &img1, &img2, &kps).unwrap();
    assert_eq!((fwd.kp_count, fwd.grid_rows, fwd.grid_cols), (3, 4, 4));
    assert_eq!(g.shape(fwd.sim), (3, 17));
    assert_eq!(fwd.f1.count, 3);
    assert_eq!(fwd.f2.count, 17);
    assert!(fwd.f2.with_ocl && !fwd.f1.with_ocl);

    let sm = model.similarity_matrix(&g, &fwd).unwrap();
    let probs = softmax_probabilities(&sm);
    for r in 0..3 {
        let sum: f64 = probs[r * 17..(r + 1) * 17].iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn coarse_only_track_lands_on_patch_centers() {
    let (model, params) = tiny_setup();
    let (img1, img2, kps) = test_inputs();
    let opts = TrackOptions { threshold: 0.0, use_fine: false };
    let result = model.track(&params, &img1, &img2, &kps, opts).unwrap();
    assert_eq!(result.points.len(), 3);
    for p in &result.points {
        assert!(p.confidence > 0.0 && p.confidence <= 1.0);
        match p.verdict {
            Verdict::Patch(idx) => {
                let center = patch_center(idx / 4, idx % 4);
                assert_eq!(p.position, Some(center));
            }
            _ => assert_eq!(p.position, None),
        }
    }
}

#[test]
fn fine_track_stays_within_the_refinement_box() {
    let (model, params) = tiny_setup();
    let (img1, img2, kps) = test_inputs();
    let coarse = model
        .track(&params, &img1, &img2, &kps, TrackOptions { threshold: 0.0, use_fine: false })
        .unwrap();
    let fine = model
        .track(&params, &img1, &img2, &kps, TrackOptions { threshold: 0.0, use_fine: true })
        .unwrap();
    let mut moved = 0;
    for (c, f) in coarse.points.iter().zip(&fine.points) {
        assert_eq!(c.verdict, f.verdict, "refinement must not change verdicts");
        if let (Some(cc), Some(fp)) = (c.position, f.position) {
            assert!((fp.0 - cc.0).abs() < 4.0 && (fp.1 - cc.1).abs() < 4.0);
            if fp != cc {
                moved += 1;
            }
        }
    }
    assert!(moved > 0, "random-init head never produced a nonzero offset");
}

#[test]
fn checkpoint_reload_reproduces_tracking_bit_exactly() {
    let (model, params) = tiny_setup();
    let (img1, img2, kps) = test_inputs();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.trkf");
    save_checkpoint(&path, &params).unwrap();

    let reloaded = load_checkpoint(&path).unwrap();
    let rebuilt = Model::from_params(&reloaded).unwrap();
    let opts = TrackOptions { threshold: 0.1, use_fine: true };
    let a = model.track(&params, &img1, &img2, &kps, opts).unwrap();
    let b = rebuilt.track(&reloaded, &img1, &img2, &kps, opts).unwrap();
    assert_eq!(a.points.len(), b.points.len());
    for (x, y) in a.points.iter().zip(&b.points) {
        assert_eq!(x.verdict, y.verdict);
        assert_eq!(x.confidence, y.confidence);
        assert_eq!(x.position, y.position);
    }
}

#[test]
fn from_params_rejects_foreign_or_mismatched_checkpoints() {
    assert!(Model::from_params(&kptrack_core::tensor::Params::new()).is_err());

    // dim recorded in meta disagreeing with the stored tensors
    let (model, mut params) = tiny_setup();
    let wrong = ModelConfig {
        dim: 16,
        widths: [4, 6, 8, 16],
        ..tiny_cfg()
    };
    params.insert(
        kptrack_core::model::META_ARCH,
        Model::new(wrong).unwrap().init_params(0)
            .get(kptrack_core::model::META_ARCH)
            .unwrap()
            .clone(),
    );
    let err = Model::from_params(&params).unwrap_err().to_string();
    assert!(err.contains("dim"), "{err}");
    drop(model);
}

#[test]
fn stage_ordinal_bookkeeping() {
    let (_, mut params) = tiny_setup();
    assert_eq!(stage_ordinal(&params).unwrap(), -1);
    assert!(!fine_trained(&params));
    set_stage_ordinal(&mut params, FINE_STAGE_ORDINAL);
    assert_eq!(stage_ordinal(&params).unwrap(), FINE_STAGE_ORDINAL);
    assert!(fine_trained(&params));
    // meta entries must never enter the optimizer sweep
    params.set_all_trainable(true);
    assert!(!params.get("meta.stage").unwrap().requires_grad());
    assert!(!params.get("meta.arch").unwrap().requires_grad());
}

#[test]
fn keypoints_must_match_the_first_image() {
    let (model, params) = tiny_setup();
    let (img1, img2, _) = test_inputs();
    let wrong = KeypointSet::new(vec![(1.0, 1.0)], 64, 64).unwrap();
    assert!(model.forward_coarse(&mut Graph::new(), &params, &img1, &img2, &wrong).is_err());
    let empty = KeypointSet::new(vec![], 32, 32).unwrap();
    assert!(model.forward_coarse(&mut Graph::new(), &params, &img1, &img2, &empty).is_err());
}

#[test]
fn match_dump_format_is_pinned() {
    let kps = KeypointSet::new(vec![(1.5, 2.0), (3.0, 4.5)], 32, 32).unwrap();
    let result = TrackResult {
        points: vec![
            TrackedPoint {
                kp_index: 0,
                verdict: Verdict::Patch(5),
                confidence: 0.75,
                position: Some((12.25, 4.0)),
            },
            TrackedPoint {
                kp_index: 1,
                verdict: Verdict::Occluded,
                confidence: 0.5,
                position: None,
            },
        ],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("matches.csv");
    write_matches(&path, &kps, &result).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        text,
        "kp_index,x1,y1,verdict,x2,y2,confidence\n\
         0,1.5,2,PATCH,12.25,4,0.75\n\
         1,3,4.5,OCCLUDED,,,0.5\n"
    );
}
