//! Whole-tracker assembly: one parameter space holding the extractor,
//! positional MLP, coarse attention stack, and fine refinement head, plus
//! the architecture/stage bookkeeping that rides along in checkpoints.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{append_ocl, encode_positions, AamSpec, EncodedSet};
use crate::coarse::{classify, similarity_node, SimilarityMatrix, Verdict};
use crate::error::{Error, Result};
use crate::features::{
    descriptor_mix_plan, image_node, patch_center, DenseFeatureGrid, ExtractorSpec, Image,
    KeypointSet,
};
use crate::fine::{compose, gather_neighbors, FineContext, FineSpec};
use crate::tensor::{Graph, MlpSpec, NodeId, Params, Tensor};

/// Architecture descriptor parameter; rides in every checkpoint so a model
/// can be rebuilt from the file alone.
pub const META_ARCH: &str = "meta.arch";
/// Ordinal of the last completed curriculum stage (−1 = freshly initialized).
pub const META_STAGE: &str = "meta.stage";
/// Stage ordinal at which the refinement head becomes trustworthy.
pub const FINE_STAGE_ORDINAL: i32 = 3;

const ARCH_VERSION: f32 = 1.0;

// ── configuration ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Descriptor width D shared by every attention block.
    pub dim: usize,
    /// Extractor channel plan; `widths[3]` must equal `dim`.
    pub widths: [usize; 4],
    pub coarse_layers: usize,
    pub fine_layers: usize,
    /// Hidden width of the positional MLP (2 → pos_hidden → dim).
    pub pos_hidden: usize,
    /// Hidden width of the offset head (dim+2 → head_hidden → 2).
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            widths: [16, 32, 64, 64],
            coarse_layers: 4,
            fine_layers: 2,
            pos_hidden: 32,
            head_hidden: 64,
        }
    }
}

impl ModelConfig {
    /// Scaled-down architecture for fast CPU experiments and tests.
    pub fn small() -> Self {
        ModelConfig {
            dim: 32,
            widths: [8, 16, 32, 32],
            coarse_layers: 2,
            fine_layers: 1,
            pos_hidden: 16,
            head_hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths[3] != self.dim {
            return Err(Error::Contract(format!(
                "extractor output width {} must equal model dim {}",
                self.widths[3], self.dim
            )));
        }
        let counts = [
            self.dim,
            self.widths[0],
            self.widths[1],
            self.widths[2],
            self.coarse_layers,
            self.fine_layers,
            self.pos_hidden,
            self.head_hidden,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Contract("model config has a zero extent".into()));
        }
        Ok(())
    }

    fn to_meta(self) -> Tensor {
        let v = vec![
            ARCH_VERSION,
            self.dim as f32,
            self.widths[0] as f32,
            self.widths[1] as f32,
            self.widths[2] as f32,
            self.coarse_layers as f32,
            self.fine_layers as f32,
            self.pos_hidden as f32,
            self.head_hidden as f32,
        ];
        let mut t = Tensor::new(1, v.len(), v).expect("sized above");
        t.set_requires_grad(false);
        t
    }

    fn from_meta(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 9 {
            return Err(Error::Contract(format!(
                "{META_ARCH} has {} entries, expected 9",
                d.len()
            )));
        }
        if d[0] != ARCH_VERSION {
            return Err(Error::Contract(format!(
                "unsupported architecture version {}",
                d[0]
            )));
        }
        let at = |i: usize| d[i] as usize;
        let cfg = ModelConfig {
            dim: at(1),
            widths: [at(2), at(3), at(4), at(1)],
            coarse_layers: at(5),
            fine_layers: at(6),
            pos_hidden: at(7),
            head_hidden: at(8),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reads the curriculum stage ordinal stored in a parameter set.
pub fn stage_ordinal(params: &Params) -> Result<i32> {
    let t = params.require(META_STAGE)?;
    Ok(t.data()[0] as i32)
}

/// Stamps the curriculum stage ordinal (never trainable).
pub fn set_stage_ordinal(params: &mut Params, ordinal: i32) {
    let mut t = Tensor::new(1, 1, vec![ordinal as f32]).expect("1x1");
    t.set_requires_grad(false);
    params.insert(META_STAGE, t);
}

/// True once the checkpoint has been through refinement training.
pub fn fine_trained(params: &Params) -> bool {
    stage_ordinal(params).map(|s| s >= FINE_STAGE_ORDINAL).unwrap_or(false)
}

// ── model ───────────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    extractor: ExtractorSpec,
    pos: MlpSpec,
    coarse_aam: AamSpec,
    fine: FineSpec,
}

/// Everything the coarse pass leaves on the tape: the pre-attention
/// queries, both post-attention sets, and the similarity logits.
pub struct CoarseForward {
    pub kp_count: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// `[M, D]` positionally-encoded keypoint descriptors (attention input).
    pub query_pre: NodeId,
    /// Post-attention keypoint rows.
    pub f1: EncodedSet,
    /// Post-attention grid rows + OCL.
    pub f2: EncodedSet,
    /// `[M, grid+1]` similarity logits.
    pub sim: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct TrackOptions {
    pub threshold: f64,
    pub use_fine: bool,
}

impl Default for TrackOptions {
    fn default() -> Self {
        TrackOptions {
            threshold: 0.2,
            use_fine: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrackedPoint {
    pub kp_index: usize,
    pub verdict: Verdict,
    pub confidence: f64,
    /// Present iff the verdict names a patch.
    pub position: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Default)]
pub struct TrackResult {
    pub points: Vec<TrackedPoint>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            cfg,
            extractor: ExtractorSpec::new(cfg.widths),
            pos: MlpSpec::new("pos", vec![2, cfg.pos_hidden, cfg.dim])?,
            coarse_aam: AamSpec::new("coarse.aam", cfg.dim, cfg.coarse_layers),
            fine: FineSpec::new(cfg.dim, cfg.fine_layers, cfg.head_hidden)?,
        })
    }

    /// Fresh trainable parameters plus the meta bookkeeping entries.
    pub fn init_params(&self, seed: u64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        self.extractor.init(&mut p, &mut rng);
        self.pos.init(&mut p, &mut rng);
        self.coarse_aam.init(&mut p, &mut rng);
        self.fine.init(&mut p, &mut rng);
        p.insert(META_ARCH, self.cfg.to_meta());
        set_stage_ordinal(&mut p, -1);
        p.set_all_trainable(true);
        p
    }

    /// Rebuilds the model a checkpoint was trained with.
    pub fn from_params(params: &Params) -> Result<Self> {
        let cfg = ModelConfig::from_meta(params.require(META_ARCH)?)?;
        let model = Model::new(cfg)?;
        model.verify_params(params)?;
        Ok(model)
    }

    /// Cheap structural check that a parameter set belongs to this
    /// architecture; full shape errors still surface at use sites.
    pub fn verify_params(&self, params: &Params) -> Result<()> {
        params.require(META_STAGE)?;
        for name in [
            "extractor.block0.weight",
            "pos.l0.weight",
            "coarse.aam.ocl",
            "fine.fuse",
        ] {
            params.require(name)?;
        }
        let ocl = params.require("coarse.aam.ocl")?;
        if ocl.cols() != self.cfg.dim {
            return Err(Error::Contract(format!(
                "checkpoint dim {} does not match architecture dim {}",
                ocl.cols(),
                self.cfg.dim
            )));
        }
        Ok(())
    }

    /// All names the optimizer may touch during coarse training.
    pub fn coarse_param_prefixes() -> [&'static str; 3] {
        ["extractor.", "pos.", "coarse."]
    }

    /// Builds the full coarse pass on `g`. Both images must be grid-aligned;
    /// keypoints must be sized for `img1`.
    pub fn forward_coarse(
        &self,
        g: &mut Graph,
        params: &Params,
        img1: &Image,
        img2: &Image,
        kps: &KeypointSet,
    ) -> Result<CoarseForward> {
        img1.require_grid_aligned()?;
        img2.require_grid_aligned()?;
        let (kw, kh) = kps.image_size();
        if (kw, kh) != (img1.width(), img1.height()) {
            return Err(Error::Contract(format!(
                "keypoints sized for {kw}x{kh}, first image is {}x{}",
                img1.width(),
                img1.height()
            )));
        }
        if kps.count() == 0 {
            return Err(Error::InvalidInput("no keypoints to track".into()));
        }

        let i1 = image_node(g, img1)?;
        let feat1 = self
            .extractor
            .forward(g, params, i1, img1.height(), img1.width())?;
        let i2 = image_node(g, img2)?;
        let feat2 = self
            .extractor
            .forward(g, params, i2, img2.height(), img2.width())?;

        let plan = descriptor_mix_plan(img1.height() / 8, img1.width() / 8, kps)?;
        let desc = g.row_mix(feat1, plan)?;
        let query_pre = encode_positions(
            g,
            params,
            desc,
            kps.positions(),
            img1.width(),
            img1.height(),
            &self.pos,
        )?;

        let (grid_rows, grid_cols) = (img2.height() / 8, img2.width() / 8);
        let centers: Vec<(f64, f64)> = (0..grid_rows * grid_cols)
            .map(|i| patch_center(i / grid_cols, i % grid_cols))
            .collect();
        let grid_enc = encode_positions(
            g,
            params,
            feat2,
            &centers,
            img2.width(),
            img2.height(),
            &self.pos,
        )?;

        let f1_in = EncodedSet::new(g, query_pre, false)?;
        let f2_plain = EncodedSet::new(g, grid_enc, false)?;
        let f2_in = append_ocl(g, params, &f2_plain, &self.coarse_aam.ocl_name())?;
        let (f1, f2) = self.coarse_aam.forward(g, params, &f1_in, &f2_in)?;
        let sim = similarity_node(g, &f1, &f2)?;

        Ok(CoarseForward {
            kp_count: kps.count(),
            grid_rows,
            grid_cols,
            query_pre,
            f1,
            f2,
            sim,
        })
    }

    /// Materializes the similarity logits of a finished coarse pass.
    pub fn similarity_matrix(&self, g: &Graph, fwd: &CoarseForward) -> Result<SimilarityMatrix> {
        SimilarityMatrix::new(
            fwd.kp_count,
            fwd.grid_rows,
            fwd.grid_cols,
            g.value(fwd.sim).to_vec(),
        )
    }

    /// Post-attention second-image features rearranged on the patch grid
    /// (OCL row dropped) — the neighbor source for refinement.
    pub fn fine_grid(&self, g: &Graph, fwd: &CoarseForward) -> Result<DenseFeatureGrid> {
        let vals = g.value(fwd.f2.node);
        let d = fwd.f2.dim;
        let patches = fwd.grid_rows * fwd.grid_cols;
        DenseFeatureGrid::new(fwd.grid_rows, fwd.grid_cols, d, vals[..patches * d].to_vec())
    }

    /// Refinement context for one keypoint of a finished coarse pass.
    pub fn fine_context(
        &self,
        g: &Graph,
        fwd: &CoarseForward,
        grid: &DenseFeatureGrid,
        kp_index: usize,
        patch_index: usize,
    ) -> Result<FineContext> {
        if kp_index >= fwd.kp_count {
            return Err(Error::Contract(format!(
                "keypoint index {kp_index} out of range {}",
                fwd.kp_count
            )));
        }
        let d = self.cfg.dim;
        let original = g.value(fwd.query_pre)[kp_index * d..(kp_index + 1) * d].to_vec();
        let post = g.value(fwd.f1.node)[kp_index * d..(kp_index + 1) * d].to_vec();
        let window = gather_neighbors(grid, patch_index)?;
        FineContext::new(original, post, window)
    }

    pub fn fine_spec(&self) -> &FineSpec {
        &self.fine
    }

    /// Two-image inference: coarse classification for every keypoint, plus
    /// sub-pixel refinement of PATCH verdicts when `use_fine` is set.
    pub fn track(
        &self,
        params: &Params,
        img1: &Image,
        img2: &Image,
        kps: &KeypointSet,
        opts: TrackOptions,
    ) -> Result<TrackResult> {
        let mut g = Graph::new();
        let fwd = self.forward_coarse(&mut g, params, img1, img2, kps)?;
        let sm = self.similarity_matrix(&g, &fwd)?;
        let matches = classify(&sm, opts.threshold)?;

        let grid = if opts.use_fine {
            Some(self.fine_grid(&g, &fwd)?)
        } else {
            None
        };

        let mut points = Vec::with_capacity(matches.len());
        for m in matches {
            let position = match (m.verdict, m.center) {
                (Verdict::Patch(idx), Some(center)) => {
                    if let Some(grid) = &grid {
                        let ctx = self.fine_context(&g, &fwd, grid, m.kp_index, idx)?;
                        let mut fg = Graph::new();
                        let refinement = self.fine.refine(&mut fg, params, &ctx)?;
                        let offset = self.fine.read_offset(&fg, &refinement)?;
                        Some(compose(center, offset))
                    } else {
                        Some(center)
                    }
                }
                _ => None,
            };
            points.push(TrackedPoint {
                kp_index: m.kp_index,
                verdict: m.verdict,
                confidence: m.confidence,
                position,
            });
        }
        Ok(TrackResult { points })
    }
}

// ── match dump ──────────────────────────────────────────────────────────

/// CSV dump: `kp_index,x1,y1,verdict,x2,y2,confidence`; the target columns
/// stay empty unless the verdict carries a position.
pub fn write_matches(path: &Path, kps: &KeypointSet, result: &TrackResult) -> Result<()> {
    let mut out = String::from("kp_index,x1,y1,verdict,x2,y2,confidence\n");
    for p in &result.points {
        let (x1, y1) = kps.positions()[p.kp_index];
        let (x2, y2) = match p.position {
            Some((x, y)) => (x.to_string(), y.to_string()),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.kp_index,
            x1,
            y1,
            p.verdict.label(),
            x2,
            y2,
            p.confidence
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
