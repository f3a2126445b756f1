//! Stage-wise training: a coarse classification curriculum over synthetic
//! pairs, then frozen-coarse offset regression for the refinement head.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coarse::imbalance_ratio;
use crate::datagen::io::{load_pair, read_manifest, StoredPair};
use crate::datagen::patch_index_of;
use crate::error::{Error, Result};
use crate::features::{patch_center, KeypointSet};
use crate::model::{set_stage_ordinal, stage_ordinal, Model, ModelConfig};
use crate::tensor::{save_checkpoint, AdamState, Graph, NodeId, Params};

/// Curriculum position. Ordinals order the stages; a checkpoint records the
/// highest ordinal it has completed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageId {
    /// Occlusion-free synthetic pairs; occluded points are dropped.
    SynthNoOcc,
    /// Synthetic pairs with occlusions mapped to the OCL class.
    SynthOcc,
    /// Warped-image pairs, same loss as [`StageId::SynthOcc`].
    Real,
    /// Offset regression for the refinement head; coarse weights frozen.
    Fine,
}

impl StageId {
    pub const ALL: [StageId; 4] = [
        StageId::SynthNoOcc,
        StageId::SynthOcc,
        StageId::Real,
        StageId::Fine,
    ];

    pub fn ordinal(self) -> i32 {
        match self {
            StageId::SynthNoOcc => 0,
            StageId::SynthOcc => 1,
            StageId::Real => 2,
            StageId::Fine => 3,
        }
    }

    /// CLI/CSV token.
    pub fn token(self) -> &'static str {
        match self {
            StageId::SynthNoOcc => "synth1",
            StageId::SynthOcc => "synth2",
            StageId::Real => "real",
            StageId::Fine => "fine",
        }
    }

    pub fn parse(s: &str) -> Result<StageId> {
        StageId::ALL
            .into_iter()
            .find(|st| st.token() == s)
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown stage `{s}` (expected synth1, synth2, real, or fine)"
                ))
            })
    }

    /// Minimum completed ordinal a checkpoint must carry before this stage
    /// may run. Refinement needs occlusion-aware coarse training but not
    /// necessarily the warped-pair stage.
    pub fn required_prior(self) -> i32 {
        match self {
            StageId::SynthNoOcc => -1,
            StageId::SynthOcc => 0,
            StageId::Real | StageId::Fine => 1,
        }
    }

    pub fn default_steps(self) -> usize {
        match self {
            StageId::SynthNoOcc | StageId::SynthOcc => 3000,
            StageId::Real => 5000,
            StageId::Fine => 3000,
        }
    }

    /// Stages past the first supervise occluded points with the OCL class.
    fn uses_occlusion_class(self) -> bool {
        !matches!(self, StageId::SynthNoOcc)
    }
}

// ── configuration ───────────────────────────────────────────────────────

/// Flat key=value training configuration. Unknown keys are rejected so a
/// typo cannot silently fall back to a default.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    pub ckpt_out: PathBuf,
    /// Loss CSV destination; reports go only to the return value when unset.
    pub loss_log: Option<PathBuf>,
    pub batch_pairs: usize,
    /// Per-stage default when unset.
    pub steps: Option<usize>,
    pub lr: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Accepted occluded-point fraction for occlusion-stage datasets.
    pub occ_min: f64,
    pub occ_max: f64,
    pub arch: ModelConfig,
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path)?;
        TrainConfig::parse(&text, &path.display().to_string())
    }

    /// `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<TrainConfig> {
        let mut data_dir = None;
        let mut ckpt_out = None;
        let mut loss_log = None;
        let mut batch_pairs = 8usize;
        let mut steps = None;
        let mut lr = 1e-3f64;
        let mut seed = 0u64;
        let mut log_every = 50usize;
        let mut occ_min = 0.05f64;
        let mut occ_max = 0.95f64;
        let mut arch = ModelConfig::default();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::format(origin, format!("line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            macro_rules! num {
                ($ty:ty) => {
                    value
                        .parse::<$ty>()
                        .map_err(|e| bad(format!("{key}: {e}")))?
                };
            }
            match key {
                "data" => data_dir = Some(PathBuf::from(value)),
                "ckpt_out" => ckpt_out = Some(PathBuf::from(value)),
                "log" => loss_log = Some(PathBuf::from(value)),
                "batch" => batch_pairs = num!(usize),
                "steps" => steps = Some(num!(usize)),
                "lr" => lr = num!(f64),
                "seed" => seed = num!(u64),
                "log_every" => log_every = num!(usize),
                "occ_min" => occ_min = num!(f64),
                "occ_max" => occ_max = num!(f64),
                "dim" => {
                    arch.dim = num!(usize);
                    arch.widths[3] = arch.dim;
                }
                "w0" => arch.widths[0] = num!(usize),
                "w1" => arch.widths[1] = num!(usize),
                "w2" => arch.widths[2] = num!(usize),
                "coarse_layers" => arch.coarse_layers = num!(usize),
                "fine_layers" => arch.fine_layers = num!(usize),
                "pos_hidden" => arch.pos_hidden = num!(usize),
                "head_hidden" => arch.head_hidden = num!(usize),
                _ => return Err(bad(format!("unknown key `{key}`"))),
            }
        }

        let data_dir = data_dir
            .ok_or_else(|| Error::format(origin, "missing required key `data`".to_string()))?;
        let ckpt_out = ckpt_out
            .ok_or_else(|| Error::format(origin, "missing required key `ckpt_out`".to_string()))?;
        if batch_pairs == 0 {
            return Err(Error::format(origin, "batch must be positive".to_string()));
        }
        if log_every == 0 {
            return Err(Error::format(origin, "log_every must be positive".to_string()));
        }
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::format(origin, format!("lr must be positive, got {lr}")));
        }
        if !(0.0..=1.0).contains(&occ_min) || !(0.0..=1.0).contains(&occ_max) || occ_min > occ_max
        {
            return Err(Error::format(
                origin,
                format!("occluded-fraction bounds [{occ_min}, {occ_max}] invalid"),
            ));
        }
        arch.validate()
            .map_err(|e| Error::format(origin, e.to_string()))?;

        Ok(TrainConfig {
            data_dir,
            ckpt_out,
            loss_log,
            batch_pairs,
            steps,
            lr,
            seed,
            log_every,
            occ_min,
            occ_max,
            arch,
        })
    }

    pub fn resolved_steps(&self, stage: StageId) -> usize {
        self.steps.unwrap_or_else(|| stage.default_steps())
    }
}

// ── dataset ─────────────────────────────────────────────────────────────

/// A training dataset loaded fully into memory (pairs are desk-scale).
#[derive(Debug)]
pub struct Dataset {
    pub pairs: Vec<StoredPair>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest = read_manifest(dir)?;
        let mut pairs = Vec::with_capacity(manifest.count());
        for i in 0..manifest.count() {
            let pair = load_pair(dir, i)?;
            if pair.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "pair {i} in {} has no keypoints",
                    dir.display()
                )));
            }
            pairs.push(pair);
        }
        if pairs.is_empty() {
            return Err(Error::InvalidInput(format!(
                "dataset {} is empty",
                dir.display()
            )));
        }
        Ok(Dataset { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pooled over every labeled point in the dataset.
    pub fn occluded_fraction(&self) -> f64 {
        let total: usize = self.pairs.iter().map(|p| p.len()).sum();
        if total == 0 {
            return 0.0;
        }
        let occ: usize = self
            .pairs
            .iter()
            .map(|p| p.occluded.iter().filter(|&&o| o).count())
            .sum();
        occ as f64 / total as f64
    }

    /// Mean positive-cell fraction of the classification problem.
    pub fn mean_imbalance(&self) -> Result<f64> {
        let mut acc = 0.0;
        for p in &self.pairs {
            acc += imbalance_ratio(
                p.len(),
                p.img2.height(),
                p.img2.width(),
                p.occluded_fraction(),
            )?;
        }
        Ok(acc / self.pairs.len() as f64)
    }
}

// ── targets and losses ──────────────────────────────────────────────────

/// Class targets for one pair: `(kept keypoint indices, class per kept)`.
/// The occlusion-free stage drops occluded points entirely; later stages
/// map them to the OCL class (index = patch count). Errors when a point is
/// marked visible but its ground truth lies outside the second frame.
pub fn coarse_targets(stage: StageId, pair: &StoredPair) -> Result<(Vec<usize>, Vec<usize>)> {
    let (w, h) = (pair.img2.width(), pair.img2.height());
    let grid = (w / 8) * (h / 8);
    let mut kept = Vec::new();
    let mut targets = Vec::new();
    for i in 0..pair.len() {
        if pair.occluded[i] {
            if stage.uses_occlusion_class() {
                kept.push(i);
                targets.push(grid);
            }
            continue;
        }
        let (x, y) = pair.gt[i];
        if !(x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64) {
            return Err(Error::Contract(format!(
                "point {i} marked visible but its ground truth ({x}, {y}) is outside {w}x{h}"
            )));
        }
        kept.push(i);
        targets.push(patch_index_of((x, y), w));
    }
    Ok((kept, targets))
}

/// One logged training step.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub stage: StageId,
    pub step: usize,
    /// Mean cross-entropy over the batch keypoints (0 for the fine stage).
    pub cel: f64,
    /// Mean auxiliary L2: expected-center distance² in the first stage,
    /// offset regression MSE in the fine stage.
    pub l2: Option<f64>,
    /// Coarse argmax accuracy against the stage's class targets.
    pub acc: f64,
    /// Recall of the OCL class; absent when the batch has no occluded targets.
    pub occ_recall: Option<f64>,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,stage,cel,l2,acc,occ_recall";

    pub fn csv_line(&self) -> String {
        let l2 = self.l2.map(|v| v.to_string()).unwrap_or_default();
        let occ = self.occ_recall.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.stage.token(),
            self.cel,
            l2,
            self.acc,
            occ
        )
    }
}

/// Expected patch center under the softmax restricted to patch columns,
/// compared to ground truth, both in patch units. Mean squared distance.
fn expected_center_l2(
    g: &mut Graph,
    sim: NodeId,
    grid_rows: usize,
    grid_cols: usize,
    gt_units: &[(f64, f64)],
) -> Result<NodeId> {
    let c = grid_rows * grid_cols;
    let m = gt_units.len();
    let p = g.softmax_rows(sim)?;
    let p_patch = g.slice_cols(p, 0, c)?;
    let ones = g.leaf(c, 1, vec![1.0; c])?;
    let mass = g.matmul(p_patch, ones)?;
    // tiny floor so a row putting ~all mass on OCL cannot divide by zero
    let eps = g.leaf(m, 1, vec![1e-6; m])?;
    let mass = g.add(mass, eps)?;
    let centers: Vec<f32> = (0..c)
        .flat_map(|i| {
            let (x, y) = patch_center(i / grid_cols, i % grid_cols);
            [(x / 8.0) as f32, (y / 8.0) as f32]
        })
        .collect();
    let centers = g.leaf(c, 2, centers)?;
    let num = g.matmul(p_patch, centers)?;
    let expect = g.row_div(num, mass)?;
    let gt: Vec<f32> = gt_units.iter().flat_map(|&(x, y)| [x as f32, y as f32]).collect();
    let gt = g.leaf(m, 2, gt)?;
    let d = g.sub(expect, gt)?;
    let sq = g.mul(d, d)?;
    let half = g.mean_all(sq)?;
    g.scale(half, 2.0)
}

fn row_argmax(vals: &[f32], row: usize, cols: usize) -> usize {
    let r = &vals[row * cols..(row + 1) * cols];
    let mut best = 0;
    for (i, &v) in r.iter().enumerate() {
        if v > r[best] {
            best = i;
        }
    }
    best
}

/// Whether two patch indices coincide or touch (8-neighborhood) on the grid.
fn is_patch_or_neighbor(a: usize, b: usize, grid_cols: usize) -> bool {
    let (ar, ac) = (a / grid_cols, a % grid_cols);
    let (br, bc) = (b / grid_cols, b % grid_cols);
    ar.abs_diff(br) <= 1 && ac.abs_diff(bc) <= 1
}

/// Largest refinement target representable by the squashed head output.
const FINE_TARGET_LIMIT: f64 = 3.99;

struct BatchStats {
    kept: usize,
    correct: usize,
    occ_total: usize,
    occ_hit: usize,
}

impl BatchStats {
    fn new() -> Self {
        BatchStats { kept: 0, correct: 0, occ_total: 0, occ_hit: 0 }
    }

    fn record(&mut self, predicted: usize, target: usize, ocl_class: usize) {
        self.kept += 1;
        if predicted == target {
            self.correct += 1;
        }
        if target == ocl_class {
            self.occ_total += 1;
            if predicted == ocl_class {
                self.occ_hit += 1;
            }
        }
    }

    fn acc(&self) -> f64 {
        if self.kept == 0 {
            0.0
        } else {
            self.correct as f64 / self.kept as f64
        }
    }

    fn occ_recall(&self) -> Option<f64> {
        (self.occ_total > 0).then(|| self.occ_hit as f64 / self.occ_total as f64)
    }
}

// ── stage runner ────────────────────────────────────────────────────────

/// Deterministic mix of the run seed and the step index.
fn batch_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs one curriculum stage over the configured dataset, updating `params`
/// in place and writing the resulting checkpoint to `cfg.ckpt_out`.
///
/// Contracts:
/// - errors unless the checkpoint has completed the prerequisite stage;
/// - the fine stage leaves every coarse parameter byte-identical;
/// - zero steps returns without touching `params` or the checkpoint file;
/// - a non-finite loss aborts, naming the offending batch seed.
pub fn run_stage(
    stage: StageId,
    cfg: &TrainConfig,
    model: &Model,
    params: &mut Params,
) -> Result<Vec<LossReport>> {
    model.verify_params(params)?;
    let cur = stage_ordinal(params)?;
    if cur < stage.required_prior() {
        let prior = StageId::ALL
            .into_iter()
            .find(|s| s.ordinal() == stage.required_prior())
            .map(|s| s.token())
            .unwrap_or("?");
        return Err(Error::Contract(format!(
            "stage {} requires a checkpoint that completed {} (checkpoint stage ordinal is {})",
            stage.token(),
            prior,
            cur
        )));
    }

    let steps = cfg.resolved_steps(stage);
    if steps == 0 {
        return Ok(Vec::new());
    }

    let data = Dataset::load(&cfg.data_dir)?;
    if stage == StageId::SynthOcc {
        let f = data.occluded_fraction();
        if !(f >= cfg.occ_min && f <= cfg.occ_max) {
            return Err(Error::InvalidInput(format!(
                "occlusion-stage dataset has occluded fraction {f:.4}, outside [{}, {}]",
                cfg.occ_min, cfg.occ_max
            )));
        }
    }
    println!(
        "[{}] {} pairs, occluded fraction {:.3}, positive-cell fraction {:.4}",
        stage.token(),
        data.len(),
        data.occluded_fraction(),
        data.mean_imbalance()?
    );

    // Scope trainability so the optimizer only ever sees parameters the
    // stage's loss reaches: Adam treats trainable-without-grad as an error.
    params.set_all_trainable(false);
    if stage == StageId::Fine {
        params.set_trainable_prefix("fine.", true);
    } else {
        for prefix in Model::coarse_param_prefixes() {
            params.set_trainable_prefix(prefix, true);
        }
    }

    let mut log = match &cfg.loss_log {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let mut f = fs::File::create(path)?;
            writeln!(f, "{}", LossReport::CSV_HEADER)?;
            Some(f)
        }
        None => None,
    };

    let mut adam = AdamState::new(cfg.lr as f32);
    let mut reports = Vec::new();
    for step in 0..steps {
        let bseed = batch_seed(cfg.seed, step);
        let mut rng = ChaCha8Rng::seed_from_u64(bseed);
        let batch: Vec<usize> = (0..cfg.batch_pairs)
            .map(|_| rng.random_range(0..data.len()))
            .collect();

        let report = if stage == StageId::Fine {
            fine_step(stage, step, model, params, &mut adam, &data, &batch, bseed)?
        } else {
            coarse_step(stage, step, model, params, &mut adam, &data, &batch, bseed)?
        };

        if step % cfg.log_every == 0 || step + 1 == steps {
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", report.csv_line())?;
            }
            reports.push(report);
        }
    }
    if let Some(f) = log.as_mut() {
        f.flush()?;
    }

    set_stage_ordinal(params, cur.max(stage.ordinal()));
    if let Some(dir) = cfg.ckpt_out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&cfg.ckpt_out, params)?;
    Ok(reports)
}

/// One optimizer step of classification training: per-pair cross-entropy
/// (plus the expected-center L2 in the first stage) weighted by keypoint
/// share, so the batch loss is an exact mean over keypoints.
#[allow(clippy::too_many_arguments)]
fn coarse_step(
    stage: StageId,
    step: usize,
    model: &Model,
    params: &mut Params,
    adam: &mut AdamState,
    data: &Dataset,
    batch: &[usize],
    bseed: u64,
) -> Result<LossReport> {
    let mut plan = Vec::new(); // (pair index, kept, targets)
    let mut total = 0usize;
    for &pi in batch {
        let (kept, targets) = coarse_targets(stage, &data.pairs[pi])?;
        if kept.is_empty() {
            continue;
        }
        total += kept.len();
        plan.push((pi, kept, targets));
    }
    if total == 0 {
        return Ok(LossReport {
            stage,
            step,
            cel: 0.0,
            l2: (stage == StageId::SynthNoOcc).then_some(0.0),
            acc: 0.0,
            occ_recall: None,
        });
    }

    let mut g = Graph::new();
    let mut stats = BatchStats::new();
    let mut loss: Option<NodeId> = None;
    let mut cel_sum = 0.0;
    let mut l2_sum = 0.0;
    for (pi, kept, targets) in &plan {
        let pair = &data.pairs[*pi];
        let positions: Vec<(f64, f64)> = kept.iter().map(|&i| pair.keypoints[i]).collect();
        let kps = KeypointSet::new(positions, pair.img1.width(), pair.img1.height())?;
        let fwd = model.forward_coarse(&mut g, params, &pair.img1, &pair.img2, &kps)?;
        let weight = kept.len() as f32 / total as f32;

        let cel = g.cross_entropy_mean(fwd.sim, targets)?;
        cel_sum += g.value(cel)[0] as f64 * weight as f64;
        let mut term = g.scale(cel, weight)?;
        if stage == StageId::SynthNoOcc {
            let gt_units: Vec<(f64, f64)> = kept
                .iter()
                .map(|&i| (pair.gt[i].0 / 8.0, pair.gt[i].1 / 8.0))
                .collect();
            let l2 = expected_center_l2(&mut g, fwd.sim, fwd.grid_rows, fwd.grid_cols, &gt_units)?;
            l2_sum += g.value(l2)[0] as f64 * weight as f64;
            let scaled = g.scale(l2, 0.1 * weight)?;
            term = g.add(term, scaled)?;
        }
        loss = Some(match loss {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });

        let cols = fwd.grid_rows * fwd.grid_cols + 1;
        let sim_vals = g.value(fwd.sim);
        for (row, &target) in targets.iter().enumerate() {
            stats.record(row_argmax(sim_vals, row, cols), target, cols - 1);
        }
    }

    let loss = loss.expect("non-empty plan");
    let lv = g.value(loss)[0];
    if !lv.is_finite() {
        return Err(Error::Contract(format!(
            "non-finite loss at stage {} step {step} (batch seed {bseed:#018x})",
            stage.token()
        )));
    }
    g.backward(loss)?;
    g.export_grads(params)?;
    adam.step(params)?;
    params.zero_grads();

    Ok(LossReport {
        stage,
        step,
        cel: cel_sum,
        l2: (stage == StageId::SynthNoOcc).then_some(l2_sum),
        acc: stats.acc(),
        occ_recall: stats.occ_recall(),
    })
}

/// One optimizer step of refinement training. The coarse pass runs as pure
/// inference (its parameters are frozen); refinement contexts for visible
/// points whose coarse argmax lands on the true patch or a direct neighbor
/// are then re-built as graph leaves and regressed onto the clamped true
/// offset from their picked patch center.
#[allow(clippy::too_many_arguments)]
fn fine_step(
    stage: StageId,
    step: usize,
    model: &Model,
    params: &mut Params,
    adam: &mut AdamState,
    data: &Dataset,
    batch: &[usize],
    bseed: u64,
) -> Result<LossReport> {
    let mut stats = BatchStats::new();
    let mut contexts = Vec::new(); // (FineContext, target offset)
    for &pi in batch {
        let pair = &data.pairs[pi];
        let (kept, targets) = coarse_targets(StageId::SynthOcc, pair)?;
        if kept.is_empty() {
            continue;
        }
        let positions: Vec<(f64, f64)> = kept.iter().map(|&i| pair.keypoints[i]).collect();
        let kps = KeypointSet::new(positions, pair.img1.width(), pair.img1.height())?;
        let mut g = Graph::new();
        let fwd = model.forward_coarse(&mut g, params, &pair.img1, &pair.img2, &kps)?;
        let grid = model.fine_grid(&g, &fwd)?;
        let cols = fwd.grid_rows * fwd.grid_cols + 1;
        let sim_vals = g.value(fwd.sim).to_vec();
        for (row, (&kp, &target)) in kept.iter().zip(&targets).enumerate() {
            let predicted = row_argmax(&sim_vals, row, cols);
            stats.record(predicted, target, cols - 1);
            if pair.occluded[kp] || predicted == cols - 1 {
                continue;
            }
            let gt_patch = patch_index_of(pair.gt[kp], pair.img2.width());
            if !is_patch_or_neighbor(predicted, gt_patch, fwd.grid_cols) {
                continue;
            }
            let center = patch_center(predicted / fwd.grid_cols, predicted % fwd.grid_cols);
            let dx = (pair.gt[kp].0 - center.0).clamp(-FINE_TARGET_LIMIT, FINE_TARGET_LIMIT);
            let dy = (pair.gt[kp].1 - center.1).clamp(-FINE_TARGET_LIMIT, FINE_TARGET_LIMIT);
            let ctx = model.fine_context(&g, &fwd, &grid, row, predicted)?;
            contexts.push((ctx, (dx, dy)));
        }
    }

    if contexts.is_empty() {
        return Ok(LossReport {
            stage,
            step,
            cel: 0.0,
            l2: Some(0.0),
            acc: stats.acc(),
            occ_recall: stats.occ_recall(),
        });
    }

    let mut g = Graph::new();
    let spec = model.fine_spec();
    let mut offsets: Option<NodeId> = None;
    let mut target_data = Vec::with_capacity(contexts.len() * 2);
    for (ctx, (dx, dy)) in &contexts {
        let refinement = spec.refine(&mut g, params, ctx)?;
        offsets = Some(match offsets {
            None => refinement.offset,
            Some(acc) => g.concat_rows(acc, refinement.offset)?,
        });
        target_data.push(*dx as f32);
        target_data.push(*dy as f32);
    }
    let offsets = offsets.expect("non-empty contexts");
    let targets = g.leaf(contexts.len(), 2, target_data)?;
    let d = g.sub(offsets, targets)?;
    let sq = g.mul(d, d)?;
    let half = g.mean_all(sq)?;
    let loss = g.scale(half, 2.0)?;

    let lv = g.value(loss)[0];
    if !lv.is_finite() {
        return Err(Error::Contract(format!(
            "non-finite loss at stage {} step {step} (batch seed {bseed:#018x})",
            stage.token()
        )));
    }
    g.backward(loss)?;
    g.export_grads(params)?;
    adam.step(params)?;
    params.zero_grads();

    Ok(LossReport {
        stage,
        step,
        cel: 0.0,
        l2: Some(lv as f64),
        acc: stats.acc(),
        occ_recall: stats.occ_recall(),
    })
}
