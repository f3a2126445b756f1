//! `kptrack` — dataset generation, staged training, evaluation, and
//! two-image matching for the coarse-to-fine keypoint tracker.

mod gen_config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gen_config::{SynthGenConfig, WarpGenConfig};
use kptrack_core::datagen::{
    apply_jitter, gen_synthetic_pair, gen_warped_pair, noise_image, write_dataset,
};
use kptrack_core::eval::{evaluate, render_matches, EvalOptions};
use kptrack_core::features::{read_image, read_keypoints, Image, KeypointSet};
use kptrack_core::model::{fine_trained, write_matches, Model, TrackOptions};
use kptrack_core::tensor::{load_checkpoint, Params};
use kptrack_core::trainer::{run_stage, Dataset, StageId, TrainConfig};
use kptrack_core::{Error, Result};

#[derive(Parser)]
#[command(name = "kptrack", about = "Coarse-to-fine keypoint tracker", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DataKind {
    /// Flat-shaded scenes with a moving cube prism
    Synth,
    /// Homography-warped crops of source images
    Warp,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labeled dataset of image pairs
    GenData {
        #[arg(long, value_enum)]
        kind: DataKind,
        /// key=value generation settings
        #[arg(long)]
        config: PathBuf,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// Number of pairs
        #[arg(long)]
        count: usize,
    },
    /// Run one training stage of the curriculum
    Train {
        /// synth1, synth2, real, or fine
        #[arg(long)]
        stage: String,
        /// key=value training settings
        #[arg(long)]
        config: PathBuf,
        /// Continue from an existing checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a labeled dataset
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Skip sub-pixel refinement
        #[arg(long)]
        coarse_only: bool,
        /// Write side-by-side match composites into this directory
        #[arg(long)]
        render: Option<PathBuf>,
        /// Confidence below which matches are rejected
        #[arg(long, default_value_t = 0.2)]
        threshold: f64,
    },
    /// Track keypoints from one image into another
    Match {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        img1: PathBuf,
        #[arg(long)]
        img2: PathBuf,
        /// Text file of `x y` keypoints in the first image
        #[arg(long)]
        kps: PathBuf,
        /// Output CSV of matches
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        threshold: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { kind, config, out, count } => gen_data(kind, &config, &out, count),
        Cmd::Train { stage, config, resume } => train(&stage, &config, resume.as_deref()),
        Cmd::Eval { ckpt, data, coarse_only, render, threshold } => {
            eval(&ckpt, &data, coarse_only, render.as_deref(), threshold)
        }
        Cmd::Match { ckpt, img1, img2, kps, out, threshold } => {
            match_images(&ckpt, &img1, &img2, &kps, &out, threshold)
        }
    }
}

// ── gen-data ────────────────────────────────────────────────────────────

/// Source images for warped-pair generation, in deterministic order.
enum Sources {
    Files(Vec<PathBuf>),
    Procedural { size: usize },
}

impl Sources {
    fn scan(cfg: &WarpGenConfig) -> Result<Sources> {
        let Some(dir) = &cfg.source_dir else {
            return Ok(Sources::Procedural { size: cfg.source_size });
        };
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("ppm") | Some("pgm") | Some("png")
                )
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no .ppm/.pgm/.png sources in {}",
                dir.display()
            )));
        }
        Ok(Sources::Files(files))
    }

    fn get(&self, index: usize, seed: u64) -> Result<Image> {
        match self {
            Sources::Files(files) => read_image(&files[index % files.len()]),
            // separate stream so the texture does not correlate with the
            // homography drawn from the pair seed itself
            Sources::Procedural { size } => Ok(noise_image(*size, seed ^ 0x5EED_0000_5EED_0000)),
        }
    }
}

fn gen_data(kind: DataKind, config: &Path, out: &Path, count: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::InvalidInput("count must be positive".into()));
    }
    match kind {
        DataKind::Synth => {
            let cfg = SynthGenConfig::load(config)?;
            let seeds: Vec<u64> = (0..count as u64).map(|i| cfg.seed + i).collect();
            write_dataset(out, "synth", &cfg.canonical(), &seeds, |s| {
                gen_synthetic_pair(&cfg.synth, s)
            })?;
        }
        DataKind::Warp => {
            let cfg = WarpGenConfig::load(config)?;
            let sources = Sources::scan(&cfg)?;
            let seeds: Vec<u64> = (0..count as u64).map(|i| cfg.seed + i).collect();
            let mut index = 0usize;
            write_dataset(out, "warp", &cfg.canonical(), &seeds, |s| {
                let src = sources.get(index, s)?;
                index += 1;
                let mut pair = gen_warped_pair(&src, &cfg.warp, s)?;
                if !cfg.jitter.is_identity() {
                    pair.img2 = apply_jitter(&pair.img2, &cfg.jitter, s ^ 0x0011_7700_1177_0011);
                }
                Ok(pair)
            })?;
        }
    }
    println!("wrote {count} pairs to {}", out.display());
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

fn train(stage: &str, config: &Path, resume: Option<&Path>) -> Result<()> {
    let stage = StageId::parse(stage)?;
    let cfg = TrainConfig::load(config)?;
    let (model, mut params) = match resume {
        Some(path) => {
            // architecture comes from the checkpoint itself on resume
            let params = load_checkpoint(path)?;
            (Model::from_params(&params)?, params)
        }
        None => {
            let model = Model::new(cfg.arch)?;
            let params = model.init_params(cfg.seed);
            (model, params)
        }
    };

    let reports = run_stage(stage, &cfg, &model, &mut params)?;
    for r in &reports {
        let l2 = r.l2.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        let occ = r
            .occ_recall
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "step {:>6}  cel {:.4}  l2 {}  acc {:.3}  occ_recall {}",
            r.step, r.cel, l2, r.acc, occ
        );
    }
    println!(
        "stage {} finished ({} steps) -> {}",
        stage.token(),
        cfg.resolved_steps(stage),
        cfg.ckpt_out.display()
    );
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

fn load_model(ckpt: &Path) -> Result<(Model, Params)> {
    let params = load_checkpoint(ckpt)?;
    let model = Model::from_params(&params)?;
    Ok((model, params))
}

fn eval(
    ckpt: &Path,
    data_dir: &Path,
    coarse_only: bool,
    render: Option<&Path>,
    threshold: f64,
) -> Result<()> {
    let (model, params) = load_model(ckpt)?;
    let data = Dataset::load(data_dir)?;
    let use_fine = !coarse_only;
    if use_fine && !fine_trained(&params) {
        eprintln!("note: refinement head has not been trained; pass --coarse-only to silence");
    }
    let opts = EvalOptions { threshold, use_fine, ..Default::default() };
    let tag = data_dir
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("eval");
    let metrics = evaluate(&model, &params, &data, &opts, tag)?;

    println!("{}", kptrack_core::eval::EvalMetrics::table_header());
    println!("{}", metrics.table_row());
    println!();
    println!("{}", kptrack_core::eval::EvalMetrics::CSV_HEADER);
    println!("{}", metrics.csv_line());

    if let Some(dir) = render {
        std::fs::create_dir_all(dir)?;
        for (i, pair) in data.pairs.iter().enumerate() {
            let path = dir.join(format!("pair{i:04}.ppm"));
            render_matches(&model, &params, pair, &opts, &path)?;
        }
        println!("rendered {} composites to {}", data.len(), dir.display());
    }
    Ok(())
}

// ── match ───────────────────────────────────────────────────────────────

fn match_images(
    ckpt: &Path,
    img1: &Path,
    img2: &Path,
    kps: &Path,
    out: &Path,
    threshold: f64,
) -> Result<()> {
    let (model, params) = load_model(ckpt)?;
    let img1 = read_image(img1)?;
    let img2 = read_image(img2)?;
    let points = read_keypoints(kps)?;
    let kps = KeypointSet::new(points, img1.width(), img1.height())?;

    let opts = TrackOptions { threshold, use_fine: fine_trained(&params) };
    let result = model.track(&params, &img1, &img2, &kps, opts)?;
    write_matches(out, &kps, &result)?;

    let mut patch = 0;
    let mut occluded = 0;
    let mut rejected = 0;
    for p in &result.points {
        match p.verdict {
            kptrack_core::coarse::Verdict::Patch(_) => patch += 1,
            kptrack_core::coarse::Verdict::Occluded => occluded += 1,
            kptrack_core::coarse::Verdict::Rejected => rejected += 1,
        }
    }
    println!(
        "tracked {} keypoints: {patch} matched, {occluded} occluded, {rejected} rejected -> {}",
        result.points.len(),
        out.display()
    );
    Ok(())
}
