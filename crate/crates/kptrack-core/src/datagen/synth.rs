//! Synthetic training scenes: a background of flat-shaded primitives
//! (stripes, triangles, four-point stars) plus a shaded square prism near
//! the center that moves independently between the two frames. Rendering
//! is hard-edged point sampling at pixel centers, so a re-render oracle
//! can confirm ground-truth positions exactly.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Provenance, ScenePair};
use crate::error::{Error, Result};
use crate::features::{Image, KeypointSet};

/// Quantize to the /255 lattice so rendered images survive 8-bit PPM I/O
/// bit-exactly.
fn q255(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

// ── polygons ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Polygon {
    pub vertices: Vec<(f64, f64)>,
    pub gray: f32,
}

/// Even-odd ray-cast containment; points on an edge may land either way.
pub fn point_in_polygon(p: (f64, f64), verts: &[(f64, f64)]) -> bool {
    let (x, y) = p;
    let mut inside = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > y) != (yj > y) {
            let cross = (xj - xi) * (y - yi) / (yj - yi) + xi;
            if x < cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * vx, a.1 + t * vy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Inside by the even-odd rule and clear of every edge: points on the
/// boundary do not count.
pub fn strictly_inside(p: (f64, f64), verts: &[(f64, f64)]) -> bool {
    if !point_in_polygon(p, verts) {
        return false;
    }
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        if segment_distance(p, verts[j], verts[i]) <= 1e-9 {
            return false;
        }
        j = i;
    }
    true
}

// ── the prism ───────────────────────────────────────────────────────────

/// Square prism in oblique orthographic projection: a square top face
/// extruded along a down-right offset, giving a hexagonal silhouette with
/// three visible faces shaded differently.
#[derive(Debug, Clone)]
pub struct CubePrism {
    pub center: (f64, f64),
    /// Half side length of the top face.
    pub half: f64,
    /// Extrusion offset; both components positive.
    pub extrude: (f64, f64),
    /// Grays for the top, right, and bottom faces.
    pub grays: [f32; 3],
}

impl CubePrism {
    fn top_corners(&self, shift: (f64, f64)) -> [(f64, f64); 4] {
        let (cx, cy) = (self.center.0 + shift.0, self.center.1 + shift.1);
        let a = self.half;
        [
            (cx - a, cy - a),
            (cx + a, cy - a),
            (cx + a, cy + a),
            (cx - a, cy + a),
        ]
    }

    /// The three visible faces, mutually non-overlapping: top square plus
    /// the right and bottom edges extruded along `extrude`.
    pub fn faces(&self, shift: (f64, f64)) -> [Polygon; 3] {
        let [a, b, c, d] = self.top_corners(shift);
        let e = self.extrude;
        let add = |p: (f64, f64)| (p.0 + e.0, p.1 + e.1);
        [
            Polygon { vertices: vec![a, b, c, d], gray: self.grays[0] },
            Polygon { vertices: vec![b, add(b), add(c), c], gray: self.grays[1] },
            Polygon { vertices: vec![d, c, add(c), add(d)], gray: self.grays[2] },
        ]
    }

    /// Hexagonal outline (equals the union of the three faces).
    pub fn silhouette(&self, shift: (f64, f64)) -> Vec<(f64, f64)> {
        let [a, b, c, d] = self.top_corners(shift);
        let e = self.extrude;
        let add = |p: (f64, f64)| (p.0 + e.0, p.1 + e.1);
        vec![a, b, add(b), add(c), add(d), d]
    }

    /// Keypoint corners: six silhouette vertices plus the Y-junction where
    /// all three faces meet.
    pub fn corners(&self) -> Vec<(f64, f64)> {
        let mut v = self.silhouette((0.0, 0.0));
        let [_, _, c, _] = self.top_corners((0.0, 0.0));
        v.push(c);
        v
    }
}

// ── scenes ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Scene {
    /// Frame side length in pixels, divisible by 8.
    pub size: usize,
    pub base_gray: f32,
    /// Painter's order; polygons may extend past the frame so background
    /// shifts never reveal undefined content.
    pub background: Vec<Polygon>,
    pub cube: CubePrism,
}

/// One placement of a scene: background and cube at concrete shifts, ready
/// for continuous sampling or rasterization.
pub struct FlatScene {
    size: usize,
    base_gray: f32,
    polys: Vec<Polygon>,
}

impl Scene {
    pub fn place(&self, bg_shift: (f64, f64), cube_shift: (f64, f64)) -> FlatScene {
        let mut polys = Vec::with_capacity(self.background.len() + 3);
        for p in &self.background {
            polys.push(Polygon {
                vertices: p.vertices.iter().map(|v| (v.0 + bg_shift.0, v.1 + bg_shift.1)).collect(),
                gray: p.gray,
            });
        }
        polys.extend(self.cube.faces(cube_shift));
        FlatScene { size: self.size, base_gray: self.base_gray, polys }
    }
}

impl FlatScene {
    /// Color at an arbitrary continuous point: last painted polygon wins.
    pub fn sample(&self, p: (f64, f64)) -> f32 {
        for poly in self.polys.iter().rev() {
            if point_in_polygon(p, &poly.vertices) {
                return poly.gray;
            }
        }
        self.base_gray
    }

    /// Rasterize by sampling every pixel center (x+0.5, y+0.5).
    pub fn render(&self) -> Image {
        let n = self.size;
        let mut px = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                px.push(self.sample((x as f64 + 0.5, y as f64 + 0.5)));
            }
        }
        Image::new(n, n, px).expect("scene gray levels are clamped")
    }
}

// ── generation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SynthConfig {
    /// Frame side, divisible by 8.
    pub size: usize,
    /// Maximum background displacement norm in px.
    pub bg_max: f64,
    /// Maximum cube displacement norm in px.
    pub cube_max: f64,
    pub max_keypoints: usize,
    /// Drop occluded keypoints from the pair entirely (first-stage data).
    pub drop_occluded: bool,
}

impl SynthConfig {
    pub fn new(size: usize) -> Self {
        SynthConfig {
            size,
            bg_max: 16.0,
            cube_max: 50.0,
            max_keypoints: 512,
            drop_occluded: false,
        }
    }
}

fn disc_sample(rng: &mut ChaCha8Rng, max_norm: f64) -> (f64, f64) {
    let r = max_norm * rng.random_range(0.0..1.0f64).sqrt();
    let th = rng.random_range(0.0..std::f64::consts::TAU);
    (r * th.cos(), r * th.sin())
}

fn stripe(rng: &mut ChaCha8Rng, canvas: (f64, f64), size: f64, gray: f32) -> Polygon {
    let c = (rng.random_range(canvas.0..canvas.1), rng.random_range(canvas.0..canvas.1));
    let th = rng.random_range(0.0..std::f64::consts::PI);
    let half_len = size * rng.random_range(0.10..0.22);
    let half_w = rng.random_range(1.0..3.0);
    let (dx, dy) = (th.cos(), th.sin());
    let (nx, ny) = (-dy, dx);
    Polygon {
        vertices: vec![
            (c.0 - dx * half_len - nx * half_w, c.1 - dy * half_len - ny * half_w),
            (c.0 + dx * half_len - nx * half_w, c.1 + dy * half_len - ny * half_w),
            (c.0 + dx * half_len + nx * half_w, c.1 + dy * half_len + ny * half_w),
            (c.0 - dx * half_len + nx * half_w, c.1 - dy * half_len + ny * half_w),
        ],
        gray,
    }
}

fn triangle(rng: &mut ChaCha8Rng, canvas: (f64, f64), size: f64, gray: f32) -> Polygon {
    let c = (rng.random_range(canvas.0..canvas.1), rng.random_range(canvas.0..canvas.1));
    let base = rng.random_range(0.0..std::f64::consts::TAU);
    let mut vertices = Vec::with_capacity(3);
    for k in 0..3 {
        let th = base + k as f64 * std::f64::consts::TAU / 3.0
            + rng.random_range(-0.6..0.6);
        let r = rng.random_range(0.05..0.12) * size + 4.0;
        vertices.push((c.0 + r * th.cos(), c.1 + r * th.sin()));
    }
    Polygon { vertices, gray }
}

fn star4(rng: &mut ChaCha8Rng, canvas: (f64, f64), size: f64, gray: f32) -> Polygon {
    let c = (rng.random_range(canvas.0..canvas.1), rng.random_range(canvas.0..canvas.1));
    let base = rng.random_range(0.0..std::f64::consts::TAU);
    let outer = rng.random_range(0.05..0.10) * size + 5.0;
    let inner = outer * rng.random_range(0.35..0.55);
    let mut vertices = Vec::with_capacity(8);
    for k in 0..8 {
        let th = base + k as f64 * std::f64::consts::TAU / 8.0;
        let r = if k % 2 == 0 { outer } else { inner };
        vertices.push((c.0 + r * th.cos(), c.1 + r * th.sin()));
    }
    Polygon { vertices, gray }
}

/// A gray that contrasts with `avoid` by at least 24/255.
fn contrasting_gray(rng: &mut ChaCha8Rng, avoid: f32) -> f32 {
    loop {
        let g = q255(rng.random_range(0.0..1.0));
        if (g - avoid).abs() >= 24.0 / 255.0 {
            return g;
        }
    }
}

/// Build the random scene plus the two displacement draws for one seed.
pub fn synth_instance(cfg: &SynthConfig, seed: u64) -> Result<(Scene, (f64, f64), (f64, f64))> {
    if cfg.size == 0 || cfg.size % 8 != 0 {
        return Err(Error::InvalidInput(format!(
            "synthetic frame size {} is not a positive multiple of 8",
            cfg.size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.size as f64;
    let margin = cfg.bg_max.ceil() + 8.0;
    let canvas = (-margin, size + margin);
    let base_gray = q255(rng.random_range(0.15..0.55));

    let n_prims = (cfg.size * cfg.size / 512).clamp(8, 160);
    let mut background = Vec::with_capacity(n_prims);
    for i in 0..n_prims {
        let gray = contrasting_gray(&mut rng, base_gray);
        background.push(match i % 3 {
            0 => stripe(&mut rng, canvas, size, gray),
            1 => triangle(&mut rng, canvas, size, gray),
            _ => star4(&mut rng, canvas, size, gray),
        });
    }

    let half = rng.random_range(0.12..0.18) * size;
    let cube = CubePrism {
        center: (
            size / 2.0 + rng.random_range(-0.05..0.05) * size,
            size / 2.0 + rng.random_range(-0.05..0.05) * size,
        ),
        half,
        extrude: (
            rng.random_range(0.5..0.9) * half,
            rng.random_range(0.5..0.9) * half,
        ),
        grays: [
            q255(rng.random_range(0.78..0.95)),
            q255(rng.random_range(0.48..0.62)),
            q255(rng.random_range(0.22..0.38)),
        ],
    };

    let scene = Scene { size: cfg.size, base_gray, background, cube };
    let bg_shift = disc_sample(&mut rng, cfg.bg_max);
    let cube_shift = disc_sample(&mut rng, cfg.cube_max);
    Ok((scene, bg_shift, cube_shift))
}

fn in_frame(p: (f64, f64), size: f64) -> bool {
    p.0 >= 0.0 && p.0 < size && p.1 >= 0.0 && p.1 < size
}

/// Label a placed scene: keypoints are primitive/cube corners visible in
/// the first frame; a keypoint is occluded iff its ground-truth position
/// leaves the frame or (for background corners) falls strictly inside the
/// moved cube's silhouette.
pub fn labeled_pair(
    scene: &Scene,
    bg_shift: (f64, f64),
    cube_shift: (f64, f64),
    cfg: &SynthConfig,
) -> Result<ScenePair> {
    let size = scene.size as f64;
    let img1 = scene.place((0.0, 0.0), (0.0, 0.0)).render();
    let img2 = scene.place(bg_shift, cube_shift).render();
    let cube1 = scene.cube.silhouette((0.0, 0.0));
    let cube2 = scene.cube.silhouette(cube_shift);

    let mut keypoints = Vec::new();
    let mut gt = Vec::new();
    let mut occluded = Vec::new();
    let mut push = |p: (f64, f64), target: (f64, f64), occ: bool| {
        keypoints.push(p);
        gt.push(target);
        occluded.push(occ);
    };

    for poly in &scene.background {
        for &v in &poly.vertices {
            if !in_frame(v, size) || strictly_inside(v, &cube1) {
                continue; // not visible in the first frame
            }
            let t = (v.0 + bg_shift.0, v.1 + bg_shift.1);
            let occ = !in_frame(t, size) || strictly_inside(t, &cube2);
            push(v, t, occ);
        }
    }
    for v in scene.cube.corners() {
        if !in_frame(v, size) {
            continue;
        }
        let t = (v.0 + cube_shift.0, v.1 + cube_shift.1);
        push(v, t, !in_frame(t, size));
    }

    if cfg.drop_occluded {
        let keep: Vec<usize> = (0..keypoints.len()).filter(|&i| !occluded[i]).collect();
        keypoints = keep.iter().map(|&i| keypoints[i]).collect();
        gt = keep.iter().map(|&i| gt[i]).collect();
        occluded = vec![false; keypoints.len()];
    }
    keypoints.truncate(cfg.max_keypoints);
    gt.truncate(cfg.max_keypoints);
    occluded.truncate(cfg.max_keypoints);
    if keypoints.is_empty() {
        return Err(Error::InvalidInput("scene produced no usable keypoints".into()));
    }

    ScenePair::new(
        img1,
        img2,
        KeypointSet::new(keypoints, scene.size, scene.size)?,
        gt,
        occluded,
        Provenance::Synthetic { bg_shift, cube_shift },
    )
}

/// Deterministic synthetic pair for one (config, seed).
pub fn gen_synthetic_pair(cfg: &SynthConfig, seed: u64) -> Result<ScenePair> {
    let (scene, bg_shift, cube_shift) = synth_instance(cfg, seed)?;
    labeled_pair(&scene, bg_shift, cube_shift, cfg)
}
