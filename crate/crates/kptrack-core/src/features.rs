//! Dense 1/8-resolution CNN features and sparse keypoint descriptors.
//!
//! Images are grayscale in [0,1]. The extractor produces one D-vector per
//! 8x8 patch; keypoint descriptors are bilinear blends of the four
//! nearest patch features in patch-center space. Geometry (positions,
//! centers, weights) is computed in f64; tensor data stays f32.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, Graph, MixPlan, NodeId, Params};

// ── images ──────────────────────────────────────────────────────────────

/// Grayscale raster, row-major, values in [0,1]. Arbitrary sizes are
/// allowed at rest (datagen sources); the tracker requires dimensions
/// divisible by 8 and checks at entry.
#[derive(Clone, Debug)]
pub struct Image {
    h: usize,
    w: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, pixels: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || pixels.len() != h * w {
            return Err(Error::InvalidInput(format!(
                "image buffer {} does not match {}x{}",
                pixels.len(),
                w,
                h
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidInput(format!(
                "pixel value {bad} outside [0,1]"
            )));
        }
        Ok(Image { h, w, pixels })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.w + x]
    }

    /// Bilinear sample at continuous coordinates where integer-pixel
    /// (ix, iy) has its value at center (ix+0.5, iy+0.5). Out-of-range
    /// positions clamp to the edge.
    pub fn sample_clamped(&self, x: f64, y: f64) -> f32 {
        let fx = x - 0.5;
        let fy = y - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let u = (fx - x0) as f32;
        let v = (fy - y0) as f32;
        let xi = |d: f64| (x0 + d).clamp(0.0, (self.w - 1) as f64) as usize;
        let yi = |d: f64| (y0 + d).clamp(0.0, (self.h - 1) as f64) as usize;
        let p00 = self.pixel(xi(0.0), yi(0.0));
        let p10 = self.pixel(xi(1.0), yi(0.0));
        let p01 = self.pixel(xi(0.0), yi(1.0));
        let p11 = self.pixel(xi(1.0), yi(1.0));
        (1.0 - u) * (1.0 - v) * p00 + u * (1.0 - v) * p10 + (1.0 - u) * v * p01 + u * v * p11
    }

    pub fn require_grid_aligned(&self) -> Result<()> {
        if self.h % 8 != 0 || self.w % 8 != 0 {
            return Err(Error::InvalidInput(format!(
                "image {}x{} not divisible by 8",
                self.w, self.h
            )));
        }
        Ok(())
    }
}

// ── image I/O ───────────────────────────────────────────────────────────

/// Reads PNG or binary PPM/PGM (P5/P6). Color inputs collapse to
/// grayscale by channel average.
pub fn read_image(path: &Path) -> Result<Image> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "ppm" | "pgm" => read_ppm(path),
        "png" => read_png(path),
        other => Err(Error::InvalidInput(format!(
            "unsupported image extension `{other}` (png/ppm/pgm)"
        ))),
    }
}

fn read_png(path: &Path) -> Result<Image> {
    let pstr = path.display().to_string();
    let dyn_img = image::open(path).map_err(|e| Error::format(&pstr, e.to_string()))?;
    let rgb = dyn_img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let pixels: Vec<f32> = rgb
        .pixels()
        .map(|p| ((p.0[0] + p.0[1] + p.0[2]) / 3.0).clamp(0.0, 1.0))
        .collect();
    Image::new(h, w, pixels)
}

fn read_ppm(path: &Path) -> Result<Image> {
    let pstr = path.display().to_string();
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;

    let mut pos = 0usize;
    let mut token = |raw: &[u8]| -> Result<String> {
        // skip whitespace and # comments
        loop {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < raw.len() && raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(&pstr, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };

    let magic = token(&raw)?;
    let channels = match magic.as_str() {
        "P5" => 1usize,
        "P6" => 3usize,
        m => return Err(Error::format(&pstr, format!("unsupported magic `{m}`"))),
    };
    let w: usize = token(&raw)?
        .parse()
        .map_err(|_| Error::format(&pstr, "bad width"))?;
    let h: usize = token(&raw)?
        .parse()
        .map_err(|_| Error::format(&pstr, "bad height"))?;
    let maxval: usize = token(&raw)?
        .parse()
        .map_err(|_| Error::format(&pstr, "bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(&pstr, format!("maxval {maxval} unsupported")));
    }
    // exactly one whitespace byte separates header from data
    pos += 1;
    let need = w * h * channels;
    if raw.len() < pos + need {
        return Err(Error::format(&pstr, "truncated pixel data"));
    }
    let data = &raw[pos..pos + need];
    let maxf = maxval as f32;
    let pixels: Vec<f32> = if channels == 1 {
        // direct division so u8 values round-trip f32-exactly
        data.iter().map(|&b| b as f32 / maxf).collect()
    } else {
        data.chunks_exact(3)
            .map(|p| (p[0] as f32 + p[1] as f32 + p[2] as f32) / 3.0 / maxf)
            .collect()
    };
    Image::new(h, w, pixels)
}

/// Writes binary 8-bit grayscale PPM (P5).
pub fn write_ppm_p5(path: &Path, img: &Image) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", img.width(), img.height())?;
    let bytes: Vec<u8> = img
        .pixels()
        .iter()
        .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Writes binary 8-bit RGB PPM (P6) from an interleaved buffer.
pub fn write_ppm_p6(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != w * h * 3 {
        return Err(Error::Contract(format!(
            "rgb buffer {} does not match {w}x{h}x3",
            rgb.len()
        )));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    out.write_all(rgb)?;
    out.flush()?;
    Ok(())
}

// ── keypoints ───────────────────────────────────────────────────────────

/// Sub-pixel keypoint positions, all inside the originating image.
#[derive(Clone, Debug)]
pub struct KeypointSet {
    img_w: usize,
    img_h: usize,
    positions: Vec<(f64, f64)>,
}

impl KeypointSet {
    pub fn new(positions: Vec<(f64, f64)>, img_w: usize, img_h: usize) -> Result<Self> {
        for (i, &(x, y)) in positions.iter().enumerate() {
            if !(x >= 0.0 && x < img_w as f64 && y >= 0.0 && y < img_h as f64) {
                return Err(Error::InvalidInput(format!(
                    "keypoint {i} at ({x}, {y}) outside {img_w}x{img_h}"
                )));
            }
        }
        Ok(KeypointSet {
            img_w,
            img_h,
            positions,
        })
    }

    pub fn count(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[(f64, f64)] {
        &self.positions
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.img_w, self.img_h)
    }
}

/// Plain-text keypoints: one `x y` pair per line, decimals allowed.
pub fn read_keypoints(path: &Path) -> Result<Vec<(f64, f64)>> {
    let pstr = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let mut it = t.split_whitespace();
        let parse = |s: Option<&str>| -> Result<f64> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(&pstr, format!("line {}: expected `x y`", ln + 1)))
        };
        let x = parse(it.next())?;
        let y = parse(it.next())?;
        if it.next().is_some() {
            return Err(Error::format(
                &pstr,
                format!("line {}: trailing tokens", ln + 1),
            ));
        }
        out.push((x, y));
    }
    Ok(out)
}

pub fn write_keypoints(path: &Path, pts: &[(f64, f64)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &(x, y) in pts {
        writeln!(w, "{x} {y}")?;
    }
    w.flush()?;
    Ok(())
}

// ── corner detection ────────────────────────────────────────────────────

/// Shi–Tomasi minimum-eigenvalue response per pixel (row-major). Gradients
/// are central differences, the structure tensor is summed over a 3×3
/// window; the two outermost pixel rings score zero.
pub fn shi_tomasi_response(img: &Image) -> Vec<f32> {
    let (h, w) = (img.height(), img.width());
    let mut gx = vec![0.0f32; h * w];
    let mut gy = vec![0.0f32; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w - 1 {
            gx[y * w + x] = (img.pixel(x + 1, y) - img.pixel(x - 1, y)) * 0.5;
            gy[y * w + x] = (img.pixel(x, y + 1) - img.pixel(x, y - 1)) * 0.5;
        }
    }
    let mut resp = vec![0.0f32; h * w];
    if h < 5 || w < 5 {
        return resp;
    }
    for y in 2..h - 2 {
        for x in 2..w - 2 {
            let (mut a, mut b, mut c) = (0.0f32, 0.0f32, 0.0f32);
            for dy in 0..3 {
                for dx in 0..3 {
                    let i = (y + dy - 1) * w + (x + dx - 1);
                    a += gx[i] * gx[i];
                    b += gx[i] * gy[i];
                    c += gy[i] * gy[i];
                }
            }
            let mean = (a + c) * 0.5;
            let split = (((a - c) * 0.5).powi(2) + b * b).sqrt();
            resp[y * w + x] = mean - split;
        }
    }
    resp
}

/// Strongest corners (as pixel centers (x+0.5, y+0.5)) after greedy
/// non-max suppression. Candidates are ranked response-descending with
/// (y, x) tie-breaks, so the result is deterministic.
pub fn detect_corners(img: &Image, max_count: usize, nms_radius: f64) -> Vec<(f64, f64)> {
    let resp = shi_tomasi_response(img);
    let (h, w) = (img.height(), img.width());
    let peak = resp.iter().fold(0.0f32, |m, &v| m.max(v));
    if peak <= 0.0 || max_count == 0 {
        return Vec::new();
    }
    let floor = peak * 1e-4;
    let mut cand: Vec<(f32, usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = resp[y * w + x];
            if v > floor {
                cand.push((v, y, x));
            }
        }
    }
    cand.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)).then(p.2.cmp(&q.2)));
    let r2 = nms_radius * nms_radius;
    let mut picked: Vec<(f64, f64)> = Vec::new();
    for (_, y, x) in cand {
        let p = (x as f64 + 0.5, y as f64 + 0.5);
        if picked.iter().all(|q| (q.0 - p.0).powi(2) + (q.1 - p.1).powi(2) > r2) {
            picked.push(p);
            if picked.len() == max_count {
                break;
            }
        }
    }
    picked
}

// ── dense features ──────────────────────────────────────────────────────

/// Patch descriptor for grid cell (r, c) sits at pixel (8c+4, 8r+4).
pub fn patch_center(r: usize, c: usize) -> (f64, f64) {
    (8.0 * c as f64 + 4.0, 8.0 * r as f64 + 4.0)
}

/// Row-major D-dim feature per 8x8 patch.
#[derive(Clone, Debug)]
pub struct DenseFeatureGrid {
    rows: usize,
    cols: usize,
    dim: usize,
    features: Vec<f32>,
}

impl DenseFeatureGrid {
    pub fn new(rows: usize, cols: usize, dim: usize, features: Vec<f32>) -> Result<Self> {
        if features.len() != rows * cols * dim {
            return Err(Error::Contract(format!(
                "feature buffer {} does not match {rows}x{cols}x{dim}",
                features.len()
            )));
        }
        Ok(DenseFeatureGrid {
            rows,
            cols,
            dim,
            features,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn feature(&self, r: usize, c: usize) -> &[f32] {
        let i = (r * self.cols + c) * self.dim;
        &self.features[i..i + self.dim]
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn center_of_index(&self, idx: usize) -> (f64, f64) {
        patch_center(idx / self.cols, idx % self.cols)
    }

    pub fn centers(&self) -> Vec<(f64, f64)> {
        (0..self.patch_count())
            .map(|i| self.center_of_index(i))
            .collect()
    }
}

// ── extractor ───────────────────────────────────────────────────────────

/// Four 3x3 conv blocks: stride 2,2,2,1 with ReLU after the first three.
/// Output rows are the 1/8-grid patch descriptors in row-major order.
#[derive(Clone, Debug)]
pub struct ExtractorSpec {
    pub widths: [usize; 4],
}

impl ExtractorSpec {
    pub fn new(widths: [usize; 4]) -> Self {
        ExtractorSpec { widths }
    }

    fn block_dims(&self, i: usize) -> (usize, usize) {
        let cin = if i == 0 { 1 } else { self.widths[i - 1] };
        (9 * cin, self.widths[i])
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        for i in 0..4 {
            let (rows, cols) = self.block_dims(i);
            params.init_matrix(&format!("extractor.block{i}.weight"), rows, cols, rng);
            params.init_zeros(&format!("extractor.block{i}.bias"), 1, cols);
        }
    }

    /// `img_node` is `[H*W, 1]` position-major. Returns `[H*W/64, D]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &Params,
        img_node: NodeId,
        h: usize,
        w: usize,
    ) -> Result<NodeId> {
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::InvalidInput(format!(
                "extractor input {w}x{h} not divisible by 8"
            )));
        }
        let mut x = img_node;
        let (mut ch, mut cw, mut cc) = (h, w, 1usize);
        for i in 0..4 {
            let stride = if i < 3 { 2 } else { 1 };
            let geom = ConvGeom {
                in_h: ch,
                in_w: cw,
                in_c: cc,
                k: 3,
                stride,
                pad: 1,
            };
            let cols = g.im2col(x, geom)?;
            let wgt = g.param(params, &format!("extractor.block{i}.weight"))?;
            let bias = g.param(params, &format!("extractor.block{i}.bias"))?;
            x = g.matmul(cols, wgt)?;
            x = g.add_row_bias(x, bias)?;
            if i < 3 {
                x = g.relu(x)?;
            }
            ch = geom.out_h();
            cw = geom.out_w();
            cc = self.widths[i];
        }
        Ok(x)
    }
}

/// Builds the `[H*W, 1]` leaf for an image.
pub fn image_node(g: &mut Graph, img: &Image) -> Result<NodeId> {
    g.leaf(img.height() * img.width(), 1, img.pixels().to_vec())
}

/// Runs the extractor outside any training graph and materializes the
/// dense grid.
pub fn extract_dense(img: &Image, spec: &ExtractorSpec, params: &Params) -> Result<DenseFeatureGrid> {
    img.require_grid_aligned()?;
    let mut g = Graph::new();
    let node = image_node(&mut g, img)?;
    let feat = spec.forward(&mut g, params, node, img.height(), img.width())?;
    DenseFeatureGrid::new(
        img.height() / 8,
        img.width() / 8,
        spec.widths[3],
        g.value(feat).to_vec(),
    )
}

// ── bilinear sampling ───────────────────────────────────────────────────

/// Weights reproducing `p` as a convex blend of the four cell corners,
/// in (tl, tr, bl, br) order.
pub fn bilinear_weights(p: (f64, f64), cell: &[(f64, f64); 4]) -> Result<[f64; 4]> {
    let [tl, tr, bl, _br] = *cell;
    let dx = tr.0 - tl.0;
    let dy = bl.1 - tl.1;
    if dx <= 0.0 || dy <= 0.0 {
        return Err(Error::Contract(format!(
            "degenerate cell with extents ({dx}, {dy})"
        )));
    }
    let u = (p.0 - tl.0) / dx;
    let v = (p.1 - tl.1) / dy;
    let eps = 1e-9;
    if !((-eps..=1.0 + eps).contains(&u) && (-eps..=1.0 + eps).contains(&v)) {
        return Err(Error::Contract(format!(
            "point ({}, {}) outside cell (u={u:.4}, v={v:.4})",
            p.0, p.1
        )));
    }
    let (u, v) = (u.clamp(0.0, 1.0), v.clamp(0.0, 1.0));
    Ok([
        (1.0 - u) * (1.0 - v),
        u * (1.0 - v),
        (1.0 - u) * v,
        u * v,
    ])
}

/// Interpolation support for one keypoint on the patch-center lattice:
/// up to 4 (grid_index, weight) entries. Positions outside the center
/// hull clamp to the nearest valid cell.
fn center_lattice_taps(
    grid_rows: usize,
    grid_cols: usize,
    p: (f64, f64),
) -> Vec<(usize, f32)> {
    let axis = |coord: f64, n: usize| -> (usize, usize, f64) {
        if n == 1 {
            return (0, 0, 0.0);
        }
        let gc = (coord - 4.0) / 8.0;
        let c0 = gc.floor().clamp(0.0, (n - 2) as f64);
        let t = (gc - c0).clamp(0.0, 1.0);
        (c0 as usize, c0 as usize + 1, t)
    };
    let (c0, c1, u) = axis(p.0, grid_cols);
    let (r0, r1, v) = axis(p.1, grid_rows);
    let idx = |r: usize, c: usize| r * grid_cols + c;
    let mut taps = Vec::with_capacity(4);
    for (i, wgt) in [
        (idx(r0, c0), (1.0 - u) * (1.0 - v)),
        (idx(r0, c1), u * (1.0 - v)),
        (idx(r1, c0), (1.0 - u) * v),
        (idx(r1, c1), u * v),
    ] {
        if wgt > 0.0 {
            taps.push((i, wgt as f32));
        }
    }
    taps
}

/// Differentiable sampling plan for a keypoint list against a dense
/// feature node of `grid_rows*grid_cols` rows.
pub fn descriptor_mix_plan(
    grid_rows: usize,
    grid_cols: usize,
    kps: &KeypointSet,
) -> Result<MixPlan> {
    let (w, h) = kps.image_size();
    if grid_rows * 8 != h || grid_cols * 8 != w {
        return Err(Error::Contract(format!(
            "grid {grid_cols}x{grid_rows} does not cover image {w}x{h}"
        )));
    }
    let rows: Vec<Vec<(usize, f32)>> = kps
        .positions()
        .iter()
        .map(|&p| center_lattice_taps(grid_rows, grid_cols, p))
        .collect();
    MixPlan::new(grid_rows * grid_cols, rows)
}

/// Keypoint descriptor rows, row i for keypoint i.
#[derive(Clone, Debug)]
pub struct DescriptorSet {
    dim: usize,
    descriptors: Vec<f32>,
    count: usize,
}

impl DescriptorSet {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> &[f32] {
        &self.descriptors
    }
}

pub fn sample_descriptors(grid: &DenseFeatureGrid, kps: &KeypointSet) -> Result<DescriptorSet> {
    let (w, h) = kps.image_size();
    for (i, &(x, y)) in kps.positions().iter().enumerate() {
        if !(x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64) {
            return Err(Error::InvalidInput(format!(
                "keypoint {i} at ({x}, {y}) outside image bounds"
            )));
        }
    }
    let plan = descriptor_mix_plan(grid.rows(), grid.cols(), kps)?;
    let d = grid.dim();
    let mut out = vec![0.0f32; kps.count() * d];
    for i in 0..kps.count() {
        let orow = &mut out[i * d..(i + 1) * d];
        for &(src, wgt) in &plan.entries[plan.row_ptr[i]..plan.row_ptr[i + 1]] {
            for (o, f) in orow
                .iter_mut()
                .zip(&grid.features()[src * d..(src + 1) * d])
            {
                *o += wgt * f;
            }
        }
    }
    Ok(DescriptorSet {
        dim: d,
        descriptors: out,
        count: kps.count(),
    })
}
