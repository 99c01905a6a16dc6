//! Dataset ingestion, synthetic rain generation, patch extraction and
//! scale-space utilities.
//!
//! Images travel as (3,h,w) `Tensor<f64>` in [0,1] file space; the model
//! boundary converts to [-1,1] network space (see `model::to_net_space`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{crop, downsample_area, pad_reflect, Tensor};
use crate::{Error, Result};

/// A rainy/clean image pair; the residual is `rainy - clean` by construction.
#[derive(Debug, Clone)]
pub struct RainPair {
    pub id: String,
    pub rainy: Tensor<f64>,
    pub clean: Tensor<f64>,
}

impl RainPair {
    pub fn new(id: impl Into<String>, rainy: Tensor<f64>, clean: Tensor<f64>) -> Result<Self> {
        if rainy.shape() != clean.shape() {
            return Err(Error::contract(format!(
                "rain pair: rainy {:?} and clean {:?} differ in shape",
                rainy.shape(),
                clean.shape()
            )));
        }
        Ok(RainPair {
            id: id.into(),
            rainy,
            clean,
        })
    }

    /// The additive rain component y - x (exact in stored representation).
    pub fn residual(&self) -> Tensor<f64> {
        self.rainy.zip_map(&self.clean, |y, x| y - x)
    }
}

// ---------------------------------------------------------------------------
// image file I/O
// ---------------------------------------------------------------------------

pub fn load_image(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                t.set3(c, y, x, p.0[c] as f64 / 255.0);
            }
        }
    }
    Ok(t)
}

/// Writes an RGB [0,1] tensor, quantizing to 8 bits at this boundary only.
pub fn save_image(path: &Path, t: &Tensor<f64>) -> Result<()> {
    let (c, h, w) = t.chw();
    if c != 3 {
        return Err(Error::contract("save_image expects 3 channels"));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px: [u8; 3] = std::array::from_fn(|ci| {
                (t.at3(ci, y, x).clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Writes a single-channel [0,1] map as grayscale.
pub fn save_gray_image(path: &Path, t: &Tensor<f64>) -> Result<()> {
    let shape = t.shape().to_vec();
    let (h, w) = match shape.len() {
        2 => (shape[0], shape[1]),
        3 if shape[0] == 1 => (shape[1], shape[2]),
        _ => {
            return Err(Error::contract(format!(
                "save_gray_image expects (h,w) or (1,h,w), got {shape:?}"
            )))
        }
    };
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (t.data()[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// dataset loading
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetLayout {
    /// `rainy/` and `clean/` subdirectories with matching filenames.
    PairedDirs,
    /// Side-by-side images split at the horizontal midpoint.
    Concatenated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConcatSide {
    #[default]
    RainyLeft,
    RainyRight,
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or_default()
            .to_ascii_lowercase();
        if matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            out.insert(
                path.file_name().unwrap().to_string_lossy().into_owned(),
                path,
            );
        }
    }
    Ok(out)
}

/// Loads a paired dataset in sorted filename order. A `manifest.csv`
/// (`id,rainy_path,clean_path`) in the root overrides directory discovery.
pub fn load_pair_directory(
    root: &Path,
    layout: DatasetLayout,
    side: ConcatSide,
) -> Result<Vec<RainPair>> {
    if !root.exists() {
        return Err(Error::data(format!("dataset root {} not found", root.display())));
    }
    let manifest = root.join("manifest.csv");
    if manifest.is_file() {
        return load_manifest(&manifest);
    }
    match layout {
        DatasetLayout::PairedDirs => {
            let rainy = list_images(&root.join("rainy"))?;
            let clean = list_images(&root.join("clean"))?;
            let mut orphans: Vec<String> = Vec::new();
            for name in rainy.keys() {
                if !clean.contains_key(name) {
                    orphans.push(format!("rainy/{name}"));
                }
            }
            for name in clean.keys() {
                if !rainy.contains_key(name) {
                    orphans.push(format!("clean/{name}"));
                }
            }
            if !orphans.is_empty() {
                return Err(Error::data(format!(
                    "unpaired files: {}",
                    orphans.join(", ")
                )));
            }
            let mut pairs = Vec::with_capacity(rainy.len());
            for (name, rpath) in &rainy {
                let y = load_image(rpath)?;
                let x = load_image(&clean[name])?;
                pairs.push(RainPair::new(name.clone(), y, x)?);
            }
            Ok(pairs)
        }
        DatasetLayout::Concatenated => {
            let files = list_images(root)?;
            let mut pairs = Vec::with_capacity(files.len());
            for (name, path) in &files {
                let full = load_image(path)?;
                let (_, h, w) = full.chw();
                if w % 2 != 0 {
                    return Err(Error::data(format!(
                        "{name}: concatenated image has odd width {w}"
                    )));
                }
                let half = w / 2;
                let left = crop(&full, h, half);
                let mut right = Tensor::zeros(&[3, h, half]);
                for c in 0..3 {
                    for y in 0..h {
                        for x in 0..half {
                            right.set3(c, y, x, full.at3(c, y, x + half));
                        }
                    }
                }
                let (y_img, x_img) = match side {
                    ConcatSide::RainyLeft => (left, right),
                    ConcatSide::RainyRight => (right, left),
                };
                pairs.push(RainPair::new(name.clone(), y_img, x_img)?);
            }
            Ok(pairs)
        }
    }
}

fn load_manifest(path: &Path) -> Result<Vec<RainPair>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("id")) {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::data(format!(
                "manifest line {}: expected id,rainy_path,clean_path",
                lineno + 1
            )));
        }
        let y = load_image(&base.join(parts[1]))?;
        let x = load_image(&base.join(parts[2]))?;
        pairs.push(RainPair::new(parts[0], y, x)?);
    }
    pairs.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// synthetic rain
// ---------------------------------------------------------------------------

/// Oriented-streak generator parameters. Angles are degrees from vertical.
#[derive(Debug, Clone)]
pub struct SyntheticRainConfig {
    /// Streaks per megapixel.
    pub density_per_mpx: f64,
    pub angle_deg: f64,
    pub angle_jitter_deg: f64,
    pub length_px: f64,
    pub width_px: f64,
    /// Additive brightness in [0,1] units at the streak core.
    pub intensity: f64,
    pub seed: u64,
}

impl Default for SyntheticRainConfig {
    fn default() -> Self {
        SyntheticRainConfig {
            density_per_mpx: 200.0,
            angle_deg: 12.0,
            angle_jitter_deg: 8.0,
            length_px: 64.0,
            width_px: 3.0,
            intensity: 0.4,
            seed: 0,
        }
    }
}

/// Stamps motion-blurred oriented segments (Gaussian profile across the
/// width) onto the clean image: y = min(x + r, 1), identical on all three
/// channels. The stored pair keeps y - x exact after clipping.
pub fn synthesize_rain(clean: &Tensor<f64>, cfg: &SyntheticRainConfig) -> RainPair {
    let (_, h, w) = clean.chw();
    let n = (cfg.density_per_mpx * (h * w) as f64 / 1e6).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rain = vec![0.0f64; h * w];
    for _ in 0..n {
        let cx: f64 = rng.gen_range(0.0..w as f64);
        let cy: f64 = rng.gen_range(0.0..h as f64);
        let theta = (cfg.angle_deg + cfg.angle_jitter_deg * rng.gen_range(-1.0..1.0))
            .to_radians();
        let dir = (theta.sin(), theta.cos());
        let perp = (dir.1, -dir.0);
        let half = cfg.length_px * rng.gen_range(0.7..1.3) / 2.0;
        let sigma = (cfg.width_px / 2.0) * rng.gen_range(0.75..1.25);
        let amp = cfg.intensity * rng.gen_range(0.6..1.0);
        let reach = half + 3.0 * sigma + 1.0;
        let x0 = ((cx - reach).floor().max(0.0)) as usize;
        let x1 = ((cx + reach).ceil().min(w as f64 - 1.0)) as usize;
        let y0 = ((cy - reach).floor().max(0.0)) as usize;
        let y1 = ((cy + reach).ceil().min(h as f64 - 1.0)) as usize;
        for py in y0..=y1 {
            for px in x0..=x1 {
                let rx = px as f64 - cx;
                let ry = py as f64 - cy;
                let t = rx * dir.0 + ry * dir.1;
                let p = rx * perp.0 + ry * perp.1;
                if t.abs() > half + 2.0 * sigma || p.abs() > 3.0 * sigma {
                    continue;
                }
                let endf = ((half + 2.0 * sigma - t.abs()) / (2.0 * sigma)).clamp(0.0, 1.0);
                rain[py * w + px] += amp * (-p * p / (2.0 * sigma * sigma)).exp() * endf;
            }
        }
    }
    let mut rainy = clean.clone();
    for c in 0..3 {
        let ch = rainy.channel_mut(c);
        for (v, &r) in ch.iter_mut().zip(&rain) {
            *v = (*v + r).min(1.0);
        }
    }
    RainPair {
        id: format!("synth-{:08x}", cfg.seed),
        rainy,
        clean: clean.clone(),
    }
}

// ---------------------------------------------------------------------------
// patches and scale space
// ---------------------------------------------------------------------------

/// Copies the `size`x`size` patch with top-left corner (y0, x0).
pub fn crop_patch(img: &Tensor<f64>, y0: usize, x0: usize, size: usize) -> Tensor<f64> {
    let (c, _, w) = img.chw();
    let mut out = Tensor::zeros(&[c, size, size]);
    for ci in 0..c {
        let src = img.channel(ci);
        let dst = out.channel_mut(ci);
        for y in 0..size {
            dst[y * size..(y + 1) * size]
                .copy_from_slice(&src[(y0 + y) * w + x0..(y0 + y) * w + x0 + size]);
        }
    }
    out
}

/// Reflection-pads to multiples of `size` and tiles row-major without
/// overlap. Returns the patches and the grid dimensions.
pub fn extract_patches(
    img: &Tensor<f64>,
    size: usize,
    stride: usize,
) -> (Vec<Tensor<f64>>, (usize, usize)) {
    assert_eq!(size, stride, "non-overlapping tiling only");
    let (_, h, w) = img.chw();
    let ph = h.div_ceil(size) * size;
    let pw = w.div_ceil(size) * size;
    let padded = pad_reflect(img, ph, pw);
    let (gh, gw) = (ph / size, pw / size);
    let mut patches = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            patches.push(crop_patch(&padded, gy * size, gx * size, size));
        }
    }
    (patches, (gh, gw))
}

/// Reassembles a row-major non-overlapping patch grid.
pub fn assemble_patches(
    patches: &[Tensor<f64>],
    grid: (usize, usize),
    size: usize,
) -> Tensor<f64> {
    let (gh, gw) = grid;
    assert_eq!(patches.len(), gh * gw);
    let c = patches[0].chw().0;
    let mut out = Tensor::zeros(&[c, gh * size, gw * size]);
    for gy in 0..gh {
        for gx in 0..gw {
            let p = &patches[gy * gw + gx];
            for ci in 0..c {
                let src = p.channel(ci);
                let w = gw * size;
                let dst = out.channel_mut(ci);
                for y in 0..size {
                    dst[(gy * size + y) * w + gx * size..(gy * size + y) * w + gx * size + size]
                        .copy_from_slice(&src[y * size..(y + 1) * size]);
                }
            }
        }
    }
    out
}

/// Antialiased (area-average) downsampling by 2 or 4.
pub fn downsample(img: &Tensor<f64>, factor: usize) -> Result<Tensor<f64>> {
    if !matches!(factor, 2 | 4) {
        return Err(Error::contract(format!("downsample factor {factor} not in {{2,4}}")));
    }
    let (_, h, w) = img.chw();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::contract(format!(
            "downsample: {h}x{w} not divisible by {factor}; pad first"
        )));
    }
    Ok(downsample_area(img, factor))
}

// ---------------------------------------------------------------------------
// procedural clean images (desk-scale corpus)
// ---------------------------------------------------------------------------

/// Deterministic "natural-ish" clean image: smooth background gradients,
/// soft-edged ellipses and rectangles, mild lattice-noise texture, light
/// blur. Gives the scorer edges, flats and texture to look at without any
/// external corpus.
pub fn procedural_clean_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let mut img = Tensor::zeros(&[3, h, w]);

    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.7));
    let gx: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.25..0.25));
    let gy: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.25..0.25));
    for c in 0..3 {
        let ch = img.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                ch[y * w + x] =
                    base[c] + gx[c] * (x as f64 / w as f64) + gy[c] * (y as f64 / h as f64);
            }
        }
    }

    let shapes = rng.gen_range(8..16);
    for _ in 0..shapes {
        let cx: f64 = rng.gen_range(0.0..w as f64);
        let cy: f64 = rng.gen_range(0.0..h as f64);
        let rx: f64 = rng.gen_range(w as f64 * 0.04..w as f64 * 0.35);
        let ry: f64 = rng.gen_range(h as f64 * 0.04..h as f64 * 0.35);
        let rot: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.95));
        let softness: f64 = rng.gen_range(0.8..4.0);
        let rectangular = rng.gen_bool(0.4);
        let (sr, cr) = rot.sin_cos();
        let edge = softness / rx.min(ry);
        let x0 = ((cx - rx - ry).floor().max(0.0)) as usize;
        let x1 = ((cx + rx + ry).ceil().min(w as f64 - 1.0)) as usize;
        let y0 = ((cy - rx - ry).floor().max(0.0)) as usize;
        let y1 = ((cy + rx + ry).ceil().min(h as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let u = (dx * cr + dy * sr) / rx;
                let v = (-dx * sr + dy * cr) / ry;
                let d = if rectangular {
                    u.abs().max(v.abs())
                } else {
                    (u * u + v * v).sqrt()
                };
                let alpha = 1.0 / (1.0 + ((d - 1.0) / edge).exp());
                if alpha < 1e-4 {
                    continue;
                }
                for c in 0..3 {
                    let i = y * w + x;
                    let ch = img.channel_mut(c);
                    ch[i] = ch[i] * (1.0 - alpha) + color[c] * alpha;
                }
            }
        }
    }

    // lattice value-noise texture shared across channels
    let cell = rng.gen_range(6..14usize);
    let lh = h / cell + 2;
    let lw = w / cell + 2;
    let lattice: Vec<f64> = (0..lh * lw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let amp: f64 = rng.gen_range(0.02..0.06);
    for y in 0..h {
        for x in 0..w {
            let fy = y as f64 / cell as f64;
            let fx = x as f64 / cell as f64;
            let iy = fy as usize;
            let ix = fx as usize;
            let ty = fy - iy as f64;
            let tx = fx - ix as f64;
            let v00 = lattice[iy * lw + ix];
            let v01 = lattice[iy * lw + ix + 1];
            let v10 = lattice[(iy + 1) * lw + ix];
            let v11 = lattice[(iy + 1) * lw + ix + 1];
            let v = v00 * (1.0 - ty) * (1.0 - tx)
                + v01 * (1.0 - ty) * tx
                + v10 * ty * (1.0 - tx)
                + v11 * ty * tx;
            for c in 0..3 {
                img.channel_mut(c)[y * w + x] += amp * v;
            }
        }
    }

    // light 3x3 box blur, then clamp away from hard saturation
    let mut blurred = img.clone();
    for c in 0..3 {
        let src = img.channel(c);
        let dst = blurred.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        s += src[yy * w + xx];
                    }
                }
                dst[y * w + x] = (s / 9.0).clamp(0.02, 0.98);
            }
        }
    }
    blurred
}

/// A deterministic corpus of procedural clean images.
pub fn procedural_corpus(count: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor<f64>> {
    (0..count)
        .map(|i| procedural_clean_image(h, w, seed.wrapping_add(i as u64 * 7919)))
        .collect()
}
