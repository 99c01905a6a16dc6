//! Patch distortion labels from no-reference quality scores.
//!
//! Scores are split into three classes (green = low, blue = medium,
//! red = high distortion) by two thresholds calibrated so the calibration
//! corpus divides into three equal groups. A +-margin band around each
//! threshold is left unassigned by the labeling branches; such boundary
//! patches are excluded from classifier training (and snapped to the nearer
//! side only when a hard color is demanded, e.g. for map rendering).

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::niqe::{niqe_score, PristineModel};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Per-patch distortion class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistortionLabel {
    Green,
    Blue,
    Red,
    /// Score fell inside a threshold margin band; excluded from training.
    Boundary,
}

impl DistortionLabel {
    /// Class index 0/1/2; boundary has none.
    pub fn class_index(self) -> Option<usize> {
        match self {
            DistortionLabel::Green => Some(0),
            DistortionLabel::Blue => Some(1),
            DistortionLabel::Red => Some(2),
            DistortionLabel::Boundary => None,
        }
    }

    pub fn from_class_index(i: usize) -> DistortionLabel {
        match i {
            0 => DistortionLabel::Green,
            1 => DistortionLabel::Blue,
            _ => DistortionLabel::Red,
        }
    }

    fn to_char(self) -> char {
        match self {
            DistortionLabel::Green => 'g',
            DistortionLabel::Blue => 'b',
            DistortionLabel::Red => 'r',
            DistortionLabel::Boundary => 'x',
        }
    }

    fn from_char(c: char) -> Result<Self> {
        Ok(match c {
            'g' => DistortionLabel::Green,
            'b' => DistortionLabel::Blue,
            'r' => DistortionLabel::Red,
            'x' => DistortionLabel::Boundary,
            other => return Err(Error::data(format!("unknown label character {other:?}"))),
        })
    }
}

/// Label thresholds: T1/T2 plus the unassigned margin band half-width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdConfig {
    pub t1: f64,
    pub t2: f64,
    pub margin: f64,
}

pub const DEFAULT_MARGIN: f64 = 0.2;

impl ThresholdConfig {
    pub fn new(t1: f64, t2: f64, margin: f64) -> Result<Self> {
        if !(t1.is_finite() && t2.is_finite()) || t1 <= 0.0 || t2 <= 0.0 || margin < 0.0 {
            return Err(Error::contract("thresholds must be positive and finite"));
        }
        if t1 + margin >= t2 - margin {
            return Err(Error::contract(format!(
                "threshold bands overlap: T1+margin = {} >= T2-margin = {}; \
                 calibrate on a larger or more varied corpus",
                t1 + margin,
                t2 - margin
            )));
        }
        Ok(ThresholdConfig { t1, t2, margin })
    }

    /// The published operating point for the original training corpus.
    pub fn published_default() -> Self {
        ThresholdConfig {
            t1: 6.0,
            t2: 9.0,
            margin: DEFAULT_MARGIN,
        }
    }
}

/// Linear-interpolation percentile of a sorted slice, q in [0,1].
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Tertile threshold calibration: T1 and T2 at the 1/3 and 2/3 percentiles
/// so the corpus divides into three equal groups. Requires >= 300 scores.
pub fn calibrate_thresholds(scores: &[f64]) -> Result<ThresholdConfig> {
    if scores.len() < 300 {
        return Err(Error::contract(format!(
            "threshold calibration needs at least 300 scores, got {}",
            scores.len()
        )));
    }
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(Error::contract("threshold calibration: non-finite score"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let t1 = percentile_sorted(&sorted, 1.0 / 3.0);
    let t2 = percentile_sorted(&sorted, 2.0 / 3.0);
    ThresholdConfig::new(t1, t2, DEFAULT_MARGIN)
}

/// The labeling branches:
/// score <= T1-margin -> green; T1+margin < score < T2-margin -> blue;
/// score >= T2+margin -> red; anything else is boundary.
pub fn label_patch(score: f64, cfg: &ThresholdConfig) -> DistortionLabel {
    if score <= cfg.t1 - cfg.margin {
        DistortionLabel::Green
    } else if cfg.t1 + cfg.margin < score && score < cfg.t2 - cfg.margin {
        DistortionLabel::Blue
    } else if score >= cfg.t2 + cfg.margin {
        DistortionLabel::Red
    } else {
        DistortionLabel::Boundary
    }
}

/// Hard label with boundary scores snapped to the nearer side's class.
pub fn snap_label(score: f64, cfg: &ThresholdConfig) -> DistortionLabel {
    match label_patch(score, cfg) {
        DistortionLabel::Boundary => {
            if score < cfg.t1 + cfg.margin {
                if score < cfg.t1 {
                    DistortionLabel::Green
                } else {
                    DistortionLabel::Blue
                }
            } else if score < cfg.t2 {
                DistortionLabel::Blue
            } else {
                DistortionLabel::Red
            }
        }
        l => l,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    NiqeDirect,
    GlnPredicted,
    NetworkD2,
}

/// Per-patch label grid of one image.
#[derive(Debug, Clone)]
pub struct LabelMap {
    pub grid: Vec<DistortionLabel>,
    pub gh: usize,
    pub gw: usize,
    pub patch_size: usize,
    /// Source image extent (pre-padding).
    pub src_h: usize,
    pub src_w: usize,
    pub source: LabelSource,
    /// Raw scores when derived from the scorer (used for boundary snapping).
    pub scores: Option<Vec<f64>>,
}

impl LabelMap {
    pub fn label_at(&self, gy: usize, gx: usize) -> DistortionLabel {
        self.grid[gy * self.gw + gx]
    }

    pub fn boundary_count(&self) -> usize {
        self.grid
            .iter()
            .filter(|l| matches!(l, DistortionLabel::Boundary))
            .count()
    }

    /// Plain text serialization: `width height patch_size` header plus one
    /// character per cell row-major.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {}\n", self.src_w, self.src_h, self.patch_size);
        for gy in 0..self.gh {
            for gx in 0..self.gw {
                s.push(self.label_at(gy, gx).to_char());
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::data("empty label map file"))?;
        let parts: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::data(format!("label map header: {e}")))?;
        if parts.len() != 3 {
            return Err(Error::data("label map header must be: width height patch_size"));
        }
        let (src_w, src_h, patch_size) = (parts[0], parts[1], parts[2]);
        let gh = src_h.div_ceil(patch_size);
        let gw = src_w.div_ceil(patch_size);
        let mut grid = Vec::with_capacity(gh * gw);
        for line in lines.take(gh) {
            for ch in line.trim().chars() {
                grid.push(DistortionLabel::from_char(ch)?);
            }
        }
        if grid.len() != gh * gw {
            return Err(Error::data(format!(
                "label map has {} cells, expected {}x{}",
                grid.len(),
                gh,
                gw
            )));
        }
        Ok(LabelMap {
            grid,
            gh,
            gw,
            patch_size,
            src_h,
            src_w,
            source: LabelSource::NiqeDirect,
            scores: None,
        })
    }

    /// Color rendering with the standard convention (green/blue/red = low/
    /// medium/high). Boundary cells are snapped via their stored score when
    /// available, otherwise drawn gray.
    pub fn to_png(&self, path: &std::path::Path, cfg: Option<&ThresholdConfig>) -> Result<()> {
        let cell = 16usize;
        let mut img = Tensor::zeros(&[3, self.gh * cell, self.gw * cell]);
        for gy in 0..self.gh {
            for gx in 0..self.gw {
                let mut label = self.label_at(gy, gx);
                if label == DistortionLabel::Boundary {
                    if let (Some(scores), Some(cfg)) = (&self.scores, cfg) {
                        label = snap_label(scores[gy * self.gw + gx], cfg);
                    }
                }
                let color = match label {
                    DistortionLabel::Green => [0.1, 0.75, 0.1],
                    DistortionLabel::Blue => [0.1, 0.1, 0.8],
                    DistortionLabel::Red => [0.85, 0.1, 0.1],
                    DistortionLabel::Boundary => [0.5, 0.5, 0.5],
                };
                for c in 0..3 {
                    for y in 0..cell {
                        for x in 0..cell {
                            img.set3(c, gy * cell + y, gx * cell + x, color[c]);
                        }
                    }
                }
            }
        }
        crate::data::save_image(path, &img)
    }

    /// One-hot targets (3, gh, gw). Errors if any boundary cell is present.
    pub fn to_onehot(&self) -> Result<Tensor<f64>> {
        let mut t = Tensor::zeros(&[3, self.gh, self.gw]);
        let n = self.gh * self.gw;
        for (i, l) in self.grid.iter().enumerate() {
            match l.class_index() {
                Some(c) => t.data_mut()[c * n + i] = 1.0,
                None => {
                    return Err(Error::contract(
                        "label map contains boundary cells; mask them instead of one-hot encoding",
                    ))
                }
            }
        }
        Ok(t)
    }

    /// One-hot targets plus a supervision mask with boundary cells zeroed.
    pub fn to_targets_and_mask(&self) -> (Tensor<f64>, Tensor<f64>) {
        let n = self.gh * self.gw;
        let mut t = Tensor::zeros(&[3, self.gh, self.gw]);
        let mut m = Tensor::zeros(&[1, self.gh, self.gw]);
        for (i, l) in self.grid.iter().enumerate() {
            if let Some(c) = l.class_index() {
                t.data_mut()[c * n + i] = 1.0;
                m.data_mut()[i] = 1.0;
            }
        }
        (t, m)
    }
}

/// Labels every 128x128 patch of an image by its quality score.
pub fn generate_label_map(
    img: &Tensor<f64>,
    model: &PristineModel,
    cfg: &ThresholdConfig,
) -> Result<LabelMap> {
    let (_, h, w) = img.chw();
    let patch_size = 128;
    let (patches, (gh, gw)) = crate::data::extract_patches(img, patch_size, patch_size);
    let mut grid = Vec::with_capacity(patches.len());
    let mut scores = Vec::with_capacity(patches.len());
    for p in &patches {
        let s = niqe_score(p, model)?;
        scores.push(s.value);
        grid.push(label_patch(s.value, cfg));
    }
    Ok(LabelMap {
        grid,
        gh,
        gw,
        patch_size,
        src_h: h,
        src_w: w,
        source: LabelSource::NiqeDirect,
        scores: Some(scores),
    })
}

/// Classifier training corpus: (patch, label) pairs with boundary patches
/// excluded, shuffled with a recorded seed.
pub struct GlnDataset {
    pub pairs: Vec<(Tensor<f64>, DistortionLabel)>,
    pub shuffle_seed: u64,
}

pub fn build_gln_dataset(
    rainy_images: &[Tensor<f64>],
    model: &PristineModel,
    cfg: &ThresholdConfig,
    shuffle_seed: u64,
) -> Result<GlnDataset> {
    let mut pairs = Vec::new();
    for img in rainy_images {
        let (patches, _) = crate::data::extract_patches(img, 128, 128);
        for p in patches {
            let s = niqe_score(&p, model)?;
            match label_patch(s.value, cfg) {
                DistortionLabel::Boundary => continue,
                l => pairs.push((p, l)),
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::data(
            "label dataset is empty: every patch scored inside the boundary bands",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    pairs.shuffle(&mut rng);
    Ok(GlnDataset {
        pairs,
        shuffle_seed,
    })
}
