//! From-scratch no-reference quality scorer.
//!
//! Pipeline: luminance -> mean-subtracted contrast-normalized (MSCN)
//! coefficients -> asymmetric generalized Gaussian fits of the coefficients
//! and their four orientation products, at two scales -> a 36-dimensional
//! natural-scene-statistics feature vector per patch -> Mahalanobis-type
//! distance against a multivariate Gaussian model of pristine patches.
//!
//! Implementation constants follow the scorer's published defaults: 7x7
//! Gaussian window with sigma 7/6, stabilizer C = 1 in [0,255] luminance
//! units, alpha search grid [0.2, 10] step 0.001, 96x96 feature blocks
//! (48x48 at the half scale), covariance regularization
//! lambda = 1e-6 * trace / d. Everything is recorded in the model descriptor
//! so a fitted model documents its own provenance.

use std::fmt::Write as _;
use std::path::Path;

use once_cell::sync::Lazy;
use statrs::function::gamma::gamma;

use crate::linalg::{self, SymMatrix};
use crate::tensor::{downsample_area, pad_reflect, Tensor};
use crate::{Error, Result};

/// Luminance weights (ITU-R BT.601).
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
/// MSCN stabilizer in [0,255] luminance units.
const STABILIZER_C: f64 = 1.0;
const WINDOW_SIZE: usize = 7;
const WINDOW_SIGMA: f64 = 7.0 / 6.0;
/// Feature block extents per scale and the stride used inside a 128 patch.
const BLOCK: [usize; 2] = [96, 48];
const BLOCK_STRIDE: [usize; 2] = [32, 16];
pub const FEATURE_DIM: usize = 36;

// ---------------------------------------------------------------------------
// MSCN
// ---------------------------------------------------------------------------

/// Mean-subtracted contrast-normalized coefficient field.
pub struct MscnField {
    /// (h, w) coefficients.
    pub coefficients: Tensor<f64>,
    /// Normalized 1-d window the 7x7 Gaussian factors into.
    pub window: Vec<f64>,
    pub stabilizer: f64,
}

fn gaussian_window_1d() -> Vec<f64> {
    let half = (WINDOW_SIZE / 2) as isize;
    let mut w: Vec<f64> = (-half..=half)
        .map(|x| (-((x * x) as f64) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Separable Gaussian filter with replicated borders.
fn gauss_filter(img: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let half = win.len() / 2;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                let xi = (x as isize + k as isize - half as isize).clamp(0, w as isize - 1);
                s += wk * img[y * w + xi as usize];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                let yi = (y as isize + k as isize - half as isize).clamp(0, h as isize - 1);
                s += wk * tmp[yi as usize * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// MSCN coefficients of a grayscale image in [0,255] units:
/// (I - mu) / (sigma_local + C) with Gaussian-weighted local moments.
pub fn compute_mscn(gray: &Tensor<f64>) -> Result<MscnField> {
    let shape = gray.shape();
    if shape.len() != 2 {
        return Err(Error::contract(format!(
            "compute_mscn expects a 2-d image, got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    if h < WINDOW_SIZE || w < WINDOW_SIZE {
        return Err(Error::contract(format!(
            "compute_mscn: image {h}x{w} is smaller than the {WINDOW_SIZE}x{WINDOW_SIZE} window"
        )));
    }
    let win = gaussian_window_1d();
    let img = gray.data();
    let mu = gauss_filter(img, h, w, &win);
    let sq: Vec<f64> = img.iter().map(|v| v * v).collect();
    let musq = gauss_filter(&sq, h, w, &win);
    let mut coef = vec![0.0; h * w];
    for i in 0..h * w {
        let var = (musq[i] - mu[i] * mu[i]).max(0.0);
        coef[i] = (img[i] - mu[i]) / (var.sqrt() + STABILIZER_C);
    }
    Ok(MscnField {
        coefficients: Tensor::from_vec(&[h, w], coef),
        window: win,
        stabilizer: STABILIZER_C,
    })
}

// ---------------------------------------------------------------------------
// AGGD fit
// ---------------------------------------------------------------------------

/// Asymmetric generalized Gaussian parameters.
#[derive(Debug, Clone, Copy)]
pub struct AggdParams {
    pub alpha: f64,
    pub left_scale: f64,
    pub right_scale: f64,
    pub mean_offset: f64,
}

/// rho(alpha) = Gamma(2/a)^2 / (Gamma(1/a) Gamma(3/a)) over the search grid.
static RHO_GRID: Lazy<Vec<(f64, f64)>> = Lazy::new(|| {
    (0..=9800)
        .map(|i| {
            let a = 0.2 + 0.001 * i as f64;
            let rho = gamma(2.0 / a).powi(2) / (gamma(1.0 / a) * gamma(3.0 / a));
            (a, rho)
        })
        .collect()
});

fn aggd_from_moments(
    neg_sq_mean: f64,
    pos_sq_mean: f64,
    abs_mean: f64,
    sq_mean: f64,
) -> AggdParams {
    let sigma_l = neg_sq_mean.sqrt();
    let sigma_r = pos_sq_mean.sqrt();
    let gamma_hat = if sigma_r > 0.0 { sigma_l / sigma_r } else { 1.0 };
    let r_hat = if sq_mean > 0.0 {
        abs_mean * abs_mean / sq_mean
    } else {
        0.0
    };
    let rhat_norm = r_hat * (gamma_hat.powi(3) + 1.0) * (gamma_hat + 1.0)
        / (gamma_hat * gamma_hat + 1.0).powi(2);
    let mut best = RHO_GRID[0].0;
    let mut best_d = f64::INFINITY;
    for &(a, rho) in RHO_GRID.iter() {
        let d = (rho - rhat_norm).abs();
        if d < best_d {
            best_d = d;
            best = a;
        }
    }
    let alpha = best;
    let conv = (gamma(1.0 / alpha) / gamma(3.0 / alpha)).sqrt();
    let beta_l = sigma_l * conv;
    let beta_r = sigma_r * conv;
    let mean_offset = (beta_r - beta_l) * gamma(2.0 / alpha) / gamma(1.0 / alpha);
    AggdParams {
        alpha,
        left_scale: beta_l,
        right_scale: beta_r,
        mean_offset,
    }
}

fn aggd_moments(samples: &[f64]) -> (f64, f64, f64, f64) {
    let mut neg_sq = 0.0;
    let mut nneg = 0usize;
    let mut pos_sq = 0.0;
    let mut npos = 0usize;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for &v in samples {
        if v < 0.0 {
            neg_sq += v * v;
            nneg += 1;
        } else if v > 0.0 {
            pos_sq += v * v;
            npos += 1;
        }
        abs_sum += v.abs();
        sq_sum += v * v;
    }
    let n = samples.len() as f64;
    (
        if nneg > 0 { neg_sq / nneg as f64 } else { 0.0 },
        if npos > 0 { pos_sq / npos as f64 } else { 0.0 },
        abs_sum / n,
        sq_sum / n,
    )
}

/// Moment-matching AGGD fit over the alpha grid.
pub fn fit_aggd(samples: &[f64]) -> Result<AggdParams> {
    if samples.len() < 100 {
        return Err(Error::contract(format!(
            "fit_aggd needs at least 100 samples, got {}",
            samples.len()
        )));
    }
    let (nsq, psq, am, sm) = aggd_moments(samples);
    if sm <= 1e-300 {
        return Err(Error::contract("fit_aggd: zero-variance input"));
    }
    Ok(aggd_from_moments(nsq, psq, am, sm))
}

/// Fit that never fails: a degenerate (near-constant) sample set falls back
/// to a neutral Gaussian with stabilizer-sized scales.
fn fit_aggd_stabilized(samples: &[f64]) -> AggdParams {
    let (nsq, psq, am, sm) = aggd_moments(samples);
    if sm <= 1e-300 {
        return AggdParams {
            alpha: 2.0,
            left_scale: 1e-6,
            right_scale: 1e-6,
            mean_offset: 0.0,
        };
    }
    aggd_from_moments(nsq, psq, am, sm)
}

// ---------------------------------------------------------------------------
// features
// ---------------------------------------------------------------------------

fn luminance255(rgb: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = rgb.chw();
    assert_eq!(c, 3, "luminance expects RGB");
    let mut out = vec![0.0; h * w];
    let r = rgb.channel(0);
    let g = rgb.channel(1);
    let b = rgb.channel(2);
    for i in 0..h * w {
        out[i] = 255.0 * (LUMA[0] * r[i] + LUMA[1] * g[i] + LUMA[2] * b[i]);
    }
    Tensor::from_vec(&[h, w], out)
}

/// 18 features of one MSCN block: (alpha, mean scale) of the coefficients
/// plus (alpha, mean offset, left scale, right scale) of the four
/// orientation products (horizontal, vertical, both diagonals).
fn block_features(coef: &Tensor<f64>, y0: usize, x0: usize, size: usize) -> Vec<f64> {
    let (_, w) = (coef.shape()[0], coef.shape()[1]);
    let data = coef.data();
    let mut f = Vec::with_capacity(18);
    let mut block = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        block.extend_from_slice(&data[y * w + x0..y * w + x0 + size]);
    }
    let p = fit_aggd_stabilized(&block);
    f.push(p.alpha);
    f.push((p.left_scale + p.right_scale) / 2.0);
    let shifts = [(0usize, 1isize), (1, 0), (1, 1), (1, -1)];
    let mut prod = Vec::with_capacity(size * size);
    for (dy, dx) in shifts {
        prod.clear();
        for y in y0..y0 + size - dy {
            for x in x0..x0 + size {
                let xx = x as isize + dx;
                if xx < x0 as isize || xx >= (x0 + size) as isize {
                    continue;
                }
                prod.push(data[y * w + x] * data[(y + dy) * w + xx as usize]);
            }
        }
        let p = fit_aggd_stabilized(&prod);
        f.push(p.alpha);
        f.push(p.mean_offset);
        f.push(p.left_scale);
        f.push(p.right_scale);
    }
    f
}

/// Per-sub-block 36-d feature vectors of one 3x128x128 patch (two scales,
/// a 2x2 grid of 96/48 blocks).
fn patch_block_features(patch: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
    let (c, h, w) = patch.chw();
    if c != 3 || h != 128 || w != 128 {
        return Err(Error::contract(format!(
            "patch features expect 3x128x128, got {c}x{h}x{w}"
        )));
    }
    let luma = luminance255(patch);
    let luma3 = Tensor::from_vec(&[1, 128, 128], luma.data().to_vec());
    let half3 = downsample_area(&luma3, 2);
    let half = Tensor::from_vec(&[64, 64], half3.data().to_vec());
    let coef1 = compute_mscn(&luma)?.coefficients;
    let coef2 = compute_mscn(&half)?.coefficients;

    let mut rows = Vec::with_capacity(4);
    for by in 0..2 {
        for bx in 0..2 {
            let mut v = Vec::with_capacity(FEATURE_DIM);
            v.extend(block_features(
                &coef1,
                by * BLOCK_STRIDE[0],
                bx * BLOCK_STRIDE[0],
                BLOCK[0],
            ));
            v.extend(block_features(
                &coef2,
                by * BLOCK_STRIDE[1],
                bx * BLOCK_STRIDE[1],
                BLOCK[1],
            ));
            debug_assert_eq!(v.len(), FEATURE_DIM);
            rows.push(v);
        }
    }
    Ok(rows)
}

/// The patch's 36-d feature vector: mean over its sub-block features.
/// Deterministic; a constant patch yields a finite vector (stabilized fits).
pub fn extract_patch_features(patch: &Tensor<f64>) -> Result<Vec<f64>> {
    let rows = patch_block_features(patch)?;
    Ok(linalg::column_mean(&rows))
}

// ---------------------------------------------------------------------------
// pristine model
// ---------------------------------------------------------------------------

/// Multivariate Gaussian of pristine-patch features.
#[derive(Debug, Clone)]
pub struct PristineModel {
    pub feature_dim: usize,
    pub mean: Vec<f64>,
    pub covariance: SymMatrix,
    pub corpus_descriptor: String,
}

impl PristineModel {
    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.feature_dim || self.covariance.n != self.feature_dim {
            return Err(Error::contract("pristine model dimensions inconsistent"));
        }
        if !self.mean.iter().all(|v| v.is_finite()) {
            return Err(Error::contract("pristine model mean not finite"));
        }
        if self.covariance.max_asymmetry() > 1e-9 {
            return Err(Error::contract("pristine covariance not symmetric"));
        }
        if linalg::min_eigenvalue(&self.covariance) < -1e-9 {
            return Err(Error::contract("pristine covariance not PSD"));
        }
        Ok(())
    }
}

/// Fits the pristine model over all 128x128 patches of a clean corpus.
/// Covariance is regularized by `1e-6 * trace / d` on the diagonal.
pub fn fit_pristine_model(corpus: &[Tensor<f64>], descriptor: &str) -> Result<PristineModel> {
    if corpus.len() < 20 {
        return Err(Error::contract(format!(
            "pristine fit needs at least 20 images, got {}",
            corpus.len()
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for img in corpus {
        let (c, h, w) = img.chw();
        if c != 3 {
            return Err(Error::contract("pristine corpus images must be RGB"));
        }
        let ph = h.div_ceil(128) * 128;
        let pw = w.div_ceil(128) * 128;
        let padded = pad_reflect(img, ph, pw);
        for gy in 0..ph / 128 {
            for gx in 0..pw / 128 {
                let patch = crate::data::crop_patch(&padded, gy * 128, gx * 128, 128);
                rows.push(extract_patch_features(&patch)?);
            }
        }
    }
    if rows.len() <= FEATURE_DIM {
        return Err(Error::contract(format!(
            "pristine fit collected only {} patches for {} feature dimensions; \
             use a larger corpus",
            rows.len(),
            FEATURE_DIM
        )));
    }
    let mean = linalg::column_mean(&rows);
    let mut cov = linalg::sample_covariance(&rows, &mean);
    let lambda = 1e-6 * cov.trace() / FEATURE_DIM as f64;
    cov.add_scaled_identity(lambda);
    let model = PristineModel {
        feature_dim: FEATURE_DIM,
        mean,
        covariance: cov,
        corpus_descriptor: format!(
            "{descriptor}; patches={}; window=7x7 sigma=7/6 C=1@[0,255]; \
             alpha-grid=[0.2,10]x0.001; blocks=96/48 stride 32/16; lambda=1e-6*tr/d",
            rows.len()
        ),
    };
    model.validate()?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// scoring
// ---------------------------------------------------------------------------

/// A no-reference quality score (larger = further from pristine statistics).
#[derive(Debug, Clone, Copy)]
pub struct NiqeScore {
    pub value: f64,
    /// Set when the averaged covariance was singular and a pseudo-inverse
    /// was used.
    pub used_pseudo_inverse: bool,
}

/// Distance between explicit test statistics and the pristine model:
/// sqrt((nu - nu_t)' ((Sigma + Sigma_t)/2)^-1 (nu - nu_t)).
pub fn score_from_stats(model: &PristineModel, nu_t: &[f64], sigma_t: &SymMatrix) -> NiqeScore {
    assert_eq!(nu_t.len(), model.feature_dim);
    assert_eq!(sigma_t.n, model.feature_dim);
    let mid = model.covariance.add(sigma_t).scaled(0.5);
    let diff: Vec<f64> = model
        .mean
        .iter()
        .zip(nu_t)
        .map(|(a, b)| a - b)
        .collect();
    let (z, used_pinv) = linalg::solve_spd_or_pinv(&mid, &diff);
    let q: f64 = diff.iter().zip(&z).map(|(d, zz)| d * zz).sum();
    if used_pinv {
        log::warn!("niqe score: averaged covariance singular, pseudo-inverse used");
    }
    NiqeScore {
        value: q.max(0.0).sqrt(),
        used_pseudo_inverse: used_pinv,
    }
}

/// Scores one 3x128x128 patch against a fitted pristine model. Test
/// statistics come from the patch's four sub-blocks.
pub fn niqe_score(patch: &Tensor<f64>, model: &PristineModel) -> Result<NiqeScore> {
    let rows = patch_block_features(patch)?;
    let nu_t = linalg::column_mean(&rows);
    let sigma_t = linalg::sample_covariance(&rows, &nu_t);
    Ok(score_from_stats(model, &nu_t, &sigma_t))
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

const MODEL_HEADER: &str = "pristine-model v1";

impl PristineModel {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MODEL_HEADER}");
        let _ = writeln!(s, "d {}", self.feature_dim);
        let _ = writeln!(s, "descriptor {}", self.corpus_descriptor.replace('\n', " "));
        let _ = writeln!(s, "nu");
        for v in &self.mean {
            let _ = writeln!(s, "{v}");
        }
        let _ = writeln!(s, "sigma");
        for i in 0..self.feature_dim {
            let row: Vec<String> = (0..self.feature_dim)
                .map(|j| format!("{}", self.covariance.at(i, j)))
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let head = lines.next().unwrap_or_default();
        if head.trim() != MODEL_HEADER {
            return Err(Error::data(format!(
                "not a pristine model file (header {head:?})"
            )));
        }
        let dline = lines.next().unwrap_or_default();
        let d: usize = dline
            .strip_prefix("d ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::data("pristine model: bad dimension line"))?;
        let descriptor = lines
            .next()
            .and_then(|l| l.strip_prefix("descriptor "))
            .unwrap_or_default()
            .to_string();
        if lines.next().map(str::trim) != Some("nu") {
            return Err(Error::data("pristine model: missing nu section"));
        }
        let mut mean = Vec::with_capacity(d);
        for _ in 0..d {
            let l = lines
                .next()
                .ok_or_else(|| Error::data("pristine model: truncated nu"))?;
            mean.push(
                l.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::data(format!("pristine model nu: {e}")))?,
            );
        }
        if lines.next().map(str::trim) != Some("sigma") {
            return Err(Error::data("pristine model: missing sigma section"));
        }
        let mut cov = SymMatrix::zeros(d);
        for i in 0..d {
            let l = lines
                .next()
                .ok_or_else(|| Error::data("pristine model: truncated sigma"))?;
            let vals: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::data(format!("pristine model sigma: {e}")))?;
            if vals.len() != d {
                return Err(Error::data("pristine model: sigma row length mismatch"));
            }
            for (j, v) in vals.into_iter().enumerate() {
                cov.set(i, j, v);
            }
        }
        let model = PristineModel {
            feature_dim: d,
            mean,
            covariance: cov,
            corpus_descriptor: descriptor,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    /// The model fitted on the bundled procedural clean corpus, so labeling
    /// works out of the box. Refit with your own corpus where possible.
    pub fn bundled() -> Result<Self> {
        Self::from_text(include_str!("../assets/pristine.model"))
    }
}
