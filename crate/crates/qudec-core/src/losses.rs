//! The confidence-weighted loss family.
//!
//! Sums are mean-reduced per element within each scale (and per patch cell),
//! then summed across scales, so the loss magnitudes are independent of the
//! image resolution and the published weight defaults stay meaningful
//! (`reduction=mean` is recorded in [`LossWeights`]).
//!
//! Sign structure: the fidelity term and the perceptual term are nonnegative,
//! the confidence regularizer is a sum of logs of values in (0,1] and is
//! therefore nonpositive, entering the total with weight `-lambda1` so that
//! minimizing the total pushes confidences toward 1.

use serde::{Deserialize, Serialize};

use crate::tape::{Tape, ValId, WSrc};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Loss weights; the paper-published defaults.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_cs: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 1.0,
            lambda_cs: 0.1,
        }
    }
}

/// Scalar values of every loss component for one step.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_c: f64,
    pub l_cs: f64,
    pub l_p: f64,
    pub l_u: f64,
    pub total: f64,
    /// Set when every label cell was boundary-masked (L_cs defined as 0).
    pub all_label_cells_masked: bool,
}

impl LossBreakdown {
    pub fn csv_header() -> &'static str {
        "step,l_r,l_c,l_cs,l_p,total,lambda1,lambda2,lambda_cs,mean_c"
    }

    pub fn csv_row(&self, step: usize, w: &LossWeights, mean_c: f64) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{},{},{},{:.6}",
            step, self.l_r, self.l_c, self.l_cs, self.l_p, self.total, w.lambda1, w.lambda2,
            w.lambda_cs, mean_c
        )
    }
}

/// Confidence-weighted fidelity: sum over scales of mean((c ⊙ (x̂ - x))²).
/// `scales` holds (x̂_i, x_i, c_i) triples.
pub fn residual_fidelity_loss<T: Scalar>(
    tape: &mut Tape<T>,
    scales: &[(ValId, ValId, ValId)],
) -> ValId {
    assert!(!scales.is_empty());
    let mut acc: Option<ValId> = None;
    for &(xhat, x, c) in scales {
        assert_eq!(
            tape.value(xhat).shape(),
            tape.value(x).shape(),
            "fidelity loss: prediction/target shape mismatch"
        );
        assert_eq!(
            tape.value(xhat).shape(),
            tape.value(c).shape(),
            "fidelity loss: confidence shape mismatch"
        );
        let d = tape.sub(xhat, x);
        let wd = tape.mul(c, d);
        let sq = tape.mul(wd, wd);
        let m = tape.mean(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, m),
            None => m,
        });
    }
    acc.unwrap()
}

/// Sum over scales of mean(log c). Nonpositive for c in (0,1], zero only when
/// every confidence equals 1.
pub fn confidence_regularizer<T: Scalar>(tape: &mut Tape<T>, maps: &[ValId]) -> ValId {
    assert!(!maps.is_empty());
    let mut acc: Option<ValId> = None;
    for &c in maps {
        assert!(
            tape.value(c).min_value() > T::ZERO,
            "confidence regularizer received a non-positive value; the floor failed upstream"
        );
        let l = tape.ln(c);
        let m = tape.mean(l);
        acc = Some(match acc {
            Some(a) => tape.add(a, m),
            None => m,
        });
    }
    acc.unwrap()
}

/// Per-cell cross entropy between predicted class probabilities (3,gh,gw) and
/// one-hot targets, in the binary per-class form averaged over classes.
/// Probabilities are clamped to [1e-7, 1-1e-7] before the logs.
pub fn cross_entropy_cells<T: Scalar>(tape: &mut Tape<T>, probs: ValId, target: ValId) -> ValId {
    assert_eq!(
        tape.value(probs).shape(),
        tape.value(target).shape(),
        "cross entropy: probs/target shape mismatch"
    );
    let p = tape.clamp(probs, 1e-7, 1.0 - 1e-7);
    let ln_p = tape.ln(p);
    let neg_p = tape.scale(p, -1.0);
    let one_minus_p = tape.add_scalar(neg_p, 1.0);
    let ln_1mp = tape.ln(one_minus_p);
    let neg_t = tape.scale(target, -1.0);
    let one_minus_t = tape.add_scalar(neg_t, 1.0);
    let a = tape.mul(target, ln_p);
    let b = tape.mul(one_minus_t, ln_1mp);
    let s = tape.add(a, b);
    let ce3 = tape.scale(s, -1.0);
    let summed = tape.sum_c(ce3);
    tape.scale(summed, 1.0 / 3.0) // (1,gh,gw)
}

/// Label confidence loss: mean over unmasked cells of
/// c_s * CE(ŝ, s) - lambda_cs * log(c_s). `mask` is a (1,gh,gw) constant with
/// 1 on supervised cells and 0 on boundary cells. Returns the loss node and
/// whether every cell was masked out (loss defined as 0 in that case).
pub fn label_confidence_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: ValId,
    target: ValId,
    cs: ValId,
    mask: ValId,
    lambda_cs: f64,
) -> (ValId, bool) {
    assert!(
        tape.value(cs).min_value() > T::ZERO,
        "label confidence loss received a non-positive confidence"
    );
    let ce = cross_entropy_cells(tape, probs, target);
    assert_eq!(
        tape.value(ce).shape(),
        tape.value(cs).shape(),
        "label confidence loss: grid shape mismatch"
    );
    let weighted = tape.mul(cs, ce);
    let ln_cs = tape.ln(cs);
    let pen = tape.scale(ln_cs, -lambda_cs);
    let cell = tape.add(weighted, pen);
    let masked = tape.mul(cell, mask);
    let count: f64 = tape.value(mask).data().iter().map(|v| v.to_f64()).sum();
    let all_masked = count == 0.0;
    if all_masked {
        log::warn!("label confidence loss: every patch cell is boundary-masked; L_cs := 0");
    }
    let s = tape.sum(masked);
    let loss = tape.scale(s, if all_masked { 0.0 } else { 1.0 / count });
    (loss, all_masked)
}

/// Fixed feature extractor for the perceptual term.
///
/// The default is the conventional pretrained-VGG16 `relu1_2` stack loaded
/// from a weights archive. When no weights file is available the extractor
/// falls back to a two-layer convolution stack with frozen seeded random
/// weights, which preserves every metric property the loss relies on
/// (zero at equality, nonnegative, symmetric).
pub struct PerceptualExtractor<T: Scalar> {
    /// (weight, bias) per conv layer, each followed by ReLU.
    convs: Vec<(Tensor<T>, Tensor<T>)>,
    /// Optional per-channel input affine (1x1 conv weight, bias).
    input_affine: Option<(Tensor<T>, Tensor<T>)>,
    pub descriptor: String,
}

impl<T: Scalar> PerceptualExtractor<T> {
    /// Two 3x3 conv layers (3→16→16) with fixed seeded Gaussian weights.
    pub fn seeded_fallback(seed: u64) -> Self {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        for (cin, cout) in [(3usize, 16usize), (16, 16)] {
            let std = (2.0 / (cin as f64 * 9.0)).sqrt();
            let w: Vec<T> = (0..cout * cin * 9)
                .map(|_| {
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    T::from_f64(n * std)
                })
                .collect();
            convs.push((
                Tensor::from_vec(&[cout, cin, 3, 3], w),
                Tensor::zeros(&[cout]),
            ));
        }
        PerceptualExtractor {
            convs,
            input_affine: None,
            descriptor: format!("seeded-random-2conv(seed={seed})"),
        }
    }

    /// Feature map of a network-space image node (both conv layers + ReLU).
    pub fn features(&self, tape: &mut Tape<T>, x: ValId) -> ValId {
        let mut cur = x;
        if let Some((w, b)) = &self.input_affine {
            let wid = tape.input(w.clone());
            let bid = tape.input(b.clone());
            cur = tape.conv2d(cur, WSrc::Node(wid), Some(WSrc::Node(bid)), 1);
        }
        for (w, b) in &self.convs {
            let wid = tape.input(w.clone());
            let bid = tape.input(b.clone());
            let c = tape.conv2d(cur, WSrc::Node(wid), Some(WSrc::Node(bid)), 1);
            cur = tape.relu(c);
        }
        cur
    }
}

impl PerceptualExtractor<f32> {
    /// Loads VGG16 conv1_1/conv1_2 weights from a parameter archive with
    /// entries `vgg16.conv1_1.weight/.bias` and `vgg16.conv1_2.weight/.bias`.
    /// Input is mapped from network space [-1,1] to the ImageNet-normalized
    /// range via a fixed per-channel affine.
    pub fn from_vgg_archive(path: &std::path::Path) -> Result<Self> {
        let archive = crate::checkpoint::read_archive(path)?;
        let get = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
            let e = archive
                .find(name)
                .ok_or_else(|| Error::data(format!("vgg archive is missing {name}")))?;
            if e.tensor.shape() != shape {
                return Err(Error::contract(format!(
                    "vgg archive entry {name} has shape {:?}, expected {:?}",
                    e.tensor.shape(),
                    shape
                )));
            }
            Ok(e.tensor.clone())
        };
        let w1 = get("vgg16.conv1_1.weight", &[64, 3, 3, 3])?;
        let b1 = get("vgg16.conv1_1.bias", &[64])?;
        let w2 = get("vgg16.conv1_2.weight", &[64, 64, 3, 3])?;
        let b2 = get("vgg16.conv1_2.bias", &[64])?;
        // net [-1,1] -> [0,1] -> (v - mean)/std, folded into one affine
        let mean = [0.485f64, 0.456, 0.406];
        let std = [0.229f64, 0.224, 0.225];
        let mut aw = Tensor::zeros(&[3, 3, 1, 1]);
        let mut ab = Tensor::zeros(&[3]);
        for c in 0..3 {
            aw.data_mut()[c * 3 + c] = (0.5 / std[c]) as f32;
            ab.data_mut()[c] = ((0.5 - mean[c]) / std[c]) as f32;
        }
        Ok(PerceptualExtractor {
            convs: vec![(w1, b1), (w2, b2)],
            input_affine: Some((aw, ab)),
            descriptor: format!("vgg16-relu1_2({})", path.display()),
        })
    }

    /// VGG16 weights when the archive exists, otherwise the seeded fallback
    /// with a logged notice.
    pub fn vgg_or_fallback(path: Option<&std::path::Path>, seed: u64) -> Self {
        if let Some(p) = path {
            match Self::from_vgg_archive(p) {
                Ok(e) => return e,
                Err(err) => log::warn!(
                    "perceptual extractor weights unavailable ({err}); \
                     falling back to the fixed-seed random extractor"
                ),
            }
        } else {
            log::info!(
                "no perceptual weights file supplied; using the fixed-seed random extractor"
            );
        }
        Self::seeded_fallback(seed)
    }
}

/// Mean squared feature difference, normalized by the feature-map size.
pub fn perceptual_loss<T: Scalar>(
    tape: &mut Tape<T>,
    xhat: ValId,
    x: ValId,
    extractor: &PerceptualExtractor<T>,
) -> ValId {
    assert_eq!(
        tape.value(xhat).shape(),
        tape.value(x).shape(),
        "perceptual loss: shape mismatch"
    );
    let fa = extractor.features(tape, xhat);
    let fb = extractor.features(tape, x);
    let d = tape.sub(fa, fb);
    let sq = tape.mul(d, d);
    tape.mean(sq)
}

/// Everything the total loss needs. `scales` are (x̂_i, x_i, c_i); at the x1
/// scale x̂ is the refinement output, at x2/x4 it is y_i - r̂_i.
pub struct LossInputs<'a, T: Scalar> {
    pub scales: Vec<(ValId, ValId, ValId)>,
    pub confidences: Vec<ValId>,
    pub probs: ValId,
    pub target_onehot: ValId,
    pub label_confidence: ValId,
    pub mask: ValId,
    pub xhat_full: ValId,
    pub x_full: ValId,
    pub extractor: Option<&'a PerceptualExtractor<T>>,
    pub weights: LossWeights,
}

/// Assembles L = L_r + L_cs - lambda1 * L_c + lambda2 * L_p and returns the
/// total node plus the numeric breakdown (checked finite).
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    inputs: &LossInputs<T>,
) -> Result<(ValId, LossBreakdown)> {
    let w = inputs.weights;
    let l_r = residual_fidelity_loss(tape, &inputs.scales);
    let l_c = confidence_regularizer(tape, &inputs.confidences);
    let (l_cs, all_masked) = label_confidence_loss(
        tape,
        inputs.probs,
        inputs.target_onehot,
        inputs.label_confidence,
        inputs.mask,
        w.lambda_cs,
    );
    let l_p = match inputs.extractor {
        Some(ex) => perceptual_loss(tape, inputs.xhat_full, inputs.x_full, ex),
        None => {
            let zero = tape.input(Tensor::scalar_value(T::ZERO));
            zero
        }
    };
    let a = tape.add(l_r, l_cs);
    let c_term = tape.scale(l_c, -w.lambda1);
    let l_u = tape.add(a, c_term);
    let p_term = tape.scale(l_p, w.lambda2);
    let total = tape.add(l_u, p_term);

    let breakdown = LossBreakdown {
        l_r: tape.value(l_r).item().to_f64(),
        l_c: tape.value(l_c).item().to_f64(),
        l_cs: tape.value(l_cs).item().to_f64(),
        l_p: tape.value(l_p).item().to_f64(),
        l_u: tape.value(l_u).item().to_f64(),
        total: tape.value(total).item().to_f64(),
        all_label_cells_masked: all_masked,
    };
    for (name, v) in [
        ("L_r", breakdown.l_r),
        ("L_c", breakdown.l_c),
        ("L_cs", breakdown.l_cs),
        ("L_p", breakdown.l_p),
        ("total", breakdown.total),
    ] {
        if !v.is_finite() {
            return Err(Error::contract(format!(
                "loss component {name} is non-finite ({v}); breakdown: {breakdown:?}"
            )));
        }
    }
    Ok((total, breakdown))
}
