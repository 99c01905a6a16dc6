//! Training orchestration: optimizer, schedules, target construction and
//! the resumable epoch loops for the de-raining network and the patch label
//! classifier.
//!
//! Batch size is 1 ("overridable only with an explicit flag", but the step
//! function itself is single-sample). Checkpoints are written every epoch and
//! carry optimizer moments plus the schedule state; per-epoch RNG streams are
//! derived from (seed, epoch), so resuming from an epoch boundary reproduces
//! a fresh run exactly.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::RainPair;
use crate::labeling::{DistortionLabel, GlnDataset, LabelMap};
use crate::losses::{total_loss, LossBreakdown, LossInputs, LossWeights, PerceptualExtractor};
use crate::model::{to_net_space, ModelConfig, QudecModel};
use crate::tape::{Grads, ParamStore, Tape};
use crate::tensor::{downsample_area, pad_reflect, Scalar, Tensor};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelSourceChoice {
    /// Labels predicted by the trained patch classifier (default).
    Gln,
    /// Labels computed directly from quality scores.
    NiqeDirect,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_after_epoch_20: f64,
    pub epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_cs: f64,
    pub seed: u64,
    pub device: String,
    /// Global-norm gradient clip; enabled by default in desk mode only.
    pub grad_clip: Option<f64>,
    pub desk_mode: bool,
    pub label_source: LabelSourceChoice,
    pub augment_flips: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1,
            lr_initial: 0.0002,
            lr_after_epoch_20: 0.0001,
            epochs: 60,
            lambda1: 0.1,
            lambda2: 1.0,
            lambda_cs: 0.1,
            seed: 0,
            device: "cpu".into(),
            grad_clip: None,
            desk_mode: false,
            label_source: LabelSourceChoice::Gln,
            augment_flips: true,
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            desk_mode: true,
            grad_clip: Some(5.0),
            label_source: LabelSourceChoice::NiqeDirect,
            ..Default::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda_cs: self.lambda_cs,
        }
    }

    /// Flat `key = value` serialization; every field is a documented key.
    pub fn to_text(&self) -> String {
        let ls = match self.label_source {
            LabelSourceChoice::Gln => "gln",
            LabelSourceChoice::NiqeDirect => "niqe",
        };
        let clip = self
            .grad_clip
            .map(|v| v.to_string())
            .unwrap_or_else(|| "none".into());
        format!(
            "batch_size = {}\nlr_initial = {}\nlr_after_epoch_20 = {}\nepochs = {}\n\
             lambda1 = {}\nlambda2 = {}\nlambda_cs = {}\nseed = {}\ndevice = {}\n\
             grad_clip = {}\ndesk_mode = {}\nlabel_source = {}\naugment_flips = {}\n",
            self.batch_size,
            self.lr_initial,
            self.lr_after_epoch_20,
            self.epochs,
            self.lambda1,
            self.lambda2,
            self.lambda_cs,
            self.seed,
            self.device,
            clip,
            self.desk_mode,
            ls,
            self.augment_flips,
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::data(format!("config line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn std::fmt::Display| {
                Error::data(format!("config key {key}: bad value {value:?} ({e})"))
            };
            match key {
                "batch_size" => cfg.batch_size = value.parse().map_err(|e| bad(&e))?,
                "lr_initial" => cfg.lr_initial = value.parse().map_err(|e| bad(&e))?,
                "lr_after_epoch_20" => cfg.lr_after_epoch_20 = value.parse().map_err(|e| bad(&e))?,
                "epochs" => cfg.epochs = value.parse().map_err(|e| bad(&e))?,
                "lambda1" => cfg.lambda1 = value.parse().map_err(|e| bad(&e))?,
                "lambda2" => cfg.lambda2 = value.parse().map_err(|e| bad(&e))?,
                "lambda_cs" => cfg.lambda_cs = value.parse().map_err(|e| bad(&e))?,
                "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
                "device" => cfg.device = value.to_string(),
                "grad_clip" => {
                    cfg.grad_clip = if value == "none" {
                        None
                    } else {
                        Some(value.parse().map_err(|e| bad(&e))?)
                    }
                }
                "desk_mode" => cfg.desk_mode = value.parse().map_err(|e| bad(&e))?,
                "label_source" => {
                    cfg.label_source = match value {
                        "gln" => LabelSourceChoice::Gln,
                        "niqe" => LabelSourceChoice::NiqeDirect,
                        other => return Err(Error::data(format!("label_source {other:?} (use gln|niqe)"))),
                    }
                }
                "augment_flips" => cfg.augment_flips = value.parse().map_err(|e| bad(&e))?,
                other => return Err(Error::data(format!("unknown config key {other:?}"))),
            }
        }
        if cfg.batch_size != 1 {
            log::warn!(
                "batch_size = {} overrides the published setting of 1",
                cfg.batch_size
            );
        }
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// schedules
// ---------------------------------------------------------------------------

/// Learning rate: the initial rate for the first 20 epochs, then halved.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    assert!(epoch >= 1, "epochs are 1-based");
    if epoch <= 20 {
        cfg.lr_initial
    } else {
        cfg.lr_after_epoch_20
    }
}

/// Confidence-regularizer weight: 0.03 once the mean confidence exceeds 0.8
/// (strict inequality), else 0.1.
pub fn lambda1_schedule(mean_confidence: f64) -> f64 {
    if mean_confidence > 0.8 {
        0.03
    } else {
        0.1
    }
}

/// Mutable schedule state carried across steps. The lambda1 switch latches:
/// once the mean confidence has exceeded 0.8 the weight stays at 0.03.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScheduleState {
    pub epoch: usize,
    pub lambda1: f64,
    pub latched: bool,
    pub mean_confidence: f64,
}

impl Default for ScheduleState {
    fn default() -> Self {
        ScheduleState {
            epoch: 1,
            lambda1: 0.1,
            latched: false,
            mean_confidence: 0.0,
        }
    }
}

impl ScheduleState {
    /// Updates from the step's confidence maps and re-evaluates lambda1.
    pub fn observe_confidence(&mut self, mean_confidence: f64) {
        self.mean_confidence = mean_confidence;
        if !self.latched && lambda1_schedule(mean_confidence) == 0.03 {
            self.latched = true;
        }
        self.lambda1 = if self.latched {
            0.03
        } else {
            lambda1_schedule(mean_confidence)
        };
    }
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// Adam with the standard defaults (beta1 0.9, beta2 0.999, eps 1e-8).
pub struct Adam {
    m: Vec<Option<Tensor<f32>>>,
    v: Vec<Option<Tensor<f32>>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>) -> Self {
        Adam {
            m: (0..store.len()).map(|_| None).collect(),
            v: (0..store.len()).map(|_| None).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Grads<f32>, lr: f64) {
        self.t += 1;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let eps = self.eps as f32;
        for (pid, g) in grads.by_param.iter().enumerate() {
            let Some(g) = g else { continue };
            if !store.is_trainable(pid) {
                continue;
            }
            let m = self.m[pid].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[pid].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(pid);
            let step = (lr / bc1) as f32;
            let bc2s = (1.0 / bc2) as f32;
            for ((pv, mv), (vv, &gv)) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut().iter_mut().zip(g.data()))
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let vhat = *vv * bc2s;
                *pv -= step * *mv / (vhat.sqrt() + eps);
            }
        }
    }

    /// Moment arrays for checkpointing, named `optim.{m,v}.<param>`.
    pub fn export_arrays(&self, store: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for pid in 0..store.len() {
            if let Some(m) = &self.m[pid] {
                out.push((format!("optim.m.{}", store.name(pid)), m.clone()));
            }
            if let Some(v) = &self.v[pid] {
                out.push((format!("optim.v.{}", store.name(pid)), v.clone()));
            }
        }
        out
    }

    pub fn import_arrays(
        &mut self,
        store: &ParamStore<f32>,
        arrays: &[crate::checkpoint::ArchiveEntry],
        t: u64,
    ) {
        self.t = t;
        for e in arrays {
            if let Some(name) = e.name.strip_prefix("optim.m.") {
                if let Some(pid) = store.find(name) {
                    self.m[pid] = Some(e.tensor.clone());
                }
            } else if let Some(name) = e.name.strip_prefix("optim.v.") {
                if let Some(pid) = store.find(name) {
                    self.v[pid] = Some(e.tensor.clone());
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// targets and augmentation
// ---------------------------------------------------------------------------

/// Clean/rainy images at the three training scales, in network space.
pub struct ScaleTargets {
    pub x1: Tensor<f32>,
    pub x2: Tensor<f32>,
    pub x4: Tensor<f32>,
    pub y2: Tensor<f32>,
    pub y4: Tensor<f32>,
}

/// Area down-sampling of the clean and rainy images by 2 and 4.
/// Inputs are [0,1] file-space images with extents divisible by 4.
pub fn multi_scale_targets(x01: &Tensor<f64>, y01: &Tensor<f64>) -> Result<ScaleTargets> {
    if x01.shape() != y01.shape() {
        return Err(Error::contract("multi_scale_targets: shape mismatch"));
    }
    let (_, h, w) = x01.chw();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::contract(format!(
            "multi_scale_targets: {h}x{w} not divisible by 4; pad first"
        )));
    }
    let x1 = to_net_space(x01);
    let x2 = to_net_space(&downsample_area(x01, 2));
    let x4 = to_net_space(&downsample_area(x01, 4));
    let y2 = to_net_space(&downsample_area(y01, 2));
    let y4 = to_net_space(&downsample_area(y01, 4));
    Ok(ScaleTargets { x1, x2, x4, y2, y4 })
}

pub fn flip_horizontal<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = t.chw();
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        let src = t.channel(ci);
        let dst = out.channel_mut(ci);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[y * w + (w - 1 - x)];
            }
        }
    }
    out
}

/// Mirrors the label grid to match a horizontally flipped image.
pub fn flip_label_map(map: &LabelMap) -> LabelMap {
    let mut grid = map.grid.clone();
    for gy in 0..map.gh {
        grid[gy * map.gw..(gy + 1) * map.gw].reverse();
    }
    let scores = map.scores.as_ref().map(|s| {
        let mut s = s.clone();
        for gy in 0..map.gh {
            s[gy * map.gw..(gy + 1) * map.gw].reverse();
        }
        s
    });
    LabelMap {
        grid,
        scores,
        ..map.clone()
    }
}

// ---------------------------------------------------------------------------
// steps
// ---------------------------------------------------------------------------

pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    pub mean_confidence: f64,
    pub lambda1_used: f64,
    pub grad_norm: f64,
}

/// One optimizer step on one (rainy, clean, labels) triple. The images must
/// already be padded to patch-size multiples; labels are grid one-hot +
/// boundary mask matching the padded grid.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut QudecModel,
    adam: &mut Adam,
    y01: &Tensor<f64>,
    x01: &Tensor<f64>,
    target_onehot: &Tensor<f64>,
    mask: &Tensor<f64>,
    extractor: &PerceptualExtractor<f32>,
    state: &mut ScheduleState,
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    let targets = multi_scale_targets(x01, y01)?;
    let y_net = to_net_space(y01);
    let mut weights = cfg.loss_weights();
    weights.lambda1 = state.lambda1;
    let lambda1_used = state.lambda1;
    let lr = learning_rate(cfg, state.epoch);

    let mut tape = Tape::training(&mut model.store);
    let yid = tape.input(y_net);
    let nodes = model.net.forward_padded(&mut tape, yid);
    let x1 = tape.input(targets.x1);
    let x2 = tape.input(targets.x2);
    let x4 = tape.input(targets.x4);
    let t_oh = tape.input(target_onehot.cast::<f32>());
    let m = tape.input(mask.cast::<f32>());
    let inputs = LossInputs {
        scales: vec![
            (nodes.xhat, x1, nodes.c1),
            (nodes.xhat2, x2, nodes.c2),
            (nodes.xhat4, x4, nodes.c4),
        ],
        confidences: vec![nodes.c1, nodes.c2, nodes.c4],
        probs: nodes.probs,
        target_onehot: t_oh,
        label_confidence: nodes.cs,
        mask: m,
        xhat_full: nodes.xhat,
        x_full: x1,
        extractor: Some(extractor),
        weights,
    };
    let (total, breakdown) = total_loss(&mut tape, &inputs)?;

    // mean over every element of the three confidence maps from this step
    let mean_confidence = {
        let (mut sum, mut count) = (0.0f64, 0usize);
        for id in [nodes.c1, nodes.c2, nodes.c4] {
            let t = tape.value(id);
            sum += t.data().iter().map(|v| *v as f64).sum::<f64>();
            count += t.len();
        }
        sum / count as f64
    };

    let mut grads = tape.backward(total);
    drop(tape);
    if !grads.all_finite() {
        return Err(Error::contract(format!(
            "non-finite gradient; aborting step. breakdown: {breakdown:?}"
        )));
    }
    let grad_norm = match cfg.grad_clip {
        Some(maxn) => grads.clip_global_norm(maxn),
        None => grads.global_norm(),
    };
    adam.step(&mut model.store, &grads, lr);
    state.observe_confidence(mean_confidence);

    Ok(StepOutcome {
        breakdown,
        mean_confidence,
        lambda1_used,
        grad_norm,
    })
}

// ---------------------------------------------------------------------------
// epoch loops
// ---------------------------------------------------------------------------

pub struct TrainRun {
    pub model: QudecModel,
    pub state: ScheduleState,
    pub log_csv: String,
    pub steps: usize,
}

/// Prepared per-pair training example (padded images + padded-grid labels).
pub struct TrainExample {
    pub y01: Tensor<f64>,
    pub x01: Tensor<f64>,
    pub onehot: Tensor<f64>,
    pub mask: Tensor<f64>,
}

/// Pads a pair and its label map to patch-size multiples.
pub fn prepare_example(pair: &RainPair, labels: &LabelMap, patch: usize) -> Result<TrainExample> {
    let (_, h, w) = pair.rainy.chw();
    if labels.src_h != h || labels.src_w != w {
        return Err(Error::contract(format!(
            "label map was generated for {}x{}, image is {}x{}",
            labels.src_w, labels.src_h, w, h
        )));
    }
    let ph = h.div_ceil(patch) * patch;
    let pw = w.div_ceil(patch) * patch;
    if labels.gh != ph / patch || labels.gw != pw / patch {
        return Err(Error::contract("label grid does not match the padded image"));
    }
    let (onehot, mask) = labels.to_targets_and_mask();
    Ok(TrainExample {
        y01: pad_reflect(&pair.rainy, ph, pw),
        x01: pad_reflect(&pair.clean, ph, pw),
        onehot,
        mask,
    })
}

/// Trains the de-raining network for `cfg.epochs` epochs over the dataset,
/// checkpointing each epoch into `out_dir` when given. `labels[i]` must
/// correspond to `dataset[i]`. Resumable via `resume_from`.
pub fn train_qudec(
    dataset: &[RainPair],
    labels: &[LabelMap],
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume_from: Option<&Path>,
) -> Result<TrainRun> {
    if dataset.is_empty() {
        return Err(Error::data("training dataset is empty"));
    }
    if dataset.len() != labels.len() {
        return Err(Error::contract("one label map per training pair required"));
    }
    let patch = model_cfg.patch_size;
    let extractor = PerceptualExtractor::<f32>::seeded_fallback(cfg.seed ^ 0x5eed);

    let (mut model, mut adam, mut state, start_epoch) = match resume_from {
        Some(path) => {
            let (model, meta, extras) = checkpoint::load_model(path)?;
            let state: ScheduleState = serde_json::from_value(meta["schedule"].clone())
                .map_err(|e| Error::data(format!("checkpoint schedule state: {e}")))?;
            let epoch = meta["epoch"].as_u64().unwrap_or(0) as usize;
            let t = meta["adam_t"].as_u64().unwrap_or(0);
            let mut adam = Adam::new(&model.store);
            adam.import_arrays(&model.store, &extras, t);
            log::info!("resumed from {} at epoch {epoch}", path.display());
            (model, adam, state, epoch + 1)
        }
        None => {
            let model = QudecModel::new(model_cfg.clone(), cfg.seed);
            let adam = Adam::new(&model.store);
            (model, adam, ScheduleState::default(), 1)
        }
    };

    let mut log_csv = format!("{},epoch,lr\n", LossBreakdown::csv_header());
    let mut steps = 0usize;
    for epoch in start_epoch..=cfg.epochs {
        state.epoch = epoch;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37));
        order.shuffle(&mut rng);
        for &i in &order {
            let flip = cfg.augment_flips && rng.gen_bool(0.5);
            let (pair, lmap);
            if flip {
                pair = RainPair {
                    id: dataset[i].id.clone(),
                    rainy: flip_horizontal(&dataset[i].rainy),
                    clean: flip_horizontal(&dataset[i].clean),
                };
                lmap = flip_label_map(&labels[i]);
            } else {
                pair = dataset[i].clone();
                lmap = labels[i].clone();
            }
            let ex = prepare_example(&pair, &lmap, patch)?;
            let out = train_step(
                &mut model, &mut adam, &ex.y01, &ex.x01, &ex.onehot, &ex.mask, &extractor,
                &mut state, cfg,
            )?;
            steps += 1;
            let w = cfg.loss_weights();
            log_csv.push_str(&format!(
                "{},{},{}\n",
                out.breakdown.csv_row(steps, &w, out.mean_confidence),
                epoch,
                learning_rate(cfg, epoch)
            ));
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            let meta = serde_json::json!({
                "epoch": epoch,
                "adam_t": adam.t,
                "schedule": state,
                "train_config": cfg,
            });
            let extra = adam.export_arrays(&model.store);
            checkpoint::save_model(&dir.join(format!("qudec_epoch_{epoch:03}.ckpt")), &model, meta.clone(), &extra)?;
            checkpoint::save_model(&dir.join("qudec_latest.ckpt"), &model, meta, &extra)?;
            std::fs::write(dir.join("train_log.csv"), &log_csv)?;
        }
    }
    Ok(TrainRun {
        model,
        state,
        log_csv,
        steps,
    })
}

// ---------------------------------------------------------------------------
// label classifier training
// ---------------------------------------------------------------------------

pub struct GlnTrainReport {
    /// Training accuracy per epoch (fraction of correct argmax predictions
    /// measured on the pre-update forward of each step).
    pub epoch_accuracy: Vec<f64>,
    pub steps: usize,
}

/// Trains the patch label classifier with categorical cross entropy at the
/// published fixed rate for `epochs` epochs. Only classifier parameters
/// receive gradients.
pub fn train_gln(
    model: &mut QudecModel,
    dataset: &GlnDataset,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<GlnTrainReport> {
    if dataset.pairs.is_empty() {
        return Err(Error::data("label classifier dataset is empty"));
    }
    let classes: std::collections::BTreeSet<usize> = dataset
        .pairs
        .iter()
        .filter_map(|(_, l)| l.class_index())
        .collect();
    if classes.len() < 2 {
        log::warn!(
            "label classifier dataset has a single class; training proceeds but \
             the classifier will be degenerate"
        );
    }
    let mut adam = Adam::new(&model.store);
    let mut report = GlnTrainReport {
        epoch_accuracy: Vec::with_capacity(epochs),
        steps: 0,
    };
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..dataset.pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x517c));
        order.shuffle(&mut rng);
        let mut correct = 0usize;
        for &i in &order {
            let (patch01, label) = &dataset.pairs[i];
            let class = label
                .class_index()
                .ok_or_else(|| Error::contract("boundary patch in classifier dataset"))?;
            let patch_net = to_net_space(patch01);
            let mut onehot = Tensor::zeros(&[3, 1, 1]);
            onehot.data_mut()[class] = 1.0f32;
            let mut tape = Tape::training(&mut model.store);
            let pid = tape.input(patch_net);
            let logits = model.net.gln_logits(&mut tape, pid);
            let probs = tape.softmax_c(logits);
            {
                let p = tape.value(probs).data();
                let arg = (0..3).max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap()).unwrap();
                if arg == class {
                    correct += 1;
                }
            }
            let clamped = tape.clamp(probs, 1e-7, 1.0 - 1e-7);
            let lnp = tape.ln(clamped);
            let ohid = tape.input(onehot);
            let picked = tape.mul(ohid, lnp);
            let s = tape.sum(picked);
            let loss = tape.scale(s, -1.0);
            if !tape.value(loss).item().is_finite() {
                return Err(Error::contract("non-finite classifier loss"));
            }
            let grads = tape.backward(loss);
            drop(tape);
            adam.step(&mut model.store, &grads, lr);
            report.steps += 1;
        }
        let acc = correct as f64 / dataset.pairs.len() as f64;
        report.epoch_accuracy.push(acc);
        log::info!("label classifier epoch {epoch}: training accuracy {acc:.3}");
    }
    Ok(report)
}

/// Inference-mode classifier prediction for one [0,1] patch.
pub fn gln_predict(model: &mut QudecModel, patch01: &Tensor<f64>) -> Result<DistortionLabel> {
    let patch_net = to_net_space(patch01);
    let mut tape = Tape::inference(&mut model.store);
    let pid = tape.input(patch_net);
    let probs = model.net.gln(&mut tape, pid);
    let p = tape.value(probs).data();
    let arg = (0..3).max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap()).unwrap();
    Ok(DistortionLabel::from_class_index(arg))
}

/// Label map for an image predicted patch-by-patch by the classifier.
pub fn gln_label_map(model: &mut QudecModel, img01: &Tensor<f64>) -> Result<LabelMap> {
    let (_, h, w) = img01.chw();
    let (patches, (gh, gw)) = crate::data::extract_patches(img01, 128, 128);
    let mut grid = Vec::with_capacity(patches.len());
    for p in &patches {
        grid.push(gln_predict(model, p)?);
    }
    Ok(LabelMap {
        grid,
        gh,
        gw,
        patch_size: 128,
        src_h: h,
        src_w: w,
        source: crate::labeling::LabelSource::GlnPredicted,
        scores: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_schedule_exact() {
        let cfg = TrainConfig::default();
        assert_eq!(learning_rate(&cfg, 5), 0.0002);
        assert_eq!(learning_rate(&cfg, 20), 0.0002);
        assert_eq!(learning_rate(&cfg, 21), 0.0001);
        assert_eq!(learning_rate(&cfg, 60), 0.0001);
    }

    #[test]
    fn lambda1_schedule_exact_and_latched() {
        assert_eq!(lambda1_schedule(0.85), 0.03);
        assert_eq!(lambda1_schedule(0.8), 0.1);
        assert_eq!(lambda1_schedule(0.5), 0.1);
        let mut st = ScheduleState::default();
        st.observe_confidence(0.5);
        assert_eq!(st.lambda1, 0.1);
        st.observe_confidence(0.85);
        assert_eq!(st.lambda1, 0.03);
        // latched: dropping below 0.8 keeps the switched value
        st.observe_confidence(0.4);
        assert_eq!(st.lambda1, 0.03);
        assert!(st.latched);
    }

    #[test]
    fn multi_scale_targets_shapes_and_identities() {
        let x = crate::data::procedural_clean_image(256, 256, 1);
        let t = multi_scale_targets(&x, &x).unwrap();
        assert_eq!(t.x2.shape(), &[3, 128, 128]);
        assert_eq!(t.x4.shape(), &[3, 64, 64]);
        // x == y: residual targets y_k - x_k vanish at every scale
        for (a, b) in [(&t.y2, &t.x2), (&t.y4, &t.x4)] {
            for (va, vb) in a.data().iter().zip(b.data()) {
                assert_eq!(va, vb);
            }
        }
        // constant image stays constant after downsampling
        let c = Tensor::full(&[3, 64, 64], 0.25);
        let tc = multi_scale_targets(&c, &c).unwrap();
        assert!(tc
            .x4
            .data()
            .iter()
            .all(|&v| (v - (2.0 * 0.25 - 1.0) as f32).abs() < 1e-6));
    }

    #[test]
    fn config_text_roundtrip() {
        let mut cfg = TrainConfig::desk();
        cfg.seed = 777;
        cfg.lambda2 = 0.5;
        let text = cfg.to_text();
        let back = TrainConfig::from_text(&text).unwrap();
        assert_eq!(back.seed, 777);
        assert_eq!(back.lambda2, 0.5);
        assert_eq!(back.grad_clip, Some(5.0));
        assert!(back.desk_mode);
        assert_eq!(back.label_source, LabelSourceChoice::NiqeDirect);
        assert!(TrainConfig::from_text("nonsense_key = 3").is_err());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let p = store.add("p", Tensor::full(&[4], 5.0f32), true);
        let mut adam = Adam::new(&store);
        for _ in 0..500 {
            let grads = {
                let mut tape = Tape::training_frozen(&mut store);
                let pv = tape.param(p);
                let sq = tape.mul(pv, pv);
                let loss = tape.mean(sq);
                tape.backward(loss)
            };
            adam.step(&mut store, &grads, 0.05);
        }
        assert!(store.get(p).data().iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut model = QudecModel::new(ModelConfig::micro(), 5);
        let before: Vec<Tensor<f32>> = model.store.iter().map(|(_, _, t, _)| t.clone()).collect();
        let clean = crate::data::procedural_clean_image(128, 128, 2);
        let pair = crate::data::synthesize_rain(&clean, &Default::default());
        let lmap = LabelMap {
            grid: vec![DistortionLabel::Blue],
            gh: 1,
            gw: 1,
            patch_size: 128,
            src_h: 128,
            src_w: 128,
            source: crate::labeling::LabelSource::NiqeDirect,
            scores: None,
        };
        let ex = prepare_example(&pair, &lmap, 128).unwrap();
        let mut cfg = TrainConfig::desk();
        cfg.lr_initial = 0.0;
        cfg.lr_after_epoch_20 = 0.0;
        let extractor = PerceptualExtractor::<f32>::seeded_fallback(1);
        let mut adam = Adam::new(&model.store);
        let mut state = ScheduleState::default();
        train_step(
            &mut model, &mut adam, &ex.y01, &ex.x01, &ex.onehot, &ex.mask, &extractor,
            &mut state, &cfg,
        )
        .unwrap();
        for ((_, name, after, trainable), before) in model.store.iter().zip(&before) {
            if trainable {
                assert_eq!(after, before, "{name} changed under zero learning rate");
            }
        }
    }

    #[test]
    fn seeded_steps_are_reproducible() {
        let run = |seed: u64| -> Vec<f64> {
            let mut model = QudecModel::new(ModelConfig::micro(), seed);
            let clean = crate::data::procedural_clean_image(128, 128, 3);
            let pair = crate::data::synthesize_rain(
                &clean,
                &crate::data::SyntheticRainConfig {
                    seed: 4,
                    ..Default::default()
                },
            );
            let lmap = LabelMap {
                grid: vec![DistortionLabel::Red],
                gh: 1,
                gw: 1,
                patch_size: 128,
                src_h: 128,
                src_w: 128,
                source: crate::labeling::LabelSource::NiqeDirect,
                scores: None,
            };
            let ex = prepare_example(&pair, &lmap, 128).unwrap();
            let cfg = TrainConfig::desk();
            let extractor = PerceptualExtractor::<f32>::seeded_fallback(9);
            let mut adam = Adam::new(&model.store);
            let mut state = ScheduleState::default();
            (0..3)
                .map(|_| {
                    train_step(
                        &mut model, &mut adam, &ex.y01, &ex.x01, &ex.onehot, &ex.mask,
                        &extractor, &mut state, &cfg,
                    )
                    .unwrap()
                    .breakdown
                    .total
                })
                .collect()
        };
        let a = run(11);
        let b = run(11);
        assert_eq!(a, b);
    }
}
