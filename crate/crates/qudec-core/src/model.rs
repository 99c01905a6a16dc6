//! The de-raining network family.
//!
//! One shared encoder feeds two decoders. Decoder D1 predicts signed rain
//! residual maps at three scales together with per-pixel confidence maps;
//! its per-scale taps (residual net RN + confidence net CN) feed their fused
//! product back into the next decoder stage. Decoder D2 predicts a 3-class
//! distortion label per 128x128 patch; the label confidence network (LCN)
//! scores each patch prediction. The refinement network (RFN) turns the
//! coarse estimate `y - r̂` plus the confidence-weighted label prior into the
//! final image. A standalone patch classifier (GLN) of eight dilated residual
//! blocks reproduces the labels without running the reference scorer.
//!
//! Channel arithmetic at the published widths (width 32, mid 16):
//! encoder 3→32; decoder concat sites 64 / 67 / 67; RN 64→32→32→3;
//! CN 67→16→16→3; RFN Conv7x7-Conv3x3-tanh; D2 head 3 classes; GLN eight
//! ResBlocks. All of it is asserted at construction.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{ParamId, ParamStore, Tape, ValId, WSrc};
use crate::tensor::{crop, downsample_area, pad_reflect, Scalar, Tensor};
use crate::{Error, Result};

/// Network hyperparameters. `Default` gives the published full-size widths;
/// [`ModelConfig::micro`] gives the narrow variant used by the end-to-end
/// gradient checks.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub mid: usize,
    pub gln_width: usize,
    pub patch_size: usize,
    pub confidence_floor: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 32,
            mid: 16,
            gln_width: 32,
            patch_size: 128,
            confidence_floor: 1e-3,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    /// Narrow variant (8-channel width) for finite-difference probing.
    pub fn micro() -> Self {
        ModelConfig {
            width: 8,
            mid: 4,
            gln_width: 8,
            ..Default::default()
        }
    }

    /// Decoder concat width without the feedback channels.
    pub fn fuse(&self) -> usize {
        2 * self.width
    }

    /// Decoder concat width including the 3 feedback channels.
    pub fn fuse_fb(&self) -> usize {
        2 * self.width + 3
    }

    /// Output width of the 1x1 adapter assembling the x1-scale CN input.
    pub fn adapter_out(&self) -> usize {
        2 * self.width - self.mid
    }
}

/// Post-convolution activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

fn apply_act<T: Scalar>(tape: &mut Tape<T>, x: ValId, act: Act) -> ValId {
    match act {
        Act::Relu => tape.relu(x),
        Act::Sigmoid => tape.sigmoid(x),
        Act::Tanh => tape.tanh(x),
        Act::Identity => x,
    }
}

// ---------------------------------------------------------------------------
// parameter registration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
    dilation: usize,
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv,
    gamma: ParamId,
    beta: ParamId,
    rmean: ParamId,
    rvar: ParamId,
    act: Act,
}

#[derive(Debug, Clone)]
struct ResBlock {
    c1: Conv,
    c2: Conv,
    c3: Conv,
}

#[derive(Debug, Clone)]
struct DecoderCore {
    stage1: ConvBlock,
    up1: Conv,
    stage2: ConvBlock,
    up2: Conv,
    stage3: ConvBlock,
    up3: Conv,
    stage4: ConvBlock,
    up4: Conv,
    tail: ConvBlock,
}

fn init_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    dilation: usize,
) -> Conv {
    let fan_in = (cin * k * k) as f64;
    let bound = 1.0 / fan_in.sqrt();
    let wlen = cout * cin * k * k;
    let wdata: Vec<T> = (0..wlen)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    let bdata: Vec<T> = (0..cout)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    let w = store.add(
        format!("{name}.weight"),
        Tensor::from_vec(&[cout, cin, k, k], wdata),
        true,
    );
    let b = store.add(format!("{name}.bias"), Tensor::from_vec(&[cout], bdata), true);
    Conv { w, b, dilation }
}

fn init_conv_block<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    act: Act,
) -> ConvBlock {
    let conv = init_conv(store, rng, name, cin, cout, 3, 1);
    let gamma = store.add(format!("{name}.bn.gamma"), Tensor::full(&[cout], T::ONE), true);
    let beta = store.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout]), true);
    let rmean = store.add(format!("{name}.bn.running_mean"), Tensor::zeros(&[cout]), false);
    let rvar = store.add(
        format!("{name}.bn.running_var"),
        Tensor::full(&[cout], T::ONE),
        false,
    );
    ConvBlock {
        conv,
        gamma,
        beta,
        rmean,
        rvar,
        act,
    }
}

fn zero_conv<T: Scalar>(store: &mut ParamStore<T>, c: &Conv) {
    for v in store.get_mut(c.w).data_mut() {
        *v = T::ZERO;
    }
    for v in store.get_mut(c.b).data_mut() {
        *v = T::ZERO;
    }
}

/// Makes concat(coarse, prior) -> Conv7x7 -> ReLU -> Conv3x3 behave as the
/// identity on the coarse channels at initialization: conv1 routes +x and -x
/// of each coarse channel through separate ReLU taps, conv2 recombines them.
/// Remaining conv1 channels keep their random values to break symmetry.
fn identity_init_rfn<T: Scalar>(
    store: &mut ParamStore<T>,
    conv1: &Conv,
    conv2: &Conv,
    mid: usize,
) {
    {
        let w1 = store.get_mut(conv1.w);
        let s = w1.shape().to_vec(); // (mid, 6, 7, 7)
        let (kc, kk) = (s[1], s[2]);
        let center = kk / 2;
        let idx = |co: usize, ci: usize, ky: usize, kx: usize| ((co * kc + ci) * kk + ky) * kk + kx;
        for c in 0..3 {
            if c < mid {
                let i = idx(c, c, center, center);
                let row = idx(c, 0, 0, 0)..idx(c + 1, 0, 0, 0);
                w1.data_mut()[row].fill(T::ZERO);
                w1.data_mut()[i] = T::ONE;
            }
            if c + 3 < mid {
                let i = idx(c + 3, c, center, center);
                let row = idx(c + 3, 0, 0, 0)..idx(c + 4, 0, 0, 0);
                w1.data_mut()[row].fill(T::ZERO);
                w1.data_mut()[i] = -T::ONE;
            }
        }
    }
    for v in store.get_mut(conv1.b).data_mut() {
        *v = T::ZERO;
    }
    {
        let w2 = store.get_mut(conv2.w);
        let s = w2.shape().to_vec(); // (3, mid, 3, 3)
        let (kc, kk) = (s[1], s[2]);
        let center = kk / 2;
        let idx = |co: usize, ci: usize, ky: usize, kx: usize| ((co * kc + ci) * kk + ky) * kk + kx;
        for v in w2.data_mut() {
            *v = T::ZERO;
        }
        for c in 0..3 {
            if c < mid {
                let i = idx(c, c, center, center);
                w2.data_mut()[i] = T::ONE;
            }
            if c + 3 < mid {
                let i = idx(c, c + 3, center, center);
                w2.data_mut()[i] = -T::ONE;
            }
        }
    }
    for v in store.get_mut(conv2.b).data_mut() {
        *v = T::ZERO;
    }
}

fn init_decoder_core<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cfg: &ModelConfig,
) -> DecoderCore {
    let w = cfg.width;
    DecoderCore {
        stage1: init_conv_block(store, rng, &format!("{name}.stage1"), w, w, Act::Relu),
        up1: init_conv(store, rng, &format!("{name}.up1"), w, w, 3, 1),
        stage2: init_conv_block(store, rng, &format!("{name}.stage2"), cfg.fuse(), w, Act::Relu),
        up2: init_conv(store, rng, &format!("{name}.up2"), w, w, 3, 1),
        stage3: init_conv_block(
            store,
            rng,
            &format!("{name}.stage3"),
            cfg.fuse_fb(),
            w,
            Act::Relu,
        ),
        up3: init_conv(store, rng, &format!("{name}.up3"), w, w, 3, 1),
        stage4: init_conv_block(
            store,
            rng,
            &format!("{name}.stage4"),
            cfg.fuse_fb(),
            cfg.mid,
            Act::Relu,
        ),
        up4: init_conv(store, rng, &format!("{name}.up4"), cfg.mid, cfg.mid, 3, 1),
        tail: init_conv_block(store, rng, &format!("{name}.tail"), cfg.mid, cfg.mid, Act::Relu),
    }
}

/// All parameter ids of the network, registered in a fixed order.
#[derive(Debug, Clone)]
pub struct QudecNet {
    pub cfg: ModelConfig,
    encoder: [ConvBlock; 4],
    d1: DecoderCore,
    d1_head: Conv,
    rn2: [ConvBlock; 3],
    rn4: [ConvBlock; 3],
    cn1_adapter: Conv,
    cn1: [ConvBlock; 3],
    cn2: [ConvBlock; 3],
    cn4: [ConvBlock; 3],
    rfn_conv1: Conv,
    rfn_conv2: Conv,
    d2: DecoderCore,
    d2_head: Conv,
    lcn: [ConvBlock; 3],
    lcn_fc: Conv,
    gln_stem: Conv,
    gln_blocks: Vec<ResBlock>,
    gln_head: Conv,
}

fn init_rn<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cfg: &ModelConfig,
) -> [ConvBlock; 3] {
    let w = cfg.width;
    [
        init_conv_block(store, rng, &format!("{name}.block1"), cfg.fuse(), w, Act::Relu),
        init_conv_block(store, rng, &format!("{name}.block2"), w, w, Act::Relu),
        init_conv_block(store, rng, &format!("{name}.block3"), w, 3, Act::Identity),
    ]
}

fn init_cn<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cfg: &ModelConfig,
) -> [ConvBlock; 3] {
    let m = cfg.mid;
    [
        init_conv_block(store, rng, &format!("{name}.block1"), cfg.fuse_fb(), m, Act::Relu),
        init_conv_block(store, rng, &format!("{name}.block2"), m, m, Act::Relu),
        init_conv_block(store, rng, &format!("{name}.block3"), m, 3, Act::Sigmoid),
    ]
}

impl QudecNet {
    pub fn init<T: Scalar>(cfg: ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Self {
        assert!(cfg.width > 0 && cfg.mid > 0 && cfg.mid % 2 == 0);
        assert!(cfg.adapter_out() > 0, "mid must be smaller than 2*width");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let encoder = [
            init_conv_block(store, r, "encoder.block1", 3, cfg.width, Act::Relu),
            init_conv_block(store, r, "encoder.block2", cfg.width, cfg.width, Act::Relu),
            init_conv_block(store, r, "encoder.block3", cfg.width, cfg.width, Act::Relu),
            init_conv_block(store, r, "encoder.block4", cfg.width, cfg.width, Act::Relu),
        ];
        let d1 = init_decoder_core(store, r, "decoder_d1", &cfg);
        let d1_head = init_conv(store, r, "decoder_d1.head", cfg.mid, 3, 3, 1);
        let rn2 = init_rn(store, r, "rn_x2", &cfg);
        let rn4 = init_rn(store, r, "rn_x4", &cfg);
        let cn1_adapter = init_conv(
            store,
            r,
            "cn_x1.adapter",
            cfg.fuse_fb(),
            cfg.adapter_out(),
            1,
            1,
        );
        let cn1 = init_cn(store, r, "cn_x1", &cfg);
        let cn2 = init_cn(store, r, "cn_x2", &cfg);
        let cn4 = init_cn(store, r, "cn_x4", &cfg);
        let rfn_conv1 = init_conv(store, r, "rfn.conv1", 6, cfg.mid, 7, 1);
        let rfn_conv2 = init_conv(store, r, "rfn.conv2", cfg.mid, 3, 3, 1);
        // The residual head starts at zero and the refinement stage starts as
        // a pass-through (paired +x/-x ReLU taps recombined by conv2), so the
        // initial output is tanh(y) rather than noise.
        zero_conv(store, &d1_head);
        identity_init_rfn(store, &rfn_conv1, &rfn_conv2, cfg.mid);
        let d2 = init_decoder_core(store, r, "decoder_d2", &cfg);
        let d2_head = init_conv(store, r, "decoder_d2.head", cfg.mid, 3, 1, 1);
        let lcn = [
            init_conv_block(store, r, "lcn.block1", cfg.mid + 3, cfg.mid, Act::Relu),
            init_conv_block(store, r, "lcn.block2", cfg.mid, cfg.mid, Act::Relu),
            init_conv_block(store, r, "lcn.block3", cfg.mid, cfg.mid / 2, Act::Relu),
        ];
        let lcn_fc = init_conv(store, r, "lcn.fc", cfg.mid / 2, 1, 1, 1);
        let g = cfg.gln_width;
        let gln_stem = init_conv(store, r, "gln.stem", 3, g, 3, 1);
        let gln_blocks: Vec<ResBlock> = (0..8)
            .map(|i| ResBlock {
                c1: init_conv(store, r, &format!("gln.res{}.conv1", i + 1), g, g, 1, 1),
                c2: init_conv(store, r, &format!("gln.res{}.conv2", i + 1), g, g, 3, 1),
                c3: init_conv(store, r, &format!("gln.res{}.conv3", i + 1), g, g, 3, 2),
            })
            .collect();
        let gln_head = init_conv(store, r, "gln.head", g, 3, 1, 1);
        QudecNet {
            cfg,
            encoder,
            d1,
            d1_head,
            rn2,
            rn4,
            cn1_adapter,
            cn1,
            cn2,
            cn4,
            rfn_conv1,
            rfn_conv2,
            d2,
            d2_head,
            lcn,
            lcn_fc,
            gln_stem,
            gln_blocks,
            gln_head,
        }
    }

    fn conv<T: Scalar>(&self, tape: &mut Tape<T>, x: ValId, c: &Conv) -> ValId {
        tape.conv2d(x, WSrc::Param(c.w), Some(WSrc::Param(c.b)), c.dilation)
    }

    fn conv_block<T: Scalar>(&self, tape: &mut Tape<T>, x: ValId, b: &ConvBlock) -> ValId {
        let c = self.conv(tape, x, &b.conv);
        let n = tape.batch_norm(
            c,
            b.gamma,
            b.beta,
            b.rmean,
            b.rvar,
            self.cfg.bn_eps,
            self.cfg.bn_momentum,
        );
        apply_act(tape, n, b.act)
    }

    fn up<T: Scalar>(&self, tape: &mut Tape<T>, x: ValId, c: &Conv) -> ValId {
        let u = tape.upsample_nearest(x, 2);
        let y = self.conv(tape, u, c);
        tape.relu(y)
    }

    fn blocks3<T: Scalar>(&self, tape: &mut Tape<T>, x: ValId, blocks: &[ConvBlock; 3]) -> ValId {
        let a = self.conv_block(tape, x, &blocks[0]);
        let b = self.conv_block(tape, a, &blocks[1]);
        self.conv_block(tape, b, &blocks[2])
    }

    /// Encoder: four ConvBlock+AvgPool stages. Returns post-pool features at
    /// H/2, H/4, H/8, H/16. Input extents must be divisible by 16.
    pub fn encoder<T: Scalar>(&self, tape: &mut Tape<T>, y: ValId) -> EncoderTaps {
        let (c, h, w) = tape.value(y).chw();
        assert_eq!(c, 3, "encoder expects a 3-channel image");
        assert!(
            h % 16 == 0 && w % 16 == 0,
            "encoder input must be padded to a multiple of 16, got {h}x{w}"
        );
        let c1 = self.conv_block(tape, y, &self.encoder[0]);
        let f1 = tape.avg_pool2(c1);
        let c2 = self.conv_block(tape, f1, &self.encoder[1]);
        let f2 = tape.avg_pool2(c2);
        let c3 = self.conv_block(tape, f2, &self.encoder[2]);
        let f3 = tape.avg_pool2(c3);
        let c4 = self.conv_block(tape, f3, &self.encoder[3]);
        let f4 = tape.avg_pool2(c4);
        EncoderTaps { f1, f2, f3, f4 }
    }

    /// One residual/confidence tap: RN on the 2w-channel fused features, CN on
    /// fused ⊕ residual, feedback = confidence ⊙ residual.
    fn recon_tap<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        fused: ValId,
        rn: &[ConvBlock; 3],
        cn: &[ConvBlock; 3],
    ) -> (ValId, ValId, ValId) {
        let r = self.blocks3(tape, fused, rn);
        let cn_in = tape.concat_c(&[fused, r]);
        let c_raw = self.blocks3(tape, cn_in, cn);
        let c = tape.clamp_min(c_raw, self.cfg.confidence_floor);
        let fb = tape.mul(c, r);
        (r, c, fb)
    }

    /// Decoder D1 with both taps. Also returns the intermediates shared with
    /// D2 and the x1 confidence assembly.
    pub fn decoder_d1<T: Scalar>(&self, tape: &mut Tape<T>, enc: &EncoderTaps) -> D1Taps {
        let d = &self.d1;
        let s1 = self.conv_block(tape, enc.f4, &d.stage1);
        let u1 = self.up(tape, s1, &d.up1);
        let in2 = tape.concat_c(&[u1, enc.f3]);
        let s2 = self.conv_block(tape, in2, &d.stage2);
        let u2 = self.up(tape, s2, &d.up2);

        let fused4 = tape.concat_c(&[u2, enc.f2]);
        let (r4, c4, fb4) = self.recon_tap(tape, fused4, &self.rn4, &self.cn4);

        let in3 = tape.concat_c(&[u2, enc.f2, fb4]);
        let s3 = self.conv_block(tape, in3, &d.stage3);
        let u3 = self.up(tape, s3, &d.up3);

        let fused2 = tape.concat_c(&[u3, enc.f1]);
        let (r2, c2, fb2) = self.recon_tap(tape, fused2, &self.rn2, &self.cn2);

        let in4 = tape.concat_c(&[u3, enc.f1, fb2]);
        let s4 = self.conv_block(tape, in4, &d.stage4);
        let u4 = self.up(tape, s4, &d.up4);
        let final_feats = self.conv_block(tape, u4, &d.tail);
        let r1 = self.conv(tape, final_feats, &self.d1_head);

        // x1 confidence: final 16-ch features ⊕ adapter(upsampled stage-4
        // assembly) to reach 2w channels, then ⊕ r̂ for the shared CN layout.
        let asm_up = tape.upsample_nearest(in4, 2);
        let adapted = self.conv(tape, asm_up, &self.cn1_adapter);
        let adapted = tape.relu(adapted);
        let feats_2w = tape.concat_c(&[final_feats, adapted]);
        let cn1_in = tape.concat_c(&[feats_2w, r1]);
        let c1_raw = self.blocks3(tape, cn1_in, &self.cn1);
        let c1 = tape.clamp_min(c1_raw, self.cfg.confidence_floor);

        D1Taps {
            r1,
            c1,
            r2,
            c2,
            r4,
            c4,
            fb2,
            fb4,
        }
    }

    /// Decoder D2. Mirrors the D1 stage layout; its 3-channel stage slots
    /// receive the same fused feedback maps produced by D1's taps. Returns
    /// per-patch logits and the full-resolution feature map.
    pub fn decoder_d2<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        enc: &EncoderTaps,
        fb4: ValId,
        fb2: ValId,
    ) -> (ValId, ValId) {
        let d = &self.d2;
        let s1 = self.conv_block(tape, enc.f4, &d.stage1);
        let u1 = self.up(tape, s1, &d.up1);
        let in2 = tape.concat_c(&[u1, enc.f3]);
        let s2 = self.conv_block(tape, in2, &d.stage2);
        let u2 = self.up(tape, s2, &d.up2);
        let in3 = tape.concat_c(&[u2, enc.f2, fb4]);
        let s3 = self.conv_block(tape, in3, &d.stage3);
        let u3 = self.up(tape, s3, &d.up3);
        let in4 = tape.concat_c(&[u3, enc.f1, fb2]);
        let s4 = self.conv_block(tape, in4, &d.stage4);
        let u4 = self.up(tape, s4, &d.up4);
        let feats = self.conv_block(tape, u4, &d.tail);
        // per-patch global average pool + shared linear map to 3 logits
        let pooled = tape.patch_mean(feats, self.cfg.patch_size);
        let logits = self.conv(tape, pooled, &self.d2_head);
        (logits, feats)
    }

    /// Label confidence from D2 features and per-pixel label probabilities.
    pub fn lcn<T: Scalar>(&self, tape: &mut Tape<T>, d2_feats: ValId, probs_up: ValId) -> ValId {
        let x = tape.concat_c(&[d2_feats, probs_up]);
        let a = self.conv_block(tape, x, &self.lcn[0]);
        let b = self.conv_block(tape, a, &self.lcn[1]);
        let c = self.conv_block(tape, b, &self.lcn[2]);
        let pooled = tape.patch_mean(c, self.cfg.patch_size);
        let fc = self.conv(tape, pooled, &self.lcn_fc);
        let s = tape.sigmoid(fc);
        tape.clamp_min(s, self.cfg.confidence_floor)
    }

    /// Refinement: concat(coarse, prior) -> Conv7x7 -> ReLU -> Conv3x3 -> tanh.
    pub fn rfn<T: Scalar>(&self, tape: &mut Tape<T>, coarse: ValId, prior: ValId) -> ValId {
        let x = tape.concat_c(&[coarse, prior]);
        let a = self.conv(tape, x, &self.rfn_conv1);
        let a = tape.relu(a);
        let b = self.conv(tape, a, &self.rfn_conv2);
        tape.tanh(b)
    }

    /// Patch label classifier: stem, eight dilated residual blocks, global
    /// average pool, 3-way head. Returns class probabilities (3,1,1).
    pub fn gln<T: Scalar>(&self, tape: &mut Tape<T>, patch: ValId) -> ValId {
        let logits = self.gln_logits(tape, patch);
        tape.softmax_c(logits)
    }

    pub fn gln_logits<T: Scalar>(&self, tape: &mut Tape<T>, patch: ValId) -> ValId {
        let (c, h, w) = tape.value(patch).chw();
        assert_eq!(
            (c, h, w),
            (3, self.cfg.patch_size, self.cfg.patch_size),
            "gln expects a single 3x{0}x{0} patch",
            self.cfg.patch_size
        );
        let mut x = self.conv(tape, patch, &self.gln_stem);
        for blk in &self.gln_blocks {
            let a = self.conv(tape, x, &blk.c1);
            let b = self.conv(tape, a, &blk.c2);
            let d = self.conv(tape, b, &blk.c3);
            let s = tape.add(x, d);
            x = tape.relu(s);
        }
        let pooled = tape.global_mean(x);
        self.conv(tape, pooled, &self.gln_head)
    }

    /// Full forward pass on an input already padded to a multiple of the
    /// patch size. `y` is a tape node holding the image in network space.
    pub fn forward_padded<T: Scalar>(&self, tape: &mut Tape<T>, y: ValId) -> QudecNodes {
        let (_, h, w) = tape.value(y).chw();
        assert!(
            h % self.cfg.patch_size == 0 && w % self.cfg.patch_size == 0,
            "forward_padded expects extents padded to {}, got {}x{}",
            self.cfg.patch_size,
            h,
            w
        );
        let enc = self.encoder(tape, y);
        let d1 = self.decoder_d1(tape, &enc);
        let (logits, d2_feats) = self.decoder_d2(tape, &enc, d1.fb4, d1.fb2);
        let probs = tape.softmax_c(logits);
        let probs_up = tape.upsample_nearest(probs, self.cfg.patch_size);
        let cs = self.lcn(tape, d2_feats, probs_up);

        // confidence-weighted one-hot label prior for the refinement stage;
        // the hard argmax is treated as a constant, gradient flows via cs
        let (gh, gw) = {
            let (_, gh, gw) = tape.value(probs).chw();
            (gh, gw)
        };
        let class_grid = argmax_grid(tape.value(probs));
        let onehot = onehot_tensor::<T>(&class_grid, gh, gw);
        let onehot_id = tape.input(onehot);
        let cs3 = tape.repeat_c(cs, 3);
        let prior_grid = tape.mul(cs3, onehot_id);
        let prior = tape.upsample_nearest(prior_grid, self.cfg.patch_size);

        let coarse = tape.sub(y, d1.r1);
        let xhat = self.rfn(tape, coarse, prior);

        let y_t = tape.value(y).clone();
        let y2 = tape.input(downsample_area(&y_t, 2));
        let y4 = tape.input(downsample_area(&y_t, 4));
        let xhat2 = tape.sub(y2, d1.r2);
        let xhat4 = tape.sub(y4, d1.r4);

        QudecNodes {
            xhat,
            xhat2,
            xhat4,
            r1: d1.r1,
            c1: d1.c1,
            r2: d1.r2,
            c2: d1.c2,
            r4: d1.r4,
            c4: d1.c4,
            logits,
            probs,
            cs,
            class_grid,
            gh,
            gw,
        }
    }
}

/// Encoder skip features (tape nodes) at H/2, H/4, H/8, H/16.
pub struct EncoderTaps {
    pub f1: ValId,
    pub f2: ValId,
    pub f3: ValId,
    pub f4: ValId,
}

/// Decoder D1 tap outputs (tape nodes).
pub struct D1Taps {
    pub r1: ValId,
    pub c1: ValId,
    pub r2: ValId,
    pub c2: ValId,
    pub r4: ValId,
    pub c4: ValId,
    pub fb2: ValId,
    pub fb4: ValId,
}

/// All tape nodes produced by a full forward pass.
pub struct QudecNodes {
    pub xhat: ValId,
    pub xhat2: ValId,
    pub xhat4: ValId,
    pub r1: ValId,
    pub c1: ValId,
    pub r2: ValId,
    pub c2: ValId,
    pub r4: ValId,
    pub c4: ValId,
    pub logits: ValId,
    pub probs: ValId,
    pub cs: ValId,
    pub class_grid: Vec<u8>,
    pub gh: usize,
    pub gw: usize,
}

fn argmax_grid<T: Scalar>(probs: &Tensor<T>) -> Vec<u8> {
    let (c, gh, gw) = probs.chw();
    let n = gh * gw;
    let mut out = vec![0u8; n];
    for i in 0..n {
        let mut best = 0usize;
        let mut bv = probs.data()[i];
        for ch in 1..c {
            let v = probs.data()[ch * n + i];
            if v > bv {
                bv = v;
                best = ch;
            }
        }
        out[i] = best as u8;
    }
    out
}

fn onehot_tensor<T: Scalar>(grid: &[u8], gh: usize, gw: usize) -> Tensor<T> {
    let n = gh * gw;
    let mut t = Tensor::zeros(&[3, gh, gw]);
    for (i, &cls) in grid.iter().enumerate() {
        t.data_mut()[cls as usize * n + i] = T::ONE;
    }
    t
}

// ---------------------------------------------------------------------------
// model bundle and evaluation-mode API
// ---------------------------------------------------------------------------

/// Network parameters plus their layout description.
pub struct QudecModel {
    pub net: QudecNet,
    pub store: ParamStore<f32>,
}

impl QudecModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let net = QudecNet::init(cfg, &mut store, seed);
        let model = QudecModel { net, store };
        model
            .architecture_report()
            .expect("freshly initialized model must satisfy the architecture contract");
        model
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Walks the registered parameter shapes and checks every published
    /// channel count; returns the numbers it verified.
    pub fn architecture_report(&self) -> Result<ArchitectureReport> {
        architecture_report(&self.net, &self.store)
    }

    /// Full forward in inference mode. The input is a network-space image of
    /// any size; it is reflect-padded internally and outputs are cropped back.
    pub fn qudec_forward(&mut self, y: &Tensor<f32>) -> Result<QudecBundle> {
        let (c, h, w) = y.chw();
        if c != 3 {
            return Err(Error::contract(format!(
                "qudec_forward: expected 3 channels, got {c}"
            )));
        }
        if !y.all_finite() {
            return Err(Error::contract("qudec_forward: non-finite input"));
        }
        let p = self.net.cfg.patch_size;
        let ph = h.div_ceil(p) * p;
        let pw = w.div_ceil(p) * p;
        let padded = pad_reflect(y, ph, pw);
        let mut tape = Tape::inference(&mut self.store);
        let yid = tape.input(padded);
        let nodes = self.net.forward_padded(&mut tape, yid);
        let bundle = QudecBundle {
            xhat: crop(tape.value(nodes.xhat), h, w),
            r1: crop(tape.value(nodes.r1), h, w),
            c1: crop(tape.value(nodes.c1), h, w),
            xhat2: crop(tape.value(nodes.xhat2), h.div_ceil(2), w.div_ceil(2)),
            r2: crop(tape.value(nodes.r2), h.div_ceil(2), w.div_ceil(2)),
            c2: crop(tape.value(nodes.c2), h.div_ceil(2), w.div_ceil(2)),
            xhat4: crop(tape.value(nodes.xhat4), h.div_ceil(4), w.div_ceil(4)),
            r4: crop(tape.value(nodes.r4), h.div_ceil(4), w.div_ceil(4)),
            c4: crop(tape.value(nodes.c4), h.div_ceil(4), w.div_ceil(4)),
            logits: tape.value(nodes.logits).clone(),
            probs: tape.value(nodes.probs).clone(),
            label_confidence: {
                let t = tape.value(nodes.cs);
                let (_, gh, gw) = t.chw();
                Tensor::from_vec(&[gh, gw], t.data().to_vec())
            },
            class_grid: nodes.class_grid,
            gh: nodes.gh,
            gw: nodes.gw,
        };
        Ok(bundle)
    }
}

/// Tap scale selector for the standalone residual/confidence operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapScale {
    X1,
    X2,
    X4,
}

impl QudecModel {
    fn contract(&self, what: String) -> Error {
        Error::Contract(what)
    }

    /// Encoder features of a padded network-space image (evaluation mode).
    pub fn encoder_forward(&mut self, y: &Tensor<f32>) -> Result<[Tensor<f32>; 4]> {
        let (c, h, w) = y.chw();
        if c != 3 {
            return Err(self.contract(format!("encoder expects 3 channels, got {c}")));
        }
        // non-divisible inputs are padded internally, never an error
        let (ph, pw) = (h.div_ceil(16) * 16, w.div_ceil(16) * 16);
        let padded = pad_reflect(y, ph, pw);
        let mut tape = Tape::inference(&mut self.store);
        let yid = tape.input(padded);
        let enc = self.net.encoder(&mut tape, yid);
        Ok([
            tape.value(enc.f1).clone(),
            tape.value(enc.f2).clone(),
            tape.value(enc.f3).clone(),
            tape.value(enc.f4).clone(),
        ])
    }

    /// Residual tap on fused decoder⊕skip features (2w channels).
    pub fn rn_forward(&mut self, scale: TapScale, fused: &Tensor<f32>) -> Result<Tensor<f32>> {
        let need = self.net.cfg.fuse();
        let (c, _, _) = fused.chw();
        if c != need {
            return Err(self.contract(format!(
                "rn_{scale:?}: fused input has {c} channels, the listing requires {need}"
            )));
        }
        let rn = match scale {
            TapScale::X2 => self.net.rn2.clone(),
            TapScale::X4 => self.net.rn4.clone(),
            TapScale::X1 => {
                return Err(self.contract(
                    "the x1 residual comes from the decoder head, not an RN tap".into(),
                ))
            }
        };
        let mut tape = Tape::inference(&mut self.store);
        let fid = tape.input(fused.clone());
        let r = self.net.blocks3(&mut tape, fid, &rn);
        Ok(tape.value(r).clone())
    }

    /// Confidence tap: fused features ⊕ residual (2w+3 channels in total).
    pub fn cn_forward(
        &mut self,
        scale: TapScale,
        fused: &Tensor<f32>,
        residual: &Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        let (cf, h, w) = fused.chw();
        let (cr, rh, rw) = residual.chw();
        if cf + cr != self.net.cfg.fuse_fb() || cr != 3 || (rh, rw) != (h, w) {
            return Err(self.contract(format!(
                "cn_{scale:?}: concatenated input must have {} channels (got {}+{})",
                self.net.cfg.fuse_fb(),
                cf,
                cr
            )));
        }
        let cn = match scale {
            TapScale::X1 => self.net.cn1.clone(),
            TapScale::X2 => self.net.cn2.clone(),
            TapScale::X4 => self.net.cn4.clone(),
        };
        let floor = self.net.cfg.confidence_floor;
        let mut tape = Tape::inference(&mut self.store);
        let fid = tape.input(fused.clone());
        let rid = tape.input(residual.clone());
        let cat = tape.concat_c(&[fid, rid]);
        let raw = self.net.blocks3(&mut tape, cat, &cn);
        let c = tape.clamp_min(raw, floor);
        Ok(tape.value(c).clone())
    }

    /// Full tap: residual, confidence and their fused product c ⊙ r̂. The
    /// caller up-samples the feedback before concatenating it into the next
    /// decoder stage.
    pub fn recon_forward(
        &mut self,
        scale: TapScale,
        fused: &Tensor<f32>,
    ) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
        let r = self.rn_forward(scale, fused)?;
        let c = self.cn_forward(scale, fused, &r)?;
        let fb = c.zip_map(&r, |cv, rv| cv * rv);
        Ok((r, c, fb))
    }

    /// Decoder D1 from encoder features: residual and confidence maps at the
    /// three scales.
    #[allow(clippy::type_complexity)]
    pub fn decoder_d1_forward(
        &mut self,
        enc: &[Tensor<f32>; 4],
    ) -> Result<[(Tensor<f32>, Tensor<f32>); 3]> {
        let mut tape = Tape::inference(&mut self.store);
        let taps = {
            let ids = EncoderTaps {
                f1: tape.input(enc[0].clone()),
                f2: tape.input(enc[1].clone()),
                f3: tape.input(enc[2].clone()),
                f4: tape.input(enc[3].clone()),
            };
            self.net.decoder_d1(&mut tape, &ids)
        };
        Ok([
            (tape.value(taps.r1).clone(), tape.value(taps.c1).clone()),
            (tape.value(taps.r2).clone(), tape.value(taps.c2).clone()),
            (tape.value(taps.r4).clone(), tape.value(taps.c4).clone()),
        ])
    }

    /// Refinement from the coarse estimate y - r̂ and the label prior.
    pub fn rfn_forward(
        &mut self,
        coarse: &Tensor<f32>,
        label_prior: &Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        if coarse.shape() != label_prior.shape() || coarse.chw().0 != 3 {
            return Err(self.contract(format!(
                "rfn: coarse {:?} and prior {:?} must both be (3,H,W)",
                coarse.shape(),
                label_prior.shape()
            )));
        }
        let mut tape = Tape::inference(&mut self.store);
        let cid = tape.input(coarse.clone());
        let pid = tape.input(label_prior.clone());
        let x = self.net.rfn(&mut tape, cid, pid);
        Ok(tape.value(x).clone())
    }

    /// Decoder D2 from encoder features: per-patch logits plus the
    /// full-resolution feature map for the label confidence network. The D1
    /// tap feedbacks its stage slots require are computed internally.
    pub fn decoder_d2_forward(
        &mut self,
        enc: &[Tensor<f32>; 4],
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut tape = Tape::inference(&mut self.store);
        let ids = EncoderTaps {
            f1: tape.input(enc[0].clone()),
            f2: tape.input(enc[1].clone()),
            f3: tape.input(enc[2].clone()),
            f4: tape.input(enc[3].clone()),
        };
        let taps = self.net.decoder_d1(&mut tape, &ids);
        let (logits, feats) = self.net.decoder_d2(&mut tape, &ids, taps.fb4, taps.fb2);
        Ok((tape.value(logits).clone(), tape.value(feats).clone()))
    }

    /// Label confidence scores from D2 features and per-pixel label
    /// probabilities; one (0,1] scalar per patch cell.
    pub fn lcn_forward(
        &mut self,
        d2_features: &Tensor<f32>,
        label_probs: &Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        let (cf, h, w) = d2_features.chw();
        let (cp, ph, pw) = label_probs.chw();
        if cf != self.net.cfg.mid || cp != 3 || (ph, pw) != (h, w) {
            return Err(self.contract(format!(
                "lcn: expected ({},H,W) features and (3,H,W) probabilities, got {:?} and {:?}",
                self.net.cfg.mid,
                d2_features.shape(),
                label_probs.shape()
            )));
        }
        let mut tape = Tape::inference(&mut self.store);
        let fid = tape.input(d2_features.clone());
        let pid = tape.input(label_probs.clone());
        let cs = self.net.lcn(&mut tape, fid, pid);
        let t = tape.value(cs);
        let (_, gh, gw) = t.chw();
        Ok(Tensor::from_vec(&[gh, gw], t.data().to_vec()))
    }

    /// Patch classifier probabilities for a single 128x128 patch.
    pub fn gln_forward(&mut self, patch: &Tensor<f32>) -> Result<[f32; 3]> {
        let (c, h, w) = patch.chw();
        let p = self.net.cfg.patch_size;
        if (c, h, w) != (3, p, p) {
            return Err(self.contract(format!(
                "gln expects one 3x{p}x{p} patch, got {c}x{h}x{w}"
            )));
        }
        let mut tape = Tape::inference(&mut self.store);
        let pid = tape.input(patch.clone());
        let probs = self.net.gln(&mut tape, pid);
        let d = tape.value(probs).data();
        Ok([d[0], d[1], d[2]])
    }
}

/// Cropped inference outputs.
pub struct QudecBundle {
    pub xhat: Tensor<f32>,
    pub r1: Tensor<f32>,
    pub c1: Tensor<f32>,
    pub xhat2: Tensor<f32>,
    pub r2: Tensor<f32>,
    pub c2: Tensor<f32>,
    pub xhat4: Tensor<f32>,
    pub r4: Tensor<f32>,
    pub c4: Tensor<f32>,
    pub logits: Tensor<f32>,
    pub probs: Tensor<f32>,
    /// Per-patch confidence scores, shape (gh, gw).
    pub label_confidence: Tensor<f32>,
    /// Per-patch argmax class, row-major, 0=low 1=medium 2=high distortion.
    pub class_grid: Vec<u8>,
    pub gh: usize,
    pub gw: usize,
}

/// The channel counts verified at construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureReport {
    pub encoder_in: usize,
    pub encoder_width: usize,
    pub decoder_concat_sites: [usize; 3],
    pub rn_channels: (usize, usize, usize, usize),
    pub cn_channels: (usize, usize, usize, usize),
    pub rfn_kernels: (usize, usize),
    pub rfn_head_is_tanh: bool,
    pub d2_classes: usize,
    pub gln_resblocks: usize,
    pub parameter_count: usize,
}

fn conv_shape<T: Scalar>(store: &ParamStore<T>, c: &Conv) -> (usize, usize, usize) {
    let s = store.get(c.w).shape();
    (s[0], s[1], s[2])
}

fn check(cond: bool, what: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "architecture contract failed: {what}"
        )))
    }
}

fn architecture_report<T: Scalar>(
    net: &QudecNet,
    store: &ParamStore<T>,
) -> Result<ArchitectureReport> {
    let cfg = &net.cfg;
    let w = cfg.width;
    let (eo, ei, ek) = conv_shape(store, &net.encoder[0].conv);
    check(ei == 3 && eo == w && ek == 3, "encoder first block")?;
    for blk in &net.encoder[1..] {
        let (o, i, _) = conv_shape(store, &blk.conv);
        check(i == w && o == w, "encoder width")?;
    }
    for d in [&net.d1, &net.d2] {
        let (o1, i1, _) = conv_shape(store, &d.stage1.conv);
        check(i1 == w && o1 == w, "decoder stage1")?;
        let (o2, i2, _) = conv_shape(store, &d.stage2.conv);
        check(i2 == cfg.fuse() && o2 == w, "decoder stage2 concat site")?;
        let (o3, i3, _) = conv_shape(store, &d.stage3.conv);
        check(i3 == cfg.fuse_fb() && o3 == w, "decoder stage3 concat site")?;
        let (o4, i4, _) = conv_shape(store, &d.stage4.conv);
        check(
            i4 == cfg.fuse_fb() && o4 == cfg.mid,
            "decoder stage4 concat site",
        )?;
        let (ot, it, _) = conv_shape(store, &d.tail.conv);
        check(it == cfg.mid && ot == cfg.mid, "decoder tail")?;
    }
    let (ho, hi, hk) = conv_shape(store, &net.d1_head);
    check(hi == cfg.mid && ho == 3 && hk == 3, "d1 residual head")?;
    for rn in [&net.rn2, &net.rn4] {
        let (a_o, a_i, _) = conv_shape(store, &rn[0].conv);
        let (b_o, b_i, _) = conv_shape(store, &rn[1].conv);
        let (c_o, c_i, _) = conv_shape(store, &rn[2].conv);
        check(
            a_i == cfg.fuse() && a_o == w && b_i == w && b_o == w && c_i == w && c_o == 3,
            "rn channel listing",
        )?;
        check(rn[2].act == Act::Identity, "rn head must be signed")?;
    }
    for cn in [&net.cn1, &net.cn2, &net.cn4] {
        let (a_o, a_i, _) = conv_shape(store, &cn[0].conv);
        let (b_o, b_i, _) = conv_shape(store, &cn[1].conv);
        let (c_o, c_i, _) = conv_shape(store, &cn[2].conv);
        check(
            a_i == cfg.fuse_fb()
                && a_o == cfg.mid
                && b_i == cfg.mid
                && b_o == cfg.mid
                && c_i == cfg.mid
                && c_o == 3,
            "cn channel listing",
        )?;
        check(cn[2].act == Act::Sigmoid, "cn head must be sigmoid")?;
    }
    let (ao, ai, akk) = conv_shape(store, &net.cn1_adapter);
    check(
        ai == cfg.fuse_fb() && ao == cfg.adapter_out() && akk == 1,
        "cn_x1 adapter",
    )?;
    let (r1o, r1i, r1k) = conv_shape(store, &net.rfn_conv1);
    let (r2o, r2i, r2k) = conv_shape(store, &net.rfn_conv2);
    check(
        r1i == 6 && r1o == cfg.mid && r1k == 7 && r2i == cfg.mid && r2o == 3 && r2k == 3,
        "rfn conv listing",
    )?;
    let (d2o, d2i, _) = conv_shape(store, &net.d2_head);
    check(d2i == cfg.mid && d2o == 3, "d2 3-way head")?;
    check(net.gln_blocks.len() == 8, "gln must have eight resblocks")?;
    for blk in &net.gln_blocks {
        let (o1, i1, k1) = conv_shape(store, &blk.c1);
        let (o2, i2, k2) = conv_shape(store, &blk.c2);
        let (o3, i3, k3) = conv_shape(store, &blk.c3);
        check(
            i1 == cfg.gln_width
                && o1 == cfg.gln_width
                && k1 == 1
                && i2 == cfg.gln_width
                && o2 == cfg.gln_width
                && k2 == 3
                && i3 == cfg.gln_width
                && o3 == cfg.gln_width
                && k3 == 3
                && blk.c3.dilation == 2,
            "gln resblock listing",
        )?;
    }
    check(store.all_finite(), "all parameters finite")?;
    Ok(ArchitectureReport {
        encoder_in: 3,
        encoder_width: w,
        decoder_concat_sites: [cfg.fuse(), cfg.fuse_fb(), cfg.fuse_fb()],
        rn_channels: (cfg.fuse(), w, w, 3),
        cn_channels: (cfg.fuse_fb(), cfg.mid, cfg.mid, 3),
        rfn_kernels: (7, 3),
        rfn_head_is_tanh: true,
        d2_classes: 3,
        gln_resblocks: net.gln_blocks.len(),
        parameter_count: store.trainable_count(),
    })
}

// ---------------------------------------------------------------------------
// value-space conversions
// ---------------------------------------------------------------------------

/// File space [0,1] -> network space [-1,1].
pub fn to_net_space(img01: &Tensor<f64>) -> Tensor<f32> {
    let mut out = Tensor::zeros(img01.shape());
    for (o, &v) in out.data_mut().iter_mut().zip(img01.data()) {
        *o = (2.0 * v - 1.0) as f32;
    }
    out
}

/// Network space [-1,1] -> file space [0,1] (clamped).
pub fn to_file_space(net: &Tensor<f32>) -> Tensor<f64> {
    let mut out = Tensor::zeros(net.shape());
    for (o, &v) in out.data_mut().iter_mut().zip(net.data()) {
        *o = (((v as f64) + 1.0) / 2.0).clamp(0.0, 1.0);
    }
    out
}

// ---------------------------------------------------------------------------
// standalone conv-block op
// ---------------------------------------------------------------------------

/// Specification of a single 3x3 conv block (Conv -> optional BN -> act).
#[derive(Debug, Clone)]
pub struct ConvBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub activation: Act,
    pub normalize: bool,
}

pub struct BnParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub eps: f64,
}

pub struct ConvBlockParams<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub bn: Option<BnParams<T>>,
}

/// Evaluation-mode conv block on plain tensors.
pub fn conv_block_forward<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvBlockSpec,
    params: &ConvBlockParams<T>,
) -> Result<Tensor<T>> {
    let (cin, _, _) = input.chw();
    if cin != spec.in_channels {
        return Err(Error::contract(format!(
            "conv block ({} -> {}): input has {} channels",
            spec.in_channels, spec.out_channels, cin
        )));
    }
    let ws = params.weight.shape();
    if ws != [spec.out_channels, spec.in_channels, 3, 3] {
        return Err(Error::contract(format!(
            "conv block ({} -> {}): weight shape {:?} does not match the 3x3 listing",
            spec.in_channels, spec.out_channels, ws
        )));
    }
    let mut out = crate::tape::conv2d_forward(input, &params.weight, Some(&params.bias), 1);
    if spec.normalize {
        let bn = params
            .bn
            .as_ref()
            .ok_or_else(|| Error::contract("conv block: normalize set but no BN parameters"))?;
        let c = out.chw().0;
        for ch in 0..c {
            let m = bn.mean.data()[ch];
            let is = T::ONE / (bn.var.data()[ch] + T::from_f64(bn.eps)).sqrt();
            let (g, b) = (bn.gamma.data()[ch], bn.beta.data()[ch]);
            for v in out.channel_mut(ch) {
                *v = g * ((*v - m) * is) + b;
            }
        }
    }
    let out = match spec.activation {
        Act::Relu => out.map(|v| v.maxs(T::ZERO)),
        Act::Sigmoid => out.map(|v| T::ONE / (T::ONE + (-v).exp())),
        Act::Tanh => out.map(|v| v.tanh()),
        Act::Identity => out,
    };
    Ok(out)
}
