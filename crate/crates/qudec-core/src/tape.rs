//! Reverse-mode autodiff over a dynamically recorded op tape.
//!
//! The network forward passes are recorded eagerly: every op computes its
//! output immediately and pushes a node describing how to backpropagate
//! through it. Parameters live outside the tape in a [`ParamStore`] so they
//! persist across steps; `backward` returns one gradient tensor per trainable
//! parameter.
//!
//! Convolutions run as im2col + GEMM. All parallel loops write each output
//! element from exactly one task, so parallel and sequential execution are
//! bit-identical (see `par`).

use crate::par;
use crate::tensor::{gemm, Scalar, Tensor};

pub type ValId = usize;
pub type ParamId = usize;

/// Named parameter (or non-trainable buffer) storage.
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

struct ParamEntry<T: Scalar> {
    name: String,
    tensor: Tensor<T>,
    trainable: bool,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id].tensor
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>, bool)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i, e.name.as_str(), &e.tensor, e.trainable))
    }

    /// Total number of scalar values across trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.all_finite())
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Weight source for convolution: a persistent parameter or a tape node
/// (used for fixed feature extractors that are not part of the model).
#[derive(Clone, Copy, Debug)]
pub enum WSrc {
    Param(ParamId),
    Node(ValId),
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: ValId,
        w: WSrc,
        b: Option<WSrc>,
        dilation: usize,
    },
    AvgPool2 {
        x: ValId,
    },
    UpNearest {
        x: ValId,
        factor: usize,
    },
    BatchNorm {
        x: ValId,
        gamma: ParamId,
        beta: ParamId,
        save: usize,
    },
    Relu {
        x: ValId,
    },
    Sigmoid {
        x: ValId,
    },
    Tanh {
        x: ValId,
    },
    SoftmaxC {
        x: ValId,
    },
    ClampMin {
        x: ValId,
        lo: f64,
    },
    Clamp {
        x: ValId,
        lo: f64,
        hi: f64,
    },
    Add {
        a: ValId,
        b: ValId,
    },
    Sub {
        a: ValId,
        b: ValId,
    },
    Mul {
        a: ValId,
        b: ValId,
    },
    Scale {
        x: ValId,
        c: f64,
    },
    AddScalar {
        x: ValId,
    },
    Ln {
        x: ValId,
    },
    ConcatC {
        parts: Vec<ValId>,
    },
    RepeatC {
        x: ValId,
        reps: usize,
    },
    SumC {
        x: ValId,
    },
    PatchMean {
        x: ValId,
        patch: usize,
    },
    GlobalMean {
        x: ValId,
    },
    Mean {
        x: ValId,
    },
    Sum {
        x: ValId,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Saved batch-norm intermediates needed by the backward pass.
struct BnSave<T: Scalar> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

/// Per-parameter gradients returned by [`Tape::backward`].
pub struct Grads<T: Scalar> {
    pub by_param: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(id).and_then(|g| g.as_ref())
    }

    pub fn global_norm(&self) -> f64 {
        let mut s = 0.0;
        for g in self.by_param.iter().flatten() {
            for v in g.data() {
                let v = v.to_f64();
                s += v * v;
            }
        }
        s.sqrt()
    }

    /// Scales all gradients so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = T::from_f64(max_norm / norm);
            for g in self.by_param.iter_mut().flatten() {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.by_param
            .iter()
            .flatten()
            .all(|g| g.all_finite())
    }
}

pub struct Tape<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    nodes: Vec<Node<T>>,
    bn_saves: Vec<BnSave<T>>,
    grad_enabled: bool,
    batch_stats: bool,
    update_running: bool,
    /// Reused im2col buffer; avoids a large allocation per convolution.
    scratch: Vec<T>,
}

impl<'a, T: Scalar> Tape<'a, T> {
    /// Gradient recording, batch statistics, running-stat updates.
    pub fn training(store: &'a mut ParamStore<T>) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            bn_saves: Vec::new(),
            grad_enabled: true,
            batch_stats: true,
            update_running: true,
            scratch: Vec::new(),
        }
    }

    /// Like `training` but leaves running statistics untouched, so repeated
    /// evaluations of the same graph are side-effect free (finite-difference
    /// probing relies on this).
    pub fn training_frozen(store: &'a mut ParamStore<T>) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            bn_saves: Vec::new(),
            grad_enabled: true,
            batch_stats: true,
            update_running: false,
            scratch: Vec::new(),
        }
    }

    /// No gradients, normalization uses running statistics.
    pub fn inference(store: &'a mut ParamStore<T>) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            bn_saves: Vec::new(),
            grad_enabled: false,
            batch_stats: false,
            update_running: false,
            scratch: Vec::new(),
        }
    }

    pub fn value(&self, id: ValId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> ValId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, id: ValId) -> bool {
        self.nodes[id].requires_grad
    }

    fn wsrc_value(&self, w: WSrc) -> &Tensor<T> {
        match w {
            WSrc::Param(p) => self.store.get(p),
            WSrc::Node(v) => &self.nodes[v].value,
        }
    }

    fn wsrc_rg(&self, w: WSrc) -> bool {
        match w {
            WSrc::Param(p) => self.store.is_trainable(p),
            WSrc::Node(v) => self.rg(v),
        }
    }

    // ---- leaves ----

    pub fn input(&mut self, t: Tensor<T>) -> ValId {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, p: ParamId) -> ValId {
        let v = self.store.get(p).clone();
        let rg = self.store.is_trainable(p);
        self.push(v, Op::Param(p), rg)
    }

    // ---- structural ops ----

    pub fn concat_c(&mut self, parts: &[ValId]) -> ValId {
        assert!(!parts.is_empty());
        let (_, h, w) = self.nodes[parts[0]].value.chw();
        let mut c_total = 0;
        for &p in parts {
            let (c, ph, pw) = self.nodes[p].value.chw();
            assert_eq!(
                (ph, pw),
                (h, w),
                "concat spatial mismatch: {:?} vs {:?}",
                (ph, pw),
                (h, w)
            );
            c_total += c;
        }
        let mut out = Tensor::zeros(&[c_total, h, w]);
        let mut off = 0;
        for &p in parts {
            let t = &self.nodes[p].value;
            let c = t.chw().0;
            out.data_mut()[off * h * w..(off + c) * h * w].copy_from_slice(t.data());
            off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            out,
            Op::ConcatC {
                parts: parts.to_vec(),
            },
            rg,
        )
    }

    pub fn repeat_c(&mut self, x: ValId, reps: usize) -> ValId {
        let (c, h, w) = self.nodes[x].value.chw();
        assert_eq!(c, 1, "repeat_c expects a single-channel input");
        let mut out = Tensor::zeros(&[reps, h, w]);
        for r in 0..reps {
            out.data_mut()[r * h * w..(r + 1) * h * w]
                .copy_from_slice(self.nodes[x].value.data());
        }
        let rg = self.rg(x);
        self.push(out, Op::RepeatC { x, reps }, rg)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: ValId, b: ValId) -> ValId {
        let v = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: ValId, b: ValId) -> ValId {
        let v = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: ValId, b: ValId) -> ValId {
        let v = self.nodes[a].value.zip_map(&self.nodes[b].value, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: ValId, c: f64) -> ValId {
        let s = T::from_f64(c);
        let v = self.nodes[x].value.map(|t| t * s);
        let rg = self.rg(x);
        self.push(v, Op::Scale { x, c }, rg)
    }

    pub fn add_scalar(&mut self, x: ValId, c: f64) -> ValId {
        let s = T::from_f64(c);
        let v = self.nodes[x].value.map(|t| t + s);
        let rg = self.rg(x);
        self.push(v, Op::AddScalar { x }, rg)
    }

    pub fn ln(&mut self, x: ValId) -> ValId {
        let v = self.nodes[x].value.map(|t| t.ln());
        let rg = self.rg(x);
        self.push(v, Op::Ln { x }, rg)
    }

    pub fn relu(&mut self, x: ValId) -> ValId {
        let v = self.nodes[x].value.map(|t| t.maxs(T::ZERO));
        let rg = self.rg(x);
        self.push(v, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: ValId) -> ValId {
        let v = self.nodes[x].value.map(|t| {
            let e = (-t).exp();
            T::ONE / (T::ONE + e)
        });
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid { x }, rg)
    }

    pub fn tanh(&mut self, x: ValId) -> ValId {
        let v = self.nodes[x].value.map(|t| t.tanh());
        let rg = self.rg(x);
        self.push(v, Op::Tanh { x }, rg)
    }

    pub fn clamp_min(&mut self, x: ValId, lo: f64) -> ValId {
        let l = T::from_f64(lo);
        let v = self.nodes[x].value.map(|t| t.maxs(l));
        let rg = self.rg(x);
        self.push(v, Op::ClampMin { x, lo }, rg)
    }

    pub fn clamp(&mut self, x: ValId, lo: f64, hi: f64) -> ValId {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        let v = self.nodes[x].value.map(|t| t.maxs(l).mins(h));
        let rg = self.rg(x);
        self.push(v, Op::Clamp { x, lo, hi }, rg)
    }

    /// Channel softmax of a (C,h,w) tensor, per spatial position.
    pub fn softmax_c(&mut self, x: ValId) -> ValId {
        let t = &self.nodes[x].value;
        let (c, h, w) = t.chw();
        let n = h * w;
        let mut out = Tensor::zeros(&[c, h, w]);
        {
            let src = t.data();
            let dst = out.data_mut();
            for i in 0..n {
                let mut m = T::from_f64(f64::NEG_INFINITY);
                for ch in 0..c {
                    m = m.maxs(src[ch * n + i]);
                }
                let mut z = T::ZERO;
                for ch in 0..c {
                    let e = (src[ch * n + i] - m).exp();
                    dst[ch * n + i] = e;
                    z += e;
                }
                for ch in 0..c {
                    dst[ch * n + i] /= z;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxC { x }, rg)
    }

    /// Channel sum: (C,h,w) -> (1,h,w).
    pub fn sum_c(&mut self, x: ValId) -> ValId {
        let t = &self.nodes[x].value;
        let (c, h, w) = t.chw();
        let n = h * w;
        let mut out = Tensor::zeros(&[1, h, w]);
        for ch in 0..c {
            let src = &t.data()[ch * n..(ch + 1) * n];
            for (o, &s) in out.data_mut().iter_mut().zip(src) {
                *o += s;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SumC { x }, rg)
    }

    // ---- reductions ----

    pub fn mean(&mut self, x: ValId) -> ValId {
        let m = self.nodes[x].value.mean();
        let rg = self.rg(x);
        self.push(Tensor::scalar_value(m), Op::Mean { x }, rg)
    }

    pub fn sum(&mut self, x: ValId) -> ValId {
        let mut s = T::ZERO;
        for &v in self.nodes[x].value.data() {
            s += v;
        }
        let rg = self.rg(x);
        self.push(Tensor::scalar_value(s), Op::Sum { x }, rg)
    }

    /// Mean over non-overlapping patch×patch windows: (C,H,W) -> (C,H/p,W/p).
    pub fn patch_mean(&mut self, x: ValId, patch: usize) -> ValId {
        let t = &self.nodes[x].value;
        let (c, h, w) = t.chw();
        assert!(
            h % patch == 0 && w % patch == 0,
            "patch_mean: {}x{} not divisible by {}",
            h,
            w,
            patch
        );
        let (gh, gw) = (h / patch, w / patch);
        let norm = T::from_f64(1.0 / (patch * patch) as f64);
        let mut out = Tensor::zeros(&[c, gh, gw]);
        for ch in 0..c {
            let src = t.channel(ch);
            let dst = out.channel_mut(ch);
            for gy in 0..gh {
                for gx in 0..gw {
                    let mut s = T::ZERO;
                    for dy in 0..patch {
                        let row = &src[((gy * patch + dy) * w + gx * patch)..][..patch];
                        for &v in row {
                            s += v;
                        }
                    }
                    dst[gy * gw + gx] = s * norm;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::PatchMean { x, patch }, rg)
    }

    /// Spatial mean: (C,h,w) -> (C,1,1).
    pub fn global_mean(&mut self, x: ValId) -> ValId {
        let t = &self.nodes[x].value;
        let (c, h, w) = t.chw();
        let norm = T::from_f64(1.0 / (h * w) as f64);
        let mut out = Tensor::zeros(&[c, 1, 1]);
        for ch in 0..c {
            let mut s = T::ZERO;
            for &v in t.channel(ch) {
                s += v;
            }
            out.data_mut()[ch] = s * norm;
        }
        let rg = self.rg(x);
        self.push(out, Op::GlobalMean { x }, rg)
    }

    // ---- spatial ops ----

    pub fn avg_pool2(&mut self, x: ValId) -> ValId {
        let t = &self.nodes[x].value;
        let (c, h, w) = t.chw();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 on odd extent {h}x{w}");
        let out = avg_pool2_forward(t);
        let _ = (c, h, w);
        let rg = self.rg(x);
        self.push(out, Op::AvgPool2 { x }, rg)
    }

    pub fn upsample_nearest(&mut self, x: ValId, factor: usize) -> ValId {
        let out = upsample_nearest_forward(&self.nodes[x].value, factor);
        let rg = self.rg(x);
        self.push(out, Op::UpNearest { x, factor }, rg)
    }

    /// 2-d convolution, stride 1, zero padding preserving spatial size.
    /// Weight shape (Cout, Cin, kh, kw); odd kernels only.
    pub fn conv2d(&mut self, x: ValId, w: WSrc, b: Option<WSrc>, dilation: usize) -> ValId {
        let mut scratch = std::mem::take(&mut self.scratch);
        let out = {
            let xt = &self.nodes[x].value;
            let wt = self.wsrc_value(w);
            let bt = b.map(|bb| self.wsrc_value(bb));
            conv2d_forward_scratch(xt, wt, bt, dilation, &mut scratch)
        };
        self.scratch = scratch;
        let rg = self.rg(x)
            || self.wsrc_rg(w)
            || b.map(|bb| self.wsrc_rg(bb)).unwrap_or(false);
        self.push(out, Op::Conv2d { x, w, b, dilation }, rg)
    }

    /// Spatial batch normalization over each channel of a (C,h,w) tensor.
    /// `gamma`/`beta` are trainable; `running_mean`/`running_var` are buffers.
    pub fn batch_norm(
        &mut self,
        x: ValId,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f64,
        momentum: f64,
    ) -> ValId {
        let t = &self.nodes[x].value;
        let (c, h, w) = t.chw();
        let n = h * w;
        let epst = T::from_f64(eps);

        let (mean, var): (Vec<T>, Vec<T>) = if self.batch_stats {
            let mut mean = vec![T::ZERO; c];
            let mut var = vec![T::ZERO; c];
            for ch in 0..c {
                let s = t.channel(ch);
                let mut m = T::ZERO;
                for &v in s {
                    m += v;
                }
                m /= T::from_f64(n as f64);
                let mut vv = T::ZERO;
                for &v in s {
                    let d = v - m;
                    vv += d * d;
                }
                vv /= T::from_f64(n as f64);
                mean[ch] = m;
                var[ch] = vv;
            }
            (mean, var)
        } else {
            (
                self.store.get(running_mean).data().to_vec(),
                self.store.get(running_var).data().to_vec(),
            )
        };

        if self.batch_stats && self.update_running {
            let m = T::from_f64(momentum);
            let unbias = if n > 1 {
                T::from_f64(n as f64 / (n as f64 - 1.0))
            } else {
                T::ONE
            };
            {
                let rm = self.store.get_mut(running_mean);
                for (r, &b) in rm.data_mut().iter_mut().zip(mean.iter()) {
                    *r = (T::ONE - m) * *r + m * b;
                }
            }
            {
                let rv = self.store.get_mut(running_var);
                for (r, &b) in rv.data_mut().iter_mut().zip(var.iter()) {
                    *r = (T::ONE - m) * *r + m * b * unbias;
                }
            }
        }

        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + epst).sqrt()).collect();
        let t = &self.nodes[x].value;
        let g = self.store.get(gamma).data().to_vec();
        let bta = self.store.get(beta).data().to_vec();
        let mut xhat = Tensor::zeros(&[c, h, w]);
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            let src = t.channel(ch);
            let xh = xhat.channel_mut(ch);
            let (m, is) = (mean[ch], inv_std[ch]);
            for (o, &v) in xh.iter_mut().zip(src) {
                *o = (v - m) * is;
            }
        }
        for ch in 0..c {
            let xh = xhat.channel(ch).to_vec();
            let dst = out.channel_mut(ch);
            let (gc, bc) = (g[ch], bta[ch]);
            for (o, v) in dst.iter_mut().zip(xh) {
                *o = gc * v + bc;
            }
        }

        let rg = self.rg(x) || self.store.is_trainable(gamma) || self.store.is_trainable(beta);
        let save = if self.grad_enabled {
            self.bn_saves.push(BnSave {
                xhat,
                inv_std,
                batch_stats: self.batch_stats,
            });
            self.bn_saves.len() - 1
        } else {
            usize::MAX
        };
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                save,
            },
            rg,
        )
    }

    // ---- backward ----

    /// Backpropagates from a scalar node, returning per-parameter gradients.
    pub fn backward(&mut self, loss: ValId) -> Grads<T> {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        assert_eq!(
            self.nodes[loss].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut node_grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut param_grads: Vec<Option<Tensor<T>>> = vec![None; self.store.len()];
        node_grads[loss] = Some(Tensor::scalar_value(T::ONE));

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match node_grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Input => {}
                Op::Param(p) => {
                    if self.store.is_trainable(p) {
                        acc_param(&mut param_grads, p, &g);
                    }
                }
                Op::Conv2d { x, w, b, dilation } => {
                    let mut scratch = std::mem::take(&mut self.scratch);
                    let xt = &self.nodes[x].value;
                    let wt = self.wsrc_value(w).clone();
                    let want_x = self.rg(x);
                    let want_w = self.wsrc_rg(w);
                    let want_b = b.map(|bb| self.wsrc_rg(bb)).unwrap_or(false);
                    let (gx, gw, gb) = conv2d_backward(
                        xt, &wt, &g, dilation, want_x, want_w, want_b, &mut scratch,
                    );
                    self.scratch = scratch;
                    if let Some(gx) = gx {
                        acc_node(&mut node_grads, &self.nodes, x, gx);
                    }
                    if let Some(gw) = gw {
                        self.acc_wsrc(&mut node_grads, &mut param_grads, w, gw);
                    }
                    if let (Some(gb), Some(bb)) = (gb, b) {
                        self.acc_wsrc(&mut node_grads, &mut param_grads, bb, gb);
                    }
                }
                Op::AvgPool2 { x } => {
                    let gx = avg_pool2_backward(&g, self.nodes[x].value.shape());
                    acc_node(&mut node_grads, &self.nodes, x, gx);
                }
                Op::UpNearest { x, factor } => {
                    let gx = upsample_nearest_backward(&g, self.nodes[x].value.shape(), factor);
                    acc_node(&mut node_grads, &self.nodes, x, gx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    save,
                } => {
                    let sv = &self.bn_saves[save];
                    let (c, h, w) = self.nodes[x].value.chw();
                    let n = h * w;
                    let gamma_v = self.store.get(gamma).data().to_vec();

                    let mut dgamma = Tensor::zeros(&[c]);
                    let mut dbeta = Tensor::zeros(&[c]);
                    let mut dx = Tensor::zeros(&[c, h, w]);
                    for ch in 0..c {
                        let gs = g.channel(ch);
                        let xh = sv.xhat.channel(ch);
                        let mut sg = T::ZERO;
                        let mut sgx = T::ZERO;
                        for (&gv, &xv) in gs.iter().zip(xh) {
                            sg += gv;
                            sgx += gv * xv;
                        }
                        dgamma.data_mut()[ch] = sgx;
                        dbeta.data_mut()[ch] = sg;
                        let gc = gamma_v[ch];
                        let is = sv.inv_std[ch];
                        let dxc = dx.channel_mut(ch);
                        if sv.batch_stats {
                            let mg = sg / T::from_f64(n as f64);
                            let mgx = sgx / T::from_f64(n as f64);
                            for ((o, &gv), &xv) in dxc.iter_mut().zip(gs).zip(xh) {
                                *o = gc * is * (gv - mg - xv * mgx);
                            }
                        } else {
                            for (o, &gv) in dxc.iter_mut().zip(gs) {
                                *o = gc * is * gv;
                            }
                        }
                    }
                    if self.store.is_trainable(gamma) {
                        acc_param(&mut param_grads, gamma, &dgamma);
                    }
                    if self.store.is_trainable(beta) {
                        acc_param(&mut param_grads, beta, &dbeta);
                    }
                    acc_node(&mut node_grads, &self.nodes, x, dx);
                }
                Op::Relu { x } => {
                    let y = &self.nodes[id].value;
                    let gx = g.zip_map(y, |gv, yv| if yv > T::ZERO { gv } else { T::ZERO });
                    acc_node(&mut node_grads, &self.nodes, x, gx);
                }
                Op::Sigmoid { x } => {
                    let y = &self.nodes[id].value;
                    let gx = g.zip_map(y, |gv, yv| gv * yv * (T::ONE - yv));
                    acc_node(&mut node_grads, &self.nodes, x, gx);
                }
                Op::Tanh { x } => {
                    let y = &self.nodes[id].value;
                    let gx = g.zip_map(y, |gv, yv| gv * (T::ONE - yv * yv));
                    acc_node(&mut node_grads, &self.nodes, x, gx);
                }
                Op::SoftmaxC { x } => {
                    let y = &self.nodes[id].value;
                    let (c, h, w) = y.chw();
                    let n = h * w;
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    let yd = y.data();
                    let gd = g.data();
                    let xd = gx.data_mut();
                    for i in 0..n {
                        let mut dot = T::ZERO;
                        for ch in 0..c {
                            dot += gd[ch * n + i] * yd[ch * n + i];
                        }
                        for ch in 0..c {
                            xd[ch * n + i] = yd[ch * n + i] * (gd[ch * n + i] - dot);
                        }
                    }
                    acc_node(&mut node_grads, &self.nodes, x, gx);
                }
                Op::ClampMin { x, lo } => {
                    let l = T::from_f64(lo);
                    let y = &self.nodes[id].value;
                    let gx = g.zip_map(y, |gv, yv| if yv > l { gv } else { T::ZERO });
                    acc_node(&mut node_grads, &self.nodes, x, gx);
                }
                Op::Clamp { x, lo, hi } => {
                    let (l, hh) = (T::from_f64(lo), T::from_f64(hi));
                    let y = &self.nodes[id].value;
                    let gx = g.zip_map(y, |gv, yv| {
                        if yv > l && yv < hh {
                            gv
                        } else {
                            T::ZERO
                        }
                    });
                    acc_node(&mut node_grads, &self.nodes, x, gx);
                }
                Op::Add { a, b } => {
                    acc_node(&mut node_grads, &self.nodes, a, g.clone());
                    acc_node(&mut node_grads, &self.nodes, b, g);
                }
                Op::Sub { a, b } => {
                    acc_node(&mut node_grads, &self.nodes, a, g.clone());
                    let neg = g.map(|v| -v);
                    acc_node(&mut node_grads, &self.nodes, b, neg);
                }
                Op::Mul { a, b } => {
                    let ga = g.zip_map(&self.nodes[b].value, |gv, bv| gv * bv);
                    let gb = g.zip_map(&self.nodes[a].value, |gv, av| gv * av);
                    acc_node(&mut node_grads, &self.nodes, a, ga);
                    acc_node(&mut node_grads, &self.nodes, b, gb);
                }
                Op::Scale { x, c } => {
                    let s = T::from_f64(c);
                    let gx = g.map(|v| v * s);
                    acc_node(&mut node_grads, &self.nodes, x, gx);
                }
                Op::AddScalar { x } => {
                    acc_node(&mut node_grads, &self.nodes, x, g);
                }
                Op::Ln { x } => {
                    let gx = g.zip_map(&self.nodes[x].value, |gv, xv| gv / xv);
                    acc_node(&mut node_grads, &self.nodes, x, gx);
                }
                Op::ConcatC { parts } => {
                    let (_, h, w) = self.nodes[id].value.chw();
                    let n = h * w;
                    let mut off = 0;
                    for &p in &parts {
                        let c = self.nodes[p].value.chw().0;
                        let mut gp = Tensor::zeros(&[c, h, w]);
                        gp.data_mut()
                            .copy_from_slice(&g.data()[off * n..(off + c) * n]);
                        off += c;
                        acc_node(&mut node_grads, &self.nodes, p, gp);
                    }
                }
                Op::RepeatC { x, reps } => {
                    let (_, h, w) = self.nodes[x].value.chw();
                    let n = h * w;
                    let mut gx = Tensor::zeros(&[1, h, w]);
                    for r in 0..reps {
                        let part = &g.data()[r * n..(r + 1) * n];
                        for (o, &v) in gx.data_mut().iter_mut().zip(part) {
                            *o += v;
                        }
                    }
                    acc_node(&mut node_grads, &self.nodes, x, gx);
                }
                Op::SumC { x } => {
                    let (c, h, w) = self.nodes[x].value.chw();
                    let n = h * w;
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    for ch in 0..c {
                        gx.data_mut()[ch * n..(ch + 1) * n].copy_from_slice(g.data());
                    }
                    acc_node(&mut node_grads, &self.nodes, x, gx);
                }
                Op::PatchMean { x, patch } => {
                    let (c, h, w) = self.nodes[x].value.chw();
                    let gw_ = w / patch;
                    let norm = T::from_f64(1.0 / (patch * patch) as f64);
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    for ch in 0..c {
                        let gsrc = g.channel(ch);
                        let dst = gx.channel_mut(ch);
                        for iy in 0..h {
                            for ix in 0..w {
                                dst[iy * w + ix] =
                                    gsrc[(iy / patch) * gw_ + ix / patch] * norm;
                            }
                        }
                    }
                    acc_node(&mut node_grads, &self.nodes, x, gx);
                }
                Op::GlobalMean { x } => {
                    let (c, h, w) = self.nodes[x].value.chw();
                    let norm = T::from_f64(1.0 / (h * w) as f64);
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    for ch in 0..c {
                        let gv = g.data()[ch] * norm;
                        for o in gx.channel_mut(ch) {
                            *o = gv;
                        }
                    }
                    acc_node(&mut node_grads, &self.nodes, x, gx);
                }
                Op::Mean { x } => {
                    let len = self.nodes[x].value.len();
                    let gv = g.item() / T::from_f64(len as f64);
                    let gx = Tensor::full(self.nodes[x].value.shape(), gv);
                    acc_node(&mut node_grads, &self.nodes, x, gx);
                }
                Op::Sum { x } => {
                    let gx = Tensor::full(self.nodes[x].value.shape(), g.item());
                    acc_node(&mut node_grads, &self.nodes, x, gx);
                }
            }
        }

        Grads {
            by_param: param_grads,
        }
    }

    fn acc_wsrc(
        &self,
        node_grads: &mut Vec<Option<Tensor<T>>>,
        param_grads: &mut Vec<Option<Tensor<T>>>,
        w: WSrc,
        g: Tensor<T>,
    ) {
        match w {
            WSrc::Param(p) => {
                if self.store.is_trainable(p) {
                    acc_param(param_grads, p, &g);
                }
            }
            WSrc::Node(v) => acc_node(node_grads, &self.nodes, v, g),
        }
    }
}

fn acc_node<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    id: ValId,
    g: Tensor<T>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(t) => {
            debug_assert_eq!(t.shape(), g.shape());
            for (a, &b) in t.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn acc_param<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: ParamId, g: &Tensor<T>) {
    match &mut grads[id] {
        Some(t) => {
            debug_assert_eq!(t.shape(), g.shape());
            for (a, &b) in t.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.clone()),
    }
}

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------

/// Expands (Cin,H,W) into the (Cin*kh*kw, H*W) patch matrix for a stride-1
/// same-padded convolution.
fn im2col<T: Scalar>(x: &Tensor<T>, kh: usize, kw: usize, dilation: usize, cols: &mut [T]) {
    let (cin, h, w) = x.chw();
    let n = h * w;
    debug_assert_eq!(cols.len(), cin * kh * kw * n);
    let pad_h = (dilation * (kh - 1)) / 2;
    let pad_w = (dilation * (kw - 1)) / 2;
    let xdata = x.data();
    par::for_each_chunk_mut(cols, n, |row, out| {
        let kx = row % kw;
        let ky = (row / kw) % kh;
        let ci = row / (kw * kh);
        let dy = (ky * dilation) as isize - pad_h as isize;
        let dx = (kx * dilation) as isize - pad_w as isize;
        let src = &xdata[ci * n..(ci + 1) * n];
        for oy in 0..h {
            let iy = oy as isize + dy;
            let dst_row = &mut out[oy * w..(oy + 1) * w];
            if iy < 0 || iy >= h as isize {
                dst_row.fill(T::ZERO);
                continue;
            }
            let iy = iy as usize;
            // valid ox range so that ix = ox + dx stays in [0, w)
            let ox_start = (-dx).max(0) as usize;
            let ox_end = ((w as isize - dx).min(w as isize)).max(0) as usize;
            dst_row[..ox_start].fill(T::ZERO);
            dst_row[ox_end..].fill(T::ZERO);
            if ox_start < ox_end {
                let ix0 = (ox_start as isize + dx) as usize;
                dst_row[ox_start..ox_end]
                    .copy_from_slice(&src[iy * w + ix0..iy * w + ix0 + (ox_end - ox_start)]);
            }
        }
    });
}

/// C(m×n) = A(m×k) · B(k×n), contiguous row-major, with the column range of C
/// split across threads. Each element is produced by exactly one task with the
/// same k-accumulation order as a single call, so results do not depend on the
/// thread count.
fn gemm_par_cols<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let threads = par::num_threads();
    let min_cols = 4096;
    let blocks = (n / min_cols).clamp(1, threads);
    if blocks <= 1 {
        gemm(m, k, n, T::ONE, a, b, T::ZERO, c);
        return;
    }
    let bsz = n.div_ceil(blocks);
    let bp = b.as_ptr() as usize;
    let cp = c.as_mut_ptr() as usize;
    par::for_each_index(blocks, 1, |bi| {
        let j0 = bi * bsz;
        if j0 >= n {
            return;
        }
        let nb = bsz.min(n - j0);
        // Safety: blocks write disjoint column ranges of C and read only A/B.
        unsafe {
            let bptr = (bp as *const T).add(j0);
            let cptr = (cp as *mut T).add(j0);
            let alen = m * k;
            let blen = k * n - j0;
            let clen = m * n - j0;
            T::gemm_strided(
                m,
                k,
                nb,
                T::ONE,
                std::slice::from_raw_parts(
                    a.as_ptr(),
                    alen,
                ),
                k as isize,
                1,
                std::slice::from_raw_parts(bptr, blen),
                n as isize,
                1,
                T::ZERO,
                std::slice::from_raw_parts_mut(cptr, clen),
                n as isize,
                1,
            );
        }
    });
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    dilation: usize,
) -> Tensor<T> {
    let mut scratch = Vec::new();
    conv2d_forward_scratch(x, w, b, dilation, &mut scratch)
}

fn conv2d_forward_scratch<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    dilation: usize,
    scratch: &mut Vec<T>,
) -> Tensor<T> {
    let (cin, h, ww) = x.chw();
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be 4-d");
    let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(
        cin, wcin,
        "conv2d channel mismatch: input {cin}, weight expects {wcin}"
    );
    assert!(kh % 2 == 1 && kw % 2 == 1, "odd kernels only");
    let n = h * ww;
    let k = cin * kh * kw;
    let mut out = Tensor::zeros(&[cout, h, ww]);
    if kh == 1 && kw == 1 {
        gemm_par_cols(cout, k, n, w.data(), x.data(), out.data_mut());
    } else {
        scratch.resize(k * n, T::ZERO);
        im2col(x, kh, kw, dilation, scratch);
        gemm_par_cols(cout, k, n, w.data(), scratch, out.data_mut());
    }
    if let Some(bias) = b {
        assert_eq!(bias.len(), cout, "bias length mismatch");
        for co in 0..cout {
            let bv = bias.data()[co];
            for v in out.channel_mut(co) {
                *v += bv;
            }
        }
    }
    out
}

/// grad_Wᵀ(K×cout) = cols(K×N) · gyᵀ(N×cout), K-rows split across threads.
/// Both operands stream contiguously per task, unlike the (cout×N)·(N×K)
/// orientation whose strided patch operand defeats the GEMM packing.
fn grad_w_gemm<T: Scalar>(cols: &[T], gy: &[T], k: usize, n: usize, cout: usize) -> Vec<T> {
    let mut gwt = vec![T::ZERO; k * cout];
    let threads = par::num_threads();
    let blocks = if (k * n * cout) < (1 << 21) {
        1
    } else {
        threads.min(k).max(1)
    };
    let bsz = k.div_ceil(blocks);
    let colsp = cols.as_ptr() as usize;
    let gwp = gwt.as_mut_ptr() as usize;
    par::for_each_index(blocks, 1, |bi| {
        let k0 = bi * bsz;
        if k0 >= k {
            return;
        }
        let kb = bsz.min(k - k0);
        // Safety: tasks write disjoint row ranges of gwt and only read
        // cols/gy.
        unsafe {
            T::gemm_strided(
                kb,
                n,
                cout,
                T::ONE,
                std::slice::from_raw_parts((colsp as *const T).add(k0 * n), kb * n),
                n as isize,
                1,
                std::slice::from_raw_parts(gy.as_ptr(), cout * n),
                1,
                n as isize,
                T::ZERO,
                std::slice::from_raw_parts_mut((gwp as *mut T).add(k0 * cout), kb * cout),
                cout as isize,
                1,
            );
        }
    });
    gwt
}

/// Returns (grad_x, grad_w, grad_b) as requested.
#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    dilation: usize,
    want_x: bool,
    want_w: bool,
    want_b: bool,
    scratch: &mut Vec<T>,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (cin, h, ww) = x.chw();
    let ws = w.shape();
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let n = h * ww;
    let k = cin * kh * kw;
    let pad_h = (dilation * (kh - 1)) / 2;
    let pad_w = (dilation * (kw - 1)) / 2;

    let grad_w = if want_w {
        let gwt = if kh == 1 && kw == 1 {
            grad_w_gemm(x.data(), gy.data(), k, n, cout)
        } else {
            scratch.resize(k * n, T::ZERO);
            im2col(x, kh, kw, dilation, scratch);
            grad_w_gemm(scratch, gy.data(), k, n, cout)
        };
        let mut gw = Tensor::zeros(w.shape());
        let gwd = gw.data_mut();
        for ki in 0..k {
            for co in 0..cout {
                gwd[co * k + ki] = gwt[ki * cout + co];
            }
        }
        Some(gw)
    } else {
        None
    };

    let grad_b = if want_b {
        let mut gb = Tensor::zeros(&[cout]);
        for co in 0..cout {
            let mut s = T::ZERO;
            for &v in gy.channel(co) {
                s += v;
            }
            gb.data_mut()[co] = s;
        }
        Some(gb)
    } else {
        None
    };

    let grad_x = if want_x {
        // gcols (k×n) = wᵀ (k×cout) · gy (cout×n)
        scratch.resize(k * n, T::ZERO);
        let gcols: &mut [T] = scratch;
        {
            let threads = par::num_threads();
            let min_cols = 4096;
            let blocks = (n / min_cols).clamp(1, threads);
            let bsz = n.div_ceil(blocks);
            let gyp = gy.data().as_ptr() as usize;
            let gcp = gcols.as_mut_ptr() as usize;
            let wd = w.data();
            par::for_each_index(blocks, 1, |bi| {
                let j0 = bi * bsz;
                if j0 >= n {
                    return;
                }
                let nb = bsz.min(n - j0);
                unsafe {
                    T::gemm_strided(
                        k,
                        cout,
                        nb,
                        T::ONE,
                        wd,
                        1,
                        k as isize,
                        std::slice::from_raw_parts((gyp as *const T).add(j0), cout * n - j0),
                        n as isize,
                        1,
                        T::ZERO,
                        std::slice::from_raw_parts_mut((gcp as *mut T).add(j0), k * n - j0),
                        n as isize,
                        1,
                    );
                }
            });
        }
        // gather: gx[ci,iy,ix] = sum over (ky,kx) of gcols[(ci,ky,kx), (iy-ky*d+pad, ix-kx*d+pad)]
        let mut gx = Tensor::zeros(&[cin, h, ww]);
        let gc = &gcols;
        par::for_each_chunk_mut(gx.data_mut(), n, |ci, out| {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ci * kh + ky) * kw + kx;
                    let src = &gc[row * n..(row + 1) * n];
                    let dy = pad_h as isize - (ky * dilation) as isize;
                    let dx = pad_w as isize - (kx * dilation) as isize;
                    for iy in 0..h {
                        let oy = iy as isize + dy;
                        if oy < 0 || oy >= h as isize {
                            continue;
                        }
                        let oy = oy as usize;
                        let ix_start = (-dx).max(0) as usize;
                        let ix_end = ((ww as isize - dx).min(ww as isize)).max(0) as usize;
                        if ix_start >= ix_end {
                            continue;
                        }
                        let ox0 = (ix_start as isize + dx) as usize;
                        let dstrow = &mut out[iy * ww + ix_start..iy * ww + ix_end];
                        let srcrow = &src[oy * ww + ox0..oy * ww + ox0 + (ix_end - ix_start)];
                        for (d, &s) in dstrow.iter_mut().zip(srcrow) {
                            *d += s;
                        }
                    }
                }
            }
        });
        Some(gx)
    } else {
        None
    };

    (grad_x, grad_w, grad_b)
}

pub(crate) fn avg_pool2_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let (oh, ow) = (h / 2, w / 2);
    let q = T::from_f64(0.25);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = out.channel_mut(ch);
        for oy in 0..oh {
            let r0 = &src[(2 * oy) * w..(2 * oy + 1) * w];
            let r1 = &src[(2 * oy + 1) * w..(2 * oy + 2) * w];
            for ox in 0..ow {
                dst[oy * ow + ox] =
                    (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * q;
            }
        }
    }
    out
}

fn avg_pool2_backward<T: Scalar>(g: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let ow = w / 2;
    let q = T::from_f64(0.25);
    let mut gx = Tensor::zeros(in_shape);
    for ch in 0..c {
        let gs = g.channel(ch);
        let dst = gx.channel_mut(ch);
        for iy in 0..h {
            for ix in 0..w {
                dst[iy * w + ix] = gs[(iy / 2) * ow + ix / 2] * q;
            }
        }
    }
    gx
}

pub(crate) fn upsample_nearest_forward<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = out.channel_mut(ch);
        for oy in 0..oh {
            let sy = oy / factor;
            for ox in 0..ow {
                dst[oy * ow + ox] = src[sy * w + ox / factor];
            }
        }
    }
    out
}

fn upsample_nearest_backward<T: Scalar>(
    g: &Tensor<T>,
    in_shape: &[usize],
    factor: usize,
) -> Tensor<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let gw = w * factor;
    let mut gx = Tensor::zeros(in_shape);
    for ch in 0..c {
        let gs = g.channel(ch);
        let dst = gx.channel_mut(ch);
        for iy in 0..h {
            for ix in 0..w {
                let mut s = T::ZERO;
                for dy in 0..factor {
                    let row = &gs[((iy * factor + dy) * gw + ix * factor)..][..factor];
                    for &v in row {
                        s += v;
                    }
                }
                dst[iy * w + ix] = s;
            }
        }
    }
    gx
}
