//! End-to-end training on the toy task: two 3×3 convolutions, one attention
//! layer, a 1×1 classifier, SGD with momentum and a poly schedule.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::autograd::{BackwardCtx, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::module::{Layer, LayerOutput, Mode, Module, ParamCursor};
use crate::nonlocal::NonLocalParams;
use crate::ops::{BatchStats, Projection1x1};
use crate::repgraph::{AttentionWeights, LayerConfig, RepGraphLayer};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, save_tensors, Rng, Scalar, Tensor4};

use super::toy::{toy_batch, ToyStyle, TOY_CLASSES};

/// 3×3 convolution with zero padding 1 and stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3<T> {
    /// `(c_out, c_in, 3, 3)`.
    pub weight: Tensor4<T>,
    /// `(1, c_out, 1, 1)`.
    pub bias: Tensor4<T>,
}

impl<T: Scalar> Conv3x3<T> {
    /// Uniform `±sqrt(6 / fan_in)` weights, zero bias.
    pub fn init(rng: &mut Rng, c_in: usize, c_out: usize) -> Self {
        let bound = (6.0 / (9 * c_in) as f64).sqrt();
        Conv3x3 {
            weight: rng.uniform_tensor((c_out, c_in, 3, 3), -bound, bound),
            bias: Tensor4::zeros((1, c_out, 1, 1)),
        }
    }
}

impl<T: Scalar> Module<T> for Conv3x3<T> {
    fn params(&self) -> Vec<&Tensor4<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor4<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Rows `ci·9 + ky·3 + kx`, columns `i·w + j`.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for i in 0..h {
                    let si = i + ky;
                    for j in 0..w {
                        let sj = j + kx;
                        row[i * w + j] = if si >= 1 && si <= h && sj >= 1 && sj <= w {
                            x[ci * hw + (si - 1) * w + (sj - 1)]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for i in 0..h {
                    let si = i + ky;
                    for j in 0..w {
                        let sj = j + kx;
                        if si >= 1 && si <= h && sj >= 1 && sj <= w {
                            dx[ci * hw + (si - 1) * w + (sj - 1)] += row[i * w + j];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if ws.c != xs.c || ws.h != 3 || ws.w != 3 || b.numel() != ws.n {
        return Err(Error::dim("conv3x3", xs, ws));
    }
    let (c_out, k, hw) = (ws.n, xs.c * 9, xs.hw());
    let mut cols = vec![T::zero(); k * hw];
    let mut out = Tensor4::zeros(xs.with_c(c_out));
    for bi in 0..xs.n {
        im2col(x.batch(bi), xs.c, xs.h, xs.w, &mut cols);
        let ob = out.batch_mut(bi);
        for (o, &bv) in b.data().iter().enumerate() {
            ob[o * hw..(o + 1) * hw].fill(bv);
        }
        gemm_acc(w.data(), &cols, ob, c_out, k, hw);
    }
    Ok(out)
}

struct Conv3x3Op;

impl<T: Scalar> Op<T> for Conv3x3Op {
    fn name(&self) -> &'static str {
        "conv3x3"
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        grad: &Tensor4<T>,
    ) -> Result<Vec<Option<Tensor4<T>>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (xs, c_out) = (x.shape(), w.shape().n);
        let (k, hw) = (xs.c * 9, xs.hw());
        let mut dx = Tensor4::zeros(xs);
        let mut dw = Tensor4::zeros(w.shape());
        let mut db = Tensor4::zeros((1, c_out, 1, 1));
        let mut cols = vec![T::zero(); k * hw];
        let mut dcols = vec![T::zero(); k * hw];
        for bi in 0..xs.n {
            let gb = grad.batch(bi);
            im2col(x.batch(bi), xs.c, xs.h, xs.w, &mut cols);
            gemm_nt_acc(gb, &cols, dw.data_mut(), c_out, hw, k);
            dcols.fill(T::zero());
            gemm_tn_acc(w.data(), gb, &mut dcols, k, c_out, hw);
            col2im(&dcols, xs.c, xs.h, xs.w, dx.batch_mut(bi));
            for o in 0..c_out {
                db.data_mut()[o] += gb[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
            }
        }
        Ok(vec![Some(dx), Some(dw), Some(db)])
    }
}

/// Records a 3×3 convolution on `g` through the public custom-op hook.
pub fn conv3x3<T: Scalar>(g: &mut Graph<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let out = conv_forward(g.value(x), g.value(weight), g.value(bias))?;
    Ok(g.push_op(out, &[x, weight, bias], Box::new(Conv3x3Op)))
}

/// Which block sits between the convolutions and the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ToyLayerKind {
    #[default]
    RepGraph,
    NonLocal,
    /// Ablated: identity.
    None,
}

impl FromStr for ToyLayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "repgraph" => Ok(ToyLayerKind::RepGraph),
            "nonlocal" => Ok(ToyLayerKind::NonLocal),
            "none" => Ok(ToyLayerKind::None),
            other => Err(Error::Validation(format!(
                "unknown layer `{other}` (expected repgraph, nonlocal or none)"
            ))),
        }
    }
}

impl fmt::Display for ToyLayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToyLayerKind::RepGraph => "repgraph",
            ToyLayerKind::NonLocal => "nonlocal",
            ToyLayerKind::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ToyLayer {
    RepGraph(RepGraphLayer<f32>),
    NonLocal(NonLocalParams<f32>),
    None,
}

impl ToyLayer {
    fn params(&self) -> Vec<&Tensor4<f32>> {
        match self {
            ToyLayer::RepGraph(l) => l.params(),
            ToyLayer::NonLocal(l) => l.params(),
            ToyLayer::None => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor4<f32>> {
        match self {
            ToyLayer::RepGraph(l) => l.params_mut(),
            ToyLayer::NonLocal(l) => l.params_mut(),
            ToyLayer::None => Vec::new(),
        }
    }
}

/// conv3x3 → ReLU → conv3x3 → ReLU → layer → 1×1 classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub conv1: Conv3x3<f32>,
    pub conv2: Conv3x3<f32>,
    pub layer: ToyLayer,
    pub head: Projection1x1<f32>,
}

/// Graph outputs of one model pass.
pub struct ToyPass {
    pub logits: Var,
    pub layer: Option<LayerOutput<f32>>,
}

impl ToyModel {
    pub fn new(kind: ToyLayerKind, layer_cfg: &LayerConfig, rng: &mut Rng) -> Result<Self> {
        let c = layer_cfg.c;
        let conv1 = Conv3x3::init(rng, 3, c);
        let conv2 = Conv3x3::init(rng, c, c);
        let layer = match kind {
            ToyLayerKind::RepGraph => {
                ToyLayer::RepGraph(RepGraphLayer::with_rng(layer_cfg.clone(), rng)?)
            }
            ToyLayerKind::NonLocal => ToyLayer::NonLocal(NonLocalParams::init(
                rng,
                c,
                layer_cfg.cp,
                layer_cfg.fusion,
                layer_cfg.fusion == FusionMode::Sum
                    && layer_cfg.init_mode == crate::repgraph::InitMode::PretrainedInsert,
            )?),
            ToyLayerKind::None => ToyLayer::None,
        };
        let head = Projection1x1::init(rng, c, TOY_CLASSES, true);
        Ok(ToyModel {
            conv1,
            conv2,
            layer,
            head,
        })
    }

    /// Index in [`Module::params`] of the offset-regression weight, if any.
    pub fn offset_weight_index(&self) -> Option<usize> {
        match &self.layer {
            ToyLayer::RepGraph(l) => {
                let before =
                    4 + l.params().len() - l.offset.params().len() - l.fusion.params().len();
                Some(before)
            }
            _ => None,
        }
    }

    pub fn pass(&self, g: &mut Graph<f32>, x: Var, params: &[Var], mode: Mode) -> Result<ToyPass> {
        let mut cur = ParamCursor::new(params);
        let (w1, b1, w2, b2) = (
            cur.next_var()?,
            cur.next_var()?,
            cur.next_var()?,
            cur.next_var()?,
        );
        let h = conv3x3(g, x, w1, b1)?;
        let h = g.relu(h);
        let h = conv3x3(g, h, w2, b2)?;
        let h = g.relu(h);
        let n_layer = self.layer.params().len();
        let layer_params: Vec<Var> = (0..n_layer)
            .map(|_| cur.next_var())
            .collect::<Result<_>>()?;
        let (h, layer) = match &self.layer {
            ToyLayer::RepGraph(l) => {
                let o = l.forward_with(g, h, &layer_params, mode)?;
                (o.out, Some(o))
            }
            ToyLayer::NonLocal(l) => {
                let o = l.forward_with(g, h, &layer_params, mode)?;
                (o.out, Some(o))
            }
            ToyLayer::None => (h, None),
        };
        let head = self.head.bind_from(&mut cur)?;
        cur.finish()?;
        let logits = head.apply(g, h)?;
        Ok(ToyPass { logits, layer })
    }

    fn update_running_stats(&mut self, stats: &[BatchStats<f32>]) -> Result<()> {
        match &mut self.layer {
            ToyLayer::RepGraph(l) => l.update_running_stats(stats),
            ToyLayer::NonLocal(l) => l.update_running_stats(stats),
            ToyLayer::None => Ok(()),
        }
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        let mut g = Graph::no_grad();
        let params = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let pass = self.pass(&mut g, xv, &params, Mode::Eval)?;
        Ok(g.value(pass.logits).clone())
    }

    /// Eval-mode attention rows of the sparse layer.
    pub fn attention(&self, x: &Tensor4<f32>) -> Result<Option<AttentionWeights<f32>>> {
        let mut g = Graph::no_grad();
        let params = self.bind(&mut g);
        let xv = g.constant(x.clone());
        Ok(self
            .pass(&mut g, xv, &params, Mode::Eval)?
            .layer
            .and_then(|l| l.attention))
    }
}

impl Module<f32> for ToyModel {
    fn params(&self) -> Vec<&Tensor4<f32>> {
        let mut v = self.conv1.params();
        v.extend(self.conv2.params());
        v.extend(self.layer.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor4<f32>> {
        let mut v = self.conv1.params_mut();
        v.extend(self.conv2.params_mut());
        v.extend(self.layer.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}

/// `base · (1 − iter/max)^power`.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    base * (1.0 - iter as f64 / max_iter.max(1) as f64)
        .max(0.0)
        .powf(power)
}

/// SGD with momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor4<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `v ← μv + (∇ + λp)`, `p ← p − lr·v`.
    pub fn step(
        &mut self,
        params: Vec<&mut Tensor4<f32>>,
        grads: &[&Tensor4<f32>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract("one gradient per parameter"));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor4::zeros(g.shape())).collect();
        }
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.shape() != g.shape() {
                return Err(Error::dim("sgd", p.shape(), g.shape()));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub seed: u64,
    pub layer: ToyLayerKind,
    pub layer_cfg: LayerConfig,
    /// Images in the held-out batch.
    pub heldout: usize,
    pub style: ToyStyle,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 500,
            batch: 8,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            power: 0.9,
            seed: 7,
            layer: ToyLayerKind::RepGraph,
            layer_cfg: LayerConfig {
                s: 9,
                c: 16,
                cp: 8,
                ..LayerConfig::default()
            },
            heldout: 32,
            style: ToyStyle::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub pix_acc: f64,
}

pub struct TrainReport {
    pub log: Vec<TrainLogRow>,
    pub heldout_acc: f64,
    /// L2 norm of the offset-weight gradient at iteration 1.
    pub offset_grad_norm: Option<f64>,
    pub model: ToyModel,
}

/// `iter,lr,loss,pix_acc`.
pub fn train_log_csv(rows: &[TrainLogRow]) -> String {
    let mut s = String::from("iter,lr,loss,pix_acc\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.iter, r.lr, r.loss, r.pix_acc));
    }
    s
}

/// Fraction of sites whose arg-max logit equals the label.
pub fn pixel_accuracy(logits: &Tensor4<f32>, labels: &[usize]) -> f64 {
    let s = logits.shape();
    let hw = s.hw();
    let mut hit = 0usize;
    for b in 0..s.n {
        for site in 0..hw {
            let best = (0..s.c)
                .max_by(|&a, &c| logits.plane(b, a)[site].total_cmp(&logits.plane(b, c)[site]))
                .unwrap_or(0);
            hit += usize::from(best == labels[b * hw + site]);
        }
    }
    hit as f64 / labels.len().max(1) as f64
}

/// Seed of the held-out batch, distinct from the training stream.
pub fn heldout_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Held-out accuracy of `model` on `n` fresh images.
pub fn evaluate(model: &ToyModel, seed: u64, n: usize, style: ToyStyle) -> Result<f64> {
    let (x, labels) = toy_batch(&mut Rng::new(heldout_seed(seed)), n, style);
    Ok(pixel_accuracy(&model.predict(&x)?, &labels))
}

/// Trains from scratch. When `checkpoint` is set the final parameters are
/// written there; on a non-finite loss the last good parameters are written
/// instead and [`Error::Diverged`] is returned.
pub fn train(cfg: &TrainConfig, checkpoint: Option<&Path>) -> Result<TrainReport> {
    if cfg.iters == 0 || cfg.batch == 0 {
        return Err(Error::Validation("iters and batch must be positive".into()));
    }
    let mut init_rng = Rng::new(cfg.seed);
    let mut model = ToyModel::new(cfg.layer, &cfg.layer_cfg, &mut init_rng)?;
    let mut data_rng = Rng::new(cfg.seed.wrapping_add(1));
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.iters);
    let mut offset_grad_norm = None;
    // Parameters that last produced a finite loss.
    let mut last_good: Vec<Tensor4<f32>> = model.params().into_iter().cloned().collect();

    for iter in 0..cfg.iters {
        let (x, labels) = toy_batch(&mut data_rng, cfg.batch, cfg.style);
        let mut g = Graph::new();
        let params = model.bind(&mut g);
        let xv = g.constant(x);
        let pass = model.pass(&mut g, xv, &params, Mode::Train)?;
        let loss_var = g.softmax_cross_entropy(pass.logits, &labels)?;
        let loss = g.value(loss_var).data()[0] as f64;
        if !loss.is_finite() {
            if let Some(path) = checkpoint {
                save_tensors(&last_good, path)?;
            }
            return Err(Error::Diverged {
                iter: iter + 1,
                loss,
            });
        }
        let pix_acc = pixel_accuracy(g.value(pass.logits), &labels);
        let grads = g.backward(loss_var)?;
        let grad_refs: Vec<&Tensor4<f32>> = params
            .iter()
            .map(|&v| grads.wrt(v))
            .collect::<Result<_>>()?;
        if iter == 0 {
            offset_grad_norm = model
                .offset_weight_index()
                .map(|i| (grad_refs[i].sq_norm() as f64).sqrt());
        }
        if let Some(layer) = &pass.layer {
            model.update_running_stats(&layer.bn_stats)?;
        }
        let lr = poly_lr(cfg.lr, iter, cfg.iters, cfg.power);
        for (dst, src) in last_good.iter_mut().zip(model.params()) {
            dst.data_mut().copy_from_slice(src.data());
        }
        sgd.step(model.params_mut(), &grad_refs, lr)?;
        log.push(TrainLogRow {
            iter: iter + 1,
            lr,
            loss,
            pix_acc,
        });
    }

    if let Some(path) = checkpoint {
        save_tensors(
            &model.params().into_iter().cloned().collect::<Vec<_>>(),
            path,
        )?;
    }
    let heldout_acc = evaluate(&model, cfg.seed, cfg.heldout, cfg.style)?;
    Ok(TrainReport {
        log,
        heldout_acc,
        offset_grad_norm,
        model,
    })
}
