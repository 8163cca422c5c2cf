//! Central-difference checks over every differentiable op and the full
//! layers, on several seeds.

use crate::autograd::{finite_diff_check, Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::module::{Layer, Mode, Module};
use crate::nonlocal::NonLocalParams;
use crate::repgraph::{integer_distance, InitMode, LayerConfig, RepGraphLayer, Variant};
use crate::tensor::{Rng, Shape4, Tensor4};

use super::train::conv3x3;

pub const GRAD_EPS: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-5;
pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];
/// Minimum distance of any sampling offset from an integer.
pub const MIN_OFFSET_DISTANCE: f64 = 0.1;

/// Every case the suite knows, ops first, then whole layers.
pub const CASES: &[&str] = &[
    "project",
    "add",
    "mul",
    "scale",
    "sum",
    "relu",
    "batch_norm_train",
    "batch_norm_eval",
    "concat",
    "avg_pool",
    "sample",
    "sample_grid",
    "sparse_attention",
    "sparse_attention_group",
    "sparse_attention_grid",
    "dense_attention",
    "cross_entropy",
    "conv3x3",
    "layer_simple_sum",
    "layer_simple_concat",
    "layer_bottleneck_fresh",
    "layer_bottleneck_pretrained",
    "layer_grid",
    "layer_group",
    "layer_nonlocal",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub op: String,
    pub seed: u64,
    pub max_rel_err: f64,
    /// Closest approach of a sampling offset to an integer, for cases that
    /// sample.
    pub offset_distance: Option<f64>,
    pub passed: bool,
}

type Loss = Box<dyn FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Random weights for the `sum(out ⊙ w)` probe loss.
fn probe(shape: Shape4, seed: u64) -> Tensor4<f64> {
    Rng::new(seed ^ 0x9e37_79b9).uniform_tensor(shape, -1.0, 1.0)
}

fn probed(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = probe(g.value(out).shape(), seed);
    g.weighted_sum(out, &w)
}

/// Values with `|v| ≥ 0.1` and a random sign, so ReLU kinks stay out of reach.
fn away_from_zero(rng: &mut Rng, shape: impl Into<Shape4>) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| {
        let m = rng.uniform(0.1, 1.0);
        if rng.uniform(0.0, 1.0) < 0.5 {
            -m
        } else {
            m
        }
    })
}

/// Offsets `k + f` with integer `k ∈ [-1, 1]` and `f ∈ [0.3, 0.7]`.
fn fractional_offsets(rng: &mut Rng, shape: impl Into<Shape4>) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| {
        rng.below(0, 3) as f64 - 1.0 + rng.uniform(0.3, 0.7)
    })
}

/// Shrinks offset weights and moves the biases to fractional values so every
/// regressed offset stays clear of integers.
fn tame_offsets(layer: &mut RepGraphLayer<f64>, rng: &mut Rng) {
    layer
        .offset
        .weight
        .data_mut()
        .iter_mut()
        .for_each(|w| *w *= 0.01);
    let s = layer.offset.weight.shape().n;
    layer.offset.bias = Some(fractional_offsets(rng, (1, s, 1, 1)));
}

fn layer_case(
    cfg: LayerConfig,
    rng: &mut Rng,
    seed: u64,
) -> Result<(Vec<Tensor4<f64>>, Loss, Option<f64>)> {
    let c = cfg.c;
    let mut layer = RepGraphLayer::<f64>::with_rng(cfg, rng)?;
    tame_offsets(&mut layer, rng);
    let x: Tensor4<f64> = rng.uniform_tensor((2, c, 3, 4), -1.0, 1.0);
    let mut g = Graph::no_grad();
    let params = layer.bind(&mut g);
    let xv = g.constant(x.clone());
    let out = layer.forward_with(&mut g, xv, &params, Mode::Train)?;
    let dist = integer_distance(g.value(out.offsets.expect("layer samples")));

    let mut inputs = vec![x];
    inputs.extend(layer.params().into_iter().cloned());
    let f: Loss = Box::new(move |g, v| {
        let out = layer.forward_with(g, v[0], &v[1..], Mode::Train)?;
        probed(g, out.out, seed)
    });
    Ok((inputs, f, Some(dist)))
}

fn build(op: &str, seed: u64) -> Result<(Vec<Tensor4<f64>>, Loss, Option<f64>)> {
    let mut rng = Rng::new(seed);
    let r = &mut rng;
    let x: Tensor4<f64> = r.uniform_tensor((2, 3, 3, 4), -1.0, 1.0);
    let small = LayerConfig {
        s: 3,
        c: 4,
        cp: 2,
        seed,
        ..LayerConfig::default()
    };
    let case: (Vec<Tensor4<f64>>, Loss, Option<f64>) = match op {
        "project" => {
            let w = r.uniform_tensor((5, 3, 1, 1), -1.0, 1.0);
            let b = r.uniform_tensor((1, 5, 1, 1), -1.0, 1.0);
            let f: Loss = Box::new(move |g, v| {
                let y = g.project(v[0], v[1], Some(v[2]))?;
                probed(g, y, seed)
            });
            (vec![x, w, b], f, None)
        }
        "add" | "mul" => {
            let y = r.uniform_tensor(x.shape(), -1.0, 1.0);
            let is_add = op == "add";
            let f: Loss = Box::new(move |g, v| {
                let z = if is_add {
                    g.add(v[0], v[1])?
                } else {
                    g.mul(v[0], v[1])?
                };
                probed(g, z, seed)
            });
            (vec![x, y], f, None)
        }
        "scale" => {
            let f: Loss = Box::new(move |g, v| {
                let z = g.scale(v[0], -1.7);
                probed(g, z, seed)
            });
            (vec![x], f, None)
        }
        "sum" => {
            let f: Loss = Box::new(|g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            });
            (vec![x], f, None)
        }
        "relu" => {
            let x = away_from_zero(r, (2, 3, 3, 4));
            let f: Loss = Box::new(move |g, v| {
                let z = g.relu(v[0]);
                probed(g, z, seed)
            });
            (vec![x], f, None)
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let gamma = r.uniform_tensor((1, 3, 1, 1), 0.5, 1.5);
            let beta = r.uniform_tensor((1, 3, 1, 1), -0.5, 0.5);
            let mean: Vec<f64> = (0..3).map(|_| r.uniform(-0.2, 0.2)).collect();
            let var: Vec<f64> = (0..3).map(|_| r.uniform(0.5, 1.5)).collect();
            let train = op == "batch_norm_train";
            let f: Loss = Box::new(move |g, v| {
                let y = if train {
                    g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0
                } else {
                    g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?
                };
                probed(g, y, seed)
            });
            (vec![x, gamma, beta], f, None)
        }
        "concat" => {
            let y = r.uniform_tensor((2, 2, 3, 4), -1.0, 1.0);
            let f: Loss = Box::new(move |g, v| {
                let z = g.concat_channels(v[0], v[1])?;
                probed(g, z, seed)
            });
            (vec![x, y], f, None)
        }
        "avg_pool" => {
            let x = r.uniform_tensor((2, 3, 5, 4), -1.0, 1.0);
            let f: Loss = Box::new(move |g, v| {
                let z = g.avg_pool_grid(v[0], 2)?;
                probed(g, z, seed)
            });
            (vec![x], f, None)
        }
        "sample" | "sample_grid" => {
            let gs = if op == "sample" { 1 } else { 2 };
            let (hg, wg) = (3usize.div_ceil(gs), 4usize.div_ceil(gs));
            let off = fractional_offsets(r, (2, 6, hg, wg));
            let dist = integer_distance(&off);
            let f: Loss = Box::new(move |g, v| {
                let z = g.sample_representative(v[0], v[1], gs)?;
                probed(g, z, seed)
            });
            (vec![x, off], f, Some(dist))
        }
        "sparse_attention" | "sparse_attention_group" | "sparse_attention_grid" => {
            let (gs, groups) = match op {
                "sparse_attention" => (1, 1),
                "sparse_attention_group" => (1, 2),
                _ => (2, 1),
            };
            let sites = 3usize.div_ceil(gs) * 4usize.div_ceil(gs);
            let q = r.uniform_tensor((2, 4, 3, 4), -1.0, 1.0);
            let k = r.uniform_tensor((2, sites, 3, 4), -1.0, 1.0);
            let val = r.uniform_tensor((2, sites, 3, 4), -1.0, 1.0);
            let f: Loss = Box::new(move |g, v| {
                let (z, _) = g.sparse_attention(v[0], v[1], v[2], gs, groups)?;
                probed(g, z, seed)
            });
            (vec![q, k, val], f, None)
        }
        "dense_attention" => {
            let q = r.uniform_tensor((2, 2, 3, 3), -1.0, 1.0);
            let k = r.uniform_tensor((2, 2, 3, 3), -1.0, 1.0);
            let val = r.uniform_tensor((2, 2, 3, 3), -1.0, 1.0);
            let f: Loss = Box::new(move |g, v| {
                let z = g.dense_attention(v[0], v[1], v[2])?;
                probed(g, z, seed)
            });
            (vec![q, k, val], f, None)
        }
        "cross_entropy" => {
            let logits = r.uniform_tensor((2, 4, 2, 3), -2.0, 2.0);
            let labels: Vec<usize> = (0..12).map(|_| r.below(0, 4)).collect();
            let f: Loss = Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels));
            (vec![logits], f, None)
        }
        "conv3x3" => {
            let w = r.uniform_tensor((2, 3, 3, 3), -0.5, 0.5);
            let b = r.uniform_tensor((1, 2, 1, 1), -0.5, 0.5);
            let f: Loss = Box::new(move |g, v| {
                let z = conv3x3(g, v[0], v[1], v[2])?;
                probed(g, z, seed)
            });
            (vec![x, w, b], f, None)
        }
        "layer_simple_sum" => layer_case(small, r, seed)?,
        "layer_simple_concat" => layer_case(
            LayerConfig {
                fusion: FusionMode::Concat,
                ..small
            },
            r,
            seed,
        )?,
        "layer_bottleneck_fresh" => layer_case(
            LayerConfig {
                variant: Variant::Bottleneck,
                ..small
            },
            r,
            seed,
        )?,
        "layer_bottleneck_pretrained" => layer_case(
            LayerConfig {
                variant: Variant::Bottleneck,
                init_mode: InitMode::PretrainedInsert,
                ..small
            },
            r,
            seed,
        )?,
        "layer_grid" => layer_case(LayerConfig { gs: 2, ..small }, r, seed)?,
        "layer_group" => layer_case(
            LayerConfig {
                variant: Variant::Bottleneck,
                cp: 4,
                groups: 2,
                ..small
            },
            r,
            seed,
        )?,
        "layer_nonlocal" => {
            let nl = NonLocalParams::<f64>::init(r, 4, 2, FusionMode::Sum, false)?;
            let x: Tensor4<f64> = r.uniform_tensor((2, 4, 3, 3), -1.0, 1.0);
            let mut inputs = vec![x];
            inputs.extend(nl.params().into_iter().cloned());
            let f: Loss = Box::new(move |g, v| {
                let out = nl.forward_with(g, v[0], &v[1..], Mode::Train)?;
                probed(g, out.out, seed)
            });
            (inputs, f, None)
        }
        other => return Err(Error::contract(format!("unknown gradient case '{other}'"))),
    };
    Ok(case)
}

/// Checks one case on one seed.
pub fn run_case(op: &str, seed: u64) -> Result<GradCase> {
    let (inputs, f, offset_distance) = build(op, seed)?;
    let report = finite_diff_check(f, &inputs, GRAD_EPS, GRAD_TOL)?;
    let far = offset_distance.is_none_or(|d| d >= MIN_OFFSET_DISTANCE);
    Ok(GradCase {
        op: op.to_string(),
        seed,
        max_rel_err: report.overall_max(),
        offset_distance,
        passed: report.passed && far,
    })
}

/// Every case in [`CASES`] on every seed.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<GradCase>> {
    let mut out = Vec::with_capacity(CASES.len() * seeds.len());
    for op in CASES {
        for &seed in seeds {
            out.push(run_case(op, seed)?);
        }
    }
    Ok(out)
}

/// `op,seed,max_rel_err,passed`.
pub fn gradsuite_csv(cases: &[GradCase]) -> String {
    let mut s = String::from("op,seed,max_rel_err,passed\n");
    for c in cases {
        s.push_str(&format!(
            "{},{},{:e},{}\n",
            c.op, c.seed, c.max_rel_err, c.passed
        ));
    }
    s
}
