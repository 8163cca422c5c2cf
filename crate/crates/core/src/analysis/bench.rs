//! Forward-pass latency of the blocks on identical inputs.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::module::Layer;
use crate::nonlocal::NonLocalParams;
use crate::repgraph::{LayerConfig, RepGraphLayer, Variant};
use crate::tensor::{DType, Rng, Scalar, Tensor4};

use super::flops::{Block, Geometry};

/// Query rows the dense kernel holds at once (see `nonlocal`).
const DENSE_ROWS: u64 = 64;

/// A timed block: one of the counted blocks, or a pass-through used to
/// measure timer overhead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchBlock {
    Layer(Block),
    Noop,
}

impl FromStr for BenchBlock {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "noop" {
            return Ok(BenchBlock::Noop);
        }
        s.parse().map(BenchBlock::Layer)
    }
}

impl fmt::Display for BenchBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchBlock::Layer(b) => b.fmt(f),
            BenchBlock::Noop => f.write_str("noop"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub blocks: Vec<BenchBlock>,
    pub geometries: Vec<Geometry>,
    pub dtype: DType,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Geometries whose estimated working set exceeds this are skipped.
    pub memory_budget: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            blocks: vec![BenchBlock::Layer(Block::Nl), BenchBlock::Layer(Block::Brg)],
            geometries: vec![Geometry::new(128, 64, 256, 64, 9)],
            dtype: DType::F32,
            repeats: 5,
            warmup: 2,
            seed: 0,
            memory_budget: 2 << 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub block: BenchBlock,
    pub geometry: Geometry,
    pub dtype: DType,
    pub repeats: usize,
    pub warmup: usize,
    pub median_ms: f64,
    pub iqr_ms: f64,
    /// Why the geometry was not timed.
    pub skipped: Option<String>,
}

/// Rough peak bytes of one forward pass: input, output and the largest
/// intermediates.
pub fn estimate_bytes(block: BenchBlock, geo: &Geometry, dtype: DType) -> u64 {
    let n = geo.nodes();
    let (c, cp, s) = (geo.c as u64, geo.cp as u64, geo.s as u64);
    let elems = match block {
        BenchBlock::Noop => 2 * n * c,
        BenchBlock::Layer(Block::Nl) => 3 * n * c + 4 * n * cp + DENSE_ROWS * n,
        BenchBlock::Layer(Block::Srg) => 3 * n * c + 4 * n * cp + 2 * n * s * (cp + 2) + n * s,
        BenchBlock::Layer(_) => 3 * n * c + 3 * n * cp + n * s * (cp + 4) + n * s,
    };
    elems * dtype.size() as u64
}

fn layer_config(block: Block, geo: &Geometry, seed: u64) -> LayerConfig {
    let mut cfg = LayerConfig {
        variant: Variant::Bottleneck,
        s: geo.s,
        c: geo.c,
        cp: geo.cp,
        fusion: geo.fusion,
        offset_source: geo.offset_source,
        seed,
        ..LayerConfig::default()
    };
    match block {
        Block::Srg => cfg.variant = Variant::Simple,
        Block::Grid => cfg.gs = geo.gs,
        Block::Group => cfg.groups = geo.groups,
        Block::Nl | Block::Brg => {}
    }
    cfg
}

/// Median and interquartile range, linearly interpolated.
pub fn median_iqr(samples: &[f64]) -> (f64, f64) {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    (q(0.5), q(0.75) - q(0.25))
}

/// A randomly initialized `block` for `geo`; bottleneck forms for `brg`,
/// `grid` and `group`.
pub fn build_layer<T: Scalar>(
    block: Block,
    geo: &Geometry,
    rng: &mut Rng,
) -> Result<Box<dyn Layer<T>>> {
    Ok(match block {
        Block::Nl => Box::new(NonLocalParams::init(rng, geo.c, geo.cp, geo.fusion, false)?),
        b => Box::new(RepGraphLayer::with_rng(
            layer_config(b, geo, rng.seed()),
            rng,
        )?),
    })
}

fn time_forward<T: Scalar>(
    block: BenchBlock,
    geo: &Geometry,
    cfg: &BenchConfig,
) -> Result<Vec<f64>> {
    let mut rng = Rng::new(cfg.seed);
    let x: Tensor4<T> = rng.uniform_tensor((1, geo.c, geo.h, geo.w), -1.0, 1.0);
    let layer = match block {
        BenchBlock::Noop => None,
        BenchBlock::Layer(b) => Some(build_layer::<T>(b, geo, &mut rng)?),
    };
    let run = || -> Result<f64> {
        let t = Instant::now();
        match &layer {
            Some(l) => {
                black_box(l.forward(black_box(&x))?);
            }
            None => {
                black_box(black_box(&x).clone());
            }
        }
        Ok(t.elapsed().as_secs_f64() * 1e3)
    };
    for _ in 0..cfg.warmup {
        run()?;
    }
    (0..cfg.repeats).map(|_| run()).collect()
}

/// Times every block at every geometry, in order, on the calling thread.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<Vec<BenchResult>> {
    if cfg.repeats < 5 {
        return Err(Error::Validation(format!(
            "repeats must be at least 5, got {}",
            cfg.repeats
        )));
    }
    if cfg.warmup < 2 {
        return Err(Error::Validation(format!(
            "warmup must be at least 2, got {}",
            cfg.warmup
        )));
    }
    let mut out = Vec::new();
    for geo in &cfg.geometries {
        for &block in &cfg.blocks {
            let mut res = BenchResult {
                block,
                geometry: *geo,
                dtype: cfg.dtype,
                repeats: cfg.repeats,
                warmup: cfg.warmup,
                median_ms: f64::NAN,
                iqr_ms: f64::NAN,
                skipped: None,
            };
            let need = estimate_bytes(block, geo, cfg.dtype);
            if need > cfg.memory_budget {
                res.skipped = Some(format!(
                    "needs ~{need} bytes, budget is {}",
                    cfg.memory_budget
                ));
                out.push(res);
                continue;
            }
            let samples = match cfg.dtype {
                DType::F32 => time_forward::<f32>(block, geo, cfg)?,
                DType::F64 => time_forward::<f64>(block, geo, cfg)?,
            };
            (res.median_ms, res.iqr_ms) = median_iqr(&samples);
            out.push(res);
        }
    }
    Ok(out)
}

/// `block,h,w,c,cp,s,dtype,median_ms,iqr_ms,repeats`; skipped rows carry
/// empty timings.
pub fn bench_csv(results: &[BenchResult]) -> String {
    let mut s = String::from("block,h,w,c,cp,s,dtype,median_ms,iqr_ms,repeats\n");
    for r in results {
        let g = &r.geometry;
        let (m, q) = if r.skipped.is_some() {
            (String::new(), String::new())
        } else {
            (format!("{:.4}", r.median_ms), format!("{:.4}", r.iqr_ms))
        };
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{m},{q},{}\n",
            r.block,
            g.h,
            g.w,
            g.c,
            g.cp,
            g.s,
            r.dtype.name(),
            r.repeats
        ));
    }
    s
}

/// One line describing the machine, for logs next to the CSV.
pub fn environment() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "os={} arch={} threads={} profile={}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        threads,
        if cfg!(debug_assertions) {
            "debug"
        } else {
            "release"
        }
    )
}
