use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use repgraph_core::analysis::{
    affinity_stats, bench_csv, count_flops, dense_equivalence, environment, gradsuite_csv,
    grid_for, run_benchmark, run_case, toy_batch, train, train_log_csv, BenchBlock, BenchConfig,
    Block, Geometry, ToyLayerKind, ToyModel, TrainConfig, CASES, DEFAULT_SEEDS,
};
use repgraph_core::fusion::FusionMode;
use repgraph_core::nonlocal::{nonlocal_affinity, NonLocalParams};
use repgraph_core::repgraph::{LayerConfig, RepGraphLayer, Variant};
use repgraph_core::tensor::load_tensors;
use repgraph_core::{DType, Matrix, Module, Rng, Tensor4};

/// Representative-graph attention: FLOPs, benchmarks, statistics and checks.
#[derive(Parser, Debug)]
#[command(name = "repgraph", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Median forward latency per block.
    Bench(BenchArgs),
    /// Multiply-accumulate counts per sub-operation (1 MAC = 1 FLOP).
    Flops(FlopsArgs),
    /// Histogram and top-k curves of attention weights.
    Affinity(AffinityArgs),
    /// Train the toy segmentation model.
    Train(TrainArgs),
    /// Central-difference gradient checks of every op and layer.
    Gradcheck(GradArgs),
    /// Compare the sparse layer with full-grid offsets to the dense block.
    Oracle(OracleArgs),
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated blocks: nl, srg, brg, grid, group, noop.
    #[arg(long, default_value = "nl,brg", value_delimiter = ',')]
    block: Vec<BenchBlock>,
    #[arg(long, default_value_t = 128)]
    h: usize,
    #[arg(long, default_value_t = 64)]
    w: usize,
    #[arg(long, default_value_t = 256)]
    c: usize,
    #[arg(long, default_value_t = 64)]
    cp: usize,
    /// Sampled nodes per query.
    #[arg(long, default_value_t = 9)]
    nodes: usize,
    #[arg(long, default_value_t = 1)]
    gs: usize,
    #[arg(long, default_value_t = 1)]
    groups: usize,
    #[arg(long, default_value = "sum")]
    fusion: FusionMode,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value = "f32")]
    dtype: DType,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[arg(long, default_value = "nl")]
    block: Block,
    #[arg(long, default_value_t = 256)]
    h: usize,
    #[arg(long, default_value_t = 128)]
    w: usize,
    #[arg(long, default_value_t = 2048)]
    c: usize,
    #[arg(long, default_value_t = 256)]
    cp: usize,
    #[arg(long, default_value_t = 9)]
    nodes: usize,
    #[arg(long, default_value_t = 1)]
    gs: usize,
    #[arg(long, default_value_t = 1)]
    groups: usize,
    #[arg(long, default_value = "sum")]
    fusion: FusionMode,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AffinityArgs {
    /// nl (dense affinity), srg or brg; ignored with --checkpoint.
    #[arg(long, default_value = "nl")]
    block: Block,
    #[arg(long, default_value_t = 16)]
    h: usize,
    #[arg(long, default_value_t = 16)]
    w: usize,
    #[arg(long, default_value_t = 64)]
    c: usize,
    #[arg(long, default_value_t = 32)]
    cp: usize,
    #[arg(long, default_value_t = 9)]
    nodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Toy-model checkpoint written by `train`; its layer settings come from
    /// --config (defaults match `train`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Histogram CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Top-k mass CSV.
    #[arg(long)]
    topk_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// repgraph, nonlocal or none.
    #[arg(long, default_value = "repgraph")]
    layer: ToyLayerKind,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Layer settings as `key=value` lines; the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    fusion: Option<FusionMode>,
    #[arg(long)]
    gs: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    /// Where to save the trained parameters.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Training log CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradArgs {
    /// Single seed; defaults to 1, 2 and 3.
    #[arg(long)]
    seed: Option<u64>,
    /// Only this case.
    #[arg(long)]
    op: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    /// Positions; the map is the most square h × w with h·w = n.
    #[arg(long, default_value_t = 36)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    c: usize,
    #[arg(long, default_value_t = 4)]
    cp: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(out: Option<&Path>, csv: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, csv).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn bench(a: BenchArgs) -> Result<bool> {
    let geo = Geometry {
        gs: a.gs,
        groups: a.groups,
        fusion: a.fusion,
        ..Geometry::new(a.h, a.w, a.c, a.cp, a.nodes)
    };
    let cfg = BenchConfig {
        blocks: a.block,
        geometries: vec![geo],
        dtype: a.dtype,
        repeats: a.repeats,
        warmup: a.warmup,
        seed: a.seed,
        ..BenchConfig::default()
    };
    let res = run_benchmark(&cfg)?;
    eprintln!("# {}", environment());
    for r in &res {
        match &r.skipped {
            Some(why) => eprintln!("{}: skipped ({why})", r.block),
            None => eprintln!(
                "{}: median {:.3} ms, IQR {:.3} ms",
                r.block, r.median_ms, r.iqr_ms
            ),
        }
    }
    emit(a.out.as_deref(), &bench_csv(&res))?;
    Ok(true)
}

fn flops(a: FlopsArgs) -> Result<bool> {
    let geo = Geometry {
        gs: a.gs,
        groups: a.groups,
        fusion: a.fusion,
        ..Geometry::new(a.h, a.w, a.c, a.cp, a.nodes)
    };
    let r = count_flops(a.block, &geo)?;
    println!("{}: {:.2} GFLOPs (1 MAC = 1 FLOP)", a.block, r.gflops());
    match &a.out {
        Some(p) => emit(Some(p), &r.to_csv())?,
        None => {
            for (label, macs) in &r.parts {
                println!("  {label:<10} {macs}");
            }
        }
    }
    Ok(true)
}

fn read_layer_config(path: Option<&Path>, base: LayerConfig) -> Result<LayerConfig> {
    let Some(p) = path else { return Ok(base) };
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    let doc = repgraph_core::config::KvDoc::parse(&text)?;
    doc.check_keys(&LayerConfig::KEYS)?;
    let mut merged = doc.clone();
    let defaults = base.to_doc();
    for key in defaults.keys() {
        if merged.get(key).is_none() {
            merged.push(key, defaults.get(key).unwrap_or_default());
        }
    }
    Ok(LayerConfig::from_doc(&merged)?)
}

fn affinity(a: AffinityArgs) -> Result<bool> {
    let (matrix, source): (Matrix<f64>, String) = if let Some(ckpt) = &a.checkpoint {
        let cfg = read_layer_config(a.config.as_deref(), TrainConfig::default().layer_cfg)?;
        let mut model = ToyModel::new(ToyLayerKind::RepGraph, &cfg, &mut Rng::new(0))?;
        let params: Vec<Tensor4<f32>> = load_tensors(ckpt)?;
        model.load_params(&params)?;
        let (x, _) = toy_batch(&mut Rng::new(a.seed), 4, TrainConfig::default().style);
        let att = model
            .attention(&x)?
            .context("toy model has no attention layer")?;
        let m = att.to_matrix();
        (
            Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) as f64),
            format!("toy model {}", ckpt.display()),
        )
    } else {
        let mut rng = Rng::new(a.seed);
        let x: Tensor4<f64> = rng.uniform_tensor((1, a.c, a.h, a.w), -1.0, 1.0);
        match a.block {
            Block::Nl => {
                let nl = NonLocalParams::init(&mut rng, a.c, a.cp, FusionMode::Sum, false)?;
                let m = nonlocal_affinity(&x, &nl)?.remove(0);
                (m, format!("random nl {}x{}", a.h, a.w))
            }
            Block::Srg | Block::Brg => {
                let cfg = LayerConfig {
                    variant: if a.block == Block::Srg {
                        Variant::Simple
                    } else {
                        Variant::Bottleneck
                    },
                    s: a.nodes,
                    c: a.c,
                    cp: a.cp,
                    seed: a.seed,
                    ..LayerConfig::default()
                };
                let layer = RepGraphLayer::<f64>::with_rng(cfg, &mut rng)?;
                (
                    layer.attention(&x)?.to_matrix(),
                    format!("random {} {}x{}", a.block, a.h, a.w),
                )
            }
            other => bail!("affinity supports nl, srg and brg, not {other}"),
        }
    };
    let st = affinity_stats(&matrix, &source)?;
    eprintln!(
        "{}: {} rows x {} cols, mean imbalance {:.4}",
        st.source,
        st.rows,
        st.cols,
        st.mean_imbalance()
    );
    emit(a.out.as_deref(), &st.histogram.to_csv())?;
    if let Some(p) = &a.topk_out {
        emit(Some(p), &st.topk_csv())?;
    }
    Ok(true)
}

fn train_cmd(a: TrainArgs) -> Result<bool> {
    let defaults = TrainConfig::default();
    let mut layer_cfg = read_layer_config(a.config.as_deref(), defaults.layer_cfg.clone())?;
    if let Some(s) = a.nodes {
        layer_cfg.s = s;
    }
    if let Some(v) = a.variant {
        layer_cfg.variant = v;
    }
    if let Some(f) = a.fusion {
        layer_cfg.fusion = f;
    }
    if let Some(gs) = a.gs {
        layer_cfg.gs = gs;
    }
    if let Some(g) = a.groups {
        layer_cfg.groups = g;
    }
    layer_cfg.validate()?;
    let cfg = TrainConfig {
        iters: a.iters,
        seed: a.seed,
        lr: a.lr.unwrap_or(defaults.lr),
        batch: a.batch.unwrap_or(defaults.batch),
        layer: a.layer,
        layer_cfg,
        ..defaults
    };
    let r = train(&cfg, a.checkpoint.as_deref())?;
    let last = r.log.last().expect("at least one iteration");
    eprintln!(
        "{} after {} iterations: loss {:.4}, train pixel acc {:.4}, held-out pixel acc {:.4}",
        cfg.layer, last.iter, last.loss, last.pix_acc, r.heldout_acc
    );
    if let Some(n) = r.offset_grad_norm {
        eprintln!("offset weight gradient norm at iteration 1: {n:.4e}");
    }
    emit(a.out.as_deref(), &train_log_csv(&r.log))?;
    Ok(true)
}

fn gradcheck(a: GradArgs) -> Result<bool> {
    let seeds: Vec<u64> = a.seed.map_or(DEFAULT_SEEDS.to_vec(), |s| vec![s]);
    let ops: Vec<&str> = match &a.op {
        Some(op) => vec![op.as_str()],
        None => CASES.to_vec(),
    };
    let mut cases = Vec::new();
    for op in ops {
        for &seed in &seeds {
            cases.push(run_case(op, seed)?);
        }
    }
    let failed = cases.iter().filter(|c| !c.passed).count();
    let worst = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    eprintln!(
        "{} checks, {failed} failed, worst relative error {worst:.3e}",
        cases.len()
    );
    emit(a.out.as_deref(), &gradsuite_csv(&cases))?;
    Ok(failed == 0)
}

fn oracle(a: OracleArgs) -> Result<bool> {
    let (h, w) = grid_for(a.n)?;
    let r = dense_equivalence(h, w, a.c, a.cp, a.seed)?;
    println!(
        "n={} ({h}x{w}) seed={} max abs diff {:.3e}",
        r.n, r.seed, r.max_abs_diff
    );
    let ok = r.max_abs_diff < 1e-6;
    if let Some(p) = &a.out {
        emit(
            Some(p),
            &format!(
                "n,h,w,seed,max_abs_diff,passed\n{},{h},{w},{},{:e},{ok}\n",
                r.n, r.seed, r.max_abs_diff
            ),
        )?;
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Bench(a) => bench(a),
        Cmd::Flops(a) => flops(a),
        Cmd::Affinity(a) => affinity(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Gradcheck(a) => gradcheck(a),
        Cmd::Oracle(a) => oracle(a),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("validation failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
