//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use repgraph_core::analysis::{
    affinity_stats, bench_csv, count_flops, dense_equivalence, environment, gradsuite_csv,
    loglog_slope, run_benchmark, run_suite, toy_batch, train, BenchBlock, BenchConfig, Block,
    Geometry, ToyLayerKind, TrainConfig, TrainReport, DEFAULT_SEEDS,
};
use repgraph_core::module::Layer;
use repgraph_core::repgraph::{InitMode, LayerConfig, RepGraphLayer, Variant};
use repgraph_core::variants::{
    grid_repgraph_forward, group_repgraph_forward, GridConfig, GroupConfig,
};
use repgraph_core::{Matrix, Rng, Tensor4};

type Outcome = Result<String, String>;

fn out_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("create output dir");
    dir
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn dense_oracle() -> Outcome {
    let t = Instant::now();
    let r = dense_equivalence(6, 6, 8, 4, 0).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    check(
        r.max_abs_diff < 1e-6 && secs < 1.0,
        format!("max_abs_diff={:.3e} time={secs:.3}s", r.max_abs_diff),
    )
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let cases = run_suite(&DEFAULT_SEEDS).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    std::fs::write(out_dir().join("gradcheck.csv"), gradsuite_csv(&cases))
        .map_err(|e| e.to_string())?;
    let worst = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let closest = cases
        .iter()
        .filter_map(|c| c.offset_distance)
        .fold(f64::INFINITY, f64::min);
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}#{}", c.op, c.seed))
        .collect();
    check(
        failed.is_empty() && secs < 120.0,
        format!(
            "{} checks, worst rel err {worst:.2e}, closest offset to an integer {closest:.3}, time={secs:.1}s{}",
            cases.len(),
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) }
        ),
    )
}

fn flops_table() -> Outcome {
    let geo = Geometry::new(256, 128, 2048, 256, 9);
    let nl = count_flops(Block::Nl, &geo)
        .map_err(|e| e.to_string())?
        .gflops();
    let brg = count_flops(Block::Brg, &geo)
        .map_err(|e| e.to_string())?
        .gflops();
    let within = |v: f64, target: f64| (v - target).abs() / target <= 0.10;
    check(
        within(nl, 601.4) && within(brg, 34.96) && nl / brg >= 15.0,
        format!(
            "NL={nl:.2} G (601.4) BRG={brg:.2} G (34.96) ratio={:.2}",
            nl / brg
        ),
    )
}

fn complexity_scaling() -> Outcome {
    let slope = |block| -> Result<f64, String> {
        let pts: Vec<(f64, f64)> = [16usize, 32, 64]
            .iter()
            .map(|&side| {
                let r = count_flops(block, &Geometry::new(side, side, 256, 64, 9))
                    .expect("valid geometry");
                ((side * side) as f64, r.attention_core() as f64)
            })
            .collect();
        loglog_slope(&pts).map_err(|e| e.to_string())
    };
    let (nl, brg, srg) = (slope(Block::Nl)?, slope(Block::Brg)?, slope(Block::Srg)?);
    check(
        (nl - 2.0).abs() <= 0.05 && (brg - 1.0).abs() <= 0.05 && (srg - 1.0).abs() <= 0.05,
        format!("exponents NL={nl:.4} BRG={brg:.4} SRG={srg:.4}"),
    )
}

fn wall_clock() -> Outcome {
    let cfg = BenchConfig {
        blocks: vec![BenchBlock::Layer(Block::Nl), BenchBlock::Layer(Block::Brg)],
        ..BenchConfig::default()
    };
    let res = run_benchmark(&cfg).map_err(|e| e.to_string())?;
    std::fs::write(out_dir().join("bench.csv"), bench_csv(&res)).map_err(|e| e.to_string())?;
    if let Some(r) = res.iter().find(|r| r.skipped.is_some()) {
        return Err(format!(
            "{} skipped: {}",
            r.block,
            r.skipped.as_deref().unwrap_or_default()
        ));
    }
    let (nl, brg) = (res[0].median_ms, res[1].median_ms);
    check(
        brg <= 0.5 * nl,
        format!(
            "median NL={nl:.1}ms BRG={brg:.1}ms ratio={:.2} ({})",
            nl / brg,
            environment()
        ),
    )
}

fn identity_at_init() -> Outcome {
    let mut rng = Rng::new(6);
    let mut checked = 0;
    for variant in [Variant::Simple, Variant::Bottleneck] {
        for i in 0..10 {
            let c = 2 + rng.below(0, 7);
            let cfg = LayerConfig {
                variant,
                init_mode: InitMode::PretrainedInsert,
                c,
                cp: 1 + rng.below(0, 6),
                s: 1 + rng.below(0, 9),
                seed: i,
                ..LayerConfig::default()
            };
            let layer = RepGraphLayer::<f64>::new(cfg).map_err(|e| e.to_string())?;
            let shape = (
                1 + rng.below(0, 2),
                c,
                1 + rng.below(0, 6),
                1 + rng.below(0, 6),
            );
            let x: Tensor4<f64> = rng.uniform_tensor(shape, -5.0, 5.0);
            let y = layer.forward(&x).map_err(|e| e.to_string())?;
            if !y.bit_eq(&x) {
                return Err(format!("{variant:?} tensor {i} differs from its input"));
            }
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} tensors reproduced bit-exactly (simple and bottleneck)"
    ))
}

fn variant_reductions() -> Outcome {
    let mut rng = Rng::new(7);
    for i in 0..10 {
        let c = 2 + rng.below(0, 7);
        let cp = 1 + rng.below(0, 6);
        let cfg = LayerConfig {
            variant: if i % 2 == 0 {
                Variant::Simple
            } else {
                Variant::Bottleneck
            },
            c,
            cp,
            s: 1 + rng.below(0, 12),
            seed: 100 + i,
            ..LayerConfig::default()
        };
        let layer = RepGraphLayer::<f64>::new(cfg).map_err(|e| e.to_string())?;
        let shape = (
            1 + rng.below(0, 2),
            c,
            1 + rng.below(0, 7),
            1 + rng.below(0, 7),
        );
        let x: Tensor4<f64> = rng.uniform_tensor(shape, -2.0, 2.0);
        let base = layer.forward(&x).map_err(|e| e.to_string())?;
        let grid =
            grid_repgraph_forward(&x, &layer, GridConfig::new(1).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        let group = group_repgraph_forward(
            &x,
            &layer,
            GroupConfig::new(cp, 1).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        if !grid.bit_eq(&base) || !group.bit_eq(&base) {
            return Err(format!("config {i} differs from the base layer"));
        }
    }
    Ok("gs=1 and G=1 bit-identical on 10 configs".into())
}

fn attention_normalization() -> Outcome {
    let mut rng = Rng::new(8);
    let (mut worst, mut rows) = (0.0f64, 0usize);
    for &s in &[1usize, 9, 27] {
        for i in 0..12 {
            let groups = [1usize, 2, 4][i % 3];
            let cfg = LayerConfig {
                variant: if i % 2 == 0 {
                    Variant::Simple
                } else {
                    Variant::Bottleneck
                },
                s,
                c: 3 + rng.below(0, 6),
                cp: groups * (1 + rng.below(0, 3)),
                gs: 1 + rng.below(0, 3),
                groups,
                seed: i as u64,
                ..LayerConfig::default()
            };
            let c = cfg.c;
            let layer = RepGraphLayer::<f64>::new(cfg).map_err(|e| e.to_string())?;
            let shape = (2, c, 2 + rng.below(0, 6), 2 + rng.below(0, 6));
            let x: Tensor4<f64> = rng.uniform_tensor(shape, -6.0, 6.0);
            let att = layer.attention(&x).map_err(|e| e.to_string())?;
            worst = worst.max(att.max_row_sum_error());
            rows += att.rows().count();
        }
    }
    check(
        worst < 1e-10,
        format!("{rows} rows, worst |sum - 1| = {worst:.2e}"),
    )
}

fn toy_training() -> (Outcome, Option<TrainReport>) {
    let t = Instant::now();
    let rg = match train(&TrainConfig::default(), None) {
        Ok(r) => r,
        Err(e) => return (Err(e.to_string()), None),
    };
    let secs = t.elapsed().as_secs_f64();
    let ablated = TrainConfig {
        layer: ToyLayerKind::None,
        ..TrainConfig::default()
    };
    let none = match train(&ablated, None) {
        Ok(r) => r,
        Err(e) => return (Err(e.to_string()), Some(rg)),
    };
    let grad = rg.offset_grad_norm.unwrap_or(0.0);
    let outcome = check(
        rg.heldout_acc >= 0.95 && rg.heldout_acc > none.heldout_acc && grad > 0.0 && secs < 300.0,
        format!(
            "held-out acc {:.4} vs ablated {:.4}, offset grad norm at iter 1 {grad:.3e}, time={secs:.1}s",
            rg.heldout_acc, none.heldout_acc
        ),
    );
    (outcome, Some(rg))
}

fn affinity_statistics(trained: Option<&TrainReport>) -> Outcome {
    let n = 16;
    let uniform = Matrix::from_fn(n, n, |_, _| 1.0 / n as f64);
    let onehot = Matrix::from_fn(n, n, |r, c| if (r * 5 + 3) % n == c { 1.0 } else { 0.0 });
    let u = affinity_stats(&uniform, "uniform").map_err(|e| e.to_string())?;
    let o = affinity_stats(&onehot, "one-hot").map_err(|e| e.to_string())?;
    if !u.imbalance.iter().all(|&g| g == 0.0) || !o.imbalance.iter().all(|&g| g == 1.0) {
        return Err(format!(
            "imbalance uniform={} one-hot={}",
            u.mean_imbalance(),
            o.mean_imbalance()
        ));
    }
    let report = trained.ok_or("no trained model")?;
    let cfg = TrainConfig::default();
    let (x, _) = toy_batch(&mut Rng::new(11), 4, cfg.style);
    let att = report
        .model
        .attention(&x)
        .map_err(|e| e.to_string())?
        .ok_or("toy model has no attention")?;
    let st = affinity_stats(&att.to_matrix(), "toy repgraph layer").map_err(|e| e.to_string())?;
    let dir = out_dir();
    std::fs::write(dir.join("affinity_hist.csv"), st.histogram.to_csv())
        .map_err(|e| e.to_string())?;
    std::fs::write(dir.join("affinity_topk.csv"), st.topk_csv()).map_err(|e| e.to_string())?;
    Ok(format!(
        "uniform 0, one-hot 1; toy model: {} rows, mean imbalance {:.3}, histogram at {}",
        st.rows,
        st.mean_imbalance(),
        dir.join("affinity_hist.csv").display()
    ))
}

fn main() -> ExitCode {
    let mut all = true;
    let mut report = |n: usize, name: &str, o: Outcome| {
        let (tag, detail) = match o {
            Ok(d) => ("PASS", d),
            Err(d) => {
                all = false;
                ("FAIL", d)
            }
        };
        println!("{tag} {n:>2} {name}: {detail}");
    };
    report(1, "dense equivalence", dense_oracle());
    report(2, "gradient suite", gradient_suite());
    report(3, "flops table", flops_table());
    report(4, "complexity scaling", complexity_scaling());
    report(5, "wall clock", wall_clock());
    report(6, "identity at init", identity_at_init());
    report(7, "variant reductions", variant_reductions());
    report(8, "attention normalization", attention_normalization());
    let (outcome, trained) = toy_training();
    report(9, "toy training", outcome);
    report(
        10,
        "affinity statistics",
        affinity_statistics(trained.as_ref()),
    );
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
