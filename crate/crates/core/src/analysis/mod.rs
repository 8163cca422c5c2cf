//! Evidence tooling: MAC counts, attention statistics, timing, gradient
//! checks, the dense-equivalence oracle and a small end-to-end trainer.

pub mod affinity;
pub mod bench;
pub mod flops;
pub mod gradsuite;
pub mod oracle;
pub mod toy;
pub mod train;

pub use affinity::{affinity_stats, AffinityStats, Histogram};
pub use bench::{
    bench_csv, build_layer, environment, estimate_bytes, median_iqr, run_benchmark, BenchBlock,
    BenchConfig, BenchResult,
};
pub use flops::{count_flops, loglog_slope, Block, FlopsReport, Geometry};
pub use gradsuite::{
    gradsuite_csv, run_case, run_suite, GradCase, CASES, DEFAULT_SEEDS, GRAD_EPS, GRAD_TOL,
};
pub use oracle::{dense_equivalence, grid_for, OracleResult};
pub use toy::{toy_batch, ToyStyle, TOY_CLASSES, TOY_SIZE};
pub use train::{
    conv3x3, evaluate, heldout_seed, pixel_accuracy, poly_lr, train, train_log_csv, Conv3x3, Sgd,
    ToyLayerKind, ToyModel, TrainConfig, TrainLogRow, TrainReport,
};
