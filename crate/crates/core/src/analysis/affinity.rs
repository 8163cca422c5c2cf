//! How concentrated attention rows are: weight histogram, top-k mass and a
//! normalized Gini coefficient per row.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

/// Smallest edge of the log-spaced bins; values below it share one bin.
pub const HIST_MIN: f64 = 1e-8;
pub const HIST_BINS: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges; the first bin is `[0, HIST_MIN)`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    fn log_spaced() -> Self {
        let mut edges = vec![0.0];
        for i in 0..=HIST_BINS {
            edges.push(HIST_MIN * (1.0 / HIST_MIN).powf(i as f64 / HIST_BINS as f64));
        }
        *edges.last_mut().expect("edges") = 1.0;
        Histogram {
            counts: vec![0; edges.len() - 1],
            edges,
        }
    }

    fn add(&mut self, v: f64) {
        let last = self.counts.len() - 1;
        let bin = if v < HIST_MIN {
            0
        } else {
            let pos = (v / HIST_MIN).ln() / (1.0 / HIST_MIN).ln() * HIST_BINS as f64;
            (1 + pos.floor() as usize).min(last)
        };
        self.counts[bin] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `bin_lo,bin_hi,count`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!(
                "{:e},{:e},{}\n",
                self.edges[i],
                self.edges[i + 1],
                c
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityStats {
    pub rows: usize,
    /// Entries per row (`N` for a dense matrix, `S` for sampled weights).
    pub cols: usize,
    pub histogram: Histogram,
    /// `topk[r][k-1]`: share of row `r`'s mass in its `k` largest entries.
    pub topk: Vec<Vec<f64>>,
    /// Normalized Gini coefficient per row: 0 for uniform, 1 for one-hot.
    pub imbalance: Vec<f64>,
    pub source: String,
}

impl AffinityStats {
    pub fn mean_imbalance(&self) -> f64 {
        self.imbalance.iter().sum::<f64>() / self.rows.max(1) as f64
    }

    /// Top-k mass averaged over rows.
    pub fn mean_topk(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for row in &self.topk {
            for (a, v) in m.iter_mut().zip(row) {
                *a += v;
            }
        }
        m.iter().map(|v| v / self.rows.max(1) as f64).collect()
    }

    /// `row,k,mass` for every row and `k`.
    pub fn topk_csv(&self) -> String {
        let mut s = String::from("row,k,mass\n");
        for (r, row) in self.topk.iter().enumerate() {
            for (k, m) in row.iter().enumerate() {
                s.push_str(&format!("{},{},{}\n", r, k + 1, m));
            }
        }
        s
    }
}

/// Gini mean difference normalized so that a one-hot row scores exactly 1.
///
/// Works on runs of equal values in sorted order, so equal entries add
/// nothing and a uniform row scores exactly 0.
fn imbalance(sorted_asc: &[f64]) -> f64 {
    let n = sorted_asc.len();
    if n < 2 {
        return 0.0;
    }
    let total: f64 = sorted_asc.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let (mut d, mut count_below, mut sum_below) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < n {
        let v = sorted_asc[i];
        let mut run = 0usize;
        while i < n && sorted_asc[i] == v {
            run += 1;
            i += 1;
        }
        d += run as f64 * (v * count_below - sum_below);
        count_below += run as f64;
        sum_below += v * run as f64;
    }
    d / ((n - 1) as f64 * total)
}

/// Statistics of a row-stochastic matrix (dense affinities or sampled
/// attention weights). Rows must be non-negative and sum to 1 within 1e-6.
pub fn affinity_stats<T: Scalar>(a: &Matrix<T>, source: &str) -> Result<AffinityStats> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::Validation("affinity matrix is empty".into()));
    }
    let mut histogram = Histogram::log_spaced();
    let mut topk = Vec::with_capacity(rows);
    let mut gini = Vec::with_capacity(rows);
    let mut row = vec![0.0f64; cols];
    for r in 0..rows {
        for (dst, v) in row.iter_mut().zip(a.row(r)) {
            *dst = v.as_f64();
        }
        if let Some(bad) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Validation(format!(
                "row {r} has entry {bad}, not a probability"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("row {r} sums to {sum}, not 1")));
        }
        for &v in &row {
            histogram.add(v);
        }
        row.sort_by(|x, y| x.total_cmp(y));
        gini.push(imbalance(&row));
        let mut acc = 0.0;
        let mut curve: Vec<f64> = row
            .iter()
            .rev()
            .map(|v| {
                acc += v;
                acc
            })
            .collect();
        let total = acc;
        for m in &mut curve {
            *m /= total;
        }
        topk.push(curve);
    }
    Ok(AffinityStats {
        rows,
        cols,
        histogram,
        topk,
        imbalance: gini,
        source: source.to_string(),
    })
}
