//! Closed-form multiply-accumulate counts, one image per count.
//!
//! One MAC counts as one FLOP. Every report lists its parts so any subset can
//! be summed.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::repgraph::{check_groups, OffsetSource};

/// Blocks the counter knows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    /// Dense non-local block.
    Nl,
    /// Simple representative-graph layer.
    Srg,
    /// Bottleneck representative-graph layer.
    Brg,
    /// Bottleneck layer in grid form.
    Grid,
    /// Bottleneck layer in group form.
    Group,
}

impl Block {
    pub const ALL: [Block; 5] = [Block::Nl, Block::Srg, Block::Brg, Block::Grid, Block::Group];

    pub fn name(self) -> &'static str {
        match self {
            Block::Nl => "nl",
            Block::Srg => "srg",
            Block::Brg => "brg",
            Block::Grid => "grid",
            Block::Group => "group",
        }
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Block::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown block `{s}` (expected nl, srg, brg, grid or group)"
                ))
            })
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Input geometry and layer settings for a count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub cp: usize,
    pub s: usize,
    pub gs: usize,
    pub groups: usize,
    pub fusion: FusionMode,
    pub offset_source: OffsetSource,
}

impl Geometry {
    pub fn new(h: usize, w: usize, c: usize, cp: usize, s: usize) -> Self {
        Geometry {
            h,
            w,
            c,
            cp,
            s,
            gs: 1,
            groups: 1,
            fusion: FusionMode::Sum,
            offset_source: OffsetSource::Input,
        }
    }

    pub fn nodes(&self) -> u64 {
        (self.h * self.w) as u64
    }

    fn validate(&self) -> Result<()> {
        let fields = [
            ("h", self.h),
            ("w", self.w),
            ("c", self.c),
            ("cp", self.cp),
            ("s", self.s),
            ("gs", self.gs),
            ("groups", self.groups),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation(format!(
                "geometry field `{name}` must be positive"
            )));
        }
        check_groups(self.cp, self.groups)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopsReport {
    pub block: Block,
    pub geometry: Geometry,
    pub parts: Vec<(&'static str, u64)>,
}

impl FlopsReport {
    pub fn total(&self) -> u64 {
        self.parts.iter().map(|(_, m)| m).sum()
    }

    pub fn gflops(&self) -> f64 {
        self.total() as f64 / 1e9
    }

    pub fn part(&self, label: &str) -> u64 {
        self.parts
            .iter()
            .filter(|(l, _)| *l == label)
            .map(|(_, m)| m)
            .sum()
    }

    /// MACs of the attention itself (logits plus aggregation).
    pub fn attention_core(&self) -> u64 {
        self.part("affinity") + self.part("aggregate")
    }

    /// `block,suboperation,macs` rows, header first, then a `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,suboperation,macs\n");
        for (label, macs) in &self.parts {
            s.push_str(&format!("{},{},{}\n", self.block, label, macs));
        }
        s.push_str(&format!("{},total,{}\n", self.block, self.total()));
        s
    }
}

/// MAC counts for `block` at `geo`.
///
/// * projections: `N · c_in · c_out`
/// * dense attention: `N² C'` each for affinity and aggregation
/// * sparse attention: `N S C'` each
/// * offset regression: `N_g · C_src · 2S` over `N_g` grid cells
/// * bilinear sampling: `4 · N_g · S · C'` per sampled branch
/// * batch norm: one MAC per element; grid pooling: one per input element
pub fn count_flops(block: Block, geo: &Geometry) -> Result<FlopsReport> {
    geo.validate()?;
    let n = geo.nodes();
    let (c, cp, s) = (geo.c as u64, geo.cp as u64, geo.s as u64);
    let head_in = match geo.fusion {
        FusionMode::Sum => cp,
        FusionMode::Concat => c + cp,
    };
    let mut parts: Vec<(&'static str, u64)> = Vec::new();
    match block {
        Block::Nl => {
            parts.push(("theta", n * c * cp));
            parts.push(("phi", n * c * cp));
            parts.push(("g", n * c * cp));
            parts.push(("affinity", n * n * cp));
            parts.push(("aggregate", n * n * cp));
            parts.push(("fusion", n * head_in * c));
        }
        Block::Srg => {
            let src = match geo.offset_source {
                OffsetSource::Input => c,
                OffsetSource::Query => cp,
            };
            parts.push(("theta", n * c * cp));
            parts.push(("phi", n * c * cp));
            parts.push(("g", n * c * cp));
            parts.push(("offsets", n * src * 2 * s));
            parts.push(("sampling", 2 * 4 * n * s * cp));
            parts.push(("affinity", n * s * cp));
            parts.push(("aggregate", n * s * cp));
            parts.push(("fusion", n * head_in * c));
        }
        Block::Brg | Block::Grid | Block::Group => {
            let gs = if block == Block::Grid { geo.gs } else { 1 };
            let ng = (geo.h.div_ceil(gs) * geo.w.div_ceil(gs)) as u64;
            let src = match geo.offset_source {
                OffsetSource::Input => c,
                OffsetSource::Query => cp,
            };
            parts.push(("reduce", n * c * cp));
            parts.push(("reduce_bn", n * cp));
            if gs > 1 {
                parts.push(("pool", n * src));
            }
            parts.push(("offsets", ng * src * 2 * s));
            parts.push(("sampling", 4 * ng * s * cp));
            parts.push(("affinity", n * s * cp));
            parts.push(("aggregate", n * s * cp));
            parts.push(("fusion", n * head_in * c));
            parts.push(("fusion_bn", n * c));
        }
    }
    Ok(FlopsReport {
        block,
        geometry: *geo,
        parts,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return Err(Error::Validation(
            "need at least two positive points".into(),
        ));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Validation("x values are all equal".into()));
    }
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_node_hand_count() {
        let geo = Geometry::new(1, 1, 1, 1, 1);
        let brg = count_flops(Block::Brg, &geo).unwrap();
        // reduce 1, bn 1, offsets 2, sampling 4, affinity 1, aggregate 1, expand 1, bn 1
        assert_eq!(brg.total(), 12);
        let nl = count_flops(Block::Nl, &geo).unwrap();
        assert_eq!(nl.total(), 6);
        let srg = count_flops(Block::Srg, &geo).unwrap();
        // three projections, offsets 2, two samplings of 4, attention 2, head 1
        assert_eq!(srg.total(), 16);
    }

    #[test]
    fn totals_are_sums_and_csv_lists_parts() {
        let r = count_flops(Block::Srg, &Geometry::new(4, 5, 8, 4, 3)).unwrap();
        let csv = r.to_csv();
        let summed: u64 = csv
            .lines()
            .skip(1)
            .filter(|l| !l.contains(",total,"))
            .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
            .sum();
        assert_eq!(summed, r.total());
        assert!(csv.starts_with("block,suboperation,macs\n"));
    }

    #[test]
    fn bad_inputs() {
        assert!("xl".parse::<Block>().is_err());
        assert!(count_flops(Block::Nl, &Geometry::new(0, 4, 4, 4, 1)).is_err());
        let mut g = Geometry::new(4, 4, 4, 6, 1);
        g.groups = 4;
        assert!(count_flops(Block::Group, &g).is_err());
    }

    #[test]
    fn grid_counts_do_not_grow_with_cell_size() {
        let mut g = Geometry::new(64, 32, 256, 64, 9);
        let mut last = u64::MAX;
        for gs in 2..10 {
            g.gs = gs;
            let t = count_flops(Block::Grid, &g).unwrap().total();
            assert!(t <= last);
            last = t;
        }
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [2.0f64, 4.0, 8.0]
            .iter()
            .map(|&x| (x, 3.0 * x.powi(2)))
            .collect();
        assert!((loglog_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
        assert!(loglog_slope(&pts[..1]).is_err());
    }
}
