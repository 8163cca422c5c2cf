//! Cross-check of the sparse layer against the dense block: with one sample
//! per grid position the two must agree.

use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::nonlocal::{nonlocal_forward, NonLocalParams};
use crate::repgraph::{OffsetField, RepGraphLayer};
use crate::tensor::{Rng, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleResult {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
    pub max_abs_diff: f64,
}

/// Most square `h × w` with `h · w = n`, `h ≤ w`.
pub fn grid_for(n: usize) -> Result<(usize, usize)> {
    if n == 0 {
        return Err(Error::Validation("node count must be positive".into()));
    }
    let h = (1..=n)
        .filter(|h| n.is_multiple_of(*h) && h * h <= n)
        .max()
        .unwrap_or(1);
    Ok((h, n / h))
}

/// Runs a random non-local block and the sparse layer sharing its weights,
/// with full-grid offsets (`S = h·w`), on one random `(1, c, h, w)` input.
pub fn dense_equivalence(
    h: usize,
    w: usize,
    c: usize,
    cp: usize,
    seed: u64,
) -> Result<OracleResult> {
    let mut rng = Rng::new(seed);
    let nl = NonLocalParams::<f64>::init(&mut rng, c, cp, FusionMode::Sum, false)?;
    let x: Tensor4<f64> = rng.uniform_tensor((1, c, h, w), -1.0, 1.0);
    let dense = nonlocal_forward(&x, &nl)?;
    let sparse = RepGraphLayer::from_nonlocal(&nl, h * w)?;
    let (out, weights) = sparse.forward_with_offsets(&x, &OffsetField::full_grid(1, h, w))?;
    if weights.max_row_sum_error() > 1e-10 {
        return Err(Error::Validation("attention rows do not sum to 1".into()));
    }
    Ok(OracleResult {
        n: h * w,
        h,
        w,
        seed,
        max_abs_diff: out.max_abs_diff(&dense)?,
    })
}
