//! Grid and group forms of the representative-graph layer.
//!
//! Both reuse the parameters of an ordinary [`RepGraphLayer`]: the grid form
//! changes where offsets are regressed and applied, the group form splits the
//! attention channels. With `gs = 1` or `G = 1` they are the base layer.

use crate::error::{Error, Result};
use crate::repgraph::{check_groups, RepGraphLayer};
use crate::tensor::{Scalar, Tensor4};

/// `gs × gs` positions share one sampled node set, anchored at the cell's
/// top-left position and driven by offsets regressed from the cell average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridConfig {
    pub gs: usize,
}

impl GridConfig {
    pub fn new(gs: usize) -> Result<Self> {
        if gs == 0 {
            return Err(Error::contract("grid size must be at least 1"));
        }
        Ok(GridConfig { gs })
    }

    /// Anchor of the cell containing `(i, j)`.
    pub fn anchor(&self, i: usize, j: usize) -> (usize, usize) {
        (i / self.gs * self.gs, j / self.gs * self.gs)
    }
}

/// `C'` split into `groups` slices, each with its own softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupConfig {
    pub groups: usize,
}

impl GroupConfig {
    pub fn new(cp: usize, groups: usize) -> Result<Self> {
        check_groups(cp, groups)?;
        Ok(GroupConfig { groups })
    }

    /// The alternative reading: a fixed number of channels per group.
    pub fn from_channels_per_group(cp: usize, per_group: usize) -> Result<Self> {
        if per_group == 0 || !cp.is_multiple_of(per_group) {
            return Err(Error::contract(format!(
                "C'={cp} is not divisible into groups of {per_group} channels"
            )));
        }
        Self::new(cp, cp / per_group)
    }

    pub fn width(&self, cp: usize) -> usize {
        cp / self.groups
    }
}

/// The layer with its grid size replaced by `grid.gs`.
pub fn grid_repgraph_forward<T: Scalar>(
    x: &Tensor4<T>,
    layer: &RepGraphLayer<T>,
    grid: GridConfig,
) -> Result<Tensor4<T>> {
    layer.forward_variant(x, grid.gs, layer.config().groups)
}

/// The layer with `grp.groups` channel groups.
pub fn group_repgraph_forward<T: Scalar>(
    x: &Tensor4<T>,
    layer: &RepGraphLayer<T>,
    grp: GroupConfig,
) -> Result<Tensor4<T>> {
    layer.forward_variant(x, layer.config().gs, grp.groups)
}
