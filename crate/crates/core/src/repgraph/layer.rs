use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::module::{apply_bn_stats, Layer, LayerOutput, Mode, Module, ParamCursor};
use crate::nonlocal::NonLocalParams;
use crate::ops::{BatchNormParams, BatchStats, Projection1x1};
use crate::tensor::{Rng, Scalar, Tensor4};

use super::config::check_groups;
use super::sample::grid_extent;
use super::{AttentionWeights, InitMode, LayerConfig, OffsetField, OffsetSource, Variant};

/// Projections feeding the attention.
#[derive(Debug, Clone, PartialEq)]
pub enum Core<T> {
    /// Query, key and value projections `C → C'`.
    Simple {
        theta: Projection1x1<T>,
        phi: Projection1x1<T>,
        g: Projection1x1<T>,
    },
    /// Reduction `C → C'` followed by BN and ReLU; the reduced features serve
    /// as query, key and value.
    Bottleneck {
        reduce: Projection1x1<T>,
        bn: BatchNormParams<T>,
    },
}

/// A representative-graph attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RepGraphLayer<T> {
    cfg: LayerConfig,
    pub core: Core<T>,
    /// `C_src → 2S` offset regression.
    pub offset: Projection1x1<T>,
    pub fusion: Fusion<T>,
}

impl<T: Scalar> RepGraphLayer<T> {
    /// Seeds its initializer from `cfg.seed`.
    pub fn new(cfg: LayerConfig) -> Result<Self> {
        let mut rng = Rng::new(cfg.seed);
        Self::with_rng(cfg, &mut rng)
    }

    pub fn with_rng(cfg: LayerConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, cp) = (cfg.c, cfg.cp);
        let core = match cfg.variant {
            Variant::Simple => Core::Simple {
                theta: Projection1x1::init(rng, c, cp, true),
                phi: Projection1x1::init(rng, c, cp, true),
                g: Projection1x1::init(rng, c, cp, true),
            },
            Variant::Bottleneck => Core::Bottleneck {
                reduce: Projection1x1::init(rng, c, cp, false),
                bn: BatchNormParams::new(cp),
            },
        };
        let src = match cfg.offset_source {
            OffsetSource::Input => c,
            OffsetSource::Query => cp,
        };
        let offset = Projection1x1::init(rng, src, 2 * cfg.s, true);
        let zero = cfg.init_mode == InitMode::PretrainedInsert;
        let fusion = Fusion::init(
            rng,
            cfg.fusion,
            c,
            cp,
            cfg.variant == Variant::Bottleneck,
            zero,
        );
        Ok(RepGraphLayer {
            cfg,
            core,
            offset,
            fusion,
        })
    }

    /// A simple layer with `S` samples reusing the projections and head of a
    /// non-local block; offsets start at zero.
    pub fn from_nonlocal(nl: &NonLocalParams<T>, s: usize) -> Result<Self> {
        let cfg = LayerConfig {
            variant: Variant::Simple,
            s,
            c: nl.c(),
            cp: nl.cp(),
            fusion: nl.fusion.mode,
            ..LayerConfig::default()
        };
        cfg.validate()?;
        Ok(RepGraphLayer {
            core: Core::Simple {
                theta: nl.theta.clone(),
                phi: nl.phi.clone(),
                g: nl.g.clone(),
            },
            offset: Projection1x1::zeros(cfg.c, 2 * s, true),
            fusion: nl.fusion.clone(),
            cfg,
        })
    }

    pub fn config(&self) -> &LayerConfig {
        &self.cfg
    }

    /// Eval-mode output with grid size `gs` and `groups` channel groups in
    /// place of the configured ones.
    pub fn forward_variant(&self, x: &Tensor4<T>, gs: usize, groups: usize) -> Result<Tensor4<T>> {
        let (out, _) = self.eval(x, gs, groups, None)?;
        Ok(out)
    }

    /// Eval-mode output using `offsets` instead of regressing them.
    pub fn forward_with_offsets(
        &self,
        x: &Tensor4<T>,
        offsets: &OffsetField<T>,
    ) -> Result<(Tensor4<T>, AttentionWeights<T>)> {
        self.eval(x, self.cfg.gs, self.cfg.groups, Some(offsets))
    }

    /// Eval-mode attention rows for `x`.
    pub fn attention(&self, x: &Tensor4<T>) -> Result<AttentionWeights<T>> {
        Ok(self.eval(x, self.cfg.gs, self.cfg.groups, None)?.1)
    }

    /// Offsets regressed for `x` under the configured grid size.
    pub fn offsets(&self, x: &Tensor4<T>) -> Result<OffsetField<T>> {
        let mut g = Graph::no_grad();
        let params = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = self.run(
            &mut g,
            xv,
            &params,
            Mode::Eval,
            self.cfg.gs,
            self.cfg.groups,
            None,
        )?;
        OffsetField::new(
            g.value(out.offsets.expect("layer regresses offsets"))
                .clone(),
        )
    }

    fn eval(
        &self,
        x: &Tensor4<T>,
        gs: usize,
        groups: usize,
        offsets: Option<&OffsetField<T>>,
    ) -> Result<(Tensor4<T>, AttentionWeights<T>)> {
        let mut g = Graph::no_grad();
        let params = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = self.run(&mut g, xv, &params, Mode::Eval, gs, groups, offsets)?;
        let att = out.attention.expect("layer attends");
        Ok((g.value(out.out).clone(), att))
    }

    /// The full computation on a graph. Offsets come from `given` when set.
    #[allow(clippy::too_many_arguments)]
    pub fn run(
        &self,
        g: &mut Graph<T>,
        x: Var,
        params: &[Var],
        mode: Mode,
        gs: usize,
        groups: usize,
        given: Option<&OffsetField<T>>,
    ) -> Result<LayerOutput<T>> {
        let xs = g.value(x).shape();
        if xs.c != self.cfg.c {
            return Err(Error::dim("repgraph_forward", xs, self.cfg.c));
        }
        if gs == 0 {
            return Err(Error::contract("grid size must be at least 1"));
        }
        check_groups(self.cfg.cp, groups)?;
        let training = mode.training();
        let mut cur = ParamCursor::new(params);
        let mut bn_stats = Vec::new();

        let (q, key_src, value_src) = match &self.core {
            Core::Simple { theta, phi, g: gp } => {
                let (t, p, v) = (
                    theta.bind_from(&mut cur)?,
                    phi.bind_from(&mut cur)?,
                    gp.bind_from(&mut cur)?,
                );
                let q = t.apply(g, x)?;
                let k = p.apply(g, x)?;
                let v = v.apply(g, x)?;
                (q, k, Some(v))
            }
            Core::Bottleneck { reduce, bn } => {
                let (rp, rb) = (reduce.bind_from(&mut cur)?, bn.bind_from(&mut cur)?);
                let r = rp.apply(g, x)?;
                let (r, st) = rb.apply(g, r, training)?;
                bn_stats.extend(st);
                let r = g.relu(r);
                (r, r, None)
            }
        };
        let off_proj = self.offset.bind_from(&mut cur)?;
        let fusion = self.fusion.bind_from(&mut cur)?;
        cur.finish()?;

        let offsets = match given {
            Some(field) => {
                let (hg, wg) = grid_extent(xs.h, xs.w, gs);
                let fs = field.tensor().shape();
                if field.s() != self.cfg.s || fs.n != xs.n || fs.h != hg || fs.w != wg {
                    return Err(Error::dim(
                        "forward_with_offsets",
                        fs,
                        (xs.n, 2 * self.cfg.s, hg, wg),
                    ));
                }
                g.constant(field.tensor().clone())
            }
            None => {
                let src = match self.cfg.offset_source {
                    OffsetSource::Input => x,
                    OffsetSource::Query => q,
                };
                let src = if gs > 1 {
                    g.avg_pool_grid(src, gs)?
                } else {
                    src
                };
                off_proj.apply(g, src)?
            }
        };

        let keys = g.sample_representative(key_src, offsets, gs)?;
        let values = match value_src {
            Some(v) => g.sample_representative(v, offsets, gs)?,
            None => keys,
        };
        let (x_tilde, attention) = g.sparse_attention(q, keys, values, gs, groups)?;
        let (mut out, st) = fusion.apply(g, x_tilde, x, training)?;
        bn_stats.extend(st);
        if self.cfg.variant == Variant::Bottleneck && self.cfg.init_mode == InitMode::Fresh {
            out = g.relu(out);
        }
        Ok(LayerOutput {
            out,
            attention: Some(attention),
            offsets: Some(offsets),
            bn_stats,
        })
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormParams<T>> {
        let mut v = Vec::new();
        if let Core::Bottleneck { bn, .. } = &mut self.core {
            v.push(bn);
        }
        v.extend(self.fusion.bn.as_mut());
        v
    }
}

impl<T: Scalar> Module<T> for RepGraphLayer<T> {
    fn params(&self) -> Vec<&Tensor4<T>> {
        let mut v = match &self.core {
            Core::Simple { theta, phi, g } => {
                let mut v = theta.params();
                v.extend(phi.params());
                v.extend(g.params());
                v
            }
            Core::Bottleneck { reduce, bn } => {
                let mut v = reduce.params();
                v.extend(bn.params());
                v
            }
        };
        v.extend(self.offset.params());
        v.extend(self.fusion.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor4<T>> {
        let mut v = match &mut self.core {
            Core::Simple { theta, phi, g } => {
                let mut v = theta.params_mut();
                v.extend(phi.params_mut());
                v.extend(g.params_mut());
                v
            }
            Core::Bottleneck { reduce, bn } => {
                let mut v = reduce.params_mut();
                v.extend(bn.params_mut());
                v
            }
        };
        v.extend(self.offset.params_mut());
        v.extend(self.fusion.params_mut());
        v
    }
}

impl<T: Scalar> Layer<T> for RepGraphLayer<T> {
    fn channels(&self) -> usize {
        self.cfg.c
    }

    fn forward_with(
        &self,
        g: &mut Graph<T>,
        x: Var,
        params: &[Var],
        mode: Mode,
    ) -> Result<LayerOutput<T>> {
        self.run(g, x, params, mode, self.cfg.gs, self.cfg.groups, None)
    }

    fn update_running_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        apply_bn_stats(self.batch_norms_mut(), stats)
    }
}

/// Eval-mode forward of a simple layer.
pub fn simple_repgraph_forward<T: Scalar>(
    x: &Tensor4<T>,
    layer: &RepGraphLayer<T>,
) -> Result<Tensor4<T>> {
    if layer.config().variant != Variant::Simple {
        return Err(Error::contract("expected a simple layer"));
    }
    layer.forward(x)
}

/// Eval-mode forward of a bottleneck layer.
pub fn bottleneck_repgraph_forward<T: Scalar>(
    x: &Tensor4<T>,
    layer: &RepGraphLayer<T>,
) -> Result<Tensor4<T>> {
    if layer.config().variant != Variant::Bottleneck {
        return Err(Error::contract("expected a bottleneck layer"));
    }
    layer.forward(x)
}
