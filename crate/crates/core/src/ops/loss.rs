use crate::autograd::{BackwardCtx, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

use super::softmax_in_place;

/// Per-site class probabilities of `(n, k, h, w)` logits, site-major.
fn site_probs<T: Scalar>(logits: &Tensor4<T>) -> Vec<T> {
    let s = logits.shape();
    let (k, hw) = (s.c, s.hw());
    let mut probs = vec![T::zero(); s.n * hw * k];
    let mut row = vec![T::zero(); k];
    for b in 0..s.n {
        for site in 0..hw {
            for (c, r) in row.iter_mut().enumerate() {
                *r = logits.plane(b, c)[site];
            }
            softmax_in_place(&mut row);
            let at = (b * hw + site) * k;
            probs[at..at + k].copy_from_slice(&row);
        }
    }
    probs
}

fn check_labels<T: Scalar>(logits: &Tensor4<T>, labels: &[usize]) -> Result<()> {
    let s = logits.shape();
    if labels.len() != s.n * s.hw() {
        return Err(Error::dim("softmax_cross_entropy", s, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s.c) {
        return Err(Error::Index {
            op: "softmax_cross_entropy",
            index: bad,
            bound: s.c,
        });
    }
    Ok(())
}

/// Mean pixel-wise cross-entropy of `(n, k, h, w)` logits against labels
/// laid out as `b * h * w + i * w + j`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor4<T>, labels: &[usize]) -> Result<T> {
    check_labels(logits, labels)?;
    let k = logits.shape().c;
    let probs = site_probs(logits);
    let total: T = labels
        .iter()
        .enumerate()
        .map(|(site, &l)| {
            let p = probs[site * k + l];
            let p = if p.is_nan() {
                p
            } else {
                p.max(T::min_positive_value())
            };
            -p.ln()
        })
        .sum();
    Ok(total / T::of(labels.len() as f64))
}

struct CrossEntropyOp<T> {
    probs: Vec<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> Op<T> for CrossEntropyOp<T> {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        g: &Tensor4<T>,
    ) -> Result<Vec<Option<Tensor4<T>>>> {
        let s = ctx.inputs[0].shape();
        let (k, hw) = (s.c, s.hw());
        let scale = g.data()[0] / T::of(self.labels.len() as f64);
        let gx = Tensor4::from_fn(s, |b, c, i, j| {
            let site = b * hw + i * s.w + j;
            let mut v = self.probs[site * k + c];
            if self.labels[site] == c {
                v -= T::one();
            }
            v * scale
        });
        Ok(vec![Some(gx)])
    }
}

impl<T: Scalar> Graph<T> {
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let value = softmax_cross_entropy(self.value(logits), labels)?;
        let probs = if self.is_recording() {
            site_probs(self.value(logits))
        } else {
            Vec::new()
        };
        let labels = labels.to_vec();
        Ok(
            self.record_with(Tensor4::scalar(value), &[logits], || CrossEntropyOp {
                probs,
                labels,
            }),
        )
    }
}
