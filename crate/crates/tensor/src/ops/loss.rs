use crate::error::{Result, TensorError};
use crate::tape::{Accum, Op, Tape, Var};
use crate::tensor::Tensor;

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Softmax over the channel axis at one pixel, written into `probs`.
fn pixel_softmax(logits: &[f64], c: usize, hw: usize, s: usize, p: usize, probs: &mut [f64]) {
    let mut m = f64::NEG_INFINITY;
    for k in 0..c {
        m = m.max(logits[(s * c + k) * hw + p]);
    }
    let mut z = 0.0;
    for (k, pr) in probs.iter_mut().enumerate().take(c) {
        *pr = (logits[(s * c + k) * hw + p] - m).exp();
        z += *pr;
    }
    probs.iter_mut().take(c).for_each(|v| *v /= z);
}

impl Tape {
    /// Mean over non-ignored pixels of `-log softmax(logits)[label]`.
    /// `labels` is `(N,H,W)` flattened; pixels labelled 255 contribute nothing.
    /// With no scored pixel the loss is 0 and its gradient is zero.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let (n, c, h, w) = self.value(logits).shape().as_nchw(OP)?;
        if labels.len() != n * h * w {
            return Err(TensorError::DimMismatch {
                op: OP,
                dim: "label count (N*H*W)",
                expected: n * h * w,
                actual: labels.len(),
            });
        }
        if let Some((index, &label)) = labels
            .iter()
            .enumerate()
            .find(|&(_, &l)| l != IGNORE_LABEL && l as usize >= c)
        {
            return Err(TensorError::LabelOutOfRange {
                label,
                index,
                classes: c,
            });
        }
        let hw = h * w;
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; c];
        let mut total = 0.0;
        let mut count = 0;
        for s in 0..n {
            for p in 0..hw {
                let l = labels[s * hw + p];
                if l == IGNORE_LABEL {
                    continue;
                }
                pixel_softmax(lv, c, hw, s, p, &mut probs);
                total -= probs[l as usize].ln();
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                count,
            },
            rg,
        ))
    }
}

pub(crate) fn cross_entropy_backward(
    acc: &mut Accum<'_>,
    logits: Var,
    labels: &[u8],
    count: usize,
    g: &[f64],
) {
    let (n, c, h, w) = acc.value(logits).shape().as_nchw("ce").expect("rank 4");
    let hw = h * w;
    let lv = acc.value(logits).data().to_vec();
    let total = lv.len();
    let scale = if count > 0 { g[0] / count as f64 } else { 0.0 };
    acc.with(logits, total, |buf| {
        if count == 0 {
            return;
        }
        let mut probs = vec![0.0; c];
        for s in 0..n {
            for p in 0..hw {
                let l = labels[s * hw + p];
                if l == IGNORE_LABEL {
                    continue;
                }
                pixel_softmax(&lv, c, hw, s, p, &mut probs);
                for k in 0..c {
                    let onehot = if k == l as usize { 1.0 } else { 0.0 };
                    buf[(s * c + k) * hw + p] += scale * (probs[k] - onehot);
                }
            }
        }
    });
}
