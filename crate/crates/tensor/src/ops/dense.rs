use crate::error::{Result, TensorError};
use crate::tape::{Accum, Op, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// `x W^T + b` for `x` `(N,F)`, `w` `(O,F)`, `b` `(O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let xd = self.value(x).dims().to_vec();
        let wd = self.value(w).dims().to_vec();
        let (&[n, f], &[o, wf]) = (xd.as_slice(), wd.as_slice()) else {
            return Err(TensorError::RankMismatch {
                op: OP,
                expected: 2,
                actual: if xd.len() != 2 { xd.len() } else { wd.len() },
            });
        };
        if wf != f {
            return Err(TensorError::DimMismatch {
                op: OP,
                dim: "weight input features",
                expected: f,
                actual: wf,
            });
        }
        if let Some(b) = b {
            if self.value(b).numel() != o {
                return Err(TensorError::DimMismatch {
                    op: OP,
                    dim: "bias length",
                    expected: o,
                    actual: self.value(b).numel(),
                });
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut out = Vec::with_capacity(n * o);
        for row in xv.chunks_exact(f) {
            for k in 0..o {
                let dot: f64 = wv[k * f..(k + 1) * f].iter().zip(row).map(|(a, b)| a * b).sum();
                out.push(dot + bv.map_or(0.0, |b| b[k]));
            }
        }
        let value = Tensor::from_vec(&[n, o], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Row `row` of a `(V,D)` table as a `(1,D)` tensor.
    pub fn select_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let td = self.value(table).dims().to_vec();
        let &[v, d] = td.as_slice() else {
            return Err(TensorError::RankMismatch {
                op: "select_row",
                expected: 2,
                actual: td.len(),
            });
        };
        if row >= v {
            return Err(TensorError::InvalidArgument {
                op: "select_row",
                reason: format!("row {row} out of range for {v} rows"),
            });
        }
        let out = self.value(table).data()[row * d..(row + 1) * d].to_vec();
        let value = Tensor::from_vec(&[1, d], out)?;
        let rg = self.requires_grad(table);
        Ok(self.push(value, Op::SelectRow { table, row }, rg))
    }

    /// Log-softmax over the first `valid` entries of a `(1,V)` row; the
    /// remaining entries are masked out and do not appear in the `(1,valid)` result.
    pub fn masked_log_softmax(&mut self, x: Var, valid: usize) -> Result<Var> {
        let xd = self.value(x).dims().to_vec();
        if xd.len() != 2 || xd[0] != 1 || valid == 0 || valid > xd[1] {
            return Err(TensorError::InvalidArgument {
                op: "masked_log_softmax",
                reason: format!("need a (1,V) row with 1 <= valid <= V, got {xd:?} valid={valid}"),
            });
        }
        let logits = &self.value(x).data()[..valid];
        let out = log_softmax(logits);
        let value = Tensor::from_vec(&[1, valid], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::MaskedLogSoftmax { x }, rg))
    }

    /// Entry `index` of the flattened tensor as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if index >= t.numel() {
            return Err(TensorError::InvalidArgument {
                op: "pick",
                reason: format!("index {index} out of range for {} entries", t.numel()),
            });
        }
        let v = t.data()[index];
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }, rg))
    }

    /// PPO clipped surrogate for one trajectory:
    /// `min(r A, clip(r, 1-eps, 1+eps) A)` with `r = exp(logp - logp_old)`.
    /// When the clipped branch is selected the gradient is exactly zero.
    pub fn clipped_surrogate(&mut self, logp: Var, logp_old: f64, advantage: f64, eps: f64) -> Result<Var> {
        if self.value(logp).numel() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "clipped_surrogate",
                reason: "log-probability must be a scalar".into(),
            });
        }
        let r = (self.value(logp).item() - logp_old).exp();
        let v = (r * advantage).min(r.clamp(1.0 - eps, 1.0 + eps) * advantage);
        let rg = self.requires_grad(logp);
        Ok(self.push(
            Tensor::scalar(v),
            Op::ClippedSurrogate {
                lp: logp,
                lp_old: logp_old,
                adv: advantage,
                eps,
            },
            rg,
        ))
    }
}

/// Numerically stable log-softmax of a slice.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// d surrogate / d logp.
pub(crate) fn clipped_surrogate_grad(logp: f64, logp_old: f64, adv: f64, eps: f64) -> f64 {
    let r = (logp - logp_old).exp();
    let unclipped = r * adv;
    let clipped = r.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        unclipped
    } else {
        0.0
    }
}

pub(crate) fn linear_backward(acc: &mut Accum<'_>, x: Var, w: Var, b: Option<Var>, g: &[f64]) {
    let xd = acc.value(x).dims().to_vec();
    let (n, f) = (xd[0], xd[1]);
    let o = acc.value(w).dims()[0];
    let xv = acc.value(x).data().to_vec();
    let wv = acc.value(w).data().to_vec();
    if let Some(b) = b {
        let mut db = vec![0.0; o];
        for row in g.chunks_exact(o) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        acc.add(b, &db);
    }
    if acc.wants(w) {
        let mut dw = vec![0.0; o * f];
        for s in 0..n {
            let xr = &xv[s * f..][..f];
            for k in 0..o {
                let gk = g[s * o + k];
                if gk != 0.0 {
                    for (d, xvv) in dw[k * f..][..f].iter_mut().zip(xr) {
                        *d += gk * xvv;
                    }
                }
            }
        }
        acc.add(w, &dw);
    }
    if acc.wants(x) {
        let mut dx = vec![0.0; n * f];
        for s in 0..n {
            let dr = &mut dx[s * f..][..f];
            for k in 0..o {
                let gk = g[s * o + k];
                if gk != 0.0 {
                    for (d, wvv) in dr.iter_mut().zip(&wv[k * f..][..f]) {
                        *d += gk * wvv;
                    }
                }
            }
        }
        acc.add(x, &dx);
    }
}

pub(crate) fn select_row_backward(acc: &mut Accum<'_>, table: Var, row: usize, g: &[f64]) {
    let total = acc.value(table).numel();
    let d = g.len();
    acc.with(table, total, |buf| {
        for (b, v) in buf[row * d..(row + 1) * d].iter_mut().zip(g) {
            *b += v;
        }
    });
}

pub(crate) fn log_softmax_backward(acc: &mut Accum<'_>, x: Var, out: &Tensor, g: &[f64]) {
    let total = acc.value(x).numel();
    let gsum: f64 = g.iter().sum();
    let lp = out.data();
    acc.with(x, total, |buf| {
        for i in 0..lp.len() {
            buf[i] += g[i] - lp[i].exp() * gsum;
        }
    });
}
