use crate::error::{Result, TensorError};
use crate::tape::{Accum, Op, Tape, Var};
use crate::tensor::Tensor;

/// Window `[start, end)` of output cell `i` when `in_len` is split into `out_len` cells.
pub fn adaptive_window(i: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let start = i * in_len / out_len;
    let end = ((i + 1) * in_len).div_ceil(out_len);
    (start, end)
}

impl Tape {
    /// Per-channel spatial mean: `(N,C,H,W) -> (N,C,1,1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).shape().as_nchw("global_avg_pool")?;
        let inv = 1.0 / (h * w) as f64;
        let out = self
            .value(x)
            .data()
            .chunks_exact(h * w)
            .map(|p| p.iter().sum::<f64>() * inv)
            .collect();
        let value = Tensor::from_vec(&[n, c, 1, 1], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::GlobalAvgPool { x }, rg))
    }

    /// Average pooling to a fixed output grid using floor/ceil window bounds.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        const OP: &str = "adaptive_avg_pool";
        let (n, c, h, w) = self.value(x).shape().as_nchw(OP)?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(TensorError::InvalidArgument {
                op: OP,
                reason: format!("output {out_h}x{out_w} must be within 1x1..={h}x{w}"),
            });
        }
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for plane in self.value(x).data().chunks_exact(h * w) {
            for i in 0..out_h {
                let (y0, y1) = adaptive_window(i, h, out_h);
                for j in 0..out_w {
                    let (x0, x1) = adaptive_window(j, w, out_w);
                    let mut s = 0.0;
                    for y in y0..y1 {
                        s += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                    }
                    out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, out_h, out_w], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::AdaptiveAvgPool { x }, rg))
    }
}

pub(crate) fn global_avg_pool_backward(acc: &mut Accum<'_>, x: Var, g: &[f64]) {
    let (_, _, h, w) = acc.value(x).shape().as_nchw("global_avg_pool").expect("rank 4");
    let inv = 1.0 / (h * w) as f64;
    let total = acc.value(x).numel();
    acc.with(x, total, |buf| {
        for (plane, gv) in buf.chunks_exact_mut(h * w).zip(g) {
            plane.iter_mut().for_each(|v| *v += gv * inv);
        }
    });
}

pub(crate) fn adaptive_avg_pool_backward(acc: &mut Accum<'_>, x: Var, out: &Tensor, g: &[f64]) {
    let (_, _, h, w) = acc.value(x).shape().as_nchw("adaptive_avg_pool").expect("rank 4");
    let (_, _, oh, ow) = out.shape().as_nchw("adaptive_avg_pool").expect("rank 4");
    let total = acc.value(x).numel();
    acc.with(x, total, |buf| {
        for (plane, gplane) in buf.chunks_exact_mut(h * w).zip(g.chunks_exact(oh * ow)) {
            for i in 0..oh {
                let (y0, y1) = adaptive_window(i, h, oh);
                for j in 0..ow {
                    let (x0, x1) = adaptive_window(j, w, ow);
                    let share = gplane[i * ow + j] / ((y1 - y0) * (x1 - x0)) as f64;
                    for y in y0..y1 {
                        plane[y * w + x0..y * w + x1].iter_mut().for_each(|v| *v += share);
                    }
                }
            }
        }
    });
}
