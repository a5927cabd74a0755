//! Operations whose filters are produced by the network itself.

use crate::error::{Result, TensorError};
use crate::tape::{Accum, Op, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// Divides each `(n, c)` spatial plane by its L1 norm plus `eps`.
    pub fn l1_normalize_spatial(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (_, _, h, w) = self.value(x).shape().as_nchw("l1_normalize_spatial")?;
        let t = self.value(x);
        let mut out = Vec::with_capacity(t.numel());
        for plane in t.data().chunks_exact(h * w) {
            let s = plane.iter().map(|v| v.abs()).sum::<f64>() + eps;
            out.extend(plane.iter().map(|v| v / s));
        }
        let value = Tensor::from_shape(t.shape().clone(), out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::L1Normalize { x, eps }, rg))
    }

    /// Depthwise 3x3 correlation of `x` `(N,C,H,W)` with per-sample,
    /// per-channel filters `(N,C,3,3)`, zero padding 1.
    pub fn dynamic_depthwise3x3(&mut self, x: Var, filters: Var) -> Result<Var> {
        const OP: &str = "dynamic_depthwise3x3";
        let (n, c, h, w) = self.value(x).shape().as_nchw(OP)?;
        let fd = self.value(filters).dims().to_vec();
        if fd != [n, c, 3, 3] {
            return Err(TensorError::InvalidArgument {
                op: OP,
                reason: format!("filters must be ({n},{c},3,3), got {fd:?}"),
            });
        }
        let xv = self.value(x).data();
        let fv = self.value(filters).data();
        let mut out = vec![0.0; xv.len()];
        for plane in 0..n * c {
            let xp = &xv[plane * h * w..][..h * w];
            let fk = &fv[plane * 9..][..9];
            let op = &mut out[plane * h * w..][..h * w];
            for_taps(h, w, |tap, o, i| op[o] += fk[tap] * xp[i]);
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        let rg = self.any_grad(&[x, filters]);
        Ok(self.push(value, Op::DynamicDepthwise { x, filters }, rg))
    }
}

/// Calls `f(tap, out_index, in_index)` for each in-bounds 3x3 tap, pad 1.
#[inline]
fn for_taps<F: FnMut(usize, usize, usize)>(h: usize, w: usize, mut f: F) {
    for oy in 0..h {
        for ox in 0..w {
            for ky in 0..3 {
                let iy = oy as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = ox as isize + kx as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    f(ky * 3 + kx, oy * w + ox, iy as usize * w + ix as usize);
                }
            }
        }
    }
}

pub(crate) fn l1_normalize_backward(acc: &mut Accum<'_>, x: Var, eps: f64, g: &[f64]) {
    let (_, _, h, w) = acc.value(x).shape().as_nchw("l1").expect("rank 4");
    let xv = acc.value(x).data().to_vec();
    let mut dx = vec![0.0; xv.len()];
    for ((plane, gp), dp) in xv
        .chunks_exact(h * w)
        .zip(g.chunks_exact(h * w))
        .zip(dx.chunks_exact_mut(h * w))
    {
        let s = plane.iter().map(|v| v.abs()).sum::<f64>() + eps;
        let gx: f64 = gp.iter().zip(plane).map(|(a, b)| a * b).sum();
        for j in 0..plane.len() {
            dp[j] = gp[j] / s - sign(plane[j]) * gx / (s * s);
        }
    }
    acc.add(x, &dx);
}

pub(crate) fn dynamic_depthwise_backward(acc: &mut Accum<'_>, x: Var, filters: Var, g: &[f64]) {
    let (n, c, h, w) = acc.value(x).shape().as_nchw("dyn").expect("rank 4");
    let xv = acc.value(x).data().to_vec();
    let fv = acc.value(filters).data().to_vec();
    let mut dx = vec![0.0; xv.len()];
    let mut df = vec![0.0; fv.len()];
    for plane in 0..n * c {
        let xp = &xv[plane * h * w..][..h * w];
        let fk = &fv[plane * 9..][..9];
        let gp = &g[plane * h * w..][..h * w];
        let dxp = &mut dx[plane * h * w..][..h * w];
        let dfk = &mut df[plane * 9..][..9];
        for_taps(h, w, |tap, o, i| {
            dxp[i] += fk[tap] * gp[o];
            dfk[tap] += xp[i] * gp[o];
        });
    }
    acc.add(x, &dx);
    acc.add(filters, &df);
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
