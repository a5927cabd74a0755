//! Deformable 3x3 convolution (stride 1, padding 1): each kernel tap reads the
//! input at its regular position shifted by a learned, per-pixel offset, with
//! bilinear interpolation and zero padding outside the plane.

use crate::error::{Result, TensorError};
use crate::ops::resample::Bilinear;
use crate::tape::{Accum, Op, Tape, Var};
use crate::tensor::Tensor;

const TAPS: usize = 9;

/// Sampling position of tap `k` at output pixel `(oy, ox)` given offsets.
#[inline]
fn tap_position(off: &[f64], hw: usize, k: usize, p: usize, oy: usize, ox: usize) -> Bilinear {
    let (ky, kx) = (k / 3, k % 3);
    let dy = off[(2 * k) * hw + p];
    let dx = off[(2 * k + 1) * hw + p];
    Bilinear::at(
        oy as f64 - 1.0 + ky as f64 + dy,
        ox as f64 - 1.0 + kx as f64 + dx,
    )
}

/// Sampled columns `(C*9, H*W)` for one batch element.
fn columns(x: &[f64], off: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut col = vec![0.0; c * TAPS * hw];
    for k in 0..TAPS {
        for p in 0..hw {
            let bl = tap_position(off, hw, k, p, p / w, p % w);
            let corners = bl.corners(h, w);
            for ch in 0..c {
                let plane = &x[ch * hw..][..hw];
                let mut v = 0.0;
                for &(i, wt, _, _) in &corners {
                    if let Some(i) = i {
                        v += wt * plane[i];
                    }
                }
                col[(ch * TAPS + k) * hw + p] = v;
            }
        }
    }
    col
}

impl Tape {
    /// `x` `(N,C,H,W)`, `offsets` `(N,18,H,W)` as (dy, dx) per tap in
    /// row-major tap order, `w` `(C_out,C,3,3)`, `b` `(C_out)`.
    pub fn deform_conv3x3(&mut self, x: Var, offsets: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "deform_conv3x3";
        let (n, c, h, wd) = self.value(x).shape().as_nchw(OP)?;
        let od = self.value(offsets).dims().to_vec();
        if od != [n, 2 * TAPS, h, wd] {
            return Err(TensorError::InvalidArgument {
                op: OP,
                reason: format!("offsets must be ({n},18,{h},{wd}), got {od:?}"),
            });
        }
        let wdims = self.value(w).dims().to_vec();
        let &[co, ci, 3, 3] = wdims.as_slice() else {
            return Err(TensorError::InvalidArgument {
                op: OP,
                reason: format!("weight must be (C_out,C,3,3), got {wdims:?}"),
            });
        };
        if ci != c {
            return Err(TensorError::DimMismatch {
                op: OP,
                dim: "weight input channels",
                expected: c,
                actual: ci,
            });
        }
        if let Some(b) = b {
            if self.value(b).numel() != co {
                return Err(TensorError::DimMismatch {
                    op: OP,
                    dim: "bias length",
                    expected: co,
                    actual: self.value(b).numel(),
                });
            }
        }
        let hw = h * wd;
        let xv = self.value(x).data();
        let ov = self.value(offsets).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let kc = c * TAPS;
        let mut out = vec![0.0; n * co * hw];
        for s in 0..n {
            let col = columns(&xv[s * c * hw..][..c * hw], &ov[s * 2 * TAPS * hw..][..2 * TAPS * hw], c, h, wd);
            for o in 0..co {
                let op = &mut out[(s * co + o) * hw..][..hw];
                if let Some(bv) = bv {
                    op.iter_mut().for_each(|v| *v = bv[o]);
                }
                for r in 0..kc {
                    let wt = wv[o * kc + r];
                    for (d, cv) in op.iter_mut().zip(&col[r * hw..][..hw]) {
                        *d += wt * cv;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, co, h, wd], out)?;
        let mut inputs = vec![x, offsets, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        Ok(self.push(value, Op::DeformConv { x, offsets, w, b }, rg))
    }
}

pub(crate) fn deform_conv_backward(
    acc: &mut Accum<'_>,
    x: Var,
    offsets: Var,
    w: Var,
    b: Option<Var>,
    g: &[f64],
) {
    let (n, c, h, wd) = acc.value(x).shape().as_nchw("deform").expect("rank 4");
    let co = acc.value(w).dims()[0];
    let hw = h * wd;
    let kc = c * TAPS;
    let xv = acc.value(x).data().to_vec();
    let ov = acc.value(offsets).data().to_vec();
    let wv = acc.value(w).data().to_vec();
    let mut dx = vec![0.0; xv.len()];
    let mut doff = vec![0.0; ov.len()];
    let mut dw = vec![0.0; wv.len()];
    let mut db = vec![0.0; co];
    for s in 0..n {
        let xs = &xv[s * c * hw..][..c * hw];
        let os = &ov[s * 2 * TAPS * hw..][..2 * TAPS * hw];
        let col = columns(xs, os, c, h, wd);
        let gs = &g[s * co * hw..][..co * hw];
        let mut dcol = vec![0.0; kc * hw];
        for o in 0..co {
            let gp = &gs[o * hw..][..hw];
            db[o] += gp.iter().sum::<f64>();
            for r in 0..kc {
                let wt = wv[o * kc + r];
                let mut acc_w = 0.0;
                for ((d, gv), cv) in dcol[r * hw..][..hw].iter_mut().zip(gp).zip(&col[r * hw..][..hw]) {
                    *d += wt * gv;
                    acc_w += gv * cv;
                }
                dw[o * kc + r] += acc_w;
            }
        }
        let dxs = &mut dx[s * c * hw..][..c * hw];
        let doffs = &mut doff[s * 2 * TAPS * hw..][..2 * TAPS * hw];
        for k in 0..TAPS {
            for p in 0..hw {
                let bl = tap_position(os, hw, k, p, p / wd, p % wd);
                let corners = bl.corners(h, wd);
                let (mut dpy, mut dpx) = (0.0, 0.0);
                for ch in 0..c {
                    let dc = dcol[(ch * TAPS + k) * hw + p];
                    if dc == 0.0 {
                        continue;
                    }
                    for &(i, wt, dwy, dwx) in &corners {
                        if let Some(i) = i {
                            dxs[ch * hw + i] += dc * wt;
                            dpy += dc * dwy * xs[ch * hw + i];
                            dpx += dc * dwx * xs[ch * hw + i];
                        }
                    }
                }
                doffs[(2 * k) * hw + p] += dpy;
                doffs[(2 * k + 1) * hw + p] += dpx;
            }
        }
    }
    acc.add(x, &dx);
    acc.add(offsets, &doff);
    acc.add(w, &dw);
    if let Some(b) = b {
        acc.add(b, &db);
    }
}
