//! Bilinear resampling. Every routine uses the align-corners convention:
//! the centres of the corner pixels of input and output coincide, and a
//! normalized coordinate of -1 / +1 maps to the first / last pixel centre.

use crate::error::{Result, TensorError};
use crate::tape::{Accum, Op, Tape, Var};
use crate::tensor::Tensor;

/// Source index pair and interpolation weight for each output coordinate.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = if out_len > 1 {
                o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
            } else {
                0.0
            };
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Position of a normalized coordinate in pixel units.
#[inline]
fn unnormalize(coord: f64, len: usize) -> f64 {
    (coord + 1.0) * 0.5 * (len - 1) as f64
}

#[inline]
fn normalized_base(i: usize, len: usize) -> f64 {
    if len > 1 {
        -1.0 + 2.0 * i as f64 / (len - 1) as f64
    } else {
        0.0
    }
}

/// Corner indices and weights of one bilinear sample. Corners outside the
/// plane carry weight but no index; they read as zero.
#[derive(Clone, Copy)]
pub(crate) struct Bilinear {
    pub(crate) y0: isize,
    pub(crate) x0: isize,
    pub(crate) ly: f64,
    pub(crate) lx: f64,
}

impl Bilinear {
    #[inline]
    pub(crate) fn at(py: f64, px: f64) -> Self {
        let y0 = py.floor();
        let x0 = px.floor();
        Self {
            y0: y0 as isize,
            x0: x0 as isize,
            ly: py - y0,
            lx: px - x0,
        }
    }

    /// `(flat index or None, weight, d weight/dy, d weight/dx)` for each corner.
    #[inline]
    pub(crate) fn corners(&self, h: usize, w: usize) -> [(Option<usize>, f64, f64, f64); 4] {
        let idx = |y: isize, x: isize| {
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                Some(y as usize * w + x as usize)
            } else {
                None
            }
        };
        let (ly, lx) = (self.ly, self.lx);
        [
            (idx(self.y0, self.x0), (1.0 - ly) * (1.0 - lx), -(1.0 - lx), -(1.0 - ly)),
            (idx(self.y0, self.x0 + 1), (1.0 - ly) * lx, -lx, 1.0 - ly),
            (idx(self.y0 + 1, self.x0), ly * (1.0 - lx), 1.0 - lx, -ly),
            (idx(self.y0 + 1, self.x0 + 1), ly * lx, lx, ly),
        ]
    }
}

impl Tape {
    /// Bilinear resize of a rank-4 tensor to `(out_h, out_w)`.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::InvalidArgument {
                op: "bilinear_resize",
                reason: "output size must be >= 1".into(),
            });
        }
        let (n, c, h, w) = self.value(x).shape().as_nchw("bilinear_resize")?;
        let ty = axis_taps(h, out_h);
        let tx = axis_taps(w, out_w);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for plane in xv.chunks_exact(h * w) {
            for &(y0, y1, ly) in &ty {
                for &(x0, x1, lx) in &tx {
                    let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                    let bot = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                    out.push(top * (1.0 - ly) + bot * ly);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, out_h, out_w], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Resize { x }, rg))
    }

    /// Samples `x` `(N,C,H,W)` at the normalized locations of `grid`
    /// `(N,Ho,Wo,2)` (last axis = x, y). Samples outside the input read zero.
    pub fn grid_sample(&mut self, x: Var, grid: Var) -> Result<Var> {
        const OP: &str = "grid_sample";
        let (n, c, h, w) = self.value(x).shape().as_nchw(OP)?;
        let gd = self.value(grid).dims().to_vec();
        let &[gn, oh, ow, two] = gd.as_slice() else {
            return Err(TensorError::RankMismatch {
                op: OP,
                expected: 4,
                actual: gd.len(),
            });
        };
        if gn != n {
            return Err(TensorError::DimMismatch {
                op: OP,
                dim: "grid batch",
                expected: n,
                actual: gn,
            });
        }
        if two != 2 {
            return Err(TensorError::DimMismatch {
                op: OP,
                dim: "grid last axis",
                expected: 2,
                actual: two,
            });
        }
        let xv = self.value(x).data();
        let gv = self.value(grid).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for s in 0..n {
            for p in 0..oh * ow {
                let gi = (s * oh * ow + p) * 2;
                let bl = Bilinear::at(unnormalize(gv[gi + 1], h), unnormalize(gv[gi], w));
                let corners = bl.corners(h, w);
                for ch in 0..c {
                    let plane = &xv[(s * c + ch) * h * w..][..h * w];
                    let mut v = 0.0;
                    for &(i, wt, _, _) in &corners {
                        if let Some(i) = i {
                            v += wt * plane[i];
                        }
                    }
                    out[(s * c + ch) * oh * ow + p] = v;
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        let rg = self.any_grad(&[x, grid]);
        Ok(self.push(value, Op::GridSample { x, grid }, rg))
    }

    /// Sampling grid `(N,H,W,2)` of the affine maps `theta` `(N,6)`, each row
    /// read as the 2x3 matrix `[[t0,t1,t2],[t3,t4,t5]]` acting on normalized
    /// output coordinates.
    pub fn affine_grid(&mut self, theta: Var, h: usize, w: usize) -> Result<Var> {
        const OP: &str = "affine_grid";
        let td = self.value(theta).dims().to_vec();
        let &[n, six] = td.as_slice() else {
            return Err(TensorError::RankMismatch {
                op: OP,
                expected: 2,
                actual: td.len(),
            });
        };
        if six != 6 {
            return Err(TensorError::DimMismatch {
                op: OP,
                dim: "affine parameters",
                expected: 6,
                actual: six,
            });
        }
        if h == 0 || w == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                reason: "grid size must be >= 1".into(),
            });
        }
        let tv = self.value(theta).data();
        let mut out = Vec::with_capacity(n * h * w * 2);
        for s in 0..n {
            let t = &tv[s * 6..][..6];
            for i in 0..h {
                let y = normalized_base(i, h);
                for j in 0..w {
                    let x = normalized_base(j, w);
                    out.push(t[0] * x + t[1] * y + t[2]);
                    out.push(t[3] * x + t[4] * y + t[5]);
                }
            }
        }
        let value = Tensor::from_vec(&[n, h, w, 2], out)?;
        let rg = self.requires_grad(theta);
        Ok(self.push(value, Op::AffineGrid { theta }, rg))
    }
}

pub(crate) fn resize_backward(acc: &mut Accum<'_>, x: Var, out: &Tensor, g: &[f64]) {
    let (_, _, h, w) = acc.value(x).shape().as_nchw("resize").expect("rank 4");
    let (_, _, oh, ow) = out.shape().as_nchw("resize").expect("rank 4");
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let total = acc.value(x).numel();
    acc.with(x, total, |buf| {
        for (plane, gplane) in buf.chunks_exact_mut(h * w).zip(g.chunks_exact(oh * ow)) {
            let mut k = 0;
            for &(y0, y1, ly) in &ty {
                for &(x0, x1, lx) in &tx {
                    let gv = gplane[k];
                    k += 1;
                    plane[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                    plane[y0 * w + x1] += gv * (1.0 - ly) * lx;
                    plane[y1 * w + x0] += gv * ly * (1.0 - lx);
                    plane[y1 * w + x1] += gv * ly * lx;
                }
            }
        }
    });
}

pub(crate) fn grid_sample_backward(acc: &mut Accum<'_>, x: Var, grid: Var, g: &[f64]) {
    let (n, c, h, w) = acc.value(x).shape().as_nchw("grid_sample").expect("rank 4");
    let gd = acc.value(grid).dims().to_vec();
    let (oh, ow) = (gd[1], gd[2]);
    let xv = acc.value(x).data().to_vec();
    let gv = acc.value(grid).data().to_vec();
    let mut dx = vec![0.0; xv.len()];
    let mut dgrid = vec![0.0; gv.len()];
    let sy = 0.5 * (h - 1) as f64;
    let sx = 0.5 * (w - 1) as f64;
    for s in 0..n {
        for p in 0..oh * ow {
            let gi = (s * oh * ow + p) * 2;
            let bl = Bilinear::at(unnormalize(gv[gi + 1], h), unnormalize(gv[gi], w));
            let corners = bl.corners(h, w);
            let (mut dpy, mut dpx) = (0.0, 0.0);
            for ch in 0..c {
                let base = (s * c + ch) * h * w;
                let go = g[(s * c + ch) * oh * ow + p];
                for &(i, wt, dwy, dwx) in &corners {
                    if let Some(i) = i {
                        dx[base + i] += go * wt;
                        dpy += go * dwy * xv[base + i];
                        dpx += go * dwx * xv[base + i];
                    }
                }
            }
            dgrid[gi] += dpx * sx;
            dgrid[gi + 1] += dpy * sy;
        }
    }
    acc.add(x, &dx);
    acc.add(grid, &dgrid);
}

pub(crate) fn affine_grid_backward(acc: &mut Accum<'_>, theta: Var, out: &Tensor, g: &[f64]) {
    let dims = out.dims();
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let mut dt = vec![0.0; n * 6];
    for s in 0..n {
        for i in 0..h {
            let y = normalized_base(i, h);
            for j in 0..w {
                let x = normalized_base(j, w);
                let k = ((s * h + i) * w + j) * 2;
                let (gx, gy) = (g[k], g[k + 1]);
                let t = &mut dt[s * 6..][..6];
                t[0] += gx * x;
                t[1] += gx * y;
                t[2] += gx;
                t[3] += gy * x;
                t[4] += gy * y;
                t[5] += gy;
            }
        }
    }
    acc.add(theta, &dt);
}
