//! Direct (no im2col) 2D cross-correlation with stride, dilation, groups and
//! symmetric zero padding.

use crate::error::{Result, TensorError};
use crate::tape::{Accum, Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        x: &[usize],
        wdims: &[usize],
        stride: usize,
        dilation: usize,
        groups: usize,
        pad: usize,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        let &[n, cin, h, w] = x else {
            return Err(TensorError::RankMismatch {
                op: OP,
                expected: 4,
                actual: x.len(),
            });
        };
        let &[cout, cin_g, kh, kw] = wdims else {
            return Err(TensorError::RankMismatch {
                op: OP,
                expected: 4,
                actual: wdims.len(),
            });
        };
        if stride == 0 || dilation == 0 || groups == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                reason: "stride, dilation and groups must be >= 1".into(),
            });
        }
        if cin % groups != 0 {
            return Err(TensorError::DimMismatch {
                op: OP,
                dim: "input channels divisible by groups",
                expected: groups * (cin / groups).max(1),
                actual: cin,
            });
        }
        if cout % groups != 0 {
            return Err(TensorError::DimMismatch {
                op: OP,
                dim: "output channels divisible by groups",
                expected: groups * (cout / groups).max(1),
                actual: cout,
            });
        }
        if cin_g != cin / groups {
            return Err(TensorError::DimMismatch {
                op: OP,
                dim: "weight input channels (C_in / groups)",
                expected: cin / groups,
                actual: cin_g,
            });
        }
        let span_h = dilation * (kh - 1) + 1;
        let span_w = dilation * (kw - 1) + 1;
        if h + 2 * pad < span_h || w + 2 * pad < span_w {
            return Err(TensorError::InvalidArgument {
                op: OP,
                reason: format!("kernel span {span_h}x{span_w} exceeds padded input"),
            });
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            dilation,
            groups,
            pad,
            oh: (h + 2 * pad - span_h) / stride + 1,
            ow: (w + 2 * pad - span_w) / stride + 1,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
}

/// Output index range `[lo, hi)` whose input coordinate `o*stride + off`
/// falls inside `[0, in_len)`.
#[inline]
fn valid_range(off: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let last = in_len as isize - 1 - off;
    let hi = if last < 0 { 0 } else { (last / s + 1).min(out_len as isize) };
    let lo = lo.min(out_len as isize);
    (lo as usize, hi.max(lo) as usize)
}

/// Calls `f(tap, out_start, in_start, count)` for every kernel tap and output
/// row segment whose inputs lie inside the unpadded plane. Consecutive outputs
/// in a segment read inputs `stride` apart.
#[inline]
fn for_each_tap<F: FnMut(usize, usize, usize, usize)>(g: &ConvGeom, mut f: F) {
    for ki in 0..g.kh {
        let off_h = (ki * g.dilation) as isize - g.pad as isize;
        let (rlo, rhi) = valid_range(off_h, g.stride, g.h, g.oh);
        for kj in 0..g.kw {
            let off_w = (kj * g.dilation) as isize - g.pad as isize;
            let (clo, chi) = valid_range(off_w, g.stride, g.w, g.ow);
            if clo >= chi {
                continue;
            }
            for oh in rlo..rhi {
                let ih = (oh * g.stride) as isize + off_h;
                let iw0 = (clo * g.stride) as isize + off_w;
                f(
                    ki * g.kw + kj,
                    oh * g.ow + clo,
                    ih as usize * g.w + iw0 as usize,
                    chi - clo,
                );
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let ktaps = g.kh * g.kw;
    let mut out = vec![0.0; g.n * g.cout * plane_out];
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / g.cout_g();
            let o_start = (n * g.cout + oc) * plane_out;
            let oplane = &mut out[o_start..o_start + plane_out];
            if let Some(b) = b {
                oplane.iter_mut().for_each(|v| *v = b[oc]);
            }
            for icg in 0..g.cin_g() {
                let ic = grp * g.cin_g() + icg;
                let xplane = &x[(n * g.cin + ic) * plane_in..][..plane_in];
                let wk = &w[(oc * g.cin_g() + icg) * ktaps..][..ktaps];
                for_each_tap(g, |tap, o0, i0, cnt| {
                    let wv = wk[tap];
                    if g.stride == 1 {
                        for (o, i) in oplane[o0..o0 + cnt].iter_mut().zip(&xplane[i0..i0 + cnt]) {
                            *o += wv * i;
                        }
                    } else {
                        for t in 0..cnt {
                            oplane[o0 + t] += wv * xplane[i0 + t * g.stride];
                        }
                    }
                });
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward(
    acc: &mut Accum<'_>,
    x: Var,
    w: Var,
    b: Option<Var>,
    g: &ConvGeom,
    gout: &[f64],
) {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let ktaps = g.kh * g.kw;
    let xv = acc.value(x).data().to_vec();
    let wv = acc.value(w).data().to_vec();

    if let Some(b) = b {
        let mut db = vec![0.0; g.cout];
        for n in 0..g.n {
            for (oc, d) in db.iter_mut().enumerate() {
                *d += gout[(n * g.cout + oc) * plane_out..][..plane_out].iter().sum::<f64>();
            }
        }
        acc.add(b, &db);
    }

    if acc.wants(w) {
        let mut dw = vec![0.0; wv.len()];
        for n in 0..g.n {
            for oc in 0..g.cout {
                let grp = oc / g.cout_g();
                let gplane = &gout[(n * g.cout + oc) * plane_out..][..plane_out];
                for icg in 0..g.cin_g() {
                    let ic = grp * g.cin_g() + icg;
                    let xplane = &xv[(n * g.cin + ic) * plane_in..][..plane_in];
                    let dwk = &mut dw[(oc * g.cin_g() + icg) * ktaps..][..ktaps];
                    for_each_tap(g, |tap, o0, i0, cnt| {
                        let mut s = 0.0;
                        if g.stride == 1 {
                            for (o, i) in gplane[o0..o0 + cnt].iter().zip(&xplane[i0..i0 + cnt]) {
                                s += o * i;
                            }
                        } else {
                            for t in 0..cnt {
                                s += gplane[o0 + t] * xplane[i0 + t * g.stride];
                            }
                        }
                        dwk[tap] += s;
                    });
                }
            }
        }
        acc.add(w, &dw);
    }

    if acc.wants(x) {
        let mut dx = vec![0.0; xv.len()];
        for n in 0..g.n {
            for oc in 0..g.cout {
                let grp = oc / g.cout_g();
                let gplane = &gout[(n * g.cout + oc) * plane_out..][..plane_out];
                for icg in 0..g.cin_g() {
                    let ic = grp * g.cin_g() + icg;
                    let dxplane = &mut dx[(n * g.cin + ic) * plane_in..][..plane_in];
                    let wk = &wv[(oc * g.cin_g() + icg) * ktaps..][..ktaps];
                    for_each_tap(g, |tap, o0, i0, cnt| {
                        let wt = wk[tap];
                        if g.stride == 1 {
                            for (d, o) in dxplane[i0..i0 + cnt].iter_mut().zip(&gplane[o0..o0 + cnt]) {
                                *d += wt * o;
                            }
                        } else {
                            for t in 0..cnt {
                                dxplane[i0 + t * g.stride] += wt * gplane[o0 + t];
                            }
                        }
                    });
                }
            }
        }
        acc.add(x, &dx);
    }
}

impl Tape {
    /// 2D cross-correlation. `w` is `(C_out, C_in/groups, kH, kW)`, `b` is `(C_out)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        dilation: usize,
        groups: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(
            self.value(x).dims(),
            self.value(w).dims(),
            stride,
            dilation,
            groups,
            pad,
        )?;
        if let Some(b) = b {
            let bn = self.value(b).numel();
            if bn != geom.cout {
                return Err(TensorError::DimMismatch {
                    op: "conv2d",
                    dim: "bias length (C_out)",
                    expected: geom.cout,
                    actual: bn,
                });
            }
        }
        let out = conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::from_vec(&[geom.n, geom.cout, geom.oh, geom.ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Convolution over a depth-2 stack: input `(N, C, 2, H, W)`, weight
    /// `(C_out, C, 2, 3, 3)`, spatial padding 1 and no depth padding, so the
    /// depth axis collapses and the result is `(N, C_out, H, W)`.
    pub fn conv3d_2x3x3(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "conv3d_2x3x3";
        let xd = self.value(x).dims().to_vec();
        let wd = self.value(w).dims().to_vec();
        let &[n, c, d, h, wid] = xd.as_slice() else {
            return Err(TensorError::RankMismatch {
                op: OP,
                expected: 5,
                actual: xd.len(),
            });
        };
        if d != 2 {
            return Err(TensorError::DimMismatch {
                op: OP,
                dim: "input depth",
                expected: 2,
                actual: d,
            });
        }
        let &[co, ci, kd, kh, kw] = wd.as_slice() else {
            return Err(TensorError::RankMismatch {
                op: OP,
                expected: 5,
                actual: wd.len(),
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
        if (kd, kh, kw) != (2, 3, 3) {
            return Err(TensorError::InvalidArgument {
                op: OP,
                reason: format!("kernel must be 2x3x3, got {kd}x{kh}x{kw}"),
            });
        }
        // (N, C, 2, H, W) row-major is (N, 2C, H, W) with channel index c*2 + d,
        // and the weight layout matches the same flattening.
        let x4 = self.reshape(x, &[n, c * 2, h, wid])?;
        let w4 = self.reshape(w, &[co, c * 2, 3, 3])?;
        self.conv2d(x4, w4, b, 1, 1, 1, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::valid_range;

    #[test]
    fn valid_range_matches_brute_force() {
        for in_len in 1..9 {
            for out_len in 1..9 {
                for stride in 1..4 {
                    for off in -7isize..7 {
                        let expect: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let i = (o * stride) as isize + off;
                                i >= 0 && i < in_len as isize
                            })
                            .collect();
                        let (lo, hi) = valid_range(off, stride, in_len, out_len);
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, expect, "in={in_len} out={out_len} s={stride} off={off}");
                    }
                }
            }
        }
    }
}
