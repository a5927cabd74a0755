use crate::error::{Result, TensorError};
use crate::tape::{Accum, Op, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(dims)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Stacks two `(N,C,H,W)` tensors along a new depth axis: `(N,C,2,H,W)`.
    pub fn stack_depth(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(a).shape().as_nchw("stack_depth")?;
        same_dims("stack_depth", self.value(a), self.value(b))?;
        let hw = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(2 * av.len());
        for plane in 0..n * c {
            out.extend_from_slice(&av[plane * hw..][..hw]);
            out.extend_from_slice(&bv[plane * hw..][..hw]);
        }
        let value = Tensor::from_vec(&[n, c, 2, h, w], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::StackDepth { a, b }, rg))
    }

    /// Concatenates along axis 1. All other dimensions must agree.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = xs.first().ok_or(TensorError::InvalidArgument {
            op: OP,
            reason: "no inputs".into(),
        })?;
        let base = self.value(*first).dims().to_vec();
        if base.len() < 2 {
            return Err(TensorError::RankMismatch {
                op: OP,
                expected: 2,
                actual: base.len(),
            });
        }
        let mut total_c = 0;
        for &x in xs {
            let d = self.value(x).dims();
            if d.len() != base.len() || d[0] != base[0] || d[2..] != base[2..] {
                return Err(TensorError::InvalidArgument {
                    op: OP,
                    reason: format!("shape {d:?} incompatible with {base:?}"),
                });
            }
            total_c += d[1];
        }
        let inner = self.value(*first).shape().inner_after_channel();
        let n = base[0];
        let mut out = Vec::with_capacity(n * total_c * inner);
        for s in 0..n {
            for &x in xs {
                let t = self.value(x);
                let c = t.dims()[1];
                out.extend_from_slice(&t.data()[s * c * inner..][..c * inner]);
            }
        }
        let mut dims = base;
        dims[1] = total_c;
        let value = Tensor::from_vec(&dims, out)?;
        let rg = self.any_grad(xs);
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }, rg))
    }

    /// Channels `[start, start + len)` along axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let dims = self.value(x).dims().to_vec();
        if dims.len() < 2 || start + len > dims[1] || len == 0 {
            return Err(TensorError::InvalidArgument {
                op: "slice_channels",
                reason: format!("range {start}..{} invalid for shape {dims:?}", start + len),
            });
        }
        let inner = self.value(x).shape().inner_after_channel();
        let c = dims[1];
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(dims[0] * len * inner);
        for s in 0..dims[0] {
            out.extend_from_slice(&data[(s * c + start) * inner..][..len * inner]);
        }
        let mut od = dims;
        od[1] = len;
        let value = Tensor::from_vec(&od, out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Slice { x, start }, rg))
    }
}

pub(crate) fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(TensorError::InvalidArgument {
            op,
            reason: format!("shapes {} and {} differ", a.shape(), b.shape()),
        });
    }
    Ok(())
}

pub(crate) fn stack_depth_backward(acc: &mut Accum<'_>, a: Var, b: Var, g: &[f64]) {
    let dims = acc.value(a).dims().to_vec();
    let hw = dims[2] * dims[3];
    let planes = dims[0] * dims[1];
    let mut da = Vec::with_capacity(planes * hw);
    let mut db = Vec::with_capacity(planes * hw);
    for p in 0..planes {
        da.extend_from_slice(&g[2 * p * hw..][..hw]);
        db.extend_from_slice(&g[(2 * p + 1) * hw..][..hw]);
    }
    acc.add(a, &da);
    acc.add(b, &db);
}

pub(crate) fn concat_backward(acc: &mut Accum<'_>, xs: &[Var], g: &[f64]) {
    let dims: Vec<Vec<usize>> = xs.iter().map(|&x| acc.value(x).dims().to_vec()).collect();
    let n = dims[0][0];
    let inner: usize = dims[0][2..].iter().product();
    let total_c: usize = dims.iter().map(|d| d[1]).sum();
    let mut c_off = 0;
    for (&x, d) in xs.iter().zip(&dims) {
        let c = d[1];
        let mut dx = Vec::with_capacity(n * c * inner);
        for s in 0..n {
            dx.extend_from_slice(&g[(s * total_c + c_off) * inner..][..c * inner]);
        }
        acc.add(x, &dx);
        c_off += c;
    }
}

pub(crate) fn slice_backward(acc: &mut Accum<'_>, x: Var, start: usize, out: &Tensor, g: &[f64]) {
    let xd = acc.value(x).dims().to_vec();
    let inner: usize = xd[2..].iter().product();
    let len = out.dims()[1];
    let c = xd[1];
    let total = acc.value(x).numel();
    acc.with(x, total, |buf| {
        for s in 0..xd[0] {
            let dst = &mut buf[(s * c + start) * inner..][..len * inner];
            for (d, v) in dst.iter_mut().zip(&g[s * len * inner..][..len * inner]) {
                *d += v;
            }
        }
    });
}
