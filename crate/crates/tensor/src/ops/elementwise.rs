use crate::error::{Result, TensorError};
use crate::tape::{Accum, Binary, Op, Tape, Unary, Var};
use crate::tensor::Tensor;

/// Whether `b` is a per-channel `(N,C,1,1)` operand for a rank-4 `a`.
fn is_channel_broadcast(a: &[usize], b: &[usize]) -> bool {
    a.len() == 4 && b.len() == 4 && a[0] == b[0] && a[1] == b[1] && b[2] == 1 && b[3] == 1
}

impl Tape {
    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let ad = self.value(a).dims().to_vec();
        let bd = self.value(b).dims().to_vec();
        let broadcast = if ad == bd {
            false
        } else if is_channel_broadcast(&ad, &bd) {
            true
        } else {
            return Err(TensorError::InvalidArgument {
                op: "elementwise",
                reason: format!("shapes {ad:?} and {bd:?} are not compatible"),
            });
        };
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<f64> = if broadcast {
            let hw = ad[2] * ad[3];
            av.chunks_exact(hw)
                .zip(bv)
                .flat_map(|(p, &y)| p.iter().map(move |&x| f(x, y)))
                .collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        };
        let value = Tensor::from_vec(&ad, out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            },
            rg,
        ))
    }

    /// `a + b`; `b` may be `(N,C,1,1)` against an `(N,C,H,W)` `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// `a * b`; `b` may be `(N,C,1,1)` against an `(N,C,H,W)` `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Multiplies channel `c` of `x` (rank >= 2) by `w[c]`.
    pub fn scale_by_channel(&mut self, x: Var, w: Var) -> Result<Var> {
        let xd = self.value(x).dims().to_vec();
        let wn = self.value(w).numel();
        if xd.len() < 2 || xd[1] != wn {
            return Err(TensorError::DimMismatch {
                op: "scale_by_channel",
                dim: "channel count",
                expected: xd.get(1).copied().unwrap_or(0),
                actual: wn,
            });
        }
        let inner = self.value(x).shape().inner_after_channel();
        let wv = self.value(w).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(inner)
            .enumerate()
            .flat_map(|(k, p)| {
                let s = wv[k % wn];
                p.iter().map(move |v| v * s)
            })
            .collect();
        let value = Tensor::from_vec(&xd, out)?;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(value, Op::ScaleByChannel { x, w }, rg))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|v| v * s).collect();
        let value = Tensor::from_shape(t.shape().clone(), out).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(value, Op::Scale { x, s }, rg)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f = |v: f64| match kind {
            Unary::Sigmoid => sigmoid(v),
            Unary::Relu => v.max(0.0),
            Unary::Tanh => v.tanh(),
            Unary::Exp => v.exp(),
        };
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_shape(t.shape().clone(), out).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(value, Op::Unary { kind, x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn binary_backward(
    acc: &mut Accum<'_>,
    kind: Binary,
    a: Var,
    b: Var,
    broadcast: bool,
    g: &[f64],
) {
    let av = acc.value(a).data().to_vec();
    let bv = acc.value(b).data().to_vec();
    let hw = if broadcast { av.len() / bv.len() } else { 1 };
    if acc.wants(a) {
        let da: Vec<f64> = match kind {
            Binary::Add | Binary::Sub => g.to_vec(),
            Binary::Mul => g.iter().enumerate().map(|(i, gv)| gv * bv[i / hw]).collect(),
        };
        acc.add(a, &da);
    }
    if acc.wants(b) {
        let mut db = vec![0.0; bv.len()];
        for (i, gv) in g.iter().enumerate() {
            db[i / hw] += match kind {
                Binary::Add => *gv,
                Binary::Sub => -gv,
                Binary::Mul => gv * av[i],
            };
        }
        acc.add(b, &db);
    }
}

pub(crate) fn scale_by_channel_backward(acc: &mut Accum<'_>, x: Var, w: Var, g: &[f64]) {
    let inner = acc.value(x).shape().inner_after_channel();
    let xv = acc.value(x).data().to_vec();
    let wv = acc.value(w).data().to_vec();
    let c = wv.len();
    if acc.wants(x) {
        let dx: Vec<f64> = g
            .iter()
            .enumerate()
            .map(|(i, gv)| gv * wv[(i / inner) % c])
            .collect();
        acc.add(x, &dx);
    }
    if acc.wants(w) {
        let mut dw = vec![0.0; c];
        for (i, gv) in g.iter().enumerate() {
            dw[(i / inner) % c] += gv * xv[i];
        }
        acc.add(w, &dw);
    }
}

pub(crate) fn unary_backward(acc: &mut Accum<'_>, kind: Unary, x: Var, out: &Tensor, g: &[f64]) {
    let xv = acc.value(x).data();
    let yv = out.data();
    let dx: Vec<f64> = g
        .iter()
        .enumerate()
        .map(|(i, gv)| {
            gv * match kind {
                Unary::Sigmoid => yv[i] * (1.0 - yv[i]),
                Unary::Relu => {
                    if xv[i] > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                Unary::Tanh => 1.0 - yv[i] * yv[i],
                Unary::Exp => yv[i],
            }
        })
        .collect();
    acc.add(x, &dx);
}
