use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::ops;
use crate::ops::conv::ConvGeom;
use crate::param::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise binary kinds. `Broadcast` variants pair an `(N,C,H,W)` left
/// operand with an `(N,C,1,1)` right operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Relu,
    Tanh,
    Exp,
}

#[derive(Debug)]
pub(crate) enum Op {
    Constant,
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Reshape {
        x: Var,
    },
    StackDepth {
        a: Var,
        b: Var,
    },
    Resize {
        x: Var,
    },
    GridSample {
        x: Var,
        grid: Var,
    },
    AffineGrid {
        theta: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    AdaptiveAvgPool {
        x: Var,
    },
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        broadcast: bool,
    },
    ScaleByChannel {
        x: Var,
        w: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    Unary {
        kind: Unary,
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SelectRow {
        table: Var,
        row: usize,
    },
    MaskedLogSoftmax {
        x: Var,
    },
    Pick {
        x: Var,
        index: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        count: usize,
    },
    L1Normalize {
        x: Var,
        eps: f64,
    },
    DynamicDepthwise {
        x: Var,
        filters: Var,
    },
    DeformConv {
        x: Var,
        offsets: Var,
        w: Var,
        b: Option<Var>,
    },
    ClippedSurrogate {
        lp: Var,
        lp_old: f64,
        adv: f64,
        eps: f64,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Records primitive applications in execution order for reverse-mode
/// differentiation. Single owner; build one per forward pass.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Result of one backward sweep.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`, if `v` participates in the root.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter gradient belonging to `set` into its buffers.
    pub fn accumulate_into(&self, set: &mut ParamSet) {
        for &(id, node) in &self.params {
            if let Some(g) = self.nodes[node].as_deref() {
                set.accumulate(id, g);
            }
        }
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.nodes[node].as_deref().map(|g| (id, g)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.drop_grad();
        self.push(t, Op::Constant, false)
    }

    /// A leaf whose gradient is tracked and reported via [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.drop_grad();
        self.push(t, Op::Input, true)
    }

    /// Records parameter `index` of `set`. Frozen parameters enter as constants.
    pub fn param(&mut self, set: &ParamSet, index: usize) -> Var {
        let p = set.get(index);
        let mut value = p.tensor().clone();
        value.drop_grad();
        if p.trainable() {
            self.push(value, Op::Param(set.id(index)), true)
        } else {
            self.push(value, Op::Constant, false)
        }
    }

    /// Runs the reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let numel = self.nodes[root.0].value.numel();
        if numel != 1 {
            return Err(TensorError::NonScalarRoot { numel });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut params = Vec::new();
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Param(id) => {
                    params.push((*id, idx));
                    grads[idx] = Some(g);
                }
                Op::Input => grads[idx] = Some(g),
                Op::Constant => {}
                op => {
                    self.backward_op(op, &node.value, &g, &mut grads)?;
                    grads[idx] = Some(g);
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    /// Backward sweep that adds parameter gradients into `set`.
    /// Calling it twice on the same tape doubles the accumulated gradients.
    pub fn backward_into(&self, root: Var, set: &mut ParamSet) -> Result<Gradients> {
        let grads = self.backward(root)?;
        grads.accumulate_into(set);
        Ok(grads)
    }

    fn backward_op(
        &self,
        op: &Op,
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let mut acc = Accum {
            tape: self,
            grads,
        };
        match op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, b, geom } => ops::conv::conv2d_backward(&mut acc, *x, *w, *b, geom, g),
            Op::Reshape { x } => acc.add(*x, g),
            Op::StackDepth { a, b } => ops::shape_ops::stack_depth_backward(&mut acc, *a, *b, g),
            Op::Resize { x } => ops::resample::resize_backward(&mut acc, *x, out, g),
            Op::GridSample { x, grid } => {
                ops::resample::grid_sample_backward(&mut acc, *x, *grid, g)
            }
            Op::AffineGrid { theta } => ops::resample::affine_grid_backward(&mut acc, *theta, out, g),
            Op::GlobalAvgPool { x } => ops::pool::global_avg_pool_backward(&mut acc, *x, g),
            Op::AdaptiveAvgPool { x } => ops::pool::adaptive_avg_pool_backward(&mut acc, *x, out, g),
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            } => ops::elementwise::binary_backward(&mut acc, *kind, *a, *b, *broadcast, g),
            Op::ScaleByChannel { x, w } => {
                ops::elementwise::scale_by_channel_backward(&mut acc, *x, *w, g)
            }
            Op::Scale { x, s } => {
                let d: Vec<f64> = g.iter().map(|v| v * s).collect();
                acc.add(*x, &d);
            }
            Op::Unary { kind, x } => ops::elementwise::unary_backward(&mut acc, *kind, *x, out, g),
            Op::Concat { xs } => ops::shape_ops::concat_backward(&mut acc, xs, g),
            Op::Slice { x, start } => ops::shape_ops::slice_backward(&mut acc, *x, *start, out, g),
            Op::Linear { x, w, b } => ops::dense::linear_backward(&mut acc, *x, *w, *b, g),
            Op::SelectRow { table, row } => ops::dense::select_row_backward(&mut acc, *table, *row, g),
            Op::MaskedLogSoftmax { x } => ops::dense::log_softmax_backward(&mut acc, *x, out, g),
            Op::Pick { x, index } => {
                let n = self.nodes[x.0].value.numel();
                acc.with(*x, n, |buf| buf[*index] += g[0]);
            }
            Op::Sum { x } => {
                let n = self.nodes[x.0].value.numel();
                acc.with(*x, n, |buf| buf.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].value.numel();
                let s = g[0] / n as f64;
                acc.with(*x, n, |buf| buf.iter_mut().for_each(|v| *v += s));
            }
            Op::CrossEntropy {
                logits,
                labels,
                count,
            } => ops::loss::cross_entropy_backward(&mut acc, *logits, labels, *count, g),
            Op::L1Normalize { x, eps } => ops::dynamic::l1_normalize_backward(&mut acc, *x, *eps, g),
            Op::DynamicDepthwise { x, filters } => {
                ops::dynamic::dynamic_depthwise_backward(&mut acc, *x, *filters, g)
            }
            Op::DeformConv { x, offsets, w, b } => {
                ops::deform::deform_conv_backward(&mut acc, *x, *offsets, *w, *b, g)
            }
            Op::ClippedSurrogate {
                lp,
                lp_old,
                adv,
                eps,
            } => {
                let d = ops::dense::clipped_surrogate_grad(self.nodes[lp.0].value.item(), *lp_old, *adv, *eps);
                acc.add(*lp, &[d * g[0]]);
            }
        }
        Ok(())
    }

    /// Parameters recorded on this tape, keyed by id.
    pub fn recorded_params(&self) -> HashMap<ParamId, Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect()
    }
}

/// Gradient accumulator handed to per-op backward functions.
pub(crate) struct Accum<'a> {
    pub(crate) tape: &'a Tape,
    grads: &'a mut [Option<Vec<f64>>],
}

impl Accum<'_> {
    pub(crate) fn value(&self, v: Var) -> &Tensor {
        &self.tape.nodes[v.0].value
    }

    pub(crate) fn wants(&self, v: Var) -> bool {
        self.tape.nodes[v.0].requires_grad
    }

    /// Mutable gradient buffer for `v` (allocated on first use), or no call
    /// at all when `v` does not require gradient.
    pub(crate) fn with<F: FnOnce(&mut [f64])>(&mut self, v: Var, len: usize, f: F) {
        if !self.wants(v) {
            return;
        }
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }

    pub(crate) fn add(&mut self, v: Var, d: &[f64]) {
        let len = d.len();
        self.with(v, len, |buf| {
            for (b, x) in buf.iter_mut().zip(d) {
                *b += x;
            }
        });
    }
}
