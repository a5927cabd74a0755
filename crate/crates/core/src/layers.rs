//! Thin parameterized wrappers over tape primitives.

use cellsearch_tensor::{ParamSet, Tape, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// 2D convolution whose weights live in a caller-owned [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: usize,
    bias: Option<usize>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, kernel: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride: 1,
            dilation: 1,
            groups: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn depthwise(mut self) -> Self {
        self.groups = self.cin;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn param_count(&self) -> usize {
        self.cout * (self.cin / self.groups) * self.kernel * self.kernel
            + if self.bias { self.cout } else { 0 }
    }
}

impl Conv2d {
    /// He-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        set: &mut ParamSet,
        name: &str,
        spec: ConvSpec,
        group: u8,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (spec.cin / spec.groups) * spec.kernel * spec.kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Tensor::uniform(
            &[spec.cout, spec.cin / spec.groups, spec.kernel, spec.kernel],
            bound,
            rng,
        )?;
        let weight = set.add_grouped(format!("{name}.w"), w, true, group);
        let bias = if spec.bias {
            Some(set.add_grouped(
                format!("{name}.b"),
                Tensor::zeros(&[spec.cout])?,
                true,
                group,
            ))
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            cin: spec.cin,
            cout: spec.cout,
            kernel: spec.kernel,
            stride: spec.stride,
            dilation: spec.dilation,
            groups: spec.groups,
        })
    }

    /// Padding that keeps `ceil(H / stride)` outputs for odd kernels.
    pub fn same_pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn forward(&self, tape: &mut Tape, set: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(set, self.weight);
        let b = self.bias.map(|b| tape.param(set, b));
        Ok(tape.conv2d(
            x,
            w,
            b,
            self.stride,
            self.dilation,
            self.groups,
            self.same_pad(),
        )?)
    }

    pub fn weight_index(&self) -> usize {
        self.weight
    }

    pub fn bias_index(&self) -> Option<usize> {
        self.bias
    }

    /// Sets a square 1x1 convolution to the identity map with zero bias.
    pub fn set_identity(&self, set: &mut ParamSet) {
        assert!(self.kernel == 1 && self.cin == self.cout && self.groups == 1);
        let w = set.get_mut(self.weight).value_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..self.cout {
            w[c * self.cin + c] = 1.0;
        }
        if let Some(b) = self.bias {
            set.get_mut(b).value_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn zero(&self, set: &mut ParamSet) {
        set.get_mut(self.weight)
            .value_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        if let Some(b) = self.bias {
            set.get_mut(b).value_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
