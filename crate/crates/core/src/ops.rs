//! Candidate operations and aggregation operations of the cell search space,
//! plus the harmonization step that brings raw cell inputs to a common shape.
//!
//! Operation ids:
//!
//! | id | operation |
//! |----|-----------|
//! | 0 | separable conv 3x3 |
//! | 1 | global average pooling, upsampling, conv 1x1 |
//! | 2 | separable conv 3x3, dilation 3 |
//! | 3 | separable conv 5x5, dilation 6 |
//! | 4 | skip-connection |
//! | 5 | deformable conv 3x3 |
//!
//! Aggregation ids:
//!
//! | id | aggregation |
//! |----|-------------|
//! | 0 | per-channel weighted sum |
//! | 1 | channel concatenation, conv 1x1 |
//! | 2 | first input pooled into 3x3 depthwise filters applied to the second |
//! | 3 | first input warped by an affine grid predicted from the second |
//! | 4 | inputs stacked along depth, 2x3x3 conv |
//! | 5 | first input times sigmoid of the second |

use std::fmt;

use cellsearch_tensor::{ParamSet, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvSpec};

/// Stabilizer added to the L1 norm of predicted filters.
pub const FILTER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    SepConv3x3,
    GapConv1x1,
    SepConv3x3Dil3,
    SepConv5x5Dil6,
    Skip,
    Deform3x3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AggKind {
    WeightedSum,
    ConcatConv,
    Predictive,
    AffineWarp,
    Conv3d,
    DenseAttention,
}

impl OpKind {
    pub const ALL: [OpKind; 6] = [
        OpKind::SepConv3x3,
        OpKind::GapConv1x1,
        OpKind::SepConv3x3Dil3,
        OpKind::SepConv5x5Dil6,
        OpKind::Skip,
        OpKind::Deform3x3,
    ];

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            OpKind::SepConv3x3 => "sep3x3",
            OpKind::GapConv1x1 => "gap+conv1x1",
            OpKind::SepConv3x3Dil3 => "sep3x3 d3",
            OpKind::SepConv5x5Dil6 => "sep5x5 d6",
            OpKind::Skip => "skip",
            OpKind::Deform3x3 => "deform3x3",
        }
    }

    /// (kernel, dilation) of the separable variants.
    fn separable(self) -> Option<(usize, usize)> {
        match self {
            OpKind::SepConv3x3 => Some((3, 1)),
            OpKind::SepConv3x3Dil3 => Some((3, 3)),
            OpKind::SepConv5x5Dil6 => Some((5, 6)),
            _ => None,
        }
    }
}

impl AggKind {
    pub const ALL: [AggKind; 6] = [
        AggKind::WeightedSum,
        AggKind::ConcatConv,
        AggKind::Predictive,
        AggKind::AffineWarp,
        AggKind::Conv3d,
        AggKind::DenseAttention,
    ];

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            AggKind::WeightedSum => "weighted sum",
            AggKind::ConcatConv => "concat+conv1x1",
            AggKind::Predictive => "predictive filters",
            AggKind::AffineWarp => "affine warp",
            AggKind::Conv3d => "conv 2x3x3",
            AggKind::DenseAttention => "dense attention",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "op{} ({})", self.id(), self.label())
    }
}

impl fmt::Display for AggKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "agg{} ({})", self.id(), self.label())
    }
}

/// Trainable scalars of an operation at `channels` width, from its formula.
pub fn op_param_count(kind: OpKind, channels: usize) -> usize {
    let c = channels;
    match kind {
        OpKind::SepConv3x3 | OpKind::SepConv3x3Dil3 | OpKind::SepConv5x5Dil6 => {
            let (k, _) = kind.separable().expect("separable");
            c * k * k + c * c + c
        }
        OpKind::GapConv1x1 => c * c + c,
        OpKind::Skip => 0,
        OpKind::Deform3x3 => (18 * c * 9 + 18) + (c * c * 9 + c),
    }
}

/// Trainable scalars of an aggregation at `channels` width, from its formula.
pub fn agg_param_count(kind: AggKind, channels: usize) -> usize {
    let c = channels;
    match kind {
        AggKind::WeightedSum => 2 * c,
        AggKind::ConcatConv => 2 * c * c + c,
        AggKind::Predictive | AggKind::DenseAttention => 0,
        AggKind::AffineWarp => 6 * c + 6,
        AggKind::Conv3d => c * c * 18 + c,
    }
}

/// Trainable scalars of a 1x1 projection with bias.
pub fn projection_param_count(cin: usize, cout: usize) -> usize {
    cin * cout + cout
}

#[derive(Clone, Debug)]
enum OpParams {
    Separable { depthwise: Conv2d, pointwise: Conv2d },
    Gap { proj: Conv2d },
    Skip,
    Deform { offset: Conv2d, main: Conv2d },
}

/// An instantiated candidate operation. Input and output widths are equal.
#[derive(Clone, Debug)]
pub struct OpBlock {
    kind: OpKind,
    channels: usize,
    params: OpParams,
}

impl OpBlock {
    pub fn new<R: Rng + ?Sized>(
        kind: OpKind,
        channels: usize,
        set: &mut ParamSet,
        name: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let c = channels;
        let params = match kind {
            OpKind::SepConv3x3 | OpKind::SepConv3x3Dil3 | OpKind::SepConv5x5Dil6 => {
                let (k, d) = kind.separable().expect("separable");
                let depthwise = Conv2d::new(
                    set,
                    &format!("{name}.dw"),
                    ConvSpec::new(c, c, k).dilation(d).depthwise().no_bias(),
                    0,
                    rng,
                )?;
                let pointwise = Conv2d::new(set, &format!("{name}.pw"), ConvSpec::new(c, c, 1), 0, rng)?;
                OpParams::Separable {
                    depthwise,
                    pointwise,
                }
            }
            OpKind::GapConv1x1 => OpParams::Gap {
                proj: Conv2d::new(set, &format!("{name}.proj"), ConvSpec::new(c, c, 1), 0, rng)?,
            },
            OpKind::Skip => OpParams::Skip,
            OpKind::Deform3x3 => {
                let offset = Conv2d::new(set, &format!("{name}.offset"), ConvSpec::new(c, 18, 3), 0, rng)?;
                // offsets start at zero: the block begins as an ordinary conv
                offset.zero(set);
                let main = Conv2d::new(set, &format!("{name}.main"), ConvSpec::new(c, c, 3), 0, rng)?;
                OpParams::Deform { offset, main }
            }
        };
        Ok(Self {
            kind,
            channels,
            params,
        })
    }

    pub fn kind(&self) -> OpKind {
        self.kind
    }

    pub fn in_channels(&self) -> usize {
        self.channels
    }

    pub fn out_channels(&self) -> usize {
        self.channels
    }

    pub fn param_count(&self) -> usize {
        op_param_count(self.kind, self.channels)
    }

    /// The 1x1 projection of the pooling branch, for tests that pin its weights.
    pub fn gap_projection(&self) -> Option<&Conv2d> {
        match &self.params {
            OpParams::Gap { proj } => Some(proj),
            _ => None,
        }
    }

    /// `(offset branch, main conv)` of the deformable block.
    pub fn deform_convs(&self) -> Option<(&Conv2d, &Conv2d)> {
        match &self.params {
            OpParams::Deform { offset, main } => Some((offset, main)),
            _ => None,
        }
    }

    pub fn apply(&self, tape: &mut Tape, set: &ParamSet, x: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(x).shape().as_nchw("apply_op")?;
        if c != self.channels {
            return Err(cellsearch_tensor::TensorError::DimMismatch {
                op: "apply_op",
                dim: "input channels",
                expected: self.channels,
                actual: c,
            }
            .into());
        }
        let y = match &self.params {
            OpParams::Skip => return Ok(x),
            OpParams::Separable {
                depthwise,
                pointwise,
            } => {
                let d = depthwise.forward(tape, set, x)?;
                pointwise.forward(tape, set, d)?
            }
            OpParams::Gap { proj } => {
                let g = tape.global_avg_pool(x)?;
                let up = tape.bilinear_resize(g, h, w)?;
                proj.forward(tape, set, up)?
            }
            OpParams::Deform { offset, main } => {
                let off = offset.forward(tape, set, x)?;
                let mw = tape.param(set, main.weight_index());
                let mb = main.bias_index().map(|b| tape.param(set, b));
                tape.deform_conv3x3(x, off, mw, mb)?
            }
        };
        Ok(tape.relu(y))
    }
}

#[derive(Clone, Debug)]
enum AggParams {
    WeightedSum { first: usize, second: usize },
    ConcatConv { conv: Conv2d },
    Predictive,
    AffineWarp { weight: usize, bias: usize },
    Conv3d { weight: usize, bias: usize },
    DenseAttention,
}

/// An instantiated aggregation of two harmonized inputs.
#[derive(Clone, Debug)]
pub struct AggBlock {
    kind: AggKind,
    channels: usize,
    params: AggParams,
}

/// Affine parameters of the identity warp, row-major 2x3.
pub const IDENTITY_AFFINE: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

impl AggBlock {
    pub fn new<R: Rng + ?Sized>(
        kind: AggKind,
        channels: usize,
        set: &mut ParamSet,
        name: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let c = channels;
        let params = match kind {
            AggKind::WeightedSum => AggParams::WeightedSum {
                first: set.add(format!("{name}.wa"), Tensor::full(&[c], 1.0)?, true),
                second: set.add(format!("{name}.wb"), Tensor::full(&[c], 1.0)?, true),
            },
            AggKind::ConcatConv => AggParams::ConcatConv {
                conv: Conv2d::new(set, &format!("{name}.fuse"), ConvSpec::new(2 * c, c, 1), 0, rng)?,
            },
            AggKind::Predictive => AggParams::Predictive,
            AggKind::AffineWarp => AggParams::AffineWarp {
                weight: set.add(format!("{name}.theta.w"), Tensor::zeros(&[6, c])?, true),
                bias: set.add(
                    format!("{name}.theta.b"),
                    Tensor::from_vec(&[6], IDENTITY_AFFINE.to_vec())?,
                    true,
                ),
            },
            AggKind::Conv3d => {
                let bound = (6.0 / (2 * c * 9) as f64).sqrt();
                AggParams::Conv3d {
                    weight: set.add(
                        format!("{name}.conv3d.w"),
                        Tensor::uniform(&[c, c, 2, 3, 3], bound, rng)?,
                        true,
                    ),
                    bias: set.add(format!("{name}.conv3d.b"), Tensor::zeros(&[c])?, true),
                }
            }
            AggKind::DenseAttention => AggParams::DenseAttention,
        };
        Ok(Self {
            kind,
            channels,
            params,
        })
    }

    pub fn kind(&self) -> AggKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn param_count(&self) -> usize {
        agg_param_count(self.kind, self.channels)
    }

    /// Parameter slots of the weighted sum, `(first, second)`.
    pub fn sum_weights(&self) -> Option<(usize, usize)> {
        match self.params {
            AggParams::WeightedSum { first, second } => Some((first, second)),
            _ => None,
        }
    }

    pub fn apply(&self, tape: &mut Tape, set: &ParamSet, a: Var, b: Var) -> Result<Var> {
        let ad = tape.value(a).dims().to_vec();
        let bd = tape.value(b).dims().to_vec();
        if ad != bd || ad.len() != 4 || ad[1] != self.channels {
            return Err(Error::Unharmonized(format!(
                "{} expects two ({}-channel) inputs of equal shape, got {:?} and {:?}",
                self.kind, self.channels, ad, bd
            )));
        }
        let (n, h, w) = (ad[0], ad[2], ad[3]);
        let y = match &self.params {
            AggParams::WeightedSum { first, second } => {
                let wa = tape.param(set, *first);
                let wb = tape.param(set, *second);
                let sa = tape.scale_by_channel(a, wa)?;
                let sb = tape.scale_by_channel(b, wb)?;
                tape.add(sa, sb)?
            }
            AggParams::ConcatConv { conv } => {
                let cat = tape.concat_channels(&[a, b])?;
                conv.forward(tape, set, cat)?
            }
            AggParams::Predictive => {
                if h < 3 || w < 3 {
                    return Err(Error::Unharmonized(format!(
                        "predictive aggregation needs at least 3x3 maps, got {h}x{w}"
                    )));
                }
                let f = tape.adaptive_avg_pool(a, 3, 3)?;
                let f = tape.l1_normalize_spatial(f, FILTER_NORM_EPS)?;
                tape.dynamic_depthwise3x3(b, f)?
            }
            AggParams::AffineWarp { weight, bias } => {
                let pooled = tape.global_avg_pool(b)?;
                let flat = tape.reshape(pooled, &[n, self.channels])?;
                let tw = tape.param(set, *weight);
                let tb = tape.param(set, *bias);
                let theta = tape.linear(flat, tw, Some(tb))?;
                let grid = tape.affine_grid(theta, h, w)?;
                tape.grid_sample(a, grid)?
            }
            AggParams::Conv3d { weight, bias } => {
                let stacked = tape.stack_depth(a, b)?;
                let cw = tape.param(set, *weight);
                let cb = tape.param(set, *bias);
                tape.conv3d_2x3x3(stacked, cw, Some(cb))?
            }
            AggParams::DenseAttention => {
                let gate = tape.sigmoid(b);
                tape.mul(a, gate)?
            }
        };
        Ok(y)
    }
}

/// Projects a raw cell input to the cell width and resizes it to the cell
/// resolution.
#[derive(Clone, Debug)]
pub struct Harmonizer {
    proj: Conv2d,
}

impl Harmonizer {
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        target_c: usize,
        set: &mut ParamSet,
        name: &str,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(set, name, ConvSpec::new(cin, target_c, 1), 0, rng)?,
        })
    }

    pub fn projection(&self) -> &Conv2d {
        &self.proj
    }

    pub fn param_count(&self) -> usize {
        projection_param_count(self.proj.cin, self.proj.cout)
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        x: Var,
        target_h: usize,
        target_w: usize,
    ) -> Result<Var> {
        let y = self.proj.forward(tape, set, x)?;
        let (_, _, h, w) = tape.value(y).shape().as_nchw("harmonize")?;
        if (h, w) == (target_h, target_w) {
            Ok(y)
        } else {
            Ok(tape.bilinear_resize(y, target_h, target_w)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for id in 0..6 {
            assert_eq!(OpKind::from_id(id).unwrap().id(), id);
            assert_eq!(AggKind::from_id(id).unwrap().id(), id);
        }
        assert!(OpKind::from_id(6).is_none());
        assert!(AggKind::from_id(6).is_none());
    }

    #[test]
    fn analytic_counts() {
        assert_eq!(op_param_count(OpKind::Skip, 16), 0);
        assert_eq!(projection_param_count(8, 8), 72);
        assert_eq!(op_param_count(OpKind::SepConv5x5Dil6, 4), 4 * 25 + 16 + 4);
        assert_eq!(agg_param_count(AggKind::ConcatConv, 16), 2 * 16 * 16 + 16);
    }
}
