//! The toy per-frame segmentation network and its dynamic-cell wrapper.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use cellsearch_tensor::{ParamSet, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cell::Cell;
use crate::error::{Error, Result};
use crate::genotype::{CellDims, Genotype, NUM_SLOTS};
use crate::layers::{Conv2d, ConvSpec};

pub const ENCODER_GROUP: u8 = 0;
pub const DECODER_GROUP: u8 = 1;

const INPUT_MEAN: f64 = 0.5;
const INPUT_STD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub classes: usize,
    /// Widths of the two stride-2 stem convs (to 1/4).
    pub stem: [usize; 2],
    /// Widths of layer2, layer3, layer4.
    pub stages: [usize; 3],
    pub dec_width: usize,
    pub cell_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            stem: [8, 16],
            stages: [16, 24, 32],
            dec_width: 16,
            cell_width: 16,
        }
    }
}

impl NetConfig {
    /// Raw channel counts of the five cell inputs.
    pub fn slot_channels(&self) -> [usize; NUM_SLOTS] {
        let [l2, l3, l4] = self.stages;
        [self.dec_width, l4, l2, l3, l4]
    }

    pub fn cell_dims(&self) -> CellDims {
        CellDims {
            cell_width: self.cell_width,
            dec_width: self.dec_width,
            slot_channels: self.slot_channels(),
        }
    }
}

/// Per-frame outputs. `dec` and `pred` are at 1/8 resolution.
#[derive(Clone, Debug)]
pub struct FrameBundle<T> {
    pub layer2: T,
    pub layer3: T,
    pub layer4: T,
    pub dec: T,
    pub pred: T,
}

#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub layer2: Var,
    pub layer3: Var,
    pub layer4: Var,
}

#[derive(Clone, Debug)]
pub struct StaticNet {
    pub config: NetConfig,
    pub params: ParamSet,
    stem: Vec<Conv2d>,
    stages: Vec<[Conv2d; 2]>,
    dec_proj: Vec<Conv2d>,
    dec_convs: [Conv2d; 2],
    classifier: Conv2d,
    aux: Conv2d,
    decoder_calls: Arc<AtomicUsize>,
}

impl StaticNet {
    pub fn new<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        if config.classes < 2 {
            return Err(Error::Config("at least two classes".into()));
        }
        let mut set = ParamSet::new();
        let e = ENCODER_GROUP;
        let d = DECODER_GROUP;
        let mut stem = Vec::new();
        let mut cin = 3;
        for (i, &c) in config.stem.iter().enumerate() {
            stem.push(Conv2d::new(&mut set, &format!("enc.stem{i}"), ConvSpec::new(cin, c, 3).stride(2), e, rng)?);
            cin = c;
        }
        let mut stages = Vec::new();
        for (i, &c) in config.stages.iter().enumerate() {
            let down = Conv2d::new(&mut set, &format!("enc.layer{}.0", i + 2), ConvSpec::new(cin, c, 3).stride(2), e, rng)?;
            let refine = Conv2d::new(&mut set, &format!("enc.layer{}.1", i + 2), ConvSpec::new(c, c, 3), e, rng)?;
            stages.push([down, refine]);
            cin = c;
        }
        let dw = config.dec_width;
        let dec_proj = config
            .stages
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(&mut set, &format!("dec.proj{}", i + 2), ConvSpec::new(c, dw, 1), d, rng))
            .collect::<Result<Vec<_>>>()?;
        let dec_convs = [
            Conv2d::new(&mut set, "dec.conv0", ConvSpec::new(3 * dw, dw, 3), d, rng)?,
            Conv2d::new(&mut set, "dec.conv1", ConvSpec::new(dw, dw, 3), d, rng)?,
        ];
        let classifier = Conv2d::new(&mut set, "dec.classifier", ConvSpec::new(dw, config.classes, 1), d, rng)?;
        let aux = Conv2d::new(&mut set, "aux.classifier", ConvSpec::new(config.stages[1], config.classes, 1), d, rng)?;
        Ok(Self {
            config,
            params: set,
            stem,
            stages,
            dec_proj,
            dec_convs,
            classifier,
            aux,
            decoder_calls: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn classifier(&self) -> &Conv2d {
        &self.classifier
    }

    /// How many times the decoder has run since construction.
    pub fn decoder_calls(&self) -> usize {
        self.decoder_calls.load(Ordering::Relaxed)
    }

    /// Hex SHA-256 of all parameter bits; changes with any weight.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter() {
            h.update(p.name.as_bytes());
            for v in p.value() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn encode(&self, tape: &mut Tape, set: &ParamSet, x: Var) -> Result<Encoded> {
        let (_, c, h, w) = tape.value(x).shape().as_nchw("static encoder")?;
        if c != 3 || h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::Data(format!(
                "frames must be 3-channel with sides divisible by 32, got {c}x{h}x{w}"
            )));
        }
        // Pixels arrive in [0, 1]; centre them.
        let dims = tape.value(x).dims().to_vec();
        let shift = tape.constant(Tensor::full(&dims, -INPUT_MEAN)?);
        let centred = tape.add(x, shift)?;
        let mut y = tape.scale(centred, 1.0 / INPUT_STD);
        for conv in &self.stem {
            let z = conv.forward(tape, set, y)?;
            y = tape.relu(z);
        }
        let mut outs = Vec::with_capacity(3);
        for [down, refine] in &self.stages {
            let z = down.forward(tape, set, y)?;
            let z = tape.relu(z);
            let z = refine.forward(tape, set, z)?;
            y = tape.relu(z);
            outs.push(y);
        }
        Ok(Encoded {
            layer2: outs[0],
            layer3: outs[1],
            layer4: outs[2],
        })
    }

    /// `(dec, pred)` at the resolution of layer2.
    pub fn decode(&self, tape: &mut Tape, set: &ParamSet, enc: &Encoded) -> Result<(Var, Var)> {
        self.decoder_calls.fetch_add(1, Ordering::Relaxed);
        let (_, _, h, w) = tape.value(enc.layer2).shape().as_nchw("static decoder")?;
        let mut parts = Vec::with_capacity(3);
        for (proj, x) in self.dec_proj.iter().zip([enc.layer2, enc.layer3, enc.layer4]) {
            let y = proj.forward(tape, set, x)?;
            let (_, _, yh, yw) = tape.value(y).shape().as_nchw("static decoder")?;
            parts.push(if (yh, yw) == (h, w) {
                y
            } else {
                tape.bilinear_resize(y, h, w)?
            });
        }
        let cat = tape.concat_channels(&parts)?;
        let z = self.dec_convs[0].forward(tape, set, cat)?;
        let z = tape.relu(z);
        let dec = self.dec_convs[1].forward(tape, set, z)?;
        let pred = self.classifier.forward(tape, set, dec)?;
        Ok((dec, pred))
    }

    pub fn aux_logits(&self, tape: &mut Tape, set: &ParamSet, layer3: Var) -> Result<Var> {
        self.aux.forward(tape, set, layer3)
    }

    pub fn forward(&self, tape: &mut Tape, set: &ParamSet, x: Var) -> Result<FrameBundle<Var>> {
        let enc = self.encode(tape, set, x)?;
        let (dec, pred) = self.decode(tape, set, &enc)?;
        Ok(FrameBundle {
            layer2: enc.layer2,
            layer3: enc.layer3,
            layer4: enc.layer4,
            dec,
            pred,
        })
    }
}

/// A searched cell plus its own classifier, initialised from the static one.
#[derive(Clone, Debug)]
pub struct CellNet {
    pub cell: Cell,
    pub params: ParamSet,
    classifier: Conv2d,
}

impl CellNet {
    pub fn new<R: Rng + ?Sized>(genotype: &Genotype, static_net: &StaticNet, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let cell = Cell::new(genotype, static_net.config.cell_dims(), &mut params, rng)?;
        let cfg = &static_net.config;
        let classifier = Conv2d::new(&mut params, "cell.classifier", ConvSpec::new(cfg.dec_width, cfg.classes, 1), 0, rng)?;
        let src = static_net.classifier();
        let w = static_net.params.get(src.weight_index()).value().to_vec();
        params.get_mut(classifier.weight_index()).value_mut().copy_from_slice(&w);
        if let (Some(dst), Some(s)) = (classifier.bias_index(), src.bias_index()) {
            let b = static_net.params.get(s).value().to_vec();
            params.get_mut(dst).value_mut().copy_from_slice(&b);
        }
        Ok(Self {
            cell,
            params,
            classifier,
        })
    }

    pub fn genotype(&self) -> &Genotype {
        self.cell.genotype()
    }

    pub fn classifier(&self) -> &Conv2d {
        &self.classifier
    }

    /// One recurrent step from cached or freshly computed features.
    pub fn step(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        prev_dec: Var,
        prev_layer4: Var,
        enc: &Encoded,
    ) -> Result<(Var, Var)> {
        let inputs = [prev_dec, prev_layer4, enc.layer2, enc.layer3, enc.layer4];
        let dec = self.cell.forward(tape, set, &inputs)?;
        let pred = self.classifier.forward(tape, set, dec)?;
        Ok((dec, pred))
    }
}

/// Encoder on the new frame, then the cell on the previous bundle. The
/// static decoder is not run.
pub fn dynamic_forward(
    tape: &mut Tape,
    static_net: &StaticNet,
    static_set: &ParamSet,
    cell: &CellNet,
    cell_set: &ParamSet,
    prev: &FrameBundle<Var>,
    frame: Var,
) -> Result<FrameBundle<Var>> {
    let enc = static_net.encode(tape, static_set, frame)?;
    let (dec, pred) = cell.step(tape, cell_set, prev.dec, prev.layer4, &enc)?;
    Ok(FrameBundle {
        layer2: enc.layer2,
        layer3: enc.layer3,
        layer4: enc.layer4,
        dec,
        pred,
    })
}

/// Cross-entropy of 1/8-resolution logits against full-resolution labels.
pub fn upsampled_loss(tape: &mut Tape, logits: Var, labels: &[u8], h: usize, w: usize) -> Result<Var> {
    let up = tape.bilinear_resize(logits, h, w)?;
    Ok(tape.softmax_cross_entropy(up, labels)?)
}

/// Sum of per-frame losses for frames after the first. `labels[t]` must be
/// present for every `t >= 1`.
pub fn sequence_loss(
    tape: &mut Tape,
    static_net: &StaticNet,
    static_set: &ParamSet,
    cell: &CellNet,
    cell_set: &ParamSet,
    frames: &[Var],
    labels: &[Option<&[u8]>],
) -> Result<Var> {
    if frames.len() < 2 || labels.len() != frames.len() {
        return Err(Error::Data(format!(
            "need at least two frames with one label slot each, got {} frames and {} label slots",
            frames.len(),
            labels.len()
        )));
    }
    let (_, _, h, w) = tape.value(frames[0]).shape().as_nchw("sequence")?;
    let mut prev = static_net.forward(tape, static_set, frames[0])?;
    let mut total: Option<Var> = None;
    for t in 1..frames.len() {
        let lab = labels[t].ok_or_else(|| Error::Data(format!("frame {t} has no labels")))?;
        let cur = dynamic_forward(tape, static_net, static_set, cell, cell_set, &prev, frames[t])?;
        let loss = upsampled_loss(tape, cur.pred, lab, h, w)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
        prev = cur;
    }
    Ok(total.expect("at least one later frame"))
}
