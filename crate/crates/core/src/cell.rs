//! A genotype instantiated as a differentiable block.

use cellsearch_tensor::{ParamSet, Tape, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::genotype::{CellDims, Genotype, InputSlot, NUM_SLOTS};
use crate::layers::{Conv2d, ConvSpec};
use crate::ops::{AggBlock, Harmonizer, OpBlock};

#[derive(Clone, Debug)]
pub struct Cell {
    genotype: Genotype,
    dims: CellDims,
    harmonizers: Vec<Option<Harmonizer>>,
    ops: Vec<(OpBlock, OpBlock)>,
    aggs: Vec<AggBlock>,
    output: Conv2d,
    output_nodes: Vec<usize>,
}

impl Cell {
    pub fn new<R: Rng + ?Sized>(
        genotype: &Genotype,
        dims: CellDims,
        set: &mut ParamSet,
        rng: &mut R,
    ) -> Result<Self> {
        let c = dims.cell_width;
        let mut harmonizers = Vec::with_capacity(NUM_SLOTS);
        for slot in InputSlot::ALL {
            harmonizers.push(if genotype.slot_consumed(slot.id()) {
                Some(Harmonizer::new(
                    dims.slot_channels[slot.id()],
                    c,
                    set,
                    &format!("cell.harmonize.{}", slot.name()),
                    rng,
                )?)
            } else {
                None
            });
        }
        let mut ops = Vec::with_capacity(genotype.k());
        let mut aggs = Vec::with_capacity(genotype.k());
        for (i, s) in genotype.steps().iter().enumerate() {
            let a = OpBlock::new(s.op1, c, set, &format!("cell.s{i}.op1"), rng)?;
            let b = OpBlock::new(s.op2, c, set, &format!("cell.s{i}.op2"), rng)?;
            ops.push((a, b));
            aggs.push(AggBlock::new(s.agg, c, set, &format!("cell.s{i}.agg"), rng)?);
        }
        let output_nodes = genotype.output_nodes();
        let output = Conv2d::new(
            set,
            "cell.out",
            ConvSpec::new(output_nodes.len() * c, dims.dec_width, 1),
            0,
            rng,
        )?;
        Ok(Self {
            genotype: genotype.clone(),
            dims,
            harmonizers,
            ops,
            aggs,
            output,
            output_nodes,
        })
    }

    pub fn genotype(&self) -> &Genotype {
        &self.genotype
    }

    pub fn dims(&self) -> &CellDims {
        &self.dims
    }

    pub fn harmonizer(&self, slot: usize) -> Option<&Harmonizer> {
        self.harmonizers[slot].as_ref()
    }

    pub fn output_projection(&self) -> &Conv2d {
        &self.output
    }

    pub fn step_blocks(&self, step: usize) -> (&OpBlock, &OpBlock, &AggBlock) {
        (&self.ops[step].0, &self.ops[step].1, &self.aggs[step])
    }

    /// Runs the cell on raw slot tensors. The output resolution is that of the
    /// `layer2` slot.
    pub fn forward(&self, tape: &mut Tape, set: &ParamSet, inputs: &[Var; NUM_SLOTS]) -> Result<Var> {
        let (_, _, th, tw) = tape
            .value(inputs[InputSlot::Layer2.id()])
            .shape()
            .as_nchw("cell")?;
        for slot in InputSlot::ALL {
            let ch = tape.value(inputs[slot.id()]).dims()[1];
            if ch != self.dims.slot_channels[slot.id()] {
                return Err(Error::Unharmonized(format!(
                    "slot {} has {ch} channels, cell expects {}",
                    slot.name(),
                    self.dims.slot_channels[slot.id()]
                )));
            }
        }
        let mut pool: Vec<Option<Var>> = Vec::with_capacity(NUM_SLOTS + self.genotype.k());
        for (slot, h) in self.harmonizers.iter().enumerate() {
            pool.push(match h {
                Some(h) => Some(h.apply(tape, set, inputs[slot], th, tw)?),
                None => None,
            });
        }
        for (i, s) in self.genotype.steps().iter().enumerate() {
            let a = pool[s.in1].expect("consumed slots are harmonized");
            let b = pool[s.in2].expect("consumed slots are harmonized");
            let a = self.ops[i].0.apply(tape, set, a)?;
            let b = self.ops[i].1.apply(tape, set, b)?;
            pool.push(Some(self.aggs[i].apply(tape, set, a, b)?));
        }
        let outs: Vec<Var> = self
            .output_nodes
            .iter()
            .map(|&n| pool[n].expect("aggregates are always computed"))
            .collect();
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_channels(&outs)?
        };
        self.output.forward(tape, set, cat)
    }
}
