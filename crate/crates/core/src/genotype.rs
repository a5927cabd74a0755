//! Token strings, the cell DAG they describe, and search-space bookkeeping.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{agg_param_count, op_param_count, projection_param_count, AggKind, OpKind};

/// Raw cell inputs, in pool order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InputSlot {
    DecPrev,
    Layer4Prev,
    Layer2,
    Layer3,
    Layer4,
}

pub const NUM_SLOTS: usize = 5;
pub const TOKENS_PER_STEP: usize = 5;
pub const FIELD_NAMES: [&str; TOKENS_PER_STEP] = ["in1", "in2", "op1", "op2", "agg"];

impl InputSlot {
    pub const ALL: [InputSlot; NUM_SLOTS] = [
        InputSlot::DecPrev,
        InputSlot::Layer4Prev,
        InputSlot::Layer2,
        InputSlot::Layer3,
        InputSlot::Layer4,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            InputSlot::DecPrev => "dec_prev",
            InputSlot::Layer4Prev => "layer4_prev",
            InputSlot::Layer2 => "layer2",
            InputSlot::Layer3 => "layer3",
            InputSlot::Layer4 => "layer4",
        }
    }

    /// Downsampling factor relative to the input frame.
    pub fn stride(self) -> usize {
        match self {
            InputSlot::DecPrev | InputSlot::Layer2 => 8,
            InputSlot::Layer3 => 16,
            InputSlot::Layer4Prev | InputSlot::Layer4 => 32,
        }
    }
}

/// One cell step: two pool entries, an operation for each, and their
/// aggregation. `in1` feeds `op1` and becomes the aggregation's first input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub in1: usize,
    pub in2: usize,
    pub op1: OpKind,
    pub op2: OpKind,
    pub agg: AggKind,
}

/// Number of pool entries visible to step `i`.
pub fn pool_size(step: usize) -> usize {
    NUM_SLOTS + step
}

/// Exclusive upper bound of each token of step `i`, in field order.
pub fn token_bounds(step: usize) -> [usize; TOKENS_PER_STEP] {
    let p = pool_size(step);
    [p, p, OpKind::ALL.len(), OpKind::ALL.len(), AggKind::ALL.len()]
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genotype {
    steps: Vec<Step>,
}

impl Genotype {
    pub fn new(steps: Vec<Step>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Genotype("a cell needs at least one step".into()));
        }
        for (i, s) in steps.iter().enumerate() {
            for (field, v) in [("in1", s.in1), ("in2", s.in2)] {
                if v >= pool_size(i) {
                    return Err(Error::TokenOutOfRange {
                        step: i,
                        field,
                        value: v as i64,
                        bound: pool_size(i),
                    });
                }
            }
        }
        Ok(Self { steps })
    }

    /// Every token drawn uniformly within its bound.
    pub fn sample_uniform<R: rand::Rng + ?Sized>(k: usize, rng: &mut R) -> Result<Self> {
        let mut tokens = Vec::with_capacity(k * TOKENS_PER_STEP);
        for i in 0..k {
            for b in token_bounds(i) {
                tokens.push(rng.random_range(0..b));
            }
        }
        Self::decode(&tokens, k)
    }

    pub fn decode(tokens: &[usize], k: usize) -> Result<Self> {
        let signed: Vec<i64> = tokens.iter().map(|&t| t as i64).collect();
        Self::decode_signed(&signed, k)
    }

    fn decode_signed(tokens: &[i64], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Genotype("K must be at least 1".into()));
        }
        if tokens.len() != TOKENS_PER_STEP * k {
            return Err(Error::Genotype(format!(
                "expected {} tokens for K={k}, got {}",
                TOKENS_PER_STEP * k,
                tokens.len()
            )));
        }
        let mut steps = Vec::with_capacity(k);
        for (i, chunk) in tokens.chunks(TOKENS_PER_STEP).enumerate() {
            let bounds = token_bounds(i);
            let mut t = [0usize; TOKENS_PER_STEP];
            for f in 0..TOKENS_PER_STEP {
                if chunk[f] < 0 || chunk[f] as usize >= bounds[f] {
                    return Err(Error::TokenOutOfRange {
                        step: i,
                        field: FIELD_NAMES[f],
                        value: chunk[f],
                        bound: bounds[f],
                    });
                }
                t[f] = chunk[f] as usize;
            }
            steps.push(Step {
                in1: t[0],
                in2: t[1],
                op1: OpKind::from_id(t[2]).expect("bounded"),
                op2: OpKind::from_id(t[3]).expect("bounded"),
                agg: AggKind::from_id(t[4]).expect("bounded"),
            });
        }
        Ok(Self { steps })
    }

    pub fn encode(&self) -> Vec<usize> {
        self.steps
            .iter()
            .flat_map(|s| [s.in1, s.in2, s.op1.id(), s.op2.id(), s.agg.id()])
            .collect()
    }

    pub fn k(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    /// Aggregate nodes never consumed by a later step, ascending.
    pub fn output_nodes(&self) -> Vec<usize> {
        let mut used = vec![false; NUM_SLOTS + self.k()];
        for s in &self.steps {
            used[s.in1] = true;
            used[s.in2] = true;
        }
        (NUM_SLOTS..NUM_SLOTS + self.k()).filter(|&n| !used[n]).collect()
    }

    /// Whether input slot `slot` is read by any step.
    pub fn slot_consumed(&self, slot: usize) -> bool {
        self.steps.iter().any(|s| s.in1 == slot || s.in2 == slot)
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let toks: Vec<String> = self.encode().iter().map(|t| t.to_string()).collect();
        f.write_str(&toks.join(","))
    }
}

impl FromStr for Genotype {
    type Err = Error;

    /// Parses the one-line text form; K is inferred from the token count.
    fn from_str(s: &str) -> Result<Self> {
        let tokens = s
            .trim()
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<i64>()
                    .map_err(|e| Error::Genotype(format!("bad token {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if tokens.len() % TOKENS_PER_STEP != 0 {
            return Err(Error::Genotype(format!(
                "token count {} is not a multiple of {TOKENS_PER_STEP}",
                tokens.len()
            )));
        }
        Self::decode_signed(&tokens, tokens.len() / TOKENS_PER_STEP)
    }
}

/// Operation edge `from -> to` labelled with the op applied on the way.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OpEdge {
    pub from: usize,
    pub to: usize,
    pub op: OpKind,
    /// 1 for the first aggregation input, 2 for the second.
    pub position: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellGraph {
    /// Input nodes are `0..5`, aggregate node of step `i` is `5 + i`.
    pub num_nodes: usize,
    pub edges: Vec<OpEdge>,
    pub aggs: Vec<AggKind>,
    pub output_set: Vec<usize>,
}

impl CellGraph {
    pub fn is_acyclic(&self) -> bool {
        self.edges.iter().all(|e| e.from < e.to)
    }
}

pub fn build_graph(g: &Genotype) -> CellGraph {
    let mut edges = Vec::with_capacity(2 * g.k());
    for (i, s) in g.steps().iter().enumerate() {
        let to = NUM_SLOTS + i;
        edges.push(OpEdge {
            from: s.in1,
            to,
            op: s.op1,
            position: 1,
        });
        edges.push(OpEdge {
            from: s.in2,
            to,
            op: s.op2,
            position: 2,
        });
    }
    CellGraph {
        num_nodes: NUM_SLOTS + g.k(),
        edges,
        aggs: g.steps().iter().map(|s| s.agg).collect(),
        output_set: g.output_nodes(),
    }
}

/// Number of distinct token strings with `k` steps.
pub fn space_size(k: usize) -> Result<BigUint> {
    if k == 0 {
        return Err(Error::Genotype("K must be at least 1".into()));
    }
    let mut total = BigUint::from(1u32);
    for i in 0..k {
        let b = token_bounds(i);
        for v in b {
            total *= BigUint::from(v);
        }
    }
    Ok(total)
}

/// Channel layout a cell is instantiated against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellDims {
    pub cell_width: usize,
    pub dec_width: usize,
    /// Raw channel count of each input slot, in pool order.
    pub slot_channels: [usize; NUM_SLOTS],
}

/// Trainable scalars of an instantiated cell, from the per-block formulas.
/// Only slots the genotype reads get a harmonization projection.
pub fn cell_param_count(g: &Genotype, dims: &CellDims) -> usize {
    let c = dims.cell_width;
    let harmonize: usize = (0..NUM_SLOTS)
        .filter(|&s| g.slot_consumed(s))
        .map(|s| projection_param_count(dims.slot_channels[s], c))
        .sum();
    let steps: usize = g
        .steps()
        .iter()
        .map(|s| op_param_count(s.op1, c) + op_param_count(s.op2, c) + agg_param_count(s.agg, c))
        .sum();
    let out = projection_param_count(g.output_nodes().len() * c, dims.dec_width);
    harmonize + steps + out
}

/// DOT node name of pool entry `node`.
pub fn dot_node_name(node: usize) -> String {
    if node < NUM_SLOTS {
        format!("in{node}")
    } else {
        format!("s{}_agg", node - NUM_SLOTS)
    }
}

/// Graphviz rendering: operations orange, aggregations green, numeric ids as
/// labels.
pub fn emit_dot(g: &Genotype) -> String {
    let mut out = String::from("digraph cell {\n  rankdir=TB;\n");
    for slot in InputSlot::ALL {
        out.push_str(&format!(
            "  in{} [label=\"in{}: {}\", shape=box];\n",
            slot.id(),
            slot.id(),
            slot.name()
        ));
    }
    for (i, s) in g.steps().iter().enumerate() {
        for (pos, op) in [(1, s.op1), (2, s.op2)] {
            out.push_str(&format!(
                "  s{i}_op{pos} [label=\"{}\", style=filled, fillcolor=orange];\n",
                op.id()
            ));
        }
        out.push_str(&format!(
            "  s{i}_agg [label=\"{}\", style=filled, fillcolor=green];\n",
            s.agg.id()
        ));
    }
    out.push_str("  out [label=\"concat + 1x1\", shape=box];\n");
    for (i, s) in g.steps().iter().enumerate() {
        for (pos, src) in [(1, s.in1), (2, s.in2)] {
            out.push_str(&format!("  {} -> s{i}_op{pos};\n", dot_node_name(src)));
            out.push_str(&format!("  s{i}_op{pos} -> s{i}_agg;\n"));
        }
    }
    for n in g.output_nodes() {
        out.push_str(&format!("  {} -> out;\n", dot_node_name(n)));
    }
    out.push_str("}\n");
    out
}

/// Human-readable listing of the DAG.
pub fn describe(g: &Genotype) -> String {
    let name = |n: usize| {
        if n < NUM_SLOTS {
            InputSlot::ALL[n].name().to_string()
        } else {
            format!("node{n}")
        }
    };
    let mut out = String::new();
    for (i, s) in g.steps().iter().enumerate() {
        out.push_str(&format!(
            "node{} = {}({}({}), {}({}))\n",
            NUM_SLOTS + i,
            s.agg,
            s.op1,
            name(s.in1),
            s.op2,
            name(s.in2)
        ));
    }
    let outs: Vec<String> = g.output_nodes().into_iter().map(name).collect();
    out.push_str(&format!("output = project(concat[{}])\n", outs.join(", ")));
    out
}
