mod common;

use std::collections::BTreeMap;

use cellsearch::cell::Cell;
use cellsearch::error::Error;
use cellsearch::genotype::{
    build_graph, cell_param_count, dot_node_name, emit_dot, space_size, CellDims, Genotype,
    NUM_SLOTS,
};
use cellsearch::ops::{op_param_count, AggKind, OpKind};
use cellsearch_tensor::{ParamSet, Tape};
use common::{randn, random_genotype, rng};
use num_bigint::BigUint;
use rand::Rng;

#[test]
fn minimal_genotype_decodes() {
    let g = Genotype::decode(&[0, 0, 4, 4, 0], 1).unwrap();
    let s = g.steps()[0];
    assert_eq!((s.in1, s.in2), (0, 0));
    assert_eq!((s.op1, s.op2, s.agg), (OpKind::Skip, OpKind::Skip, AggKind::WeightedSum));
}

#[test]
fn second_step_sees_grown_pool() {
    let g = Genotype::decode(&[1, 2, 0, 0, 0, 5, 3, 1, 1, 1], 2).unwrap();
    assert_eq!(g.steps()[1].in1, 5);
    let err = Genotype::decode(&[5, 2, 0, 0, 0, 0, 0, 0, 0, 0], 2).unwrap_err();
    assert!(matches!(err, Error::TokenOutOfRange { step: 0, field: "in1", .. }));
}

#[test]
fn out_of_range_names_step_and_field() {
    let err = Genotype::decode(&[0, 0, 4, 4, 0, 0, 0, 0, 0, 6], 2).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::TokenOutOfRange { step: 1, field: "agg", value: 6, bound: 6 }));
    assert!(msg.contains("step 1") && msg.contains("agg"), "{msg}");
    assert!(Genotype::decode(&[0, 0, 0, 0], 1).is_err());
    assert!(Genotype::decode(&[], 0).is_err());
}

#[test]
fn encode_decode_round_trip() {
    let mut r = rng(1);
    for _ in 0..1000 {
        let k = r.random_range(1..=6);
        let g = random_genotype(k, &mut r);
        let tokens = g.encode();
        assert_eq!(Genotype::decode(&tokens, k).unwrap(), g);
        assert_eq!(Genotype::decode(&tokens, k).unwrap().encode(), tokens);
        assert_eq!(g.to_string().parse::<Genotype>().unwrap(), g);
    }
}

#[test]
fn output_set_examples() {
    let g = Genotype::decode(&[0, 1, 0, 0, 0], 1).unwrap();
    assert_eq!(build_graph(&g).output_set, vec![5]);
    let g = Genotype::decode(&[0, 1, 0, 0, 0, 5, 5, 0, 0, 0], 2).unwrap();
    assert_eq!(build_graph(&g).output_set, vec![6]);
}

/// Marks each aggregate and scans every later step for a consumer.
fn scan_oracle(g: &Genotype) -> Vec<usize> {
    let tokens = g.encode();
    let k = g.k();
    let mut out = Vec::new();
    for node in NUM_SLOTS..NUM_SLOTS + k {
        let mut consumed = false;
        for later in (node - NUM_SLOTS + 1)..k {
            let t = &tokens[later * 5..later * 5 + 5];
            if t[0] == node || t[1] == node {
                consumed = true;
            }
        }
        if !consumed {
            out.push(node);
        }
    }
    out
}

#[test]
fn output_set_matches_scan_oracle() {
    let mut r = rng(2);
    for _ in 0..10_000 {
        let k = r.random_range(1..=6);
        let g = random_genotype(k, &mut r);
        let graph = build_graph(&g);
        assert!(graph.is_acyclic());
        assert!(!graph.output_set.is_empty());
        assert_eq!(graph.output_set, scan_oracle(&g));
    }
}

#[test]
fn space_size_by_enumeration() {
    // every 5-tuple over a box wider than any bound; count what decodes
    let mut valid = 0u64;
    for t in 0..10usize.pow(5) {
        let toks: Vec<usize> = (0..5).map(|d| t / 10usize.pow(d) % 10).collect();
        if Genotype::decode(&toks, 1).is_ok() {
            valid += 1;
        }
    }
    assert_eq!(valid, 5400);
    assert_eq!(space_size(1).unwrap(), BigUint::from(5400u32));

    let mut step1 = 0u64;
    for t in 0..10usize.pow(5) {
        let mut toks = vec![0, 0, 0, 0, 0];
        toks.extend((0..5).map(|d| t / 10usize.pow(d) % 10));
        if Genotype::decode(&toks, 2).is_ok() {
            step1 += 1;
        }
    }
    assert_eq!(step1, 7776);
    assert_eq!(space_size(2).unwrap(), BigUint::from(41_990_400u64));
    assert!(space_size(0).is_err());
}

const SLOTS: [usize; NUM_SLOTS] = [8, 12, 6, 10, 12];

fn dims(width: usize) -> CellDims {
    CellDims {
        cell_width: width,
        dec_width: 8,
        slot_channels: SLOTS,
    }
}

fn allocation_walk(set: &ParamSet) -> usize {
    set.iter().filter(|p| p.trainable()).map(|p| p.numel()).sum()
}

#[test]
fn all_skip_cell_counts_plumbing_only() {
    let g = Genotype::decode(&[0, 0, 4, 4, 0], 1).unwrap();
    let d = dims(4);
    // dec_prev projection, two per-channel weight vectors, output projection
    let expected = (8 * 4 + 4) + 2 * 4 + (4 * 8 + 8);
    assert_eq!(cell_param_count(&g, &d), expected);
    let mut set = ParamSet::new();
    Cell::new(&g, d, &mut set, &mut rng(3)).unwrap();
    assert_eq!(allocation_walk(&set), expected);
}

#[test]
fn param_count_matches_allocation_walk() {
    let mut r = rng(4);
    for _ in 0..100 {
        let k = r.random_range(1..=5);
        let g = random_genotype(k, &mut r);
        for w in [4, 8] {
            let mut set = ParamSet::new();
            Cell::new(&g, dims(w), &mut set, &mut rng(5)).unwrap();
            assert_eq!(cell_param_count(&g, &dims(w)), allocation_walk(&set), "{g} width {w}");
        }
    }
}

#[test]
fn doubling_width_scales_conv_blocks_analytically() {
    // sep3x3 on both branches, concat+1x1 aggregation
    let g = Genotype::decode(&[2, 3, 0, 2, 1, 5, 4, 3, 0, 1], 2).unwrap();
    let c = 6;
    let per_block = |c: usize| -> usize {
        let sep = |k: usize| c * k * k + c * c + c;
        2 * sep(3) + sep(3) + sep(5) + 2 * (2 * c * c + c)
    };
    let plumbing = |c: usize| -> usize {
        [2, 3, 4].iter().map(|&s| SLOTS[s] * c + c).sum::<usize>() + (c * 8 + 8)
    };
    for width in [c, 2 * c] {
        assert_eq!(cell_param_count(&g, &dims(width)), per_block(width) + plumbing(width));
    }
    let grow = per_block(2 * c) - per_block(c);
    // quadratic terms quadruple, linear terms double
    let quad = 2 * c * c + c * c + c * c + 2 * 2 * c * c;
    let lin = 2 * (9 * c + c) + (9 * c + c) + (25 * c + c) + 2 * c;
    assert_eq!(grow, 3 * quad + lin);
    assert_eq!(op_param_count(OpKind::SepConv3x3, 2 * c), 4 * 36 + 2 * 6 * 10);
}

/// Minimal grammar check for the subset of DOT this crate emits.
fn parse_dot(src: &str) -> (BTreeMap<String, BTreeMap<String, String>>, Vec<(String, String)>) {
    let mut lines = src.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines.next().unwrap();
    assert!(header.starts_with("digraph ") && header.ends_with('{'), "{header}");
    let mut nodes = BTreeMap::new();
    let mut edges = Vec::new();
    let mut closed = false;
    let ident = |s: &str| {
        assert!(
            !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'),
            "bad identifier {s:?}"
        );
        s.to_string()
    };
    for line in lines {
        assert!(!closed, "content after closing brace");
        if line == "}" {
            closed = true;
            continue;
        }
        let stmt = line.strip_suffix(';').expect("statements end with ';'");
        if let Some((a, b)) = stmt.split_once(" -> ") {
            edges.push((ident(a), ident(b)));
        } else if let Some((name, rest)) = stmt.split_once(" [") {
            let body = rest.strip_suffix(']').expect("attribute list closes");
            let mut attrs = BTreeMap::new();
            for kv in split_attrs(body) {
                let (k, v) = kv.split_once('=').expect("key=value");
                attrs.insert(k.trim().to_string(), v.trim().trim_matches('"').to_string());
            }
            nodes.insert(ident(name), attrs);
        } else {
            assert!(stmt.contains('='), "unknown statement {stmt:?}");
        }
    }
    assert!(closed);
    for (a, b) in &edges {
        assert!(nodes.contains_key(a) && nodes.contains_key(b), "{a} -> {b}");
    }
    (nodes, edges)
}

fn split_attrs(body: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    for ch in body.chars() {
        match ch {
            '"' => {
                quoted = !quoted;
                cur.push(ch);
            }
            ',' if !quoted => out.push(std::mem::take(&mut cur)),
            _ => cur.push(ch),
        }
    }
    assert!(!quoted);
    out.push(cur);
    out
}

#[test]
fn dot_for_minimal_genotype() {
    let g = Genotype::decode(&[0, 0, 4, 4, 0], 1).unwrap();
    let (nodes, _) = parse_dot(&emit_dot(&g));
    let count = |color: &str| nodes.values().filter(|a| a.get("fillcolor").map(String::as_str) == Some(color)).count();
    assert_eq!(nodes.keys().filter(|n| n.starts_with("in")).count(), 5);
    assert_eq!(count("orange"), 2);
    assert_eq!(count("green"), 1);
    assert!(nodes.contains_key("out"));
    assert_eq!(nodes.len(), 9);
}

#[test]
fn dot_matches_graph() {
    let mut r = rng(6);
    for _ in 0..100 {
        let k = r.random_range(1..=6);
        let g = random_genotype(k, &mut r);
        let graph = build_graph(&g);
        let (nodes, edges) = parse_dot(&emit_dot(&g));

        let mut expected = Vec::new();
        for e in &graph.edges {
            let op_node = format!("s{}_op{}", e.to - NUM_SLOTS, e.position);
            assert_eq!(nodes[&op_node]["label"], e.op.id().to_string());
            expected.push((dot_node_name(e.from), op_node.clone()));
            expected.push((op_node, dot_node_name(e.to)));
        }
        for (i, a) in graph.aggs.iter().enumerate() {
            assert_eq!(nodes[&format!("s{i}_agg")]["label"], a.id().to_string());
        }
        for &n in &graph.output_set {
            expected.push((dot_node_name(n), "out".to_string()));
        }
        let mut got = edges.clone();
        got.sort();
        expected.sort();
        assert_eq!(got, expected);
    }
}

#[test]
fn every_cell_emits_dec_width_at_eighth_resolution() {
    let mut r = rng(7);
    let d = dims(4);
    for _ in 0..60 {
        let k = r.random_range(1..=6);
        let g = random_genotype(k, &mut r);
        let mut set = ParamSet::new();
        let cell = Cell::new(&g, d, &mut set, &mut rng(8)).unwrap();
        let mut tape = Tape::new();
        // slot resolutions of a 64x64 frame
        let sizes = [8, 2, 8, 4, 2];
        let inputs: [_; NUM_SLOTS] = std::array::from_fn(|s| {
            tape.constant(randn(&[2, SLOTS[s], sizes[s], sizes[s]], 9 + s as u64))
        });
        let y = cell.forward(&mut tape, &set, &inputs).unwrap();
        assert_eq!(tape.value(y).dims(), &[2, 8, 8, 8], "{g}");
        assert!(tape.value(y).data().iter().all(|v| v.is_finite()));
    }
}
