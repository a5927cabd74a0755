#![allow(dead_code)]

use cellsearch::Result;
use cellsearch_tensor::{ParamSet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(dims: &[usize], seed: u64) -> Tensor {
    Tensor::randn(dims, &mut rng(seed)).unwrap()
}

/// Scalarizes `y` by a fixed random projection.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let dims = tape.value(y).dims().to_vec();
    let r = tape.constant(randn(&dims, seed ^ 0x5EED));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Adds N(0, std) noise to every parameter, moving sampling positions and
/// relu inputs away from the exact kinks that structured inits sit on.
pub fn jitter(set: &mut ParamSet, std: f64, seed: u64) {
    let mut r = rng(seed);
    let normal = Normal::new(0.0, std).unwrap();
    for p in set.iter_mut() {
        for v in p.value_mut() {
            *v += normal.sample(&mut r);
        }
    }
}

use cellsearch::genotype::{token_bounds, Genotype, TOKENS_PER_STEP};
use rand::Rng;

/// Uniformly random valid genotype with `k` steps.
pub fn random_genotype<R: Rng>(k: usize, r: &mut R) -> Genotype {
    let mut tokens = Vec::with_capacity(k * TOKENS_PER_STEP);
    for i in 0..k {
        for b in token_bounds(i) {
            tokens.push(r.random_range(0..b));
        }
    }
    Genotype::decode(&tokens, k).unwrap()
}

/// Counts per class directly from the pixel lists.
pub fn metric_oracle(labels: &[u8], preds: &[u8], classes: usize) -> (f64, f64, f64) {
    let mut ious = Vec::new();
    let mut accs = Vec::new();
    let mut fw = 0.0;
    let scored = labels.iter().filter(|&&l| l != cellsearch_tensor::IGNORE_LABEL).count() as f64;
    for c in 0..classes as u8 {
        let (mut tp, mut fp, mut fneg, mut n) = (0.0, 0.0, 0.0, 0.0);
        for (&l, &p) in labels.iter().zip(preds) {
            if l == cellsearch_tensor::IGNORE_LABEL {
                continue;
            }
            if l == c {
                n += 1.0;
            }
            match (l == c, p == c) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fneg += 1.0,
                _ => {}
            }
        }
        if n > 0.0 {
            let iou = tp / (tp + fp + fneg);
            ious.push(iou);
            accs.push(tp / n);
            fw += n / scored * iou;
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (mean(&ious), fw, mean(&accs))
}


/// Central differences on `n` randomly chosen scalar entries across one or
/// two parameter sets; returns the norm-wise relative error over them.
pub fn spot_check<F>(sets: &mut [&mut ParamSet], f: F, n: usize, seed: u64) -> f64
where
    F: Fn(&mut Tape, &[&ParamSet]) -> Result<Var>,
{
    let eval = |sets: &[&mut ParamSet]| -> f64 {
        let refs: Vec<&ParamSet> = sets.iter().map(|s| &**s).collect();
        let mut t = Tape::new();
        let r = f(&mut t, &refs).unwrap();
        t.value(r).item()
    };
    let analytic_grads: Vec<Vec<Option<Vec<f64>>>> = {
        let refs: Vec<&ParamSet> = sets.iter().map(|s| &**s).collect();
        let mut t = Tape::new();
        let r = f(&mut t, &refs).unwrap();
        let g = t.backward(r).unwrap();
        drop(refs);
        sets.iter_mut()
            .map(|s| {
                s.zero_grad();
                g.accumulate_into(s);
                let v = s.iter().map(|p| p.grad().map(|x| x.to_vec())).collect();
                s.zero_grad();
                v
            })
            .collect()
    };
    let mut picks = Vec::new();
    for (si, s) in sets.iter().enumerate() {
        for pi in 0..s.len() {
            if s.get(pi).trainable() {
                picks.push((si, pi));
            }
        }
    }
    let mut r = rng(seed);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let (si, pi) = picks[r.random_range(0..picks.len())];
        let e = r.random_range(0..sets[si].get(pi).numel());
        let orig = sets[si].get(pi).value()[e];
        sets[si].get_mut(pi).value_mut()[e] = orig + 1e-5;
        let fp = eval(sets);
        sets[si].get_mut(pi).value_mut()[e] = orig - 1e-5;
        let fm = eval(sets);
        sets[si].get_mut(pi).value_mut()[e] = orig;
        numeric.push((fp - fm) / 2e-5);
        analytic.push(analytic_grads[si][pi].as_ref().map_or(0.0, |g| g[e]));
    }
    cellsearch_tensor::gradcheck::relative_error(&analytic, &numeric)
}
