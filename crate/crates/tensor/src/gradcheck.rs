//! Central finite-difference checking of reverse-mode gradients.
//!
//! The error measure is norm-wise per argument,
//! `||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2)`,
//! which stays meaningful when individual entries are near zero.

use crate::error::Result;
use crate::param::ParamSet;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many entries per argument, evenly strided.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(argument label, relative error, entries checked)`.
    pub arguments: Vec<(String, f64, usize)>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.arguments.iter().map(|a| a.1).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.arguments.iter().all(|a| a.1 < tol)
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

fn entry_indices(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            let stride = len as f64 / m as f64;
            (0..m).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Checks `f` (which must return a scalar) w.r.t. each input tensor.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ts.iter().map(|x| t.constant(x.clone())).collect();
        let r = f(&mut t, &vs)?;
        Ok(t.value(r).item())
    };

    let mut arguments = Vec::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let len = inputs[k].numel();
        let zeros = vec![0.0; len];
        let analytic_full = grads.wrt(*var).unwrap_or(&zeros).to_vec();
        let idx = entry_indices(len, opts.max_entries);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + opts.step;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - opts.step;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            numeric.push((fp - fm) / (2.0 * opts.step));
            analytic.push(analytic_full[i]);
        }
        arguments.push((
            format!("input{k}"),
            relative_error(&analytic, &numeric),
            idx.len(),
        ));
    }
    Ok(GradCheckReport { arguments })
}

/// Checks `f` w.r.t. every trainable parameter of `set`.
pub fn check_params<F>(set: &mut ParamSet, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    set.zero_grad();
    let mut tape = Tape::new();
    let root = f(&mut tape, set)?;
    tape.backward_into(root, set)?;
    let analytic_all: Vec<Option<Vec<f64>>> =
        set.iter().map(|p| p.grad().map(|g| g.to_vec())).collect();
    set.zero_grad();

    let mut arguments = Vec::new();
    for (k, analytic_full) in analytic_all.into_iter().enumerate() {
        let Some(analytic_full) = analytic_full else {
            continue;
        };
        let idx = entry_indices(analytic_full.len(), opts.max_entries);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = set.get(k).value()[i];
            set.get_mut(k).value_mut()[i] = orig + opts.step;
            let mut t = Tape::new();
            let r = f(&mut t, set)?;
            let fp = t.value(r).item();
            set.get_mut(k).value_mut()[i] = orig - opts.step;
            let mut t = Tape::new();
            let r = f(&mut t, set)?;
            let fm = t.value(r).item();
            set.get_mut(k).value_mut()[i] = orig;
            numeric.push((fp - fm) / (2.0 * opts.step));
            analytic.push(analytic_full[i]);
        }
        arguments.push((
            set.get(k).name.clone(),
            relative_error(&analytic, &numeric),
            idx.len(),
        ));
    }
    Ok(GradCheckReport { arguments })
}
