//! Two-layer LSTM policy over genotype tokens, trained with PPO.

use cellsearch_tensor::{ParamSet, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genotype::{pool_size, Genotype, FIELD_NAMES, TOKENS_PER_STEP};
use crate::ops::{AggKind, OpKind};
use crate::optim::Adam;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub hidden: usize,
    pub embed: usize,
    pub layers: usize,
    pub init_range: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            hidden: 100,
            embed: 32,
            layers: 2,
            init_range: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub lr: f64,
    pub epochs_per_batch: usize,
    pub entropy_coef: f64,
    pub baseline_decay: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            lr: 1e-4,
            epochs_per_batch: 3,
            entropy_coef: 1e-3,
            baseline_decay: 0.95,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config(format!("clip_eps {} outside (0,1)", self.clip_eps)));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("ppo lr {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.baseline_decay) {
            return Err(Error::Config("baseline_decay outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Which head and embedding table a token position uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Category {
    Index,
    Op,
    Agg,
}

fn category(field: usize) -> Category {
    match field {
        0 | 1 => Category::Index,
        2 | 3 => Category::Op,
        _ => Category::Agg,
    }
}

#[derive(Clone, Debug)]
struct LstmLayer {
    w_ih: usize,
    w_hh: usize,
    b: usize,
}

#[derive(Clone, Debug)]
pub struct Controller {
    cfg: ControllerConfig,
    k: usize,
    set: ParamSet,
    start: usize,
    embed: [usize; 3],
    layers: Vec<LstmLayer>,
    heads: [(usize, usize); 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub tokens: Vec<usize>,
    pub logprobs: Vec<f64>,
    pub entropies: Vec<f64>,
    pub reward: Option<f64>,
}

impl SampleTrace {
    pub fn total_logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

struct Forward {
    /// Per-token `(1, valid)` log-probability rows.
    rows: Vec<Var>,
}

impl Controller {
    pub fn new<R: Rng + ?Sized>(cfg: ControllerConfig, k: usize, rng: &mut R) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("controller needs K >= 1".into()));
        }
        let (h, e, r) = (cfg.hidden, cfg.embed, cfg.init_range);
        let max_pool = pool_size(k - 1);
        let mut set = ParamSet::new();
        let mut u = |set: &mut ParamSet, name: String, dims: &[usize]| -> Result<usize> {
            Ok(set.add(name, Tensor::uniform(dims, r, rng)?, true))
        };
        let start = u(&mut set, "ctrl.start".into(), &[1, e])?;
        let sizes = [max_pool, OpKind::ALL.len(), AggKind::ALL.len()];
        let mut embed = [0; 3];
        let mut heads = [(0, 0); 3];
        for (c, name) in ["index", "op", "agg"].iter().enumerate() {
            embed[c] = u(&mut set, format!("ctrl.embed.{name}"), &[sizes[c], e])?;
        }
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let input = if l == 0 { e } else { h };
            layers.push(LstmLayer {
                w_ih: u(&mut set, format!("ctrl.lstm{l}.w_ih"), &[4 * h, input])?,
                w_hh: u(&mut set, format!("ctrl.lstm{l}.w_hh"), &[4 * h, h])?,
                b: u(&mut set, format!("ctrl.lstm{l}.b"), &[4 * h])?,
            });
        }
        for (c, name) in ["index", "op", "agg"].iter().enumerate() {
            heads[c] = (
                u(&mut set, format!("ctrl.head.{name}.w"), &[sizes[c], h])?,
                u(&mut set, format!("ctrl.head.{name}.b"), &[sizes[c]])?,
            );
        }
        Ok(Self {
            cfg,
            k,
            set,
            start,
            embed,
            layers,
            heads,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn params(&self) -> &ParamSet {
        &self.set
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.set
    }

    /// Number of admissible values of token `t` (flat position).
    pub fn valid_count(t: usize) -> usize {
        let step = t / TOKENS_PER_STEP;
        match category(t % TOKENS_PER_STEP) {
            Category::Index => pool_size(step),
            Category::Op => OpKind::ALL.len(),
            Category::Agg => AggKind::ALL.len(),
        }
    }

    /// Runs the policy over `5K` positions. `choose` receives the
    /// log-probabilities of each position and returns the token to feed next.
    fn run(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        mut choose: impl FnMut(usize, &[f64]) -> Result<usize>,
    ) -> Result<Forward> {
        let h = self.cfg.hidden;
        let zeros = Tensor::zeros(&[1, h])?;
        let mut state: Vec<(Var, Var)> = (0..self.layers.len())
            .map(|_| (tape.constant(zeros.clone()), tape.constant(zeros.clone())))
            .collect();
        let layer_params: Vec<[Var; 3]> = self
            .layers
            .iter()
            .map(|l| [tape.param(set, l.w_ih), tape.param(set, l.w_hh), tape.param(set, l.b)])
            .collect();
        let heads: Vec<(Var, Var)> = self
            .heads
            .iter()
            .map(|&(w, b)| (tape.param(set, w), tape.param(set, b)))
            .collect();
        let tables: Vec<Var> = self.embed.iter().map(|&t| tape.param(set, t)).collect();
        let mut x = tape.param(set, self.start);
        let mut rows = Vec::with_capacity(self.k * TOKENS_PER_STEP);
        for t in 0..self.k * TOKENS_PER_STEP {
            let mut input = x;
            for (l, p) in layer_params.iter().enumerate() {
                let (hp, cp) = state[l];
                let a = tape.linear(input, p[0], Some(p[2]))?;
                let b = tape.linear(hp, p[1], None)?;
                let gates = tape.add(a, b)?;
                let i = tape.slice_channels(gates, 0, h)?;
                let f = tape.slice_channels(gates, h, h)?;
                let g = tape.slice_channels(gates, 2 * h, h)?;
                let o = tape.slice_channels(gates, 3 * h, h)?;
                let i = tape.sigmoid(i);
                let f = tape.sigmoid(f);
                let g = tape.tanh(g);
                let o = tape.sigmoid(o);
                let keep = tape.mul(f, cp)?;
                let write = tape.mul(i, g)?;
                let c = tape.add(keep, write)?;
                let tc = tape.tanh(c);
                let hn = tape.mul(o, tc)?;
                state[l] = (hn, c);
                input = hn;
            }
            let cat = category(t % TOKENS_PER_STEP) as usize;
            let (w, b) = heads[cat];
            let logits = tape.linear(input, w, Some(b))?;
            let row = tape.masked_log_softmax(logits, Self::valid_count(t))?;
            let token = choose(t, tape.value(row).data())?;
            rows.push(row);
            x = tape.select_row(tables[cat], token)?;
        }
        Ok(Forward { rows })
    }

    /// Samples one token string. Index tokens beyond the current pool have
    /// zero probability.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SampleTrace> {
        let mut tape = Tape::new();
        let mut tokens = Vec::with_capacity(self.k * TOKENS_PER_STEP);
        let mut logprobs = Vec::with_capacity(tokens.capacity());
        let mut entropies = Vec::with_capacity(tokens.capacity());
        self.run(&mut tape, &self.set, |_, lp| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = lp.len() - 1;
            for (j, l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    pick = j;
                    break;
                }
            }
            tokens.push(pick);
            logprobs.push(lp[pick]);
            entropies.push(-lp.iter().map(|l| l.exp() * l).sum::<f64>());
            Ok(pick)
        })?;
        Ok(SampleTrace {
            tokens,
            logprobs,
            entropies,
            reward: None,
        })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.k * TOKENS_PER_STEP {
            return Err(Error::Genotype(format!(
                "expected {} tokens, got {}",
                self.k * TOKENS_PER_STEP,
                tokens.len()
            )));
        }
        for (t, &v) in tokens.iter().enumerate() {
            let bound = Self::valid_count(t);
            if v >= bound {
                return Err(Error::TokenOutOfRange {
                    step: t / TOKENS_PER_STEP,
                    field: FIELD_NAMES[t % TOKENS_PER_STEP],
                    value: v as i64,
                    bound,
                });
            }
        }
        Ok(())
    }

    /// Per-position probability vectors under teacher forcing, padded with
    /// zeros to the head size.
    pub fn distributions(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(tokens)?;
        let mut out = Vec::new();
        let head = [pool_size(self.k - 1), OpKind::ALL.len(), AggKind::ALL.len()];
        let mut tape = Tape::new();
        self.run(&mut tape, &self.set, |t, lp| {
            let mut p = vec![0.0; head[category(t % TOKENS_PER_STEP) as usize]];
            for (j, l) in lp.iter().enumerate() {
                p[j] = l.exp();
            }
            out.push(p);
            Ok(tokens[t])
        })?;
        Ok(out)
    }

    /// Teacher-forced log-probability of `tokens`: `(total, per token)`.
    pub fn log_prob(&self, tokens: &[usize]) -> Result<(f64, Vec<f64>)> {
        self.check_tokens(tokens)?;
        let mut tape = Tape::new();
        let mut per = Vec::with_capacity(tokens.len());
        self.run(&mut tape, &self.set, |t, lp| {
            per.push(lp[tokens[t]]);
            Ok(tokens[t])
        })?;
        Ok((per.iter().sum(), per))
    }

    /// Records `(total log-probability, total entropy)` of `tokens` on `tape`.
    pub fn log_prob_on_tape(&self, tape: &mut Tape, set: &ParamSet, tokens: &[usize]) -> Result<(Var, Var)> {
        self.check_tokens(tokens)?;
        let fwd = self.run(tape, set, |t, _| Ok(tokens[t]))?;
        let mut total: Option<Var> = None;
        let mut entropy: Option<Var> = None;
        for (t, &row) in fwd.rows.iter().enumerate() {
            let lp = tape.pick(row, tokens[t])?;
            let p = tape.exp(row);
            let plogp = tape.mul(p, row)?;
            let s = tape.sum(plogp);
            let ent = tape.scale(s, -1.0);
            total = Some(match total {
                Some(acc) => tape.add(acc, lp)?,
                None => lp,
            });
            entropy = Some(match entropy {
                Some(acc) => tape.add(acc, ent)?,
                None => ent,
            });
        }
        Ok((total.expect("K >= 1"), entropy.expect("K >= 1")))
    }

    /// Negated PPO objective over `batch`, recorded on `tape`.
    pub fn ppo_loss(
        &self,
        tape: &mut Tape,
        set: &ParamSet,
        batch: &[SampleTrace],
        advantages: &[f64],
        cfg: &PpoConfig,
    ) -> Result<Var> {
        let n = batch.len() as f64;
        let mut acc: Option<Var> = None;
        for (trace, &adv) in batch.iter().zip(advantages) {
            let (lp, ent) = self.log_prob_on_tape(tape, set, &trace.tokens)?;
            let surr = tape.clipped_surrogate(lp, trace.total_logprob(), adv, cfg.clip_eps)?;
            let bonus = tape.scale(ent, cfg.entropy_coef);
            let obj = tape.add(surr, bonus)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, obj)?,
                None => obj,
            });
        }
        Ok(tape.scale(acc.expect("nonempty batch"), -1.0 / n))
    }

    /// PPO update on a batch of rewarded traces. Advantages are
    /// `reward - baseline`; without a baseline the batch mean is used. Returns
    /// the updated moving-average baseline.
    pub fn ppo_update(
        &mut self,
        opt: &mut Adam,
        batch: &[SampleTrace],
        cfg: &PpoConfig,
        baseline: Option<f64>,
    ) -> Result<f64> {
        cfg.validate()?;
        if batch.is_empty() {
            return Err(Error::Search("PPO update on an empty batch".into()));
        }
        let rewards = batch
            .iter()
            .map(|t| {
                t.reward
                    .ok_or_else(|| Error::Search("trace without reward in PPO batch".into()))
            })
            .collect::<Result<Vec<f64>>>()?;
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let base = baseline.unwrap_or(mean);
        let advantages: Vec<f64> = rewards.iter().map(|r| r - base).collect();
        for _ in 0..cfg.epochs_per_batch {
            self.set.zero_grad();
            let mut tape = Tape::new();
            let loss = self.ppo_loss(&mut tape, &self.set, batch, &advantages, cfg)?;
            tape.backward_into(loss, &mut self.set)?;
            opt.step(&mut self.set, cfg.lr);
        }
        self.set.zero_grad();
        Ok(cfg.baseline_decay * base + (1.0 - cfg.baseline_decay) * mean)
    }

    pub fn sample_genotype<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Genotype, SampleTrace)> {
        let trace = self.sample(rng)?;
        Ok((Genotype::decode(&trace.tokens, self.k)?, trace))
    }
}
