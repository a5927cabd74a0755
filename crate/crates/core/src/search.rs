//! The search loop: sample, train to the halfway probe, maybe stop, finish,
//! feed rewards to the controller. Plus top-k selection and reports.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::{Controller, ControllerConfig, PpoConfig};
use crate::error::{Error, Result};
use crate::genotype::{Genotype, InputSlot, NUM_SLOTS};
use crate::ops::{AggKind, OpKind};
use crate::optim::Adam;
use crate::segnet::StaticNet;
use crate::train::{CellTrainConfig, CellTrainer, SeqFeatures};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Stop when the halfway reward is below the mean of earlier ones.
    RunningMean,
    Never,
    Always,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStopConfig {
    pub fraction: f64,
    pub rule: StopRule,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            fraction: 0.5,
            rule: StopRule::RunningMean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub n_candidates: usize,
    pub k: usize,
    /// Candidates per controller update.
    pub batch: usize,
    pub early_stop: EarlyStopConfig,
    pub cell: CellTrainConfig,
    pub controller: ControllerConfig,
    pub ppo: PpoConfig,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            n_candidates: 60,
            k: 2,
            batch: 8,
            early_stop: EarlyStopConfig::default(),
            cell: CellTrainConfig::default(),
            controller: ControllerConfig::default(),
            ppo: PpoConfig::default(),
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates == 0 || self.batch == 0 || self.k == 0 {
            return Err(Error::Config("candidates, batch and K must be positive".into()));
        }
        if self.cell.epochs == 0 || self.cell.batch_size == 0 {
            return Err(Error::Config("cell training needs epochs and a batch size".into()));
        }
        let f = self.early_stop.fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("early-stop fraction {f} outside (0,1]")));
        }
        self.ppo.validate()
    }

    pub fn probe_epochs(&self) -> usize {
        (self.cell.epochs as f64 * self.early_stop.fraction).ceil() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Completed,
    EarlyStopped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub index: usize,
    pub tokens: Vec<usize>,
    pub status: Status,
    pub halfway_reward: f64,
    pub final_reward: Option<f64>,
    /// What the controller was fed.
    pub reward: f64,
    pub epochs_trained: usize,
    pub wall_time: f64,
    pub seed: u64,
}

impl SearchRecord {
    pub fn genotype(&self, k: usize) -> Result<Genotype> {
        Genotype::decode(&self.tokens, k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub after_candidate: usize,
    pub baseline: f64,
    pub mean_reward: f64,
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Header { config: SearchConfig },
    Record(SearchRecord),
    Update(UpdateRecord),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: SearchConfig,
    pub records: Vec<SearchRecord>,
    pub updates: Vec<UpdateRecord>,
}

impl RunLog {
    pub fn new(config: SearchConfig) -> Self {
        Self {
            config,
            records: Vec::new(),
            updates: Vec::new(),
        }
    }

    /// SHA-256 over the records with wall-clock times left out.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            let mut r = r.clone();
            r.wall_time = 0.0;
            h.update(serde_json::to_vec(&r).expect("records serialize"));
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        writeln!(f, "{}", serde_json::to_string(&LogLine::Header { config: self.config.clone() })?)?;
        let mut updates = self.updates.iter().peekable();
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(&LogLine::Record(r.clone()))?)?;
            while let Some(u) = updates.next_if(|u| u.after_candidate == r.index) {
                writeln!(f, "{}", serde_json::to_string(&LogLine::Update(u.clone()))?)?;
            }
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let f = BufReader::new(fs::File::open(path)?);
        let mut log: Option<RunLog> = None;
        for (n, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(&line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", n + 1),
            })?;
            match (parsed, log.as_mut()) {
                (LogLine::Header { config }, None) => log = Some(RunLog::new(config)),
                (LogLine::Record(r), Some(l)) => l.records.push(r),
                (LogLine::Update(u), Some(l)) => l.updates.push(u),
                _ => {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        reason: format!("line {}: header must come first and only once", n + 1),
                    })
                }
            }
        }
        log.ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: "empty run log".into(),
        })
    }
}

/// Streaming mean of earlier halfway rewards.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunningMean {
    count: usize,
    mean: f64,
}

impl RunningMean {
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        self.mean += (v - self.mean) / self.count as f64;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then_some(self.mean)
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

pub fn early_stop_decision(halfway: f64, history: &RunningMean, rule: StopRule) -> bool {
    match rule {
        StopRule::Never => false,
        StopRule::Always => true,
        StopRule::RunningMean => history.mean().is_some_and(|m| halfway < m),
    }
}

fn candidate_seed(search_seed: u64, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"candidate");
    h.update(search_seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

pub struct SearchOutcome {
    pub log: RunLog,
    pub controller: Controller,
    pub baseline: Option<f64>,
}

/// Runs the whole search over precomputed static features. `on_record` sees
/// every record as soon as it is final, in index order.
pub fn run_search(
    cfg: &SearchConfig,
    static_net: &StaticNet,
    meta_train: &[SeqFeatures],
    meta_val: &[SeqFeatures],
    mut on_record: impl FnMut(&LogLine) -> Result<()>,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    let classes = static_net.config.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut controller = Controller::new(cfg.controller, cfg.k, &mut rng)?;
    let mut opt = Adam::new();
    let mut baseline = None;
    let mut history = RunningMean::default();
    let mut log = RunLog::new(cfg.clone());
    on_record(&LogLine::Header { config: cfg.clone() })?;
    let probe = cfg.probe_epochs();

    let mut index = 0;
    while index < cfg.n_candidates {
        let n = cfg.batch.min(cfg.n_candidates - index);
        let mut traces = Vec::with_capacity(n);
        for _ in 0..n {
            traces.push(controller.sample(&mut rng)?);
        }
        for trace in traces.iter_mut() {
            let started = Instant::now();
            let genotype = Genotype::decode(&trace.tokens, cfg.k)?;
            let seed = candidate_seed(cfg.seed, index);
            let mut trainer = CellTrainer::new(&genotype, static_net, &cfg.cell, seed)?;
            trainer.run_epochs(meta_train, probe)?;
            let halfway = trainer.evaluate(meta_val, classes)?.reward;
            let stop = early_stop_decision(halfway, &history, cfg.early_stop.rule);
            history.push(halfway);
            let (status, final_reward) = if stop {
                (Status::EarlyStopped, None)
            } else {
                trainer.run_epochs(meta_train, cfg.cell.epochs - probe)?;
                (Status::Completed, Some(trainer.evaluate(meta_val, classes)?.reward))
            };
            let reward = final_reward.unwrap_or(halfway);
            trace.reward = Some(reward);
            let record = SearchRecord {
                index,
                tokens: trace.tokens.clone(),
                status,
                halfway_reward: halfway,
                final_reward,
                reward,
                epochs_trained: trainer.epochs_done(),
                wall_time: started.elapsed().as_secs_f64(),
                seed,
            };
            log::info!(
                "candidate {index}: {genotype} halfway {halfway:.4} reward {reward:.4} ({status:?})"
            );
            on_record(&LogLine::Record(record.clone()))?;
            log.records.push(record);
            index += 1;
        }
        let mean_reward = traces.iter().filter_map(|t| t.reward).sum::<f64>() / n as f64;
        let b = controller.ppo_update(&mut opt, &traces, &cfg.ppo, baseline)?;
        baseline = Some(b);
        let update = UpdateRecord {
            after_candidate: index - 1,
            baseline: b,
            mean_reward,
        };
        on_record(&LogLine::Update(update.clone()))?;
        log.updates.push(update);
    }
    Ok(SearchOutcome {
        log,
        controller,
        baseline,
    })
}

/// Completed records with the `k` highest final rewards, earlier index first
/// on ties.
pub fn select_top_k(log: &RunLog, k: usize) -> Result<Vec<&SearchRecord>> {
    let mut done: Vec<&SearchRecord> = log
        .records
        .iter()
        .filter(|r| r.status == Status::Completed)
        .collect();
    if done.len() < k {
        return Err(Error::Search(format!(
            "asked for the top {k} but only {} candidates completed",
            done.len()
        )));
    }
    done.sort_by(|a, b| {
        let (ra, rb) = (a.final_reward.unwrap_or(f64::NEG_INFINITY), b.final_reward.unwrap_or(f64::NEG_INFINITY));
        rb.total_cmp(&ra).then(a.index.cmp(&b.index))
    });
    done.truncate(k);
    Ok(done)
}

/// Rows of proportions. Each row covers a window of consecutive candidates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProportionTable {
    pub columns: Vec<String>,
    /// `(first candidate, last candidate, proportions)`.
    pub rows: Vec<(usize, usize, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    /// `(index, reward, moving average)`.
    pub rewards: Vec<(usize, f64, f64)>,
    pub ops: ProportionTable,
    pub aggs: ProportionTable,
    pub inputs: ProportionTable,
}

/// Raw token counts of one record: ops, aggregations, inputs. Input tokens
/// past the five slots all count towards the last column.
pub fn token_counts(r: &SearchRecord, k: usize) -> Result<([usize; 6], [usize; 6], [usize; NUM_SLOTS + 1])> {
    let g = r.genotype(k)?;
    let (mut ops, mut aggs, mut inputs) = ([0; 6], [0; 6], [0; NUM_SLOTS + 1]);
    for s in g.steps() {
        ops[s.op1.id()] += 1;
        ops[s.op2.id()] += 1;
        aggs[s.agg.id()] += 1;
        for i in [s.in1, s.in2] {
            inputs[i.min(NUM_SLOTS)] += 1;
        }
    }
    Ok((ops, aggs, inputs))
}

fn normalise(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

pub fn report(log: &RunLog, window: usize) -> Result<Report> {
    if log.records.is_empty() {
        return Err(Error::Search("report on an empty run log".into()));
    }
    let window = window.max(1);
    let k = log.config.k;
    let mut rewards = Vec::with_capacity(log.records.len());
    for (i, r) in log.records.iter().enumerate() {
        let lo = (i + 1).saturating_sub(window);
        let slice = &log.records[lo..=i];
        let ma = slice.iter().map(|r| r.reward).sum::<f64>() / slice.len() as f64;
        rewards.push((r.index, r.reward, ma));
    }
    let mut ops = ProportionTable {
        columns: OpKind::ALL.iter().map(|o| o.label().to_string()).collect(),
        rows: Vec::new(),
    };
    let mut aggs = ProportionTable {
        columns: AggKind::ALL.iter().map(|a| a.label().to_string()).collect(),
        rows: Vec::new(),
    };
    let mut inputs = ProportionTable {
        columns: InputSlot::ALL
            .iter()
            .map(|s| s.name().to_string())
            .chain(std::iter::once("cell_node".to_string()))
            .collect(),
        rows: Vec::new(),
    };
    for chunk in log.records.chunks(window) {
        let (mut o, mut a, mut inp) = ([0; 6], [0; 6], [0; NUM_SLOTS + 1]);
        for r in chunk {
            let (ro, ra, ri) = token_counts(r, k)?;
            o.iter_mut().zip(ro).for_each(|(x, y)| *x += y);
            a.iter_mut().zip(ra).for_each(|(x, y)| *x += y);
            inp.iter_mut().zip(ri).for_each(|(x, y)| *x += y);
        }
        let span = (chunk[0].index, chunk[chunk.len() - 1].index);
        ops.rows.push((span.0, span.1, normalise(&o)));
        aggs.rows.push((span.0, span.1, normalise(&a)));
        inputs.rows.push((span.0, span.1, normalise(&inp)));
    }
    Ok(Report {
        rewards,
        ops,
        aggs,
        inputs,
    })
}

impl ProportionTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("first,last,{}\n", self.columns.join(","));
        for (a, b, p) in &self.rows {
            let cells: Vec<String> = p.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(s, "{a},{b},{}", cells.join(","));
        }
        s
    }
}

impl Report {
    pub fn rewards_csv(&self) -> String {
        let mut s = String::from("index,reward,moving_average\n");
        for (i, r, m) in &self.rewards {
            let _ = writeln!(s, "{i},{r:.6},{m:.6}");
        }
        s
    }

    /// Writes `rewards.csv`, `ops.csv`, `aggs.csv`, `inputs.csv` and
    /// `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("rewards.csv"), self.rewards_csv())?;
        fs::write(dir.join("ops.csv"), self.ops.to_csv())?;
        fs::write(dir.join("aggs.csv"), self.aggs.to_csv())?;
        fs::write(dir.join("inputs.csv"), self.inputs.to_csv())?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
