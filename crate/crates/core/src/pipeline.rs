//! Artifact layout under an output directory and the run phases that read
//! and write it.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, Meta};
use crate::config::Config;
use crate::data::{generate, split, Dataset, Splits};
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::metrics::MetricsReport;
use crate::search::{self, run_search, select_top_k, RunLog};
use crate::segnet::{CellNet, StaticNet};
use crate::train::{
    evaluate_copy_forward, evaluate_end_to_end, evaluate_static, finetune, precompute, pretrain_static,
    train_cell, CellRun, SeqFeatures, StaticReport,
};

pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn static_ckpt(&self) -> PathBuf {
        self.root.join("static.ckpt")
    }

    pub fn run_log(&self) -> PathBuf {
        self.root.join("search").join("run.jsonl")
    }

    pub fn controller_ckpt(&self) -> PathBuf {
        self.root.join("search").join("controller.ckpt")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("search").join("report")
    }

    pub fn cell_ckpt(&self, g: &Genotype) -> PathBuf {
        self.root.join("cells").join(format!("{}.ckpt", cell_name(g)))
    }

    /// Holds `static.ckpt` and `cell.ckpt` after joint training.
    pub fn finetune_dir(&self, g: &Genotype) -> PathBuf {
        self.root.join("finetuned").join(cell_name(g))
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, serde_json::to_string_pretty(value)?)?;
        Ok(path)
    }
}

pub fn cell_name(g: &Genotype) -> String {
    g.encode().iter().map(|t| t.to_string()).collect::<Vec<_>>().join("-")
}

/// Everything a phase needs after loading data.
pub struct Loaded {
    pub dataset: Dataset,
    pub splits: Splits,
}

pub fn gen_data(cfg: &Config, ws: &Workspace) -> Result<Dataset> {
    let ds = generate(&cfg.data)?;
    ds.save(&ws.data_dir())?;
    Ok(ds)
}

pub fn load_data(cfg: &Config, ws: &Workspace) -> Result<Loaded> {
    let dataset = Dataset::load(&ws.data_dir())?;
    if dataset.config != cfg.data {
        log::warn!("dataset on disk was generated with a different config; using the stored one");
    }
    let splits = split(dataset.len(), cfg.split.train_frac, cfg.split.meta_val_frac, cfg.seed)?;
    Ok(Loaded { dataset, splits })
}

pub fn pretrain(cfg: &Config, ws: &Workspace, data: &Loaded) -> Result<(StaticNet, StaticReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = StaticNet::new(cfg.net.clone(), &mut rng)?;
    let report = pretrain_static(
        &mut net,
        &data.dataset,
        &data.splits.train,
        &data.splits.val,
        &cfg.pretrain,
        cfg.seed,
    )?;
    checkpoint::save_static(&net, &ws.static_ckpt())?;
    ws.write_json("static_report.json", &report)?;
    Ok((net, report))
}

pub fn load_static(ws: &Workspace) -> Result<StaticNet> {
    checkpoint::load_static(&ws.static_ckpt())
}

pub struct MetaFeatures {
    pub train: Vec<SeqFeatures>,
    pub val: Vec<SeqFeatures>,
}

pub fn meta_features(net: &StaticNet, data: &Loaded) -> Result<MetaFeatures> {
    Ok(MetaFeatures {
        train: precompute(net, &data.dataset, &data.splits.meta_train)?,
        val: precompute(net, &data.dataset, &data.splits.meta_val)?,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchSummary {
    pub digest: String,
    pub candidates: usize,
    pub early_stopped: usize,
    pub top: Vec<(Vec<usize>, f64)>,
}

/// Runs the search, streaming the run log to disk, then retrains and saves
/// the top cells and writes the report.
pub fn search(cfg: &Config, ws: &Workspace, data: &Loaded, net: &StaticNet) -> Result<(RunLog, SearchSummary)> {
    let feats = meta_features(net, data)?;
    let log_path = ws.run_log();
    if let Some(dir) = log_path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut file = OpenOptions::new().create(true).write(true).truncate(true).open(&log_path)?;
    let outcome = run_search(&cfg.search, net, &feats.train, &feats.val, |line| {
        writeln!(file, "{}", serde_json::to_string(line)?)?;
        Ok(())
    })?;
    checkpoint::save_controller(&outcome.controller, outcome.baseline, &ws.controller_ckpt())?;
    search::report(&outcome.log, cfg.report_window)?.write(&ws.report_dir())?;

    let k = cfg.search.k;
    let completed = outcome
        .log
        .records
        .iter()
        .filter(|r| r.status == search::Status::Completed)
        .count();
    if completed < cfg.top_k {
        log::warn!("only {completed} candidates completed; keeping all of them");
    }
    let top = select_top_k(&outcome.log, cfg.top_k.min(completed))?;
    let mut summary_top = Vec::new();
    for r in top {
        let g = r.genotype(k)?;
        let (trainer, run) = train_cell(&g, net, &feats.train, &feats.val, &cfg.search.cell, 1.0, r.seed)?;
        checkpoint::save_cell(&trainer.net, &net.config, &ws.cell_ckpt(&g))?;
        log::info!("top cell {g}: search reward {:?}, retrained {:.4}", r.final_reward, run.report.reward);
        summary_top.push((r.tokens.clone(), run.report.reward));
    }
    let summary = SearchSummary {
        digest: outcome.log.digest(),
        candidates: outcome.log.records.len(),
        early_stopped: outcome.log.records.len() - completed,
        top: summary_top,
    };
    ws.write_json("search/summary.json", &summary)?;
    Ok((outcome.log, summary))
}

/// Trains one cell over the meta splits and saves it.
pub fn train_one(cfg: &Config, ws: &Workspace, data: &Loaded, net: &StaticNet, g: &Genotype) -> Result<(CellNet, CellRun)> {
    let feats = meta_features(net, data)?;
    let (trainer, run) = train_cell(g, net, &feats.train, &feats.val, &cfg.search.cell, 1.0, cfg.seed)?;
    checkpoint::save_cell(&trainer.net, &net.config, &ws.cell_ckpt(g))?;
    Ok((trainer.net, run))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub tokens: Vec<usize>,
    pub before: MetricsReport,
    pub after: MetricsReport,
    /// Copy-forward baseline of the original static net.
    pub copy_forward: MetricsReport,
    /// `after.reward - copy_forward.reward`.
    pub margin: f64,
    pub losses: Vec<f64>,
    /// Validation sequences scored.
    pub sequences: Vec<usize>,
}

/// Validation sequences with at least one moving object.
pub fn moving_sequences(ds: &Dataset, indices: &[usize]) -> Vec<usize> {
    indices
        .iter()
        .copied()
        .filter(|&i| ds.sequences[i].scene.shapes.iter().any(|s| s.velocity != (0, 0)))
        .collect()
}

/// Joint training of the static net and a cell (loaded from its checkpoint,
/// or trained first when none exists), scored on moving validation clips.
pub fn finetune_one(cfg: &Config, ws: &Workspace, data: &Loaded, g: &Genotype) -> Result<FinetuneSummary> {
    let net0 = load_static(ws)?;
    let cell_path = ws.cell_ckpt(g);
    let cell = if cell_path.exists() {
        checkpoint::load_cell(&cell_path, &net0)?
    } else {
        log::info!("no checkpoint for {g}; training it first");
        train_one(cfg, ws, data, &net0, g)?.0
    };
    let eval_idx = moving_sequences(&data.dataset, &data.splits.val);
    if eval_idx.is_empty() {
        return Err(Error::Data("no validation sequence has motion".into()));
    }
    let ds = &data.dataset;
    let copy_forward = evaluate_copy_forward(&net0, ds, &eval_idx)?;
    let before = evaluate_end_to_end(&net0, &cell, ds, &eval_idx)?;
    let (mut net, mut cell) = (net0, cell);
    let cell_lr = cfg.search.cell.lr / 2.0;
    let losses = finetune(&mut net, &mut cell, ds, &data.splits.train, &cfg.finetune, cell_lr, cfg.seed)?;
    let after = evaluate_end_to_end(&net, &cell, ds, &eval_idx)?;
    let dir = ws.finetune_dir(g);
    checkpoint::save_static(&net, &dir.join("static.ckpt"))?;
    checkpoint::save_cell(&cell, &net.config, &dir.join("cell.ckpt"))?;
    let summary = FinetuneSummary {
        tokens: g.encode(),
        margin: after.reward - copy_forward.reward,
        before,
        after,
        copy_forward,
        losses,
        sequences: eval_idx,
    };
    ws.write_json(&format!("finetuned/{}/summary.json", cell_name(g)), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub checkpoint: PathBuf,
    pub kind: String,
    pub val: MetricsReport,
}

/// Scores a static or cell checkpoint on the validation split. A cell is
/// paired with `static.ckpt` from its own directory when present (as after
/// fine-tuning), otherwise with the workspace static net.
pub fn evaluate_checkpoint(ws: &Workspace, data: &Loaded, path: &Path) -> Result<EvalSummary> {
    let ck = Checkpoint::load(path)?;
    let ds = &data.dataset;
    let (kind, val) = match ck.meta {
        Meta::Static { .. } => {
            let net = checkpoint::load_static(path)?;
            ("static", evaluate_static(&net, ds, &data.splits.val)?)
        }
        Meta::Cell { .. } => {
            let sibling = path.with_file_name("static.ckpt");
            let net = if sibling.exists() && sibling != path {
                checkpoint::load_static(&sibling)?
            } else {
                load_static(ws)?
            };
            let cell = checkpoint::load_cell(path, &net)?;
            ("cell", evaluate_end_to_end(&net, &cell, ds, &data.splits.val)?)
        }
        Meta::Controller { .. } => {
            return Err(Error::Config("controller checkpoints carry no segmentation reward".into()));
        }
    };
    Ok(EvalSummary {
        checkpoint: path.to_path_buf(),
        kind: kind.into(),
        val,
    })
}
