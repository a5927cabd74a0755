//! Training loops: static pre-training, cell training over cached features,
//! end-to-end fine-tuning, and evaluation.

use std::collections::HashMap;
use std::sync::Arc;

use cellsearch_tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{batches, BatchConfig, Dataset};
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::metrics::{argmax_channels, ConfusionMatrix, MetricsReport};
use crate::optim::{poly_lr, Adam, SgdMomentum};
use crate::segnet::{sequence_loss, upsampled_loss, CellNet, Encoded, StaticNet, DECODER_GROUP};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StaticTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub encoder_lr: f64,
    pub decoder_lr: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub aux_weight: f64,
    pub scale_range: (f64, f64),
}

impl Default for StaticTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            encoder_lr: 5e-2,
            decoder_lr: 1e-2,
            poly_power: 0.9,
            momentum: 0.9,
            aux_weight: 0.3,
            scale_range: (0.75, 1.25),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for CellTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 8,
            lr: 3e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub static_lr: f64,
    pub momentum: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            static_lr: 5e-4,
            momentum: 0.9,
        }
    }
}

/// Concatenates tensors along the leading (batch) axis.
pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Data("stacking zero tensors".into()))?;
    let mut dims = first.dims().to_vec();
    dims[0] = parts.iter().map(|t| t.dims()[0]).sum();
    let mut data = Vec::with_capacity(dims.iter().product());
    for t in parts {
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::from_vec(&dims, data)?)
}

/// Splits the leading axis into single-item tensors.
pub fn unstack(t: &Tensor) -> Result<Vec<Tensor>> {
    let mut dims = t.dims().to_vec();
    let n = dims[0];
    dims[0] = 1;
    let per = t.numel() / n;
    t.data()
        .chunks(per)
        .map(|c| Ok(Tensor::from_vec(&dims, c.to_vec())?))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StaticReport {
    pub losses: Vec<f64>,
    pub val: MetricsReport,
    pub majority: MetricsReport,
}

/// Trains the static network on individual labelled frames with the poly
/// schedule, separate encoder/decoder rates and the auxiliary head.
pub fn pretrain_static(
    net: &mut StaticNet,
    ds: &Dataset,
    train: &[usize],
    val: &[usize],
    cfg: &StaticTrainConfig,
    seed: u64,
) -> Result<StaticReport> {
    let (h, w) = (ds.config.height, ds.config.width);
    let bcfg = BatchConfig {
        batch_size: cfg.batch_size,
        crop: h.min(w),
        scale_range: cfg.scale_range,
        shuffle: true,
    };
    let per_epoch = train.len().div_ceil(cfg.batch_size.max(1));
    let max_iter = (cfg.epochs * per_epoch).max(1);
    let mut opt = SgdMomentum::new(cfg.momentum);
    let mut losses = Vec::with_capacity(max_iter);
    net.params.set_trainable(true);
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        for b in batches(ds, train, &bcfg, seed.wrapping_add(epoch as u64))? {
            let frames: Vec<&Tensor> = b.frames.iter().collect();
            let x = stack(&frames)?;
            let labels: Vec<u8> = b.labels.concat();
            let (ch, cw) = (bcfg.crop, bcfg.crop);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let enc = net.encode(&mut tape, &net.params, xv)?;
            let (_, pred) = net.decode(&mut tape, &net.params, &enc)?;
            let main = upsampled_loss(&mut tape, pred, &labels, ch, cw)?;
            let aux = net.aux_logits(&mut tape, &net.params, enc.layer3)?;
            let aux = upsampled_loss(&mut tape, aux, &labels, ch, cw)?;
            let aux = tape.scale(aux, cfg.aux_weight);
            let loss = tape.add(main, aux)?;
            losses.push(tape.value(loss).item());
            net.params.zero_grad();
            tape.backward_into(loss, &mut net.params)?;
            let enc_lr = poly_lr(cfg.encoder_lr, iter, max_iter, cfg.poly_power)?;
            let dec_lr = poly_lr(cfg.decoder_lr, iter, max_iter, cfg.poly_power)?;
            opt.step_grouped(&mut net.params, |g| if g == DECODER_GROUP { dec_lr } else { enc_lr });
            iter += 1;
        }
    }
    net.params.zero_grad();
    Ok(StaticReport {
        losses,
        val: evaluate_static(net, ds, val)?,
        majority: majority_baseline(ds, train, val)?,
    })
}

/// Scores the static network on every frame of the given sequences.
pub fn evaluate_static(net: &StaticNet, ds: &Dataset, indices: &[usize]) -> Result<MetricsReport> {
    let (h, w) = (ds.config.height, ds.config.width);
    let mut cm = ConfusionMatrix::new(ds.config.classes);
    for b in batches(ds, indices, &eval_batches(h, w), 0)? {
        for (t, frame) in b.frames.iter().enumerate() {
            let mut tape = Tape::new();
            let x = tape.constant(frame.clone());
            let out = net.forward(&mut tape, &net.params, x)?;
            let up = tape.bilinear_resize(out.pred, h, w)?;
            cm.update(&b.labels[t], &argmax_channels(tape.value(up))?)?;
        }
    }
    cm.report()
}

fn eval_batches(h: usize, w: usize) -> BatchConfig {
    BatchConfig {
        batch_size: 16,
        crop: h.min(w),
        scale_range: (1.0, 1.0),
        shuffle: false,
    }
}

/// Predicts the most frequent training class everywhere.
pub fn majority_baseline(ds: &Dataset, train: &[usize], val: &[usize]) -> Result<MetricsReport> {
    let mut counts = vec![0u64; ds.config.classes];
    for &i in train {
        for l in &ds.sequences[i].labels {
            for &v in l {
                counts[v as usize] += 1;
            }
        }
    }
    let majority = (0..counts.len()).max_by_key(|&c| (counts[c], usize::MAX - c)).unwrap_or(0) as u8;
    let mut cm = ConfusionMatrix::new(ds.config.classes);
    for &i in val {
        for l in &ds.sequences[i].labels {
            cm.update(l, &vec![majority; l.len()])?;
        }
    }
    cm.report()
}

/// Static outputs of one sequence: decoder state and layer4 of frame 0, and
/// encoder features of every later frame. Tensors have batch size 1.
#[derive(Clone, Debug)]
pub struct SeqFeatures {
    pub dec0: Tensor,
    pub layer4_0: Tensor,
    pub later: Vec<[Tensor; 3]>,
    /// Labels of frames `1..`.
    pub labels: Vec<Vec<u8>>,
    pub height: usize,
    pub width: usize,
}

/// Runs the static network once over `indices`.
pub fn precompute(net: &StaticNet, ds: &Dataset, indices: &[usize]) -> Result<Vec<SeqFeatures>> {
    let (h, w) = (ds.config.height, ds.config.width);
    let mut out = Vec::with_capacity(indices.len());
    for b in batches(ds, indices, &eval_batches(h, w), 0)? {
        let mut tape = Tape::new();
        let x0 = tape.constant(b.frames[0].clone());
        let first = net.forward(&mut tape, &net.params, x0)?;
        let dec0 = unstack(tape.value(first.dec))?;
        let l4 = unstack(tape.value(first.layer4))?;
        let mut later: Vec<Vec<[Tensor; 3]>> = vec![Vec::new(); b.sequences.len()];
        for frame in &b.frames[1..] {
            let x = tape.constant(frame.clone());
            let enc = net.encode(&mut tape, &net.params, x)?;
            let parts = [enc.layer2, enc.layer3, enc.layer4].map(|v| unstack(tape.value(v)));
            let [a, bb, c] = parts;
            let (a, bb, c) = (a?, bb?, c?);
            for k in 0..b.sequences.len() {
                later[k].push([a[k].clone(), bb[k].clone(), c[k].clone()]);
            }
        }
        let plane = h * w;
        for (k, feats) in later.into_iter().enumerate() {
            out.push(SeqFeatures {
                dec0: dec0[k].clone(),
                layer4_0: l4[k].clone(),
                later: feats,
                labels: b.labels[1..]
                    .iter()
                    .map(|l| l[k * plane..(k + 1) * plane].to_vec())
                    .collect(),
                height: h,
                width: w,
            });
        }
    }
    Ok(out)
}

/// Precomputed features keyed by split contents and static checksum, so a
/// changed static network never reuses stale entries.
#[derive(Default)]
pub struct BundleCache {
    entries: HashMap<(String, String), Arc<Vec<SeqFeatures>>>,
}

impl BundleCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&mut self, net: &StaticNet, ds: &Dataset, indices: &[usize]) -> Result<Arc<Vec<SeqFeatures>>> {
        let mut h = Sha256::new();
        for i in indices {
            h.update((*i as u64).to_le_bytes());
        }
        h.update(ds.config.seed.to_le_bytes());
        let key = (hex::encode(h.finalize()), net.checksum());
        if let Some(v) = self.entries.get(&key) {
            return Ok(v.clone());
        }
        let feats = Arc::new(precompute(net, ds, indices)?);
        self.entries.insert(key, feats.clone());
        Ok(feats)
    }
}

fn stacked_batch(items: &[&SeqFeatures]) -> Result<(Tensor, Tensor, Vec<[Tensor; 3]>, Vec<Vec<u8>>)> {
    let dec = stack(&items.iter().map(|s| &s.dec0).collect::<Vec<_>>())?;
    let l4 = stack(&items.iter().map(|s| &s.layer4_0).collect::<Vec<_>>())?;
    let frames = items[0].later.len();
    let mut later = Vec::with_capacity(frames);
    let mut labels = Vec::with_capacity(frames);
    for t in 0..frames {
        let part = |k: usize| stack(&items.iter().map(|s| &s.later[t][k]).collect::<Vec<_>>());
        later.push([part(0)?, part(1)?, part(2)?]);
        labels.push(items.iter().flat_map(|s| s.labels[t].iter().copied()).collect());
    }
    Ok((dec, l4, later, labels))
}

/// Trains one cell over cached features. Training can be resumed, which is
/// how the search stops at the halfway probe and continues later.
pub struct CellTrainer {
    pub net: CellNet,
    opt: Adam,
    cfg: CellTrainConfig,
    seed: u64,
    epochs_done: usize,
}

impl CellTrainer {
    pub fn new(genotype: &Genotype, static_net: &StaticNet, cfg: &CellTrainConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            net: CellNet::new(genotype, static_net, &mut rng)?,
            opt: Adam::new(),
            cfg: cfg.clone(),
            seed,
            epochs_done: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn run_epochs(&mut self, data: &[SeqFeatures], n: usize) -> Result<Vec<f64>> {
        let mut losses = Vec::new();
        for _ in 0..n {
            let mut order: Vec<usize> = (0..data.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (0xE90C_u64 << 16 | self.epochs_done as u64));
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.cfg.batch_size.max(1)) {
                let items: Vec<&SeqFeatures> = chunk.iter().map(|&i| &data[i]).collect();
                let (dec0, l4_0, later, labels) = stacked_batch(&items)?;
                let (h, w) = (items[0].height, items[0].width);
                let mut tape = Tape::new();
                let mut dec = tape.constant(dec0);
                let mut l4 = tape.constant(l4_0);
                let mut total = None;
                for (t, feats) in later.into_iter().enumerate() {
                    let [a, b, c] = feats.map(|f| tape.constant(f));
                    let enc = Encoded {
                        layer2: a,
                        layer3: b,
                        layer4: c,
                    };
                    let (d, p) = self.net.step(&mut tape, &self.net.params, dec, l4, &enc)?;
                    let loss = upsampled_loss(&mut tape, p, &labels[t], h, w)?;
                    total = Some(match total {
                        Some(acc) => tape.add(acc, loss)?,
                        None => loss,
                    });
                    dec = d;
                    l4 = c;
                }
                let total = total.ok_or_else(|| Error::Data("sequences need a second frame".into()))?;
                losses.push(tape.value(total).item());
                self.net.params.zero_grad();
                tape.backward_into(total, &mut self.net.params)?;
                self.opt.step(&mut self.net.params, self.cfg.lr);
            }
            self.epochs_done += 1;
        }
        self.net.params.zero_grad();
        Ok(losses)
    }

    pub fn evaluate(&self, data: &[SeqFeatures], classes: usize) -> Result<MetricsReport> {
        evaluate_cached(data, classes, |tape, dec, l4, enc| {
            self.net.step(tape, &self.net.params, dec, l4, enc)
        })
    }
}

/// Reward on frames `1..` of cached sequences for any recurrent predictor.
fn evaluate_cached<F>(data: &[SeqFeatures], classes: usize, mut step: F) -> Result<MetricsReport>
where
    F: FnMut(&mut Tape, cellsearch_tensor::Var, cellsearch_tensor::Var, &Encoded) -> Result<(cellsearch_tensor::Var, cellsearch_tensor::Var)>,
{
    let mut cm = ConfusionMatrix::new(classes);
    let refs: Vec<&SeqFeatures> = data.iter().collect();
    for chunk in refs.chunks(16) {
        let (dec0, l4_0, later, labels) = stacked_batch(chunk)?;
        let (h, w) = (chunk[0].height, chunk[0].width);
        let mut tape = Tape::new();
        let mut dec = tape.constant(dec0);
        let mut l4 = tape.constant(l4_0);
        for (t, feats) in later.into_iter().enumerate() {
            let [a, b, c] = feats.map(|f| tape.constant(f));
            let enc = Encoded {
                layer2: a,
                layer3: b,
                layer4: c,
            };
            let (d, p) = step(&mut tape, dec, l4, &enc)?;
            let up = tape.bilinear_resize(p, h, w)?;
            cm.update(&labels[t], &argmax_channels(tape.value(up))?)?;
            dec = d;
            l4 = c;
        }
    }
    cm.report()
}

/// Reuses frame 0's decoder state for every later frame and applies the
/// static classifier to it.
pub fn copy_forward_cached(net: &StaticNet, data: &[SeqFeatures]) -> Result<MetricsReport> {
    evaluate_cached(data, net.config.classes, |tape, dec, _l4, _| {
        let pred = net.classifier().forward(tape, &net.params, dec)?;
        Ok((dec, pred))
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellRun {
    pub report: MetricsReport,
    pub epochs: usize,
    pub losses: Vec<f64>,
}

/// Trains a fresh cell for `ceil(epochs * stop_at_fraction)` epochs and
/// scores it on `val`.
pub fn train_cell(
    genotype: &Genotype,
    static_net: &StaticNet,
    train: &[SeqFeatures],
    val: &[SeqFeatures],
    cfg: &CellTrainConfig,
    stop_at_fraction: f64,
    seed: u64,
) -> Result<(CellTrainer, CellRun)> {
    if !(stop_at_fraction > 0.0 && stop_at_fraction <= 1.0) {
        return Err(Error::Config(format!("stop fraction {stop_at_fraction} outside (0,1]")));
    }
    let epochs = (cfg.epochs as f64 * stop_at_fraction).ceil() as usize;
    let mut trainer = CellTrainer::new(genotype, static_net, cfg, seed)?;
    let losses = trainer.run_epochs(train, epochs)?;
    let report = trainer.evaluate(val, static_net.config.classes)?;
    Ok((
        trainer,
        CellRun {
            report,
            epochs,
            losses,
        },
    ))
}

fn sequence_batches(ds: &Dataset, indices: &[usize], batch: usize, shuffle: bool, seed: u64) -> Result<Vec<crate::data::Batch>> {
    let (h, w) = (ds.config.height, ds.config.width);
    batches(
        ds,
        indices,
        &BatchConfig {
            batch_size: batch,
            crop: h.min(w),
            scale_range: (1.0, 1.0),
            shuffle,
        },
        seed,
    )
}

/// Joint training of static network and cell: SGD with momentum for the
/// static weights, Adam for the cell. Returns per-step losses.
pub fn finetune(
    static_net: &mut StaticNet,
    cell: &mut CellNet,
    ds: &Dataset,
    train: &[usize],
    cfg: &FinetuneConfig,
    cell_lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut sgd = SgdMomentum::new(cfg.momentum);
    let mut adam = Adam::new();
    static_net.params.set_trainable(true);
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        for b in sequence_batches(ds, train, cfg.batch_size, true, seed.wrapping_add(epoch as u64))? {
            let mut tape = Tape::new();
            let frames: Vec<_> = b.frames.iter().map(|f| tape.constant(f.clone())).collect();
            let labels: Vec<Option<&[u8]>> = b.labels.iter().map(|l| Some(l.as_slice())).collect();
            let loss = sequence_loss(&mut tape, static_net, &static_net.params, cell, &cell.params, &frames, &labels)?;
            losses.push(tape.value(loss).item());
            let grads = tape.backward(loss)?;
            static_net.params.zero_grad();
            cell.params.zero_grad();
            grads.accumulate_into(&mut static_net.params);
            grads.accumulate_into(&mut cell.params);
            sgd.step(&mut static_net.params, cfg.static_lr);
            adam.step(&mut cell.params, cell_lr);
        }
    }
    static_net.params.zero_grad();
    cell.params.zero_grad();
    Ok(losses)
}

/// End-to-end reward on frames `1..`: static network on frame 0, the cell
/// afterwards, straight from images.
pub fn evaluate_end_to_end(static_net: &StaticNet, cell: &CellNet, ds: &Dataset, indices: &[usize]) -> Result<MetricsReport> {
    let (h, w) = (ds.config.height, ds.config.width);
    let mut cm = ConfusionMatrix::new(ds.config.classes);
    for b in sequence_batches(ds, indices, 16, false, 0)? {
        let mut tape = Tape::new();
        let x0 = tape.constant(b.frames[0].clone());
        let mut prev = static_net.forward(&mut tape, &static_net.params, x0)?;
        for t in 1..b.frames.len() {
            let x = tape.constant(b.frames[t].clone());
            let cur = crate::segnet::dynamic_forward(&mut tape, static_net, &static_net.params, cell, &cell.params, &prev, x)?;
            let up = tape.bilinear_resize(cur.pred, h, w)?;
            cm.update(&b.labels[t], &argmax_channels(tape.value(up))?)?;
            prev = cur;
        }
    }
    cm.report()
}

/// The frozen copy-forward baseline from images: frame 0's decoder state
/// and the static classifier for every later frame.
pub fn evaluate_copy_forward(static_net: &StaticNet, ds: &Dataset, indices: &[usize]) -> Result<MetricsReport> {
    let (h, w) = (ds.config.height, ds.config.width);
    let mut cm = ConfusionMatrix::new(ds.config.classes);
    for b in sequence_batches(ds, indices, 16, false, 0)? {
        let mut tape = Tape::new();
        let x0 = tape.constant(b.frames[0].clone());
        let first = static_net.forward(&mut tape, &static_net.params, x0)?;
        let up = tape.bilinear_resize(first.pred, h, w)?;
        let pred = argmax_channels(tape.value(up))?;
        for t in 1..b.frames.len() {
            cm.update(&b.labels[t], &pred)?;
        }
    }
    cm.report()
}
