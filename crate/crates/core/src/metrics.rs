//! Confusion-matrix segmentation metrics and the search reward.

use cellsearch_tensor::{Tensor, IGNORE_LABEL};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[t * classes + p]` = pixels of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub fwiou: f64,
    pub macc: f64,
    pub reward: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one label/prediction map pair. Ignored labels are skipped.
    pub fn update(&mut self, labels: &[u8], preds: &[u8]) -> Result<()> {
        if labels.len() != preds.len() {
            return Err(Error::Metrics(format!(
                "{} labels but {} predictions",
                labels.len(),
                preds.len()
            )));
        }
        for (i, (&t, &p)) in labels.iter().zip(preds).enumerate() {
            if t == IGNORE_LABEL {
                continue;
            }
            if t as usize >= self.classes {
                return Err(Error::Metrics(format!(
                    "label {t} at pixel {i} outside {} classes",
                    self.classes
                )));
            }
            if p as usize >= self.classes {
                return Err(Error::Metrics(format!(
                    "prediction {p} at pixel {i} outside {} classes",
                    self.classes
                )));
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Metrics("merging matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Label pixels per class (row sums).
    pub fn label_counts(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|t| (0..self.classes).map(|p| self.get(t, p)).sum())
            .collect()
    }

    fn pred_counts(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|p| (0..self.classes).map(|t| self.get(t, p)).sum())
            .collect()
    }

    fn nonempty(&self) -> Result<u64> {
        match self.total() {
            0 => Err(Error::Metrics("no scored pixels".into())),
            n => Ok(n),
        }
    }

    /// Per-class IoU; `None` for classes absent from the labels.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let rows = self.label_counts();
        let cols = self.pred_counts();
        (0..self.classes)
            .map(|c| {
                if rows[c] == 0 {
                    return None;
                }
                let tp = self.get(c, c);
                Some(tp as f64 / (rows[c] + cols[c] - tp) as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        self.nonempty()?;
        Ok(mean_present(&self.iou()))
    }

    pub fn fwiou(&self) -> Result<f64> {
        let total = self.nonempty()? as f64;
        let rows = self.label_counts();
        Ok(self
            .iou()
            .iter()
            .zip(&rows)
            .filter_map(|(iou, &n)| iou.map(|v| v * n as f64 / total))
            .sum())
    }

    pub fn macc(&self) -> Result<f64> {
        self.nonempty()?;
        let rows = self.label_counts();
        let acc: Vec<Option<f64>> = (0..self.classes)
            .map(|c| (rows[c] > 0).then(|| self.get(c, c) as f64 / rows[c] as f64))
            .collect();
        Ok(mean_present(&acc))
    }

    /// Geometric mean of mIoU, fwIoU and mAcc.
    pub fn reward(&self) -> Result<f64> {
        Ok(self.report()?.reward)
    }

    pub fn report(&self) -> Result<MetricsReport> {
        let miou = self.miou()?;
        let fwiou = self.fwiou()?;
        let macc = self.macc()?;
        Ok(MetricsReport {
            miou,
            fwiou,
            macc,
            reward: geometric_mean(miou, fwiou, macc),
        })
    }
}

fn mean_present(values: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    present.iter().sum::<f64>() / present.len() as f64
}

pub fn geometric_mean(a: f64, b: f64, c: f64) -> f64 {
    (a * b * c).cbrt()
}

/// Per-pixel argmax over channels of `(N, C, H, W)` logits, `(N, H, W)` order.
pub fn argmax_channels(logits: &Tensor) -> Result<Vec<u8>> {
    let (n, c, h, w) = logits.shape().as_nchw("argmax")?;
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for ni in 0..n {
        for i in 0..hw {
            let mut best = 0;
            for ci in 1..c {
                if d[(ni * c + ci) * hw + i] > d[(ni * c + best) * hw + i] {
                    best = ci;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}
