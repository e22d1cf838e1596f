//! Classification metrics and the CSV metrics log.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::shape(
            "accuracy",
            format!("{} predictions vs {} labels", preds.len(), labels.len()),
        ));
    }
    if preds.is_empty() {
        return Err(Error::UndefinedInput("accuracy of an empty set".into()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Row-wise argmax of a row-major `[n, k]` matrix; the first maximum wins.
pub fn argmax_rows(scores: &[f64], k: usize) -> Vec<usize> {
    scores
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Rank-statistic AUC with ties counted one half; `None` without both classes.
pub fn auc(scores: &[f64], targets: &[u8]) -> Option<f64> {
    let mut pairs: Vec<(f64, u8)> = scores.iter().copied().zip(targets.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let positives = pairs.iter().filter(|p| p.1 == 1).count() as u64;
    let negatives = pairs.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    // Twice the Mann-Whitney statistic, accumulated over tie groups.
    let mut twice_u = 0u64;
    let mut negatives_below = 0u64;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let pos = pairs[i..j].iter().filter(|p| p.1 == 1).count() as u64;
        let neg = (j - i) as u64 - pos;
        twice_u += pos * (2 * negatives_below + neg);
        negatives_below += neg;
        i = j;
    }
    Some(twice_u as f64 / (2 * positives * negatives) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MultiLabelMetrics {
    pub macro_acc: f64,
    pub micro_acc: f64,
    pub macro_auc: f64,
    pub micro_auc: f64,
    /// Classes left out of the macro AUC for lacking a positive or a negative.
    pub skipped: Vec<usize>,
}

/// Macro and micro accuracy and AUC of row-major `[n, m]` scores.
pub fn macro_micro_metrics(scores: &[f64], targets: &[u8], m: usize, threshold: f64) -> Result<MultiLabelMetrics> {
    if m == 0 || scores.is_empty() {
        return Err(Error::UndefinedInput("metrics need at least one row and one class".into()));
    }
    if scores.len() != targets.len() || scores.len() % m != 0 {
        return Err(Error::shape(
            "macro_micro_metrics",
            format!("{} scores, {} targets, {m} classes", scores.len(), targets.len()),
        ));
    }
    if targets.iter().any(|&t| t > 1) {
        return Err(Error::Label("targets must be 0 or 1".into()));
    }
    let n = scores.len() / m;
    let hit = |i: usize| u8::from(scores[i] >= threshold) == targets[i];
    let mut class_acc = Vec::with_capacity(m);
    let mut class_auc = Vec::with_capacity(m);
    let mut skipped = Vec::new();
    for j in 0..m {
        let idx: Vec<usize> = (0..n).map(|r| r * m + j).collect();
        class_acc.push(idx.iter().filter(|&&i| hit(i)).count() as f64 / n as f64);
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let t: Vec<u8> = idx.iter().map(|&i| targets[i]).collect();
        match auc(&s, &t) {
            Some(a) => class_auc.push(a),
            None => {
                log::warn!("class {j} has a single target value; left out of macro AUC");
                skipped.push(j);
            }
        }
    }
    if class_auc.is_empty() {
        return Err(Error::NoComputableAuc);
    }
    let micro_auc = auc(scores, targets).ok_or(Error::NoComputableAuc)?;
    Ok(MultiLabelMetrics {
        macro_acc: class_acc.iter().sum::<f64>() / m as f64,
        micro_acc: (0..scores.len()).filter(|&i| hit(i)).count() as f64 / scores.len() as f64,
        macro_auc: class_auc.iter().sum::<f64>() / class_auc.len() as f64,
        micro_auc,
        skipped,
    })
}

pub const METRICS_HEADER: &str = "epoch,step,split,metric,value,lr";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub lr: f64,
}

impl MetricRow {
    pub fn new(epoch: usize, step: usize, split: &str, metric: &str, value: f64, lr: f64) -> Self {
        MetricRow {
            epoch,
            step,
            split: split.into(),
            metric: metric.into(),
            value,
            lr,
        }
    }

    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}\n",
            self.epoch, self.step, self.split, self.metric, self.value, self.lr
        )
    }
}

/// Rows kept in memory and, when backed by a file, appended on each flush.
#[derive(Debug, Default)]
pub struct MetricsLog {
    rows: Vec<MetricRow>,
    flushed: usize,
    path: Option<PathBuf>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Creates (truncating) `path` with the header line.
    pub fn create(path: &Path) -> Result<Self> {
        std::fs::write(path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            rows: Vec::new(),
            flushed: 0,
            path: Some(path.to_path_buf()),
        })
    }

    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn values(&self, split: &str, metric: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| (r.epoch, r.value))
            .collect()
    }

    /// Appends pending rows with a single write.
    pub fn flush(&mut self) -> Result<()> {
        let Some(path) = &self.path else {
            self.flushed = self.rows.len();
            return Ok(());
        };
        if self.flushed == self.rows.len() {
            return Ok(());
        }
        let chunk: String = self.rows[self.flushed..].iter().map(MetricRow::to_csv).collect();
        let mut file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        file.write_all(chunk.as_bytes()).map_err(|e| Error::io(path, e))?;
        self.flushed = self.rows.len();
        Ok(())
    }
}
