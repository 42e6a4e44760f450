//! Top-k accuracy, evaluation and the line-delimited metrics log.
//!
//! `metrics.jsonl` holds one JSON object per line with keys `epoch`, `split`
//! (`train`, `train-eval` or `eval`), `loss`, `top1`, `top5`, `k` (the k
//! used for `top5`, `min(5, classes)`), `samples` and `wall_seconds`.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::Network;
use crate::data::{eval_preprocess, AugmentConfig, ClipDataset};
use crate::error::{Error, Result};
use crate::tensor::{BnMode, Tape};

use super::trainer::stack_batch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    /// Running statistics over the training batches of one epoch.
    #[serde(rename = "train")]
    Train,
    /// The training clips under evaluation preprocessing.
    #[serde(rename = "train-eval")]
    TrainEval,
    #[serde(rename = "eval")]
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    /// Percent.
    pub top1: f64,
    /// Top-`k` percent.
    pub top5: f64,
    pub k: usize,
    pub samples: usize,
    pub wall_seconds: f64,
}

impl MetricsRecord {
    /// Same record with the wall clock zeroed, for reproducibility checks.
    pub fn without_time(&self) -> Self {
        Self {
            wall_seconds: 0.0,
            ..self.clone()
        }
    }

    pub fn summary(&self, topk: usize) -> String {
        let k = topk.min(self.k);
        if k <= 1 {
            format!("top1 {:.2} loss {:.6}", self.top1, self.loss)
        } else {
            format!("top1 {:.2} top{} {:.2} loss {:.6}", self.top1, self.k, self.top5, self.loss)
        }
    }
}

/// Whether `label` is among the `k` largest of `logits`; ties rank the lower
/// class index first.
pub fn topk_hit(logits: &[f32], label: usize, k: usize) -> bool {
    let target = logits[label];
    let rank = logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > target || (v == target && j < label))
        .count();
    rank < k
}

/// Accumulates loss and top-k counts over batches.
#[derive(Clone, Debug, Default)]
pub(crate) struct Tally {
    loss_sum: f64,
    top1: usize,
    topk: usize,
    n: usize,
}

impl Tally {
    pub(crate) fn add(&mut self, logits: &[f32], labels: &[usize], mean_loss: f64, k: usize) {
        let classes = logits.len() / labels.len().max(1);
        for (row, &label) in logits.chunks_exact(classes).zip(labels) {
            self.top1 += usize::from(topk_hit(row, label, 1));
            self.topk += usize::from(topk_hit(row, label, k));
        }
        self.loss_sum += mean_loss * labels.len() as f64;
        self.n += labels.len();
    }

    pub(crate) fn record(&self, epoch: usize, split: Split, k: usize, wall_seconds: f64) -> MetricsRecord {
        let n = self.n.max(1) as f64;
        MetricsRecord {
            epoch,
            split,
            loss: self.loss_sum / n,
            top1: 100.0 * self.top1 as f64 / n,
            top5: 100.0 * self.topk as f64 / n,
            k,
            samples: self.n,
            wall_seconds,
        }
    }
}

/// Evaluation-mode metrics over `set` with centered frames and center crops.
/// Partial final batches are kept.
pub fn evaluate(
    net: &mut Network<f32>,
    set: &ClipDataset,
    augment: &AugmentConfig,
    batch_size: usize,
    epoch: usize,
    split: Split,
) -> Result<MetricsRecord> {
    if set.is_empty() {
        return Err(Error::Data(format!("cannot evaluate an empty {split:?} split")));
    }
    if set.classes.len() != net.spec.num_classes {
        return Err(Error::Data(format!(
            "split has {} classes, network has {}",
            set.classes.len(),
            net.spec.num_classes
        )));
    }
    let k = net.spec.num_classes.min(5);
    let mut tally = Tally::default();
    for chunk in set.clips.chunks(batch_size.max(1)) {
        let inputs = chunk
            .iter()
            .map(|c| eval_preprocess(c, augment))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = chunk.iter().map(|c| c.label).collect();
        let mut tape = Tape::no_grad();
        let x = tape.constant(stack_batch(&inputs)?);
        let out = net.forward(&mut tape, &x, BnMode::Eval)?;
        let loss = tape.softmax_cross_entropy(&out.logits, &labels)?;
        tally.add(out.logits.data(), &labels, loss.value().item()? as f64, k);
    }
    Ok(tally.record(epoch, split, k, 0.0))
}

/// Appends records to `metrics.jsonl`.
pub struct MetricsLog {
    path: PathBuf,
    file: File,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record).expect("metrics serialize");
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<MetricsRecord>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::File {
                    path: path.to_path_buf(),
                    msg: format!("line {}: {e}", i + 1),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_hot_logits_are_perfect() {
        let mut t = Tally::default();
        let labels = [2, 0, 1, 3];
        let mut logits = vec![0.0; 16];
        for (i, &l) in labels.iter().enumerate() {
            logits[i * 4 + l] = 1.0;
        }
        t.add(&logits, &labels, 0.5, 4);
        let r = t.record(1, Split::Eval, 4, 0.0);
        assert_eq!((r.top1, r.top5, r.loss), (100.0, 100.0, 0.5));
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        let logits = [1.0, 1.0, 1.0, 0.0];
        assert!(topk_hit(&logits, 0, 1));
        assert!(!topk_hit(&logits, 1, 1));
        assert!(topk_hit(&logits, 1, 2));
        assert!(!topk_hit(&logits, 2, 2));
        assert!(topk_hit(&logits, 3, 4));
    }

    #[test]
    fn random_logits_score_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 4000;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let logits: Vec<f32> = (0..4 * n).map(|_| rng.random()).collect();
        let mut t = Tally::default();
        t.add(&logits, &labels, 0.0, 4);
        let r = t.record(0, Split::Eval, 4, 0.0);
        assert!((r.top1 - 25.0).abs() < 5.0, "{}", r.top1);
        assert_eq!(r.top5, 100.0);
        assert!(r.top1 <= r.top5);
    }

    #[test]
    fn log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut log = MetricsLog::create(&path).unwrap();
        let r = Tally::default().record(3, Split::TrainEval, 4, 1.5);
        log.append(&r).unwrap();
        log.append(&r).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"split\":\"train-eval\""));
        assert_eq!(MetricsLog::read(&path).unwrap(), vec![r.clone(), r]);
    }
}
