//! The epoch loop.
//!
//! A producer thread augments batch `b + 1` while the consumer runs the
//! forward/backward pass of batch `b`; a bounded channel hands over each
//! batch exactly once.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{build_res3atn, Network};
use crate::data::{augment, eval_preprocess, ClipDataset, LabeledClip};
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::tensor::{BnMode, Tape, Tensor};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::metrics::{evaluate, MetricsLog, MetricsRecord, Split, Tally};

pub struct TrainReport {
    /// Parameters after the last epoch.
    pub network: Network<f32>,
    pub records: Vec<MetricsRecord>,
    /// Training loss of every step, in order.
    pub losses: Vec<f32>,
    pub best_epoch: usize,
    pub best_top1: f64,
    /// Eval-split record of the last epoch.
    pub final_eval: MetricsRecord,
}

/// Seed of the augmentation stream of one clip in one epoch.
pub fn clip_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Concatenates `[1, C, F, H, W]` clips into `[B, C, F, H, W]`.
pub fn stack_batch(items: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = items.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let dims = first.dims5()?;
    if dims[0] != 1 {
        return Err(Error::Shape(format!("batch items must have N = 1, got {:?}", first.shape())));
    }
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::Shape(format!("batch items differ: {:?} vs {:?}", first.shape(), t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[items.len(), dims[1], dims[2], dims[3], dims[4]], data)
}

fn check_classes(net: &Network<f32>, set: &ClipDataset, name: &str) -> Result<()> {
    let k = net.spec.num_classes;
    if set.classes.len() != k {
        return Err(Error::Data(format!(
            "{name} split has {} classes, network.num_classes is {k}",
            set.classes.len()
        )));
    }
    if let Some(c) = set.clips.iter().find(|c| c.label >= k) {
        return Err(Error::Data(format!("{name} clip {} has label {} >= {k}", c.id, c.label)));
    }
    Ok(())
}

/// One SGD step on a prepared batch; returns the loss and the logits.
fn step(net: &mut Network<f32>, opt: &mut Sgd<f32>, x: Tensor<f32>, labels: &[usize], id: &str) -> Result<(f32, Vec<f32>)> {
    let mut tape = Tape::new();
    let x = tape.constant(x);
    let out = net.forward(&mut tape, &x, BnMode::Train)?;
    let loss = tape.softmax_cross_entropy(&out.logits, labels)?;
    let value = loss.value().item()?;
    if !value.is_finite() {
        return Err(Error::Train(format!("non-finite loss {value} at {id}")));
    }
    tape.backward(&loss)?;
    net.params.accumulate_grads(&tape)?;
    opt.step(&mut net.params)?;
    Ok((value, out.logits.data().to_vec()))
}

struct Outputs {
    log: MetricsLog,
    losses: fs::File,
}

fn write_summary(dir: &Path, cfg: &RunConfig, records: &[MetricsRecord], best: (usize, f64), params: usize) -> Result<()> {
    let mut s = String::new();
    s.push_str("| epoch | split | loss | top-1 | top-k | k |\n|---|---|---|---|---|---|\n");
    let last = records.iter().map(|r| r.epoch).max().unwrap_or(0);
    for r in records.iter().filter(|r| r.epoch == last) {
        s.push_str(&format!(
            "| {} | {} | {:.4} | {:.2} | {:.2} | {} |\n",
            r.epoch,
            serde_json::to_string(&r.split).expect("split serializes").trim_matches('"'),
            r.loss,
            r.top1,
            r.top5,
            r.k
        ));
    }
    s.push_str(&format!(
        "\nsites {:?}, {params} parameters, best eval top-1 {:.2} at epoch {}\n",
        cfg.network.attention_sites, best.1, best.0
    ));
    let path = dir.join("summary.md");
    fs::write(&path, s).map_err(|e| Error::io(&path, e))
}

/// Trains a fresh network described by `cfg`.
///
/// With `out_dir` set, writes `config.toml`, `metrics.jsonl`, `losses.tsv`
/// (`epoch`, `batch`, `loss` per step), `last.ckpt`, `best.ckpt` and
/// `summary.md` there.
pub fn train(cfg: &RunConfig, train_set: &ClipDataset, eval_set: &ClipDataset, out_dir: Option<&Path>) -> Result<TrainReport> {
    train_with_progress(cfg, train_set, eval_set, out_dir, &mut |_| {})
}

/// As `train`, calling `progress` with every metrics record as it is made.
pub fn train_with_progress(
    cfg: &RunConfig,
    train_set: &ClipDataset,
    eval_set: &ClipDataset,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut net = build_res3atn::<f32>(&cfg.network)?;
    check_classes(&net, train_set, "train")?;
    check_classes(&net, eval_set, "eval")?;
    if eval_set.is_empty() {
        return Err(Error::Data("eval split is empty".into()));
    }
    let bs = cfg.run.batch_size;
    if cfg.run.epochs > 0 && train_set.len() < bs {
        return Err(Error::Data(format!(
            "train split has {} clips, fewer than batch_size {bs}",
            train_set.len()
        )));
    }
    let config_text = cfg.to_toml();
    let mut outputs = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("config.toml");
            fs::write(&p, &config_text).map_err(|e| Error::io(&p, e))?;
            let p = dir.join("losses.tsv");
            let mut losses = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            writeln!(losses, "epoch\tbatch\tloss").map_err(|e| Error::io(&p, e))?;
            Some(Outputs {
                log: MetricsLog::create(&dir.join("metrics.jsonl"))?,
                losses,
            })
        }
        None => None,
    };
    let mut opt = Sgd::new(cfg.optimizer, &net.params);
    let start = Instant::now();
    let mut records = Vec::new();
    let mut losses = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY);

    if cfg.run.epochs == 0 {
        // initial running statistics become usable once they have been saved
        let ck = Checkpoint::capture(&net, Some(&opt), 0, &config_text);
        let bytes = ck.to_bytes()?;
        Checkpoint::from_bytes(&bytes, Path::new("<memory>"))?.restore(&mut net, None)?;
        let mut r = evaluate(&mut net, eval_set, &cfg.augment, bs, 0, Split::Eval)?;
        r.wall_seconds = start.elapsed().as_secs_f64();
        best = (0, r.top1);
        progress(&r);
        if let (Some(dir), Some(o)) = (out_dir, outputs.as_mut()) {
            o.log.append(&r)?;
            ck.save(&dir.join("last.ckpt"))?;
            ck.save(&dir.join("best.ckpt"))?;
            write_summary(dir, cfg, std::slice::from_ref(&r), best, net.param_count())?;
        }
        records.push(r.clone());
        return Ok(TrainReport {
            network: net,
            records,
            losses,
            best_epoch: 0,
            best_top1: best.1,
            final_eval: r,
        });
    }

    let k = cfg.network.num_classes.min(5);
    let mut final_eval = None;
    for epoch in 1..=cfg.run.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(clip_seed(cfg.run.seed, epoch, usize::MAX));
        order.shuffle(&mut shuffle_rng);
        let batches: Vec<&[usize]> = order.chunks_exact(bs).collect();
        let mut tally = Tally::default();

        let epoch_losses = std::thread::scope(|s| -> Result<Vec<(usize, f32)>> {
            let (tx, rx) = sync_channel::<(usize, Result<Tensor<f32>>)>(2);
            let aug = &cfg.augment;
            let batches = &batches;
            s.spawn(move || {
                for (b, idx) in batches.iter().enumerate() {
                    let prepared = idx
                        .iter()
                        .map(|&i| {
                            let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(aug.seed, epoch, i));
                            augment(&train_set.clips[i], aug, &mut rng)
                        })
                        .collect::<Result<Vec<_>>>()
                        .and_then(|v| stack_batch(&v));
                    if tx.send((b, prepared)).is_err() {
                        break;
                    }
                }
            });
            let mut out = Vec::with_capacity(batches.len());
            for (b, prepared) in rx {
                let labels: Vec<usize> = batches[b].iter().map(|&i| train_set.clips[i].label).collect();
                let (loss, logits) = step(&mut net, &mut opt, prepared?, &labels, &format!("epoch {epoch} batch {b}"))?;
                tally.add(&logits, &labels, loss as f64, k);
                out.push((b, loss));
            }
            Ok(out)
        })?;

        let now = || start.elapsed().as_secs_f64();
        let train_rec = tally.record(epoch, Split::Train, k, now());
        let mut train_eval = evaluate(&mut net, train_set, &cfg.augment, bs, epoch, Split::TrainEval)?;
        train_eval.wall_seconds = now();
        let mut eval = evaluate(&mut net, eval_set, &cfg.augment, bs, epoch, Split::Eval)?;
        eval.wall_seconds = now();
        let improved = eval.top1 > best.1;
        if improved {
            best = (epoch, eval.top1);
        }
        if let (Some(dir), Some(o)) = (out_dir, outputs.as_mut()) {
            for (b, l) in &epoch_losses {
                writeln!(o.losses, "{epoch}\t{b}\t{l:?}").map_err(|e| Error::io(dir.join("losses.tsv"), e))?;
            }
            for r in [&train_rec, &train_eval, &eval] {
                o.log.append(r)?;
            }
            let ck = Checkpoint::capture(&net, Some(&opt), epoch, &config_text);
            ck.save(&dir.join("last.ckpt"))?;
            if improved {
                ck.save(&dir.join("best.ckpt"))?;
            }
        }
        for r in [&train_rec, &train_eval, &eval] {
            progress(r);
        }
        losses.extend(epoch_losses.iter().map(|p| p.1));
        records.extend([train_rec, train_eval, eval.clone()]);
        final_eval = Some(eval);
    }
    if let Some(dir) = out_dir {
        write_summary(dir, cfg, &records, best, net.param_count())?;
    }
    Ok(TrainReport {
        network: net,
        records,
        losses,
        best_epoch: best.0,
        best_top1: best.1,
        final_eval: final_eval.expect("at least one epoch"),
    })
}

/// Repeats SGD on one fixed batch (evaluation preprocessing, training-mode
/// BN) until the loss drops below `target` or `max_steps` is reached.
/// Returns the loss of every step taken.
pub fn overfit_batch(cfg: &RunConfig, clips: &[LabeledClip], max_steps: usize, target: f32) -> Result<Vec<f32>> {
    cfg.validate()?;
    let mut net = build_res3atn::<f32>(&cfg.network)?;
    let mut opt = Sgd::new(cfg.optimizer, &net.params);
    let inputs = clips
        .iter()
        .map(|c| eval_preprocess(c, &cfg.augment))
        .collect::<Result<Vec<_>>>()?;
    let x = stack_batch(&inputs)?;
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    let mut losses = Vec::new();
    for s in 0..max_steps {
        let (loss, _) = step(&mut net, &mut opt, x.clone(), &labels, &format!("step {s}"))?;
        losses.push(loss);
        if loss < target {
            break;
        }
    }
    Ok(losses)
}
