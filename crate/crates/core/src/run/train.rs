use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::data::{augment, Manifest, SegSample, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions};
use crate::model::Model;
use crate::nn::{Sgd, IGNORE_LABEL};
use crate::tensor::{Tape, Tensor};

pub const LOCK_FILE: &str = "train.lock";
pub const METRICS_FILE: &str = "metrics.log";
pub const CONFIG_FILE: &str = "run.cfg";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "run directory {} is locked by another training process ({} exists)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's iterations.
    pub loss: f64,
    pub miou: f64,
    pub pixacc: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} loss={:.6} miou={:.6} pixacc={:.6}",
            self.epoch, self.loss, self.miou, self.pixacc
        )
    }
}

impl std::str::FromStr for EpochLog {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut fields = [None; 4];
        for part in line.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Parse { offset: 0, detail: format!("bad metrics field `{part}`") })?;
            let slot = ["epoch", "loss", "miou", "pixacc"].iter().position(|&n| n == k);
            if let Some(i) = slot {
                let v: f64 = v
                    .parse()
                    .map_err(|_| Error::Parse { offset: 0, detail: format!("bad number in `{part}`") })?;
                fields[i] = Some(v);
            }
        }
        match fields {
            [Some(e), Some(loss), Some(miou), Some(pixacc)] => Ok(EpochLog {
                epoch: e as usize,
                loss,
                miou,
                pixacc,
            }),
            _ => Err(Error::Parse {
                offset: 0,
                detail: format!("metrics line lacks a field: `{line}`"),
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub iterations: usize,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
}

impl TrainSummary {
    pub fn best(&self) -> &EpochLog {
        &self.epochs[self.best_epoch - 1]
    }
}

fn stack(batch: &[SegSample]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let (h, w) = (batch[0].height(), batch[0].width());
    if let Some(s) = batch.iter().find(|s| (s.height(), s.width()) != (h, w)) {
        return Err(Error::Data(format!(
            "{} is {}×{} but its batch is {h}×{w}; set a fixed crop",
            s.id,
            s.height(),
            s.width()
        )));
    }
    let mut pixels = Vec::with_capacity(batch.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(batch.len() * h * w);
    for s in batch {
        pixels.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.mask);
    }
    Ok((Tensor::new(&[batch.len(), 3, h, w], pixels)?, labels))
}

/// Best-checkpoint rule: higher validation mIoU wins and ties go to the
/// later epoch.
pub fn is_new_best(best: Option<f64>, miou: f64) -> bool {
    best.is_none_or(|m| miou >= m)
}

/// Trains `cfg.model` on the corpus train split, validating after every
/// epoch. Metric lines go to `log` and to the run directory.
pub fn train(cfg: &RunConfig, log: &mut dyn Write) -> Result<TrainSummary> {
    cfg.validate()?;
    let manifest = Manifest::read(&cfg.corpus)?;
    let classes = cfg.model.classes;
    let train_set = manifest.load(&cfg.corpus, Split::Train, classes)?;
    if train_set.is_empty() {
        return Err(Error::Data(format!("{} has no training samples", cfg.corpus.display())));
    }
    let val_set = manifest.load(&cfg.corpus, Split::Val, classes)?;
    let val_set = if val_set.is_empty() { train_set.clone() } else { val_set };

    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let _lock = RunLock::acquire(&cfg.out_dir)?;
    let cfg_path = cfg.out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_kv()).map_err(|e| Error::io(&cfg_path, e))?;
    let metrics_path = cfg.out_dir.join(METRICS_FILE);
    let mut metrics = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;

    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut sgd = Sgd::new(cfg.sgd(total))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let eval_opts = EvalOptions {
        scales: cfg.eval_scales.clone(),
        flip: cfg.eval_flip,
        threads: cfg.threads,
    };

    let best_checkpoint = cfg.out_dir.join(BEST_CHECKPOINT);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut iteration = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = idx
                .iter()
                .map(|&i| {
                    let s = &train_set[i];
                    augment(s, &mut rng, &cfg.augment_policy(s.height(), s.width()))
                })
                .collect::<Result<Vec<_>>>()?;
            let (images, labels) = stack(&batch)?;
            model.params_mut().zero_grad();
            let mut tape = Tape::new();
            let x = tape.constant(images);
            let logits = model.forward(&mut tape, x, true)?;
            let loss_var = tape.cross_entropy(logits, &labels, Some(IGNORE_LABEL))?;
            let loss = f64::from(tape.value(loss_var)[0]);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss is {loss} at iteration {iteration} (epoch {epoch})"
                )));
            }
            tape.backward_into(loss_var, model.params_mut())?;
            sgd.step(model.params_mut())?;
            loss_sum += loss;
            iteration += 1;
        }
        let acc = evaluate(&model, &val_set, &eval_opts)?;
        let entry = EpochLog {
            epoch,
            loss: loss_sum / per_epoch as f64,
            miou: acc.miou()?,
            pixacc: acc.pixacc()?,
        };
        writeln!(metrics, "{entry}").map_err(|e| Error::io(&metrics_path, e))?;
        writeln!(log, "{entry}").map_err(|e| Error::io("<log>", e))?;
        if is_new_best(best.map(|(_, m)| m), entry.miou) {
            best = Some((epoch, entry.miou));
            model.save(&best_checkpoint)?;
        }
        epochs.push(entry);
    }
    let final_checkpoint = cfg.out_dir.join(FINAL_CHECKPOINT);
    model.save(&final_checkpoint)?;
    Ok(TrainSummary {
        epochs,
        best_epoch: best.map_or(1, |(e, _)| e),
        iterations: iteration,
        best_checkpoint,
        final_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_the_later_epoch() {
        assert!(is_new_best(None, 0.0));
        assert!(is_new_best(Some(0.5), 0.5));
        assert!(is_new_best(Some(0.5), 0.6));
        assert!(!is_new_best(Some(0.5), 0.4));
    }

    #[test]
    fn epoch_lines_parse_back() {
        let e = EpochLog {
            epoch: 7,
            loss: 0.25,
            miou: 0.5,
            pixacc: 0.875,
        };
        assert_eq!(e.to_string(), "epoch=7 loss=0.250000 miou=0.500000 pixacc=0.875000");
        assert_eq!(e.to_string().parse::<EpochLog>().unwrap(), e);
        assert!("epoch=1 loss=2".parse::<EpochLog>().is_err());
    }
}
