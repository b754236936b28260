use std::fmt;
use std::path::Path;

use crate::data::{Manifest, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, metric_line, ConfusionAccumulator, EvalOptions};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub miou: f64,
    pub pixacc: f64,
    /// `None` for classes absent from both prediction and ground truth.
    pub class_iou: Vec<Option<f64>>,
    pub pixels: u64,
}

impl EvalReport {
    pub fn from_confusion(acc: &ConfusionAccumulator) -> Result<Self> {
        Ok(EvalReport {
            miou: acc.miou()?,
            pixacc: acc.pixacc()?,
            class_iou: acc.class_iou(),
            pixels: acc.total(),
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", metric_line("miou", self.miou))?;
        writeln!(f, "{}", metric_line("pixacc", self.pixacc))?;
        for (k, iou) in self.class_iou.iter().enumerate() {
            match iou {
                Some(v) => writeln!(f, "{}", metric_line(&format!("iou.class{k}"), v))?,
                None => writeln!(f, "{}", metric_line(&format!("iou.class{k}"), "absent"))?,
            }
        }
        writeln!(f, "{}", metric_line("pixels", self.pixels))
    }
}

/// Evaluates a saved model on one split of a corpus. The architecture comes
/// from the checkpoint itself.
pub fn eval_checkpoint(checkpoint: &Path, corpus: &Path, split: Split, opts: &EvalOptions) -> Result<EvalReport> {
    let model = Model::<f32>::load(checkpoint)?;
    let samples = Manifest::read(corpus)?.load(corpus, split, model.config().classes)?;
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "{} lists no {} samples",
            corpus.display(),
            split.name()
        )));
    }
    EvalReport::from_confusion(&evaluate(&model, &samples, opts)?)
}
