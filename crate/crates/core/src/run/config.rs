use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::AugmentPolicy;
use crate::error::{Error, Result};
use crate::kv::{join, KvMap};
use crate::model::ModelConfig;
use crate::nn::SgdConfig;

const RUN_KEYS: [&str; 15] = [
    "corpus",
    "out_dir",
    "epochs",
    "batch_size",
    "base_lr",
    "momentum",
    "weight_decay",
    "lr_power",
    "seed",
    "aug_flip",
    "aug_scale",
    "crop",
    "eval_scales",
    "eval_flip",
    "threads",
];

/// Everything a training run needs besides the corpus itself.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Directory holding `manifest.tsv`.
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_power: f64,
    pub seed: u64,
    pub aug_flip: bool,
    pub aug_scale: [f64; 2],
    /// Training crop; `None` keeps each sample's own size.
    pub crop: Option<(usize, usize)>,
    /// Empty for single-scale validation.
    pub eval_scales: Vec<f64>,
    pub eval_flip: bool,
    /// Evaluation workers; metrics do not depend on it.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        RunConfig {
            model: ModelConfig::default(),
            corpus: PathBuf::from("corpus"),
            out_dir: PathBuf::from("run"),
            epochs: 40,
            batch_size: 4,
            base_lr: sgd.base_lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            lr_power: sgd.power,
            seed: 0,
            aug_flip: true,
            aug_scale: [0.5, 2.0],
            crop: None,
            eval_scales: Vec::new(),
            eval_flip: false,
            threads: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(self.lr_power > 0.0) {
            return Err(Error::Config(format!("lr_power must be positive, got {}", self.lr_power)));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if let Some(s) = self.eval_scales.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Config(format!("eval_scales entry {s} must be positive")));
        }
        let [lo, hi] = self.aug_scale;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("aug_scale [{lo}, {hi}] must satisfy 0 < lo <= hi")));
        }
        if matches!(self.crop, Some((0, _) | (_, 0))) {
            return Err(Error::Config("crop extents must be positive".into()));
        }
        Ok(())
    }

    pub fn sgd(&self, total_iter: usize) -> SgdConfig {
        SgdConfig {
            base_lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            power: self.lr_power,
            total_iter,
        }
    }

    /// Augmentation for samples of size `h×w`.
    pub fn augment_policy(&self, h: usize, w: usize) -> AugmentPolicy {
        AugmentPolicy {
            flip: self.aug_flip,
            scale_range: self.aug_scale,
            crop: self.crop.unwrap_or((h, w)),
        }
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        self.model.write_kv(&mut s);
        let crop = match self.crop {
            Some((h, w)) => format!("{h},{w}"),
            None => "auto".into(),
        };
        let lines = [
            ("corpus", self.corpus.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("lr_power", self.lr_power.to_string()),
            ("seed", self.seed.to_string()),
            ("aug_flip", self.aug_flip.to_string()),
            ("aug_scale", join(&self.aug_scale)),
            ("crop", crop),
            ("eval_scales", join(&self.eval_scales)),
            ("eval_flip", self.eval_flip.to_string()),
            ("threads", self.threads.to_string()),
        ];
        for (k, v) in lines {
            writeln!(s, "{k} = {v}").expect("writing to a String");
        }
        s
    }

    /// Parses a config file body; absent keys keep their defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let map = KvMap::parse(text)?;
        let known: Vec<&str> = crate::model::MODEL_KEYS.iter().chain(&RUN_KEYS).copied().collect();
        map.check_keys(&known)?;
        let mut cfg = RunConfig {
            model: ModelConfig::from_kv_map(&map)?,
            ..RunConfig::default()
        };
        if let Some(p) = map.raw("corpus") {
            cfg.corpus = p.into();
        }
        if let Some(p) = map.raw("out_dir") {
            cfg.out_dir = p.into();
        }
        macro_rules! read {
            ($($f:ident),*) => {$(
                if let Some(v) = map.get(stringify!($f))? {
                    cfg.$f = v;
                }
            )*};
        }
        read!(epochs, batch_size, base_lr, momentum, weight_decay, lr_power, seed, aug_flip, eval_flip, threads);
        if let Some(v) = map.get_list::<f64>("aug_scale")? {
            cfg.aug_scale = v
                .try_into()
                .map_err(|v: Vec<f64>| Error::Config(format!("aug_scale needs 2 values, got {}", v.len())))?;
        }
        if let Some(raw) = map.raw("crop") {
            cfg.crop = if raw == "auto" {
                None
            } else {
                let v = map.get_list::<usize>("crop")?.unwrap_or_default();
                let [h, w] = v[..] else {
                    return Err(Error::Config(format!("crop needs `auto` or 2 values, got `{raw}`")));
                };
                Some((h, w))
            };
        }
        if let Some(v) = map.get_list::<f64>("eval_scales")? {
            cfg.eval_scales = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text)
    }
}
