use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use agln::data::{generate_corpus, CorpusSpec, Raster, SegSample, Split};
use agln::metrics::EvalOptions;
use agln::model::{dump_features, dump_stage_names, Model, ModelConfig, Variant};
use agln::run::{analyze_text, env_threads, eval_checkpoint, gradcheck_suite, train, RunConfig};
use agln::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "agln", version, about = "Segmentation decoder experiments on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus to disk.
    Gen(GenArgs),
    /// Train a model and write checkpoints plus a metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradArgs),
    /// Print parameter, FLOP and descriptor-memory counts.
    Analyze(AnalyzeArgs),
    /// Write per-channel feature maps of one image as PGM files.
    Dump(DumpArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Corpus config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_train: Option<usize>,
    #[arg(long)]
    num_val: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    clutter: Option<f64>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    variant: Option<Variant>,
    /// Shorthand for `--variant agln_dense`.
    #[arg(long, conflicts_with = "variant")]
    dense: bool,
    /// Descriptor count N.
    #[arg(long)]
    descriptors: Option<usize>,
    /// Decoder width C.
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Four comma-separated encoder stage widths.
    #[arg(long, value_delimiter = ',')]
    encoder_widths: Option<Vec<usize>>,
    /// Uniform pooling weights instead of learned attention.
    #[arg(long)]
    gap_mode: bool,
    #[arg(long)]
    no_cr: bool,
    #[arg(long)]
    no_sg: bool,
    /// Pin α to 1 and keep it out of the optimizer.
    #[arg(long)]
    fixed_alpha: bool,
    /// Pin β to 1 and keep it out of the optimizer.
    #[arg(long)]
    fixed_beta: bool,
    /// Depthwise-separable fusion convolutions.
    #[arg(long)]
    lite: bool,
}

impl ModelArgs {
    fn apply(&self, cfg: &mut ModelConfig) -> Result<()> {
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if self.dense {
            cfg.variant = Variant::AglnDense;
        }
        if let Some(n) = self.descriptors {
            cfg.descriptors = n;
        }
        if let Some(c) = self.channels {
            cfg.channels = c;
        }
        if let Some(k) = self.classes {
            cfg.classes = k;
        }
        if let Some(w) = &self.encoder_widths {
            cfg.encoder_widths = w
                .clone()
                .try_into()
                .map_err(|w: Vec<usize>| Error::Config(format!("--encoder-widths needs 4 values, got {}", w.len())))?;
        }
        cfg.gap_mode |= self.gap_mode;
        cfg.enable_cr &= !self.no_cr;
        cfg.enable_sg &= !self.no_sg;
        cfg.alpha_learnable &= !self.fixed_alpha;
        cfg.beta_learnable &= !self.fixed_beta;
        cfg.lite |= self.lite;
        cfg.validate()
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Run config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lr_power: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable random horizontal flips during training.
    #[arg(long)]
    no_flip_aug: bool,
    /// Training scale range `lo,hi`.
    #[arg(long, value_delimiter = ',')]
    aug_scale: Option<Vec<f64>>,
    /// Training crop `h,w`.
    #[arg(long, value_delimiter = ',')]
    crop: Option<Vec<usize>>,
    /// Validation scales, comma separated.
    #[arg(long, value_delimiter = ',')]
    eval_scales: Option<Vec<f64>>,
    #[arg(long)]
    eval_flip: bool,
}

impl TrainArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::read(p)?,
            None => RunConfig::default(),
        };
        cfg.threads = env_threads();
        self.model.apply(&mut cfg.model)?;
        if let Some(p) = &self.corpus {
            cfg.corpus.clone_from(p);
        }
        if let Some(p) = &self.out {
            cfg.out_dir.clone_from(p);
        }
        macro_rules! set {
            ($($arg:ident => $field:ident),*) => {$(
                if let Some(v) = self.$arg {
                    cfg.$field = v;
                }
            )*};
        }
        set!(epochs => epochs, batch_size => batch_size, lr => base_lr, momentum => momentum,
             weight_decay => weight_decay, lr_power => lr_power, seed => seed);
        cfg.aug_flip &= !self.no_flip_aug;
        if let Some(s) = &self.aug_scale {
            let &[lo, hi] = &s[..] else {
                return Err(Error::Config(format!("--aug-scale needs 2 values, got {}", s.len())));
            };
            cfg.aug_scale = [lo, hi];
        }
        if let Some(c) = &self.crop {
            let &[h, w] = &c[..] else {
                return Err(Error::Config(format!("--crop needs 2 values, got {}", c.len())));
            };
            cfg.crop = Some((h, w));
        }
        if let Some(s) = &self.eval_scales {
            cfg.eval_scales.clone_from(s);
        }
        cfg.eval_flip |= self.eval_flip;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "val")]
    split: Split,
    /// Evaluation scales, comma separated; single-scale when omitted.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    #[arg(long)]
    flip: bool,
}

#[derive(Args)]
struct GradArgs {
    /// Run only these cases (repeatable).
    #[arg(long = "case")]
    cases: Vec<String>,
    /// Perturb the analytic gradient of one case to confirm failures surface.
    #[arg(long)]
    corrupt: Option<String>,
    /// List the case names and exit.
    #[arg(long)]
    list: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Run or model config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PPM image.
    #[arg(long)]
    image: PathBuf,
    /// Stage to dump; lists the available stages when omitted.
    #[arg(long)]
    stage: Option<String>,
    #[arg(long, default_value = "dump")]
    out: PathBuf,
}

fn stdout_line(out: &mut impl Write, text: &str) -> Result<()> {
    write!(out, "{text}").map_err(|e| Error::Io {
        path: "<stdout>".into(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut out = io::stdout().lock();
    match cli.command {
        Command::Gen(a) => {
            let mut spec = match &a.config {
                Some(p) => CorpusSpec::from_kv(&std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.display().to_string(),
                    source: e,
                })?)?,
                None => CorpusSpec::default(),
            };
            macro_rules! set {
                ($($f:ident),*) => {$(
                    if let Some(v) = a.$f {
                        spec.$f = v;
                    }
                )*};
            }
            set!(seed, num_train, num_val, height, width, classes, clutter);
            let manifest = generate_corpus(&spec, &a.out)?;
            stdout_line(
                &mut out,
                &format!("wrote {} samples to {}\n", manifest.entries.len(), a.out.display()),
            )?;
        }
        Command::Train(a) => {
            let cfg = a.config()?;
            stdout_line(&mut out, &cfg.to_kv())?;
            let summary = train(&cfg, &mut out)?;
            let best = summary.best();
            stdout_line(
                &mut out,
                &format!(
                    "best epoch={} miou={:.6} pixacc={:.6} checkpoint={}\n",
                    best.epoch,
                    best.miou,
                    best.pixacc,
                    summary.best_checkpoint.display()
                ),
            )?;
        }
        Command::Eval(a) => {
            let opts = EvalOptions {
                scales: a.scales.unwrap_or_default(),
                flip: a.flip,
                threads: env_threads(),
            };
            let report = eval_checkpoint(&a.checkpoint, &a.corpus, a.split, &opts)?;
            stdout_line(&mut out, &report.to_string())?;
        }
        Command::Gradcheck(a) => {
            if a.list {
                stdout_line(&mut out, &format!("{}\n", agln::run::CASES.join("\n")))?;
                return Ok(ExitCode::SUCCESS);
            }
            let filter = (!a.cases.is_empty()).then_some(&a.cases[..]);
            let cases = gradcheck_suite(filter, a.corrupt.as_deref())?;
            for c in &cases {
                stdout_line(&mut out, &format!("{}\n", c.line()))?;
            }
            if let Some(bad) = cases.iter().find(|c| !c.report.pass) {
                return Err(Error::Numerical(format!(
                    "gradient check failed for {} (worst coordinate {:?})",
                    bad.name, bad.report.worst
                )));
            }
        }
        Command::Analyze(a) => {
            let mut cfg = match &a.config {
                Some(p) => RunConfig::read(p)?.model,
                None => ModelConfig::default(),
            };
            a.model.apply(&mut cfg)?;
            stdout_line(&mut out, &analyze_text(&cfg, a.height, a.width)?)?;
        }
        Command::Dump(a) => {
            let mut model = Model::<f32>::load(&a.checkpoint)?;
            let raster = Raster::read(&a.image)?;
            let mask = Raster::gray(raster.width, raster.height, vec![0; raster.width * raster.height]);
            let sample = SegSample::from_rasters("dump", &raster, &mask)?;
            match a.stage {
                None => {
                    let names = dump_stage_names(&mut model, &sample.image)?;
                    stdout_line(&mut out, &format!("{}\n", names.join("\n")))?;
                }
                Some(stage) => {
                    let files = dump_features(&mut model, &sample.image, &stage, &a.out)?;
                    stdout_line(&mut out, &format!("wrote {} maps to {}\n", files.len(), a.out.display()))?;
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

