//! Analytic parameter, FLOP and descriptor-memory counts.
//!
//! FLOPs follow one convention throughout: 2 per multiply-accumulate,
//! 1 per output element for normalisation, activation, softmax, elementwise
//! arithmetic and (non-identity) bilinear resizing. Counts are per image.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::nn::ConvKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Encoder,
    Laterals,
    Sab,
    Sdm,
    Lrm,
    /// Decoder merges: FPN top-down, the minus-variant merges, Φ and the
    /// stage upsampling.
    Fusion,
    Heads,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Encoder,
        Group::Laterals,
        Group::Sab,
        Group::Sdm,
        Group::Lrm,
        Group::Fusion,
        Group::Heads,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Laterals => "laterals",
            Group::Sab => "sab",
            Group::Sdm => "sdm",
            Group::Lrm => "lrm",
            Group::Fusion => "fusion",
            Group::Heads => "heads",
        }
    }

    /// Group owning a parameter tensor, judged by its store name.
    pub fn of_param(name: &str) -> Group {
        if name.starts_with("encoder.") {
            Group::Encoder
        } else if name.starts_with("lateral") {
            Group::Laterals
        } else if name.starts_with("head.") {
            Group::Heads
        } else if name.contains(".sdm") {
            Group::Sdm
        } else if name.contains(".lrm.") {
            Group::Lrm
        } else if name.starts_with("decoder.sab") {
            Group::Sab
        } else {
            Group::Fusion
        }
    }
}

/// Per-group counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GroupCounts([u64; 7]);

impl GroupCounts {
    pub fn get(&self, g: Group) -> u64 {
        self.0[g as usize]
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    fn add(&mut self, g: Group, v: u64) {
        self.0[g as usize] += v;
    }
}

pub fn conv_params(kind: ConvKind, cin: usize, cout: usize, bias: bool) -> u64 {
    let w = match kind {
        ConvKind::Pointwise => cin * cout,
        ConvKind::Standard3x3 => 9 * cin * cout,
        ConvKind::Separable3x3 => 9 * cin + cin * cout,
    };
    (w + if bias { cout } else { 0 }) as u64
}

/// FLOPs of one convolution producing an `ho×wo` map.
pub fn conv_flops(kind: ConvKind, cin: usize, cout: usize, ho: usize, wo: usize, bias: bool) -> u64 {
    let p = (ho * wo) as u64;
    let (cin, cout) = (cin as u64, cout as u64);
    let macs = match kind {
        ConvKind::Pointwise => cin * cout * p,
        ConvKind::Standard3x3 => 9 * cin * cout * p,
        ConvKind::Separable3x3 => 9 * cin * p + cin * cout * p,
    };
    2 * macs + if bias { cout * p } else { 0 }
}

fn cbr_params(kind: ConvKind, cin: usize, cout: usize) -> u64 {
    conv_params(kind, cin, cout, false) + 2 * cout as u64
}

/// Convolution, batch norm and ReLU.
fn cbr_flops(kind: ConvKind, cin: usize, cout: usize, ho: usize, wo: usize) -> u64 {
    conv_flops(kind, cin, cout, ho, wo, false) + 2 * (cout * ho * wo) as u64
}

fn merge_kind(cfg: &ModelConfig) -> ConvKind {
    if cfg.lite {
        ConvKind::Separable3x3
    } else {
        ConvKind::Standard3x3
    }
}

/// Aggregation FLOPs on an `hw`-position map.
pub fn sab_flops(c: usize, n: usize, hw: usize, gap_mode: bool) -> u64 {
    let (c, n, hw) = (c as u64, n as u64, hw as u64);
    let phi = 2 * c * c * hw + c * hw;
    let theta = if gap_mode { 0 } else { 2 * n * c * hw + n * hw };
    phi + theta + 2 * c * hw * n
}

/// Distribution FLOPs on an `hw`-position map, Ψ included.
pub fn sdm_flops(c: usize, n: usize, h: usize, w: usize, psi: ConvKind) -> u64 {
    let (cc, nn, hw) = (c as u64, n as u64, (h * w) as u64);
    let varphi = 2 * nn * cc * hw + nn * hw;
    let softmax = nn * hw;
    let distribute = 2 * cc * nn * hw;
    let scale_add = 2 * cc * hw;
    varphi + softmax + distribute + scale_add + cbr_flops(psi, c, c, h, w)
}

pub fn lrm_flops(c: usize, hw: usize, cr: bool, sg: bool) -> u64 {
    let (c, hw) = (c as u64, hw as u64);
    let resample = if cr { 2 * c * hw * c + c * c + 2 * c * c * hw } else { 0 };
    let gate = if sg { 2 * c * hw } else { 0 };
    resample + gate
}

fn sab_params(cfg: &ModelConfig) -> u64 {
    let (c, n) = (cfg.channels, cfg.descriptors);
    let theta = if cfg.gap_mode { 0 } else { conv_params(ConvKind::Pointwise, c, n, false) };
    conv_params(ConvKind::Pointwise, c, c, true) + theta
}

fn sdm_params(cfg: &ModelConfig) -> u64 {
    let (c, n) = (cfg.channels, cfg.descriptors);
    conv_params(ConvKind::Pointwise, c, n, true) + cbr_params(merge_kind(cfg), c, c) + 1
}

pub fn count_params(cfg: &ModelConfig) -> Result<GroupCounts> {
    cfg.validate()?;
    let mut g = GroupCounts::default();
    let w = cfg.encoder_widths;
    let c = cfg.channels;
    let std = ConvKind::Standard3x3;
    g.add(Group::Encoder, cbr_params(std, 3, w[0]) + cbr_params(std, w[0], w[0]));
    for i in 1..4 {
        g.add(Group::Encoder, cbr_params(std, w[i - 1], w[i]) + cbr_params(std, w[i], w[i]));
    }
    for &wi in &w {
        g.add(Group::Laterals, cbr_params(std, wi, c));
    }
    let merge = cbr_params(merge_kind(cfg), c, c);
    let (sabs, cfbs, sdm_only) = match cfg.variant {
        Variant::FpnBaseline => (0, 0, 0),
        Variant::AglnMinus => (1, 0, 3),
        Variant::AglnStraight => (1, 3, 0),
        Variant::AglnDense => (3, 6, 0),
    };
    g.add(Group::Sab, sabs * sab_params(cfg));
    g.add(Group::Sdm, (cfbs + sdm_only) * sdm_params(cfg));
    // β, then Φ.
    g.add(Group::Lrm, cfbs);
    g.add(Group::Fusion, cfbs * merge);
    if matches!(cfg.variant, Variant::FpnBaseline | Variant::AglnMinus) {
        g.add(Group::Fusion, 3 * merge);
    }
    g.add(
        Group::Heads,
        cbr_params(std, 4 * c, c) + conv_params(ConvKind::Pointwise, c, cfg.classes, true),
    );
    Ok(g)
}

/// FLOPs for one `h×w` image. Both extents must be multiples of 32.
pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<GroupCounts> {
    cfg.validate()?;
    if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(Error::Config(format!("input {h}×{w} must be a positive multiple of 32")));
    }
    let mut g = GroupCounts::default();
    let wd = cfg.encoder_widths;
    let (c, n, k) = (cfg.channels, cfg.descriptors, cfg.classes);
    let std = ConvKind::Standard3x3;
    // Spatial size at stride 4, 8, 16, 32.
    let size = |i: usize| (h >> (i + 2), w >> (i + 2));
    let area = |i: usize| size(i).0 * size(i).1;

    g.add(Group::Encoder, cbr_flops(std, 3, wd[0], h / 2, w / 2));
    g.add(Group::Encoder, cbr_flops(std, wd[0], wd[0], size(0).0, size(0).1));
    for i in 1..4 {
        let (ph, pw) = size(i - 1);
        let (qh, qw) = size(i);
        g.add(Group::Encoder, cbr_flops(std, wd[i - 1], wd[i], ph, pw));
        g.add(Group::Encoder, cbr_flops(std, wd[i], wd[i], qh, qw));
    }
    for (i, &wi) in wd.iter().enumerate() {
        g.add(Group::Laterals, cbr_flops(std, wi, c, size(i).0, size(i).1));
    }

    // Decoder level l = 1, 2, 3 works at stride 16, 8, 4.
    let at = |l: usize| 3 - l;
    let mk = merge_kind(cfg);
    let upsample = |l: usize| (c * area(at(l))) as u64;
    let merge = |l: usize| cbr_flops(mk, c, c, size(at(l)).0, size(at(l)).1);
    let cfb = |g: &mut GroupCounts, l: usize| {
        let (lh, lw) = size(at(l));
        let hw = lh * lw;
        g.add(Group::Sdm, sdm_flops(c, n, lh, lw, mk));
        g.add(Group::Lrm, lrm_flops(c, hw, cfg.enable_cr, cfg.enable_sg));
        g.add(Group::Fusion, 2 * (c * hw) as u64 + merge(l));
    };
    match cfg.variant {
        Variant::FpnBaseline => {
            for l in 1..=3 {
                g.add(Group::Fusion, upsample(l) + (c * area(at(l))) as u64 + merge(l));
            }
        }
        Variant::AglnMinus => {
            g.add(Group::Sab, sab_flops(c, n, area(3), cfg.gap_mode));
            for l in 1..=3 {
                let (lh, lw) = size(at(l));
                g.add(Group::Sdm, sdm_flops(c, n, lh, lw, mk));
                g.add(Group::Fusion, upsample(l) + (c * lh * lw) as u64 + merge(l));
            }
        }
        Variant::AglnStraight => {
            g.add(Group::Sab, sab_flops(c, n, area(3), cfg.gap_mode));
            for l in 1..=3 {
                g.add(Group::Fusion, upsample(l));
                cfb(&mut g, l);
            }
        }
        Variant::AglnDense => {
            // SAB_t reads the newest level t−1 output: stride 32, 16, 8.
            for t in 1..=3 {
                g.add(Group::Sab, sab_flops(c, n, area(4 - t), cfg.gap_mode));
                for l in 1..=t {
                    if l == t {
                        g.add(Group::Fusion, upsample(l));
                    }
                    cfb(&mut g, l);
                }
            }
        }
    }

    let (qh, qw) = size(0);
    let quarter = (qh * qw) as u64;
    // Levels at stride 32, 16 and 8 are resized to stride 4; stride 4 is not.
    g.add(Group::Heads, 3 * c as u64 * quarter);
    g.add(Group::Heads, cbr_flops(std, 4 * c, c, qh, qw));
    g.add(Group::Heads, conv_flops(ConvKind::Pointwise, c, k, qh, qw, true));
    g.add(Group::Heads, (k * h * w) as u64);
    Ok(g)
}

/// Bytes of a `C×N` single-precision descriptor matrix, in MB (2^20 bytes).
pub fn descriptor_memory_mb(c: usize, n: usize) -> f64 {
    (c as f64 * n as f64) / f64::from(1u32 << 18)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub variant: Variant,
    pub lite: bool,
    pub input: (usize, usize),
    pub params: GroupCounts,
    pub flops: GroupCounts,
    pub descriptor_mem_mb: f64,
}

impl CostReport {
    pub fn new(cfg: &ModelConfig, h: usize, w: usize) -> Result<Self> {
        let uses_descriptors = cfg.variant != Variant::FpnBaseline;
        Ok(CostReport {
            variant: cfg.variant,
            lite: cfg.lite,
            input: (h, w),
            params: count_params(cfg)?,
            flops: count_flops(cfg, h, w)?,
            descriptor_mem_mb: if uses_descriptors {
                descriptor_memory_mb(cfg.channels, cfg.descriptors)
            } else {
                0.0
            },
        })
    }

    fn label(&self) -> String {
        format!("{}{}", self.variant, if self.lite { "_lite" } else { "" })
    }

    /// `metric=<name> value=<number>` lines.
    pub fn kv_lines(&self) -> String {
        let mut out = String::new();
        let label = self.label();
        let mut line = |name: String, v: String| out.push_str(&format!("metric={name} value={v}\n"));
        line(format!("{label}.params"), self.params.total().to_string());
        line(format!("{label}.flops"), self.flops.total().to_string());
        line(format!("{label}.descriptor_mem_mb"), self.descriptor_mem_mb.to_string());
        for g in Group::ALL {
            line(format!("{label}.params.{}", g.name()), self.params.get(g).to_string());
            line(format!("{label}.flops.{}", g.name()), self.flops.get(g).to_string());
        }
        out
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} at {}x{}", self.label(), self.input.0, self.input.1)?;
        writeln!(f, "  {:<10} {:>12} {:>16}", "group", "params", "flops")?;
        for g in Group::ALL {
            writeln!(f, "  {:<10} {:>12} {:>16}", g.name(), self.params.get(g), self.flops.get(g))?;
        }
        writeln!(f, "  {:<10} {:>12} {:>16}", "total", self.params.total(), self.flops.total())?;
        writeln!(f, "  descriptor memory {} MB", self.descriptor_mem_mb)
    }
}
