use std::fmt;
use std::str::FromStr;

use crate::blocks::BlockConfig;
use crate::error::{Error, Result};
use crate::kv::{join, KvMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    FpnBaseline,
    AglnMinus,
    AglnStraight,
    AglnDense,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::FpnBaseline,
        Variant::AglnMinus,
        Variant::AglnStraight,
        Variant::AglnDense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FpnBaseline => "fpn_baseline",
            Variant::AglnMinus => "agln_minus",
            Variant::AglnStraight => "agln_straight",
            Variant::AglnDense => "agln_dense",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (expected one of fpn_baseline, agln_minus, agln_straight, agln_dense)"
                ))
            })
    }
}

/// Full architecture description.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Channel widths of the stride 4, 8, 16 and 32 encoder stages.
    pub encoder_widths: [usize; 4],
    /// Decoder width `C`.
    pub channels: usize,
    /// Descriptor count `N`.
    pub descriptors: usize,
    /// Class count `K`.
    pub classes: usize,
    pub variant: Variant,
    pub lite: bool,
    pub gap_mode: bool,
    pub enable_cr: bool,
    pub enable_sg: bool,
    pub alpha_learnable: bool,
    pub beta_learnable: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_widths: [16, 32, 64, 128],
            channels: 32,
            descriptors: 16,
            classes: 5,
            variant: Variant::AglnStraight,
            lite: false,
            gap_mode: false,
            enable_cr: true,
            enable_sg: true,
            alpha_learnable: true,
            beta_learnable: true,
        }
    }
}

pub(crate) const MODEL_KEYS: [&str; 11] = [
    "encoder_widths",
    "channels",
    "descriptors",
    "classes",
    "variant",
    "lite",
    "gap_mode",
    "enable_cr",
    "enable_sg",
    "alpha_learnable",
    "beta_learnable",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.contains(&0) {
            return Err(Error::Config("encoder_widths must all be at least 1".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be at least 1".into()));
        }
        if self.descriptors == 0 {
            return Err(Error::Config("descriptors must be at least 1".into()));
        }
        if !(2..=255).contains(&self.classes) {
            return Err(Error::Config(format!(
                "classes must be between 2 and 255, got {}",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            channels: self.channels,
            descriptors: self.descriptors,
            gap_mode: self.gap_mode,
            enable_cr: self.enable_cr,
            enable_sg: self.enable_sg,
            alpha_learnable: self.alpha_learnable,
            beta_learnable: self.beta_learnable,
            lite: self.lite,
        }
    }

    pub fn write_kv(&self, out: &mut String) {
        use std::fmt::Write;
        let lines = [
            ("encoder_widths", join(&self.encoder_widths)),
            ("channels", self.channels.to_string()),
            ("descriptors", self.descriptors.to_string()),
            ("classes", self.classes.to_string()),
            ("variant", self.variant.to_string()),
            ("lite", self.lite.to_string()),
            ("gap_mode", self.gap_mode.to_string()),
            ("enable_cr", self.enable_cr.to_string()),
            ("enable_sg", self.enable_sg.to_string()),
            ("alpha_learnable", self.alpha_learnable.to_string()),
            ("beta_learnable", self.beta_learnable.to_string()),
        ];
        for (k, v) in lines {
            writeln!(out, "{k} = {v}").expect("writing to a String");
        }
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        self.write_kv(&mut s);
        s
    }

    /// Reads the model keys present in `map`, defaulting the rest.
    pub fn from_kv_map(map: &KvMap) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        if let Some(w) = map.get_list::<usize>("encoder_widths")? {
            cfg.encoder_widths = w
                .try_into()
                .map_err(|w: Vec<usize>| Error::Config(format!("encoder_widths needs 4 values, got {}", w.len())))?;
        }
        macro_rules! read {
            ($($field:ident),*) => {$(
                if let Some(v) = map.get(stringify!($field))? {
                    cfg.$field = v;
                }
            )*};
        }
        read!(channels, descriptors, classes, lite, gap_mode, enable_cr, enable_sg, alpha_learnable, beta_learnable);
        if let Some(v) = map.raw("variant") {
            cfg.variant = v.parse()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = KvMap::parse(text)?;
        map.check_keys(&MODEL_KEYS)?;
        Self::from_kv_map(&map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let cfg = ModelConfig {
            encoder_widths: [8, 16, 32, 64],
            channels: 12,
            descriptors: 3,
            classes: 7,
            variant: Variant::AglnDense,
            lite: true,
            gap_mode: true,
            enable_cr: false,
            enable_sg: true,
            alpha_learnable: false,
            beta_learnable: true,
        };
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn validation_names_the_field() {
        let err = ModelConfig::from_kv("classes = 1").unwrap_err().to_string();
        assert!(err.contains("classes"), "{err}");
        let err = ModelConfig::from_kv("variant = unet").unwrap_err().to_string();
        assert!(err.contains("variant"), "{err}");
        assert!(ModelConfig::from_kv("descriptors = 0").is_err());
        assert!(ModelConfig::from_kv("encoder_widths = 1,2,3").is_err());
    }
}
