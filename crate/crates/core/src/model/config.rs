use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// MobileNet v1 layer plan as `(output channels, stride)`: a full 3x3
/// convolution followed by thirteen depthwise-separable blocks.
pub const MOBILENET_PLAN: [(usize, usize); 14] = [
    (32, 2),
    (64, 1),
    (128, 2),
    (128, 1),
    (256, 2),
    (256, 1),
    (512, 2),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (1024, 2),
    (1024, 1),
];

/// Scale (as a power of two) the first decoder returns to.
pub const DECODER1_TARGET_LOG2: u32 = 2;
/// Downsamplings performed by the second encoder.
pub const ENCODER2_DOWNS: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Small,
    Base,
    Large,
}

impl Variant {
    /// Number of backbone layers taken from [`MOBILENET_PLAN`].
    pub fn backbone_layers(self) -> usize {
        match self {
            Variant::Small => 6,
            Variant::Base => 9,
            Variant::Large => 14,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Small => "small",
            Variant::Base => "base",
            Variant::Large => "large",
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
        match s.trim().to_ascii_lowercase().as_str() {
            "small" => Ok(Variant::Small),
            "base" => Ok(Variant::Base),
            "large" => Ok(Variant::Large),
            other => Err(Error::config(format!("unknown variant `{other}` (small, base, large)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureConfig {
    pub variant: Variant,
    pub input_h: usize,
    pub input_w: usize,
    pub bridge_dilations: Vec<usize>,
    /// Output channels of each backbone layer.
    pub backbone_width: Vec<usize>,
    /// Replicate-pad inputs up to the required multiple and crop the output
    /// back. When false, inputs must already be divisible.
    pub pad_input: bool,
}

impl ArchitectureConfig {
    pub fn new(variant: Variant) -> Self {
        ArchitectureConfig {
            variant,
            input_h: 228,
            input_w: 304,
            bridge_dilations: vec![1, 2, 3],
            backbone_width: MOBILENET_PLAN[..variant.backbone_layers()]
                .iter()
                .map(|&(c, _)| c)
                .collect(),
            pad_input: true,
        }
    }

    pub fn with_input(mut self, h: usize, w: usize) -> Self {
        self.input_h = h;
        self.input_w = w;
        self
    }

    /// Divides every backbone width by `divisor`; all other widths follow.
    pub fn with_width_divisor(mut self, divisor: usize) -> Self {
        for c in &mut self.backbone_width {
            *c = (*c / divisor.max(1)).max(1);
        }
        self
    }

    pub fn backbone_strides(&self) -> Vec<usize> {
        MOBILENET_PLAN[..self.variant.backbone_layers()]
            .iter()
            .map(|&(_, s)| s)
            .collect()
    }

    /// Downsamplings in the first encoder.
    pub fn encoder1_downs(&self) -> u32 {
        self.backbone_strides().iter().filter(|&&s| s == 2).count() as u32
    }

    /// Deepest backbone width.
    pub fn width(&self) -> usize {
        *self.backbone_width.last().unwrap_or(&0)
    }

    /// Spatial sizes must be multiples of this for the strides to line up.
    pub fn required_multiple(&self) -> usize {
        let deepest = self.encoder1_downs().max(DECODER1_TARGET_LOG2 + ENCODER2_DOWNS);
        1 << deepest
    }

    /// Size the network actually runs at for an `h x w` input.
    pub fn padded(&self, h: usize, w: usize) -> (usize, usize) {
        let m = self.required_multiple();
        (h.div_ceil(m) * m, w.div_ceil(m) * m)
    }

    pub fn validate(&self) -> Result<()> {
        let layers = self.variant.backbone_layers();
        if self.backbone_width.len() != layers {
            return Err(Error::config(format!(
                "{} variant needs {layers} backbone widths, got {}",
                self.variant,
                self.backbone_width.len()
            )));
        }
        if self.backbone_width.contains(&0) {
            return Err(Error::config("backbone widths must be positive"));
        }
        if self.bridge_dilations.len() != 3 || self.bridge_dilations.contains(&0) {
            return Err(Error::config(format!(
                "bridge_dilations must be three positive rates, got {:?}",
                self.bridge_dilations
            )));
        }
        let ups1 = self.encoder1_downs() - DECODER1_TARGET_LOG2;
        let ups2 = DECODER1_TARGET_LOG2 + ENCODER2_DOWNS;
        let c = self.width();
        if !c.is_multiple_of(1 << ups1) || !c.is_multiple_of(1 << ups2) {
            return Err(Error::config(format!(
                "deepest width {c} must stay integral through {} channel halvings",
                ups1.max(ups2)
            )));
        }
        if self.input_h == 0 || self.input_w == 0 {
            return Err(Error::config("input size must be positive"));
        }
        let m = self.required_multiple();
        if !self.pad_input && (!self.input_h.is_multiple_of(m) || !self.input_w.is_multiple_of(m)) {
            return Err(Error::config(format!(
                "input {}x{} is not divisible by {m} and padding is disabled",
                self.input_h, self.input_w
            )));
        }
        Ok(())
    }

    /// Metadata entries echoing this configuration.
    pub fn to_metadata(&self, out: &mut BTreeMap<String, String>) {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        out.insert("arch.variant".into(), self.variant.to_string());
        out.insert("arch.input_h".into(), self.input_h.to_string());
        out.insert("arch.input_w".into(), self.input_w.to_string());
        out.insert("arch.bridge_dilations".into(), join(&self.bridge_dilations));
        out.insert("arch.backbone_width".into(), join(&self.backbone_width));
        out.insert("arch.pad_input".into(), self.pad_input.to_string());
    }

    pub fn from_metadata(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            meta.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::config(format!("checkpoint metadata lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::config(format!("metadata `{k}` is not an integer")))
        };
        let cfg = ArchitectureConfig {
            variant: get("arch.variant")?.parse()?,
            input_h: num("arch.input_h")?,
            input_w: num("arch.input_w")?,
            bridge_dilations: parse_list(get("arch.bridge_dilations")?)?,
            backbone_width: parse_list(get("arch.backbone_width")?)?,
            pad_input: get("arch.pad_input")?
                .parse()
                .map_err(|_| Error::config("metadata `arch.pad_input` is not a boolean"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `1,2,3` (brackets and spaces tolerated).
pub fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::config(format!("`{s}` is not a list of integers")))
        })
        .collect()
}
