//! MobileXNet assembly: two stacked encoder-decoder subnetworks.
//!
//! ```text
//! input -> encoder1 (MobileNet prefix) -> bridge1 -> decoder1 (to 1/4)
//!       -> encoder2 (three blocks, two of them strided) -> bridge2
//!       -> decoder2 (four x2 upsamplings) -> 3x3 head -> depth
//! ```
//!
//! Decoder blocks add a skip from an earlier feature map at the same scale.
//! Decoder1 draws from encoder1. Decoder2 prefers encoder2, then decoder1,
//! then encoder1, taking the most recent map whose channel count matches. If
//! none matches, the most recent candidate is routed through a 1x1
//! projection.

pub mod config;
pub mod cost;

use std::collections::HashMap;

use mobilex_tensor::{Element, Graph, PadMode, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use config::{ArchitectureConfig, Variant, MOBILENET_PLAN};
pub use cost::{CostReport, LayerCost};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::layers::{
    Conv, ConvBnRelu, ConvSpec, DepthwiseSeparable, Mode, Module, Param, ParamKind, Pass, StatUpdate, UpsampleBlock,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Encoder1,
    Decoder1,
    Encoder2,
}

/// An intermediate feature map that can feed a skip connection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TapId {
    pub stage: Stage,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct SkipLink<T: Element> {
    pub source: TapId,
    pub projection: Option<Conv<T>>,
}

#[derive(Clone, Debug)]
pub struct DecoderBlock<T: Element> {
    pub block: UpsampleBlock<T>,
    pub skip: Option<SkipLink<T>>,
}

#[derive(Clone, Debug)]
pub enum BackboneLayer<T: Element> {
    Full(ConvBnRelu<T>),
    Separable(DepthwiseSeparable<T>),
}

/// Per-channel input normalization `(x - mean) / std` applied to RGB in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl Normalization {
    pub fn to_metadata(&self, out: &mut std::collections::BTreeMap<String, String>) {
        let join = |v: &[f64; 3]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        out.insert("norm.mean".into(), join(&self.mean));
        out.insert("norm.std".into(), join(&self.std));
    }

    /// Reads a normalization declared in checkpoint metadata, if any.
    pub fn from_metadata(meta: &std::collections::BTreeMap<String, String>) -> Result<Option<Self>> {
        let parse = |k: &str| -> Result<Option<[f64; 3]>> {
            let Some(s) = meta.get(k) else { return Ok(None) };
            let v: Vec<f64> = s
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::config(format!("metadata `{k}` is not a float list")))?;
            <[f64; 3]>::try_from(v)
                .map(Some)
                .map_err(|_| Error::config(format!("metadata `{k}` needs three values")))
        };
        match (parse("norm.mean")?, parse("norm.std")?) {
            (None, None) => Ok(None),
            (mean, std) => {
                let n = Normalization {
                    mean: mean.unwrap_or([0.0; 3]),
                    std: std.unwrap_or([1.0; 3]),
                };
                if n.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                    return Err(Error::config("normalization std must be positive"));
                }
                Ok(Some(n))
            }
        }
    }
}

/// Shapes of the main intermediate maps of one forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    /// Spatial size the network ran at after padding.
    pub padded: (usize, usize),
    /// Encoder1 output.
    pub f1: Vec<usize>,
    /// Decoder1 output.
    pub f2: Vec<usize>,
    /// Encoder2 output.
    pub f3: Vec<usize>,
    pub output: Vec<usize>,
}

pub struct Output<T> {
    pub depth: Var,
    pub updates: Vec<StatUpdate<T>>,
    pub trace: Trace,
}

#[derive(Clone, Debug)]
pub struct MobileXNet<T: Element = f32> {
    pub config: ArchitectureConfig,
    pub normalization: Normalization,
    pub encoder1: Vec<BackboneLayer<T>>,
    pub bridge1: Vec<ConvBnRelu<T>>,
    pub decoder1: Vec<DecoderBlock<T>>,
    pub encoder2: Vec<[ConvBnRelu<T>; 2]>,
    pub bridge2: Vec<ConvBnRelu<T>>,
    pub decoder2: Vec<DecoderBlock<T>>,
    pub head: Conv<T>,
}

struct TapInfo {
    id: TapId,
    scale: u32,
    channels: usize,
}

fn resolve_skip<T: Element>(candidates: &[&TapInfo], channels: usize, name: &str) -> Option<SkipLink<T>> {
    if let Some(t) = candidates.iter().find(|t| t.channels == channels) {
        return Some(SkipLink {
            source: t.id,
            projection: None,
        });
    }
    candidates.first().map(|t| SkipLink {
        source: t.id,
        projection: Some(Conv::new(name, ConvSpec::pointwise(t.channels, channels))),
    })
}

fn bridge<T: Element>(prefix: &str, channels: usize, rates: &[usize]) -> Vec<ConvBnRelu<T>> {
    rates
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            ConvBnRelu::new(
                &format!("{prefix}.{i}"),
                ConvSpec::new(channels, channels, 3).with_dilation(r),
            )
        })
        .collect()
}

impl<T: Element> MobileXNet<T> {
    /// Builds the network with zero weights; see [`init_weights`].
    pub fn build(config: ArchitectureConfig) -> Result<Self> {
        config.validate()?;
        let mut taps: Vec<TapInfo> = Vec::new();
        let tap = |taps: &[TapInfo], stage: Stage, scale: u32| -> Vec<usize> {
            taps.iter()
                .enumerate()
                .rev()
                .filter(|(_, t)| t.id.stage == stage && t.scale == scale)
                .map(|(i, _)| i)
                .collect()
        };

        let mut encoder1 = Vec::new();
        let (mut channels, mut scale) = (3, 0u32);
        for (i, (&w, s)) in config.backbone_width.iter().zip(config.backbone_strides()).enumerate() {
            let spec = ConvSpec::new(channels, w, 3).with_stride(s);
            let name = format!("enc1.{i}");
            encoder1.push(if i == 0 {
                BackboneLayer::Full(ConvBnRelu::new(&name, spec))
            } else {
                BackboneLayer::Separable(DepthwiseSeparable::new(&name, spec))
            });
            channels = w;
            scale += (s == 2) as u32;
            taps.push(TapInfo {
                id: TapId {
                    stage: Stage::Encoder1,
                    index: i,
                },
                scale,
                channels,
            });
        }
        let c = config.width();
        let bridge1 = bridge("bridge1", c, &config.bridge_dilations);

        let mut decoder1 = Vec::new();
        for j in 0..(scale - config::DECODER1_TARGET_LOG2) as usize {
            let block = UpsampleBlock::new(&format!("dec1.{j}"), channels);
            channels = block.out_channels();
            scale -= 1;
            let cands: Vec<&TapInfo> = tap(&taps, Stage::Encoder1, scale)
                .into_iter()
                .map(|i| &taps[i])
                .collect();
            let skip = resolve_skip(&cands, channels, &format!("dec1.{j}.skip_proj"));
            decoder1.push(DecoderBlock { block, skip });
            taps.push(TapInfo {
                id: TapId {
                    stage: Stage::Decoder1,
                    index: j,
                },
                scale,
                channels,
            });
        }

        let mut encoder2 = Vec::new();
        for (i, (out, s)) in [(c / 2, 2), (c, 2), (c, 1)].into_iter().enumerate() {
            encoder2.push([
                ConvBnRelu::new(
                    &format!("enc2.{i}.0"),
                    ConvSpec::new(channels, channels, 3).with_stride(s),
                ),
                ConvBnRelu::new(&format!("enc2.{i}.1"), ConvSpec::new(channels, out, 3)),
            ]);
            channels = out;
            scale += (s == 2) as u32;
            taps.push(TapInfo {
                id: TapId {
                    stage: Stage::Encoder2,
                    index: i,
                },
                scale,
                channels,
            });
        }
        let bridge2 = bridge("bridge2", channels, &config.bridge_dilations);

        let mut decoder2 = Vec::new();
        for j in 0..scale as usize {
            let block = UpsampleBlock::new(&format!("dec2.{j}"), channels);
            channels = block.out_channels();
            scale -= 1;
            let cands: Vec<&TapInfo> = [Stage::Encoder2, Stage::Decoder1, Stage::Encoder1]
                .into_iter()
                .flat_map(|st| tap(&taps, st, scale))
                .map(|i| &taps[i])
                .collect();
            let skip = resolve_skip(&cands, channels, &format!("dec2.{j}.skip_proj"));
            decoder2.push(DecoderBlock { block, skip });
        }
        let head = Conv::new("head", ConvSpec::new(channels, 1, 3));

        let model = MobileXNet {
            config,
            normalization: Normalization::default(),
            encoder1,
            bridge1,
            decoder1,
            encoder2,
            bridge2,
            decoder2,
            head,
        };
        model.check_skips()?;
        Ok(model)
    }

    /// Builds and initializes in one step.
    pub fn new(config: ArchitectureConfig, seed: u64) -> Result<Self> {
        let mut m = Self::build(config)?;
        init_weights(&mut m, seed);
        Ok(m)
    }

    fn check_skips(&self) -> Result<()> {
        cost::walk(self, self.config.input_h, self.config.input_w)
            .map(|_| ())
            .map_err(Error::Config)
    }

    /// Normalizes an RGB batch in [0, 1] for [`MobileXNet::forward`].
    pub fn prepare_input(&self, rgb: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = rgb.dims();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(TensorError::invalid("prepare_input", format!("need [B, 3, H, W], got {dims:?}")).into());
        }
        let plane = dims[2] * dims[3];
        let n = &self.normalization;
        let mut data = rgb.data().to_vec();
        for (k, chunk) in data.chunks_mut(plane).enumerate() {
            let c = k % 3;
            for v in chunk {
                *v = T::from_f64((v.as_f64() - n.mean[c]) / n.std[c]);
            }
        }
        Ok(Tensor::from_vec(dims.to_vec(), data)?)
    }

    /// Runs the network on a prepared `[B, 3, H, W]` input. The output has
    /// the input's spatial size.
    pub fn forward(&self, g: &mut Graph<T>, input: Var, mode: Mode) -> Result<Output<T>> {
        let dims = g.shape(input).dims().to_vec();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(TensorError::invalid("forward", format!("need [B, 3, H, W], got {dims:?}")).into());
        }
        let (h, w) = (dims[2], dims[3]);
        let (ph, pw) = self.config.padded(h, w);
        let mut x = input;
        if (ph, pw) != (h, w) {
            if !self.config.pad_input {
                return Err(Error::config(format!(
                    "input {h}x{w} is not divisible by {} and padding is disabled",
                    self.config.required_multiple()
                )));
            }
            x = g.pad2d(x, (0, ph - h, 0, pw - w), PadMode::Replicate)?;
        }
        let mut pass = Pass::new(g, mode);
        let mut taps: HashMap<TapId, Var> = HashMap::new();

        for (i, layer) in self.encoder1.iter().enumerate() {
            x = match layer {
                BackboneLayer::Full(l) => l.forward(&mut pass, x)?,
                BackboneLayer::Separable(l) => l.forward(&mut pass, x)?,
            };
            taps.insert(
                TapId {
                    stage: Stage::Encoder1,
                    index: i,
                },
                x,
            );
        }
        let f1 = pass.graph.shape(x).dims().to_vec();
        for l in &self.bridge1 {
            x = l.forward(&mut pass, x)?;
        }
        for (j, d) in self.decoder1.iter().enumerate() {
            x = decode(&mut pass, d, x, &taps)?;
            taps.insert(
                TapId {
                    stage: Stage::Decoder1,
                    index: j,
                },
                x,
            );
        }
        let f2 = pass.graph.shape(x).dims().to_vec();
        for (i, [a, b]) in self.encoder2.iter().enumerate() {
            x = a.forward(&mut pass, x)?;
            x = b.forward(&mut pass, x)?;
            taps.insert(
                TapId {
                    stage: Stage::Encoder2,
                    index: i,
                },
                x,
            );
        }
        let f3 = pass.graph.shape(x).dims().to_vec();
        for l in &self.bridge2 {
            x = l.forward(&mut pass, x)?;
        }
        for d in &self.decoder2 {
            x = decode(&mut pass, d, x, &taps)?;
        }
        x = self.head.forward(pass.graph, x)?;
        if (ph, pw) != (h, w) {
            x = pass.graph.crop2d(x, (0, 0), (h, w))?;
        }
        let trace = Trace {
            padded: (ph, pw),
            f1,
            f2,
            f3,
            output: pass.graph.shape(x).dims().to_vec(),
        };
        Ok(Output {
            depth: x,
            updates: pass.updates,
            trace,
        })
    }

    /// Eval-mode prediction for an RGB batch in [0, 1]; returns `[B, 1, H, W]`.
    pub fn predict(&self, rgb: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(self.prepare_input(rgb)?);
        let out = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.value(out.depth).clone())
    }

    /// Commits running statistics recorded by a train-mode pass.
    pub fn apply_updates(&mut self, updates: &[StatUpdate<T>]) {
        let mut by_name: HashMap<&str, &[T]> = HashMap::new();
        for u in updates {
            by_name.insert(&u.mean_name, &u.mean);
            by_name.insert(&u.var_name, &u.var);
        }
        self.visit_mut(&mut |p| {
            if let Some(v) = by_name.get(p.name.as_str()) {
                p.value.data_mut().copy_from_slice(v);
            }
        });
    }

    pub fn count(&self, h: usize, w: usize) -> CostReport {
        cost::walk(self, h, w).expect("skip shapes are verified when the model is built")
    }

    /// Learnable parameter total.
    pub fn parameter_count(&self) -> u64 {
        crate::layers::count_elements(self, true)
    }
}

fn decode<T: Element>(pass: &mut Pass<'_, T>, d: &DecoderBlock<T>, x: Var, taps: &HashMap<TapId, Var>) -> Result<Var> {
    let skip = match &d.skip {
        None => None,
        Some(link) => {
            let s = taps[&link.source];
            Some(match &link.projection {
                Some(p) => p.forward(pass.graph, s)?,
                None => s,
            })
        }
    };
    d.block.forward(pass, x, skip)
}

impl<T: Element> Module<T> for BackboneLayer<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match self {
            BackboneLayer::Full(l) => l.visit(f),
            BackboneLayer::Separable(l) => l.visit(f),
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            BackboneLayer::Full(l) => l.visit_mut(f),
            BackboneLayer::Separable(l) => l.visit_mut(f),
        }
    }
}

impl<T: Element> Module<T> for DecoderBlock<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.block.visit(f);
        if let Some(p) = self.skip.as_ref().and_then(|s| s.projection.as_ref()) {
            p.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.block.visit_mut(f);
        if let Some(p) = self.skip.as_mut().and_then(|s| s.projection.as_mut()) {
            p.visit_mut(f);
        }
    }
}

impl<T: Element> Module<T> for MobileXNet<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.encoder1.iter().for_each(|l| l.visit(f));
        self.bridge1.iter().for_each(|l| l.visit(f));
        self.decoder1.iter().for_each(|l| l.visit(f));
        for [a, b] in &self.encoder2 {
            a.visit(f);
            b.visit(f);
        }
        self.bridge2.iter().for_each(|l| l.visit(f));
        self.decoder2.iter().for_each(|l| l.visit(f));
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.encoder1.iter_mut().for_each(|l| l.visit_mut(f));
        self.bridge1.iter_mut().for_each(|l| l.visit_mut(f));
        self.decoder1.iter_mut().for_each(|l| l.visit_mut(f));
        for [a, b] in &mut self.encoder2 {
            a.visit_mut(f);
            b.visit_mut(f);
        }
        self.bridge2.iter_mut().for_each(|l| l.visit_mut(f));
        self.decoder2.iter_mut().for_each(|l| l.visit_mut(f));
        self.head.visit_mut(f);
    }
}

/// Conv weights ~ N(0, sqrt(2 / fan_in)); BN gamma 1, beta 0, running
/// statistics (0, 1). Parameters are drawn in visit order from one seeded
/// stream.
pub fn init_weights<T: Element>(model: &mut dyn Module<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.visit_mut(&mut |p| match p.kind {
        ParamKind::ConvWeight { fan_in } => {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in p.value.data_mut() {
                *v = T::from_f64(normal.sample(&mut rng));
            }
        }
        ParamKind::Gamma | ParamKind::RunningVar => p.value.data_mut().fill(T::one()),
        ParamKind::Beta | ParamKind::RunningMean => p.value.data_mut().fill(T::zero()),
    });
}

/// Replaces every encoder1 tensor (weights and BN state) from `checkpoint`
/// and adopts its declared input normalization. Nothing else changes.
pub fn load_pretrained_backbone(model: &mut MobileXNet<f32>, checkpoint: &Checkpoint) -> Result<()> {
    let normalization = Normalization::from_metadata(&checkpoint.metadata)?;
    checkpoint.restore_filtered(model, &|name| name.starts_with("enc1."))?;
    if let Some(n) = normalization {
        model.normalization = n;
    }
    Ok(())
}
