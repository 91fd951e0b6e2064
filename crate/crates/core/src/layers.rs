//! Layer primitives: convolutions, batch normalization and upsampling.
//!
//! Layers own their parameters as named [`Param`]s and bind them onto a
//! [`Graph`] on every forward pass. Batch-norm running statistics are never
//! mutated during a forward pass; train-mode passes record [`StatUpdate`]s
//! that the caller applies afterwards.

use mobilex_tensor::{BatchStats, Conv2dParams, Element, Graph, NormMode, Tensor, TensorError, Var};

use crate::error::Result;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Square-kernel convolution descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    /// One filter per input channel (`groups == in_channels`).
    pub depthwise: bool,
    pub padding: usize,
}

impl ConvSpec {
    /// Regular convolution with stride 1, dilation 1 and "same" padding.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            dilation: 1,
            depthwise: false,
            padding: kernel.saturating_sub(1) / 2,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        ConvSpec {
            depthwise: true,
            ..ConvSpec::new(channels, channels, kernel)
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec::new(in_channels, out_channels, 1)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    /// Sets the dilation rate and resets padding to "same" for it.
    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = self.effective_kernel() / 2;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(&self) -> usize {
        if self.depthwise {
            self.in_channels
        } else {
            1
        }
    }

    pub fn effective_kernel(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    /// `[N, M / groups, Dk, Dk]`.
    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups(),
            self.kernel,
            self.kernel,
        ]
    }

    /// Incoming connections per output unit.
    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups() * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> u64 {
        self.weight_dims().iter().map(|&d| d as u64).product()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let f = |n| mobilex_tensor::ops::conv::output_extent(n, self.kernel, self.stride, self.padding, self.dilation);
        Some((f(h)?, f(w)?))
    }

    /// Multiply-accumulates for one image producing an `out_h x out_w` map.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        self.param_count() * out_h as u64 * out_w as u64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(TensorError::invalid("conv_spec", msg.to_string()).into());
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 {
            return bad("channels and kernel must be positive");
        }
        if self.stride == 0 || self.dilation == 0 {
            return bad("stride and dilation must be positive");
        }
        if self.depthwise && self.out_channels != self.in_channels {
            return bad("depthwise convolution must preserve the channel count");
        }
        Ok(())
    }

    pub fn conv2d_params(&self) -> Conv2dParams {
        Conv2dParams {
            stride: self.stride,
            padding: self.padding,
            dilation: self.dilation,
            groups: self.groups(),
        }
    }
}

/// 2-D cross-correlation of `input [B, M, H, W]` with `weights`.
pub fn conv2d<T: Element>(g: &mut Graph<T>, input: Var, weights: Var, spec: &ConvSpec) -> Result<Var> {
    spec.validate()?;
    let wd = g.shape(weights).dims();
    if wd != spec.weight_dims() {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: spec.weight_dims().to_vec(),
            right: wd.to_vec(),
        }
        .into());
    }
    let id = g.shape(input).dims();
    if id.len() != 4 || id[1] != spec.in_channels {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: id.to_vec(),
            right: wd.to_vec(),
        }
        .into());
    }
    Ok(g.conv2d(input, weights, spec.conv2d_params())?)
}

/// Depthwise stage followed by a 1x1 pointwise stage, without normalization.
/// `spec` describes the whole block: `M -> N` with its kernel, stride and
/// dilation.
pub fn depthwise_separable<T: Element>(
    g: &mut Graph<T>,
    input: Var,
    dw_weights: Var,
    pw_weights: Var,
    spec: &ConvSpec,
) -> Result<Var> {
    let (dw, pw) = separable_stages(spec);
    let x = conv2d(g, input, dw_weights, &dw)?;
    conv2d(g, x, pw_weights, &pw)
}

fn separable_stages(spec: &ConvSpec) -> (ConvSpec, ConvSpec) {
    let dw = ConvSpec {
        depthwise: true,
        out_channels: spec.in_channels,
        ..*spec
    };
    (dw, ConvSpec::pointwise(spec.in_channels, spec.out_channels))
}

pub fn upsample_bilinear<T: Element>(g: &mut Graph<T>, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
    Ok(g.upsample_bilinear(input, out_h, out_w)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight { fan_in: usize },
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

/// A named tensor owned by a layer.
#[derive(Clone, Debug)]
pub struct Param<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

impl<T: Element> Param<T> {
    pub fn new(name: String, dims: &[usize], fill: f64, kind: ParamKind) -> Self {
        let mut value = Tensor::full(dims.to_vec(), T::from_f64(fill));
        value.set_requires_grad(kind.is_learnable());
        Param { name, value, kind }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Var {
        g.param(&self.name, &self.value)
    }
}

/// Anything that owns parameters.
pub trait Module<T: Element> {
    /// Visits parameters in a fixed order.
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// New running statistics for one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate<T> {
    pub mean_name: String,
    pub var_name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Forward-pass context shared by all layers of a model.
pub struct Pass<'g, T: Element> {
    pub graph: &'g mut Graph<T>,
    pub mode: Mode,
    pub updates: Vec<StatUpdate<T>>,
}

impl<'g, T: Element> Pass<'g, T> {
    pub fn new(graph: &'g mut Graph<T>, mode: Mode) -> Self {
        Pass {
            graph,
            mode,
            updates: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv<T: Element> {
    pub spec: ConvSpec,
    pub weight: Param<T>,
}

impl<T: Element> Conv<T> {
    /// Zero-initialized; see `model::init_weights`.
    pub fn new(name: &str, spec: ConvSpec) -> Self {
        Conv {
            weight: Param::new(
                format!("{name}.weight"),
                &spec.weight_dims(),
                0.0,
                ParamKind::ConvWeight { fan_in: spec.fan_in() },
            ),
            spec,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = self.weight.bind(g);
        conv2d(g, x, w, &self.spec)
    }
}

impl<T: Element> Module<T> for Conv<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormState<T: Element> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNormState<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        let p = |suffix: &str, fill, kind| Param::new(format!("{name}.{suffix}"), &[channels], fill, kind);
        BatchNormState {
            gamma: p("gamma", 1.0, ParamKind::Gamma),
            beta: p("beta", 0.0, ParamKind::Beta),
            running_mean: p("running_mean", 0.0, ParamKind::RunningMean),
            running_var: p("running_var", 1.0, ParamKind::RunningVar),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    /// Normalizes `x` without touching `self`. In train mode the returned
    /// update holds the running statistics after this batch.
    pub fn apply(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<(Var, Option<StatUpdate<T>>)> {
        let gamma = self.gamma.bind(g);
        let beta = self.beta.bind(g);
        let norm = match mode {
            Mode::Train => NormMode::Train { eps: self.eps },
            Mode::Eval => NormMode::Eval {
                mean: self.running_mean.value.data().iter().map(|v| v.as_f64()).collect(),
                var: self.running_var.value.data().iter().map(|v| v.as_f64()).collect(),
                eps: self.eps,
            },
        };
        let (y, stats) = g.batch_norm(x, gamma, beta, &norm)?;
        Ok((y, stats.map(|s| self.update_for(&s))))
    }

    fn update_for(&self, stats: &BatchStats) -> StatUpdate<T> {
        let m = self.momentum;
        let blend = |old: &[T], new: &[f64]| -> Vec<T> {
            old.iter()
                .zip(new)
                .map(|(o, n)| T::from_f64((1.0 - m) * o.as_f64() + m * n))
                .collect()
        };
        StatUpdate {
            mean_name: self.running_mean.name.clone(),
            var_name: self.running_var.name.clone(),
            mean: blend(self.running_mean.value.data(), &stats.mean),
            var: blend(self.running_var.value.data(), &stats.unbiased_var()),
        }
    }

    pub fn commit(&mut self, update: &StatUpdate<T>) {
        self.running_mean.value.data_mut().copy_from_slice(&update.mean);
        self.running_var.value.data_mut().copy_from_slice(&update.var);
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let (y, update) = self.apply(pass.graph, x, pass.mode)?;
        pass.updates.extend(update);
        Ok(y)
    }
}

impl<T: Element> Module<T> for BatchNormState<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Batch normalization that commits running statistics immediately in train
/// mode.
pub fn batchnorm<T: Element>(g: &mut Graph<T>, input: Var, state: &mut BatchNormState<T>, mode: Mode) -> Result<Var> {
    let (y, update) = state.apply(g, input, mode)?;
    if let Some(u) = update {
        state.commit(&u);
    }
    Ok(y)
}

/// Convolution, batch normalization, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu<T: Element> {
    pub conv: Conv<T>,
    pub bn: BatchNormState<T>,
}

impl<T: Element> ConvBnRelu<T> {
    pub fn new(name: &str, spec: ConvSpec) -> Self {
        ConvBnRelu {
            conv: Conv::new(&format!("{name}.conv"), spec),
            bn: BatchNormState::new(&format!("{name}.bn"), spec.out_channels),
        }
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let x = self.conv.forward(pass.graph, x)?;
        let x = self.bn.forward(pass, x)?;
        Ok(pass.graph.relu(x)?)
    }
}

impl<T: Element> Module<T> for ConvBnRelu<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

/// DW -> BN -> ReLU -> PW -> BN -> ReLU.
#[derive(Clone, Debug)]
pub struct DepthwiseSeparable<T: Element> {
    pub dw: ConvBnRelu<T>,
    pub pw: ConvBnRelu<T>,
}

impl<T: Element> DepthwiseSeparable<T> {
    pub fn new(name: &str, spec: ConvSpec) -> Self {
        let (dw, pw) = separable_stages(&spec);
        DepthwiseSeparable {
            dw: ConvBnRelu::new(&format!("{name}.dw"), dw),
            pw: ConvBnRelu::new(&format!("{name}.pw"), pw),
        }
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let x = self.dw.forward(pass, x)?;
        self.pw.forward(pass, x)
    }
}

impl<T: Element> Module<T> for DepthwiseSeparable<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.dw.visit(f);
        self.pw.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.dw.visit_mut(f);
        self.pw.visit_mut(f);
    }
}

/// 3x3 conv halving the channels, BN, ReLU, bilinear x2, then an optional
/// additive skip.
#[derive(Clone, Debug)]
pub struct UpsampleBlock<T: Element> {
    pub body: ConvBnRelu<T>,
}

impl<T: Element> UpsampleBlock<T> {
    pub fn new(name: &str, in_channels: usize) -> Self {
        UpsampleBlock {
            body: ConvBnRelu::new(name, ConvSpec::new(in_channels, (in_channels / 2).max(1), 3)),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.body.conv.spec.out_channels
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var, skip: Option<Var>) -> Result<Var> {
        let x = self.body.forward(pass, x)?;
        let (h, w) = pass.graph.shape(x).spatial().expect("conv output is 4-D");
        let up = pass.graph.upsample_bilinear(x, 2 * h, 2 * w)?;
        match skip {
            None => Ok(up),
            Some(s) => {
                let (a, b) = (pass.graph.shape(up), pass.graph.shape(s));
                if a != b {
                    return Err(TensorError::ShapeMismatch {
                        op: "upsample_block skip",
                        left: a.dims().to_vec(),
                        right: b.dims().to_vec(),
                    }
                    .into());
                }
                Ok(pass.graph.add(up, s)?)
            }
        }
    }
}

impl<T: Element> Module<T> for UpsampleBlock<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.body.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.body.visit_mut(f);
    }
}

/// Runs one upsample block on its own and commits any running-stat update.
pub fn upsample_block<T: Element>(
    g: &mut Graph<T>,
    input: Var,
    skip: Option<Var>,
    block: &mut UpsampleBlock<T>,
    mode: Mode,
) -> Result<Var> {
    let mut pass = Pass::new(g, mode);
    let y = block.forward(&mut pass, input, skip)?;
    for u in std::mem::take(&mut pass.updates) {
        block.body.bn.commit(&u);
    }
    Ok(y)
}

/// Sum of parameter elements, learnable ones only when `learnable_only`.
pub fn count_elements<T: Element>(m: &dyn Module<T>, learnable_only: bool) -> u64 {
    let mut n = 0;
    m.visit(&mut |p| {
        if !learnable_only || p.kind.is_learnable() {
            n += p.value.numel() as u64;
        }
    });
    n
}
