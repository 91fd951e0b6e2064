//! Exact parameter and multiply-accumulate accounting.
//!
//! Parameters are conv weights plus BN gamma/beta. MACs count convolutions
//! only: `Dk * Dk * (M / groups) * N * H' * W'` per image.

use std::collections::HashMap;

use mobilex_tensor::Element;

use super::{BackboneLayer, DecoderBlock, MobileXNet, Stage, TapId};
use crate::layers::{BatchNormState, Conv, ConvBnRelu, DepthwiseSeparable, UpsampleBlock};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    pub macs: u64,
    /// `[C, H, W]` after this layer.
    pub output: [usize; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostReport {
    pub parameters: u64,
    pub macs: u64,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    pub fn push(&mut self, row: LayerCost) {
        self.parameters += row.params;
        self.macs += row.macs;
        self.layers.push(row);
    }

    pub fn macs_of(&self, kind: &str) -> u64 {
        self.layers.iter().filter(|l| l.kind == kind).map(|l| l.macs).sum()
    }
}

/// `[C, H, W]` of one image.
pub type Chw = [usize; 3];

/// Layers that can account for their own cost given an input shape.
pub trait Costed {
    fn cost(&self, input: Chw, report: &mut CostReport) -> Chw;
}

/// Cost of a single block on an input of shape `input`.
pub fn count_block(block: &dyn Costed, input: Chw) -> CostReport {
    let mut r = CostReport::default();
    block.cost(input, &mut r);
    r
}

impl<T: Element> Costed for Conv<T> {
    fn cost(&self, [_, h, w]: Chw, r: &mut CostReport) -> Chw {
        let s = &self.spec;
        let (oh, ow) = s.output_hw(h, w).unwrap_or((0, 0));
        let kind = if s.depthwise {
            "depthwise"
        } else if s.kernel == 1 {
            "pointwise"
        } else {
            "conv"
        };
        let output = [s.out_channels, oh, ow];
        r.push(LayerCost {
            name: self.weight.name.trim_end_matches(".weight").to_string(),
            kind,
            params: s.param_count(),
            macs: s.macs(oh, ow),
            output,
        });
        output
    }
}

impl<T: Element> Costed for BatchNormState<T> {
    fn cost(&self, input: Chw, r: &mut CostReport) -> Chw {
        r.push(LayerCost {
            name: self.gamma.name.trim_end_matches(".gamma").to_string(),
            kind: "batchnorm",
            params: 2 * self.channels() as u64,
            macs: 0,
            output: input,
        });
        input
    }
}

impl<T: Element> Costed for ConvBnRelu<T> {
    fn cost(&self, input: Chw, r: &mut CostReport) -> Chw {
        let x = self.conv.cost(input, r);
        self.bn.cost(x, r)
    }
}

impl<T: Element> Costed for DepthwiseSeparable<T> {
    fn cost(&self, input: Chw, r: &mut CostReport) -> Chw {
        let x = self.dw.cost(input, r);
        self.pw.cost(x, r)
    }
}

impl<T: Element> Costed for UpsampleBlock<T> {
    fn cost(&self, input: Chw, r: &mut CostReport) -> Chw {
        let [c, h, w] = self.body.cost(input, r);
        [c, 2 * h, 2 * w]
    }
}

impl<T: Element> Costed for BackboneLayer<T> {
    fn cost(&self, input: Chw, r: &mut CostReport) -> Chw {
        match self {
            BackboneLayer::Full(l) => l.cost(input, r),
            BackboneLayer::Separable(l) => l.cost(input, r),
        }
    }
}

fn decode<T: Element>(
    d: &DecoderBlock<T>,
    x: Chw,
    taps: &HashMap<TapId, Chw>,
    r: &mut CostReport,
) -> Result<Chw, String> {
    let out = d.block.cost(x, r);
    if let Some(link) = &d.skip {
        let mut s = taps[&link.source];
        if let Some(p) = &link.projection {
            s = p.cost(s, r);
        }
        if s != out {
            return Err(format!(
                "skip into {} has shape {s:?}, block output is {out:?}",
                d.block.body.conv.weight.name
            ));
        }
    }
    Ok(out)
}

/// Mirrors `MobileXNet::forward` on shapes, at the padded size of `h x w`.
pub(super) fn walk<T: Element>(m: &MobileXNet<T>, h: usize, w: usize) -> Result<CostReport, String> {
    let (h, w) = m.config.padded(h, w);
    let mut r = CostReport::default();
    let mut taps = HashMap::new();
    let mut x = [3, h, w];
    for (i, l) in m.encoder1.iter().enumerate() {
        x = l.cost(x, &mut r);
        taps.insert(
            TapId {
                stage: Stage::Encoder1,
                index: i,
            },
            x,
        );
    }
    for l in &m.bridge1 {
        x = l.cost(x, &mut r);
    }
    for (j, d) in m.decoder1.iter().enumerate() {
        x = decode(d, x, &taps, &mut r)?;
        taps.insert(
            TapId {
                stage: Stage::Decoder1,
                index: j,
            },
            x,
        );
    }
    for (i, [a, b]) in m.encoder2.iter().enumerate() {
        x = a.cost(x, &mut r);
        x = b.cost(x, &mut r);
        taps.insert(
            TapId {
                stage: Stage::Encoder2,
                index: i,
            },
            x,
        );
    }
    for l in &m.bridge2 {
        x = l.cost(x, &mut r);
    }
    for d in &m.decoder2 {
        x = decode(d, x, &taps, &mut r)?;
    }
    m.head.cost(x, &mut r);
    Ok(r)
}
