//! Builders for the multi-scale heads, the decoder, and the backbones.
//!
//! Every dilated 3x3 conv inside a head uses `padding = rate` so branch
//! outputs keep the input's spatial dims and can be fused. Branch wiring:
//!
//! * aspp: one parallel branch per rate (3x3 dilated conv -> relu -> 1x1
//!   projection), fused by summation or by concat + 1x1.
//! * cascade: dilated 3x3 convs in sequence with strictly increasing
//!   rates, then a 1x1 projection.
//! * wasp: branch 1 reads the module input; branch i reads the previous
//!   branch's activated conv output. Each branch contributes a linear 1x1
//!   tap; taps plus an optional pooled branch are concatenated and fused
//!   by a 1x1 conv.
//! * res2net-seg: the input is split into equal channel groups; group 1
//!   passes through, group s >= 2 is dilated-convolved after adding the
//!   previous group's output. A pooled copy of the input is broadcast back
//!   and concatenated, a squeeze-excitation gate recalibrates the fused
//!   map, and a 1x1 conv projects to the score channels.

use super::{GraphBuilder, LayerKind, ModuleGraph, NodeId, ResizeTarget};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    Sum,
    Concat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsppConfig {
    pub in_ch: usize,
    pub branch_ch: usize,
    pub out_ch: usize,
    pub rates: Vec<usize>,
    pub fusion: Fusion,
}

impl Default for AsppConfig {
    fn default() -> Self {
        AsppConfig {
            in_ch: 2048,
            branch_ch: 256,
            out_ch: 256,
            rates: vec![6, 12, 18, 24],
            fusion: Fusion::Sum,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    pub in_ch: usize,
    pub branch_ch: usize,
    pub out_ch: usize,
    pub rates: Vec<usize>,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            in_ch: 2048,
            branch_ch: 256,
            out_ch: 256,
            rates: vec![6, 12, 18, 24],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaspConfig {
    pub in_ch: usize,
    pub branch_ch: usize,
    pub out_ch: usize,
    pub rates: Vec<usize>,
    /// Include the pooled branch in the fusion.
    pub gap_branch: bool,
}

impl Default for WaspConfig {
    fn default() -> Self {
        WaspConfig {
            in_ch: 2048,
            branch_ch: 224,
            out_ch: 256,
            rates: vec![6, 12, 18, 24],
            gap_branch: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Res2netSegConfig {
    pub in_ch: usize,
    pub scales: usize,
    /// Dilation rates for the convolved scales. Accepts either one rate per
    /// convolved scale (`scales - 1` entries) or one per scale (`scales`
    /// entries, first entry belonging to the pass-through scale and unused).
    pub rates: Vec<usize>,
    pub se_reduction: usize,
    pub out_ch: usize,
}

impl Default for Res2netSegConfig {
    fn default() -> Self {
        Res2netSegConfig {
            in_ch: 2048,
            scales: 4,
            rates: vec![2, 4, 6, 8],
            se_reduction: 16,
            out_ch: 256,
        }
    }
}

impl Res2netSegConfig {
    /// Rates actually applied to scales 2..=scales.
    pub fn effective_rates(&self) -> Result<&[usize]> {
        if self.rates.len() == self.scales - 1 {
            Ok(&self.rates)
        } else if self.rates.len() == self.scales {
            Ok(&self.rates[1..])
        } else {
            Err(Error::Config(format!(
                "res2net-seg: {} rates for {} scales (need scales or scales-1)",
                self.rates.len(),
                self.scales
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub score_ch: usize,
    pub lowlevel_ch: usize,
    pub num_classes: usize,
    pub conv_ch: usize,
    pub dropout: f32,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            score_ch: 256,
            lowlevel_ch: 256,
            num_classes: 21,
            conv_ch: 128,
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackboneKind {
    /// Full ResNet-101 trunk at output stride 8. Used for parameter
    /// accounting and receptive-field analysis; never trained here.
    Resnet101Counting,
    /// Small trainable backbone: output stride 8, low-level tap at stride 4,
    /// `width` stem channels and `depth` residual blocks at `2*width`.
    ToyResnet { depth: usize, width: usize },
}

impl BackboneKind {
    pub fn out_channels(&self) -> usize {
        match self {
            BackboneKind::Resnet101Counting => 2048,
            BackboneKind::ToyResnet { width, .. } => 2 * width,
        }
    }

    pub fn lowlevel_channels(&self) -> usize {
        match self {
            BackboneKind::Resnet101Counting => 256,
            BackboneKind::ToyResnet { width, .. } => *width,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadConfig {
    Aspp(AsppConfig),
    Cascade(CascadeConfig),
    Res2netSeg(Res2netSegConfig),
    Wasp(WaspConfig),
}

impl HeadConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            HeadConfig::Aspp(_) => "aspp",
            HeadConfig::Cascade(_) => "cascade",
            HeadConfig::Res2netSeg(_) => "res2net-seg",
            HeadConfig::Wasp(_) => "wasp",
        }
    }

    pub fn rates(&self) -> &[usize] {
        match self {
            HeadConfig::Aspp(c) => &c.rates,
            HeadConfig::Cascade(c) => &c.rates,
            HeadConfig::Res2netSeg(c) => &c.rates,
            HeadConfig::Wasp(c) => &c.rates,
        }
    }

    pub fn in_ch(&self) -> usize {
        match self {
            HeadConfig::Aspp(c) => c.in_ch,
            HeadConfig::Cascade(c) => c.in_ch,
            HeadConfig::Res2netSeg(c) => c.in_ch,
            HeadConfig::Wasp(c) => c.in_ch,
        }
    }

    pub fn out_ch(&self) -> usize {
        match self {
            HeadConfig::Aspp(c) => c.out_ch,
            HeadConfig::Cascade(c) => c.out_ch,
            HeadConfig::Res2netSeg(c) => c.out_ch,
            HeadConfig::Wasp(c) => c.out_ch,
        }
    }
}

/// A complete network: backbone, head, decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub backbone: BackboneKind,
    pub head: HeadConfig,
    pub decoder: DecoderConfig,
}

fn dilated3x3(in_ch: usize, out_ch: usize, rate: usize) -> LayerKind {
    LayerKind::Conv {
        out_ch,
        in_ch,
        kh: 3,
        kw: 3,
        stride: (1, 1),
        rate: (rate, rate),
        padding: (rate, rate),
        bias: true,
    }
}

fn pointwise(in_ch: usize, out_ch: usize) -> LayerKind {
    LayerKind::Conv {
        out_ch,
        in_ch,
        kh: 1,
        kw: 1,
        stride: (1, 1),
        rate: (1, 1),
        padding: (0, 0),
        bias: true,
    }
}

fn check_rates(context: &str, rates: &[usize]) -> Result<()> {
    if rates.is_empty() {
        return Err(Error::Config(format!("{context}: empty rate list")));
    }
    if rates.iter().any(|r| *r < 1) {
        return Err(Error::Config(format!("{context}: rates must be >= 1")));
    }
    Ok(())
}

pub fn append_aspp(
    b: &mut GraphBuilder,
    input: NodeId,
    cfg: &AsppConfig,
    prefix: &str,
) -> Result<NodeId> {
    check_rates("aspp", &cfg.rates)?;
    let mut branch_outs = Vec::new();
    for (i, r) in cfg.rates.iter().enumerate() {
        let conv = b.add(
            format!("{prefix}.b{}.conv", i + 1),
            dilated3x3(cfg.in_ch, cfg.branch_ch, *r),
            &[input],
        )?;
        let act = b.add(format!("{prefix}.b{}.relu", i + 1), LayerKind::Relu, &[conv])?;
        let proj = b.add(
            format!("{prefix}.b{}.proj", i + 1),
            pointwise(cfg.branch_ch, cfg.out_ch),
            &[act],
        )?;
        branch_outs.push(proj);
    }
    match (cfg.fusion, branch_outs.len()) {
        (_, 1) => Ok(branch_outs[0]),
        (Fusion::Sum, _) => b.add(format!("{prefix}.fuse"), LayerKind::Sum, &branch_outs),
        (Fusion::Concat, n) => {
            let cat = b.add(format!("{prefix}.concat"), LayerKind::Concat, &branch_outs)?;
            b.add(
                format!("{prefix}.fuse"),
                pointwise(n * cfg.out_ch, cfg.out_ch),
                &[cat],
            )
        }
    }
}

pub fn append_cascade(
    b: &mut GraphBuilder,
    input: NodeId,
    cfg: &CascadeConfig,
    prefix: &str,
) -> Result<NodeId> {
    check_rates("cascade", &cfg.rates)?;
    if cfg.rates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "cascade: rates must be strictly increasing, got {:?}",
            cfg.rates
        )));
    }
    let mut cur = input;
    let mut ch = cfg.in_ch;
    for (i, r) in cfg.rates.iter().enumerate() {
        let conv = b.add(
            format!("{prefix}.s{}.conv", i + 1),
            dilated3x3(ch, cfg.branch_ch, *r),
            &[cur],
        )?;
        cur = b.add(format!("{prefix}.s{}.relu", i + 1), LayerKind::Relu, &[conv])?;
        ch = cfg.branch_ch;
    }
    b.add(format!("{prefix}.proj"), pointwise(ch, cfg.out_ch), &[cur])
}

pub fn append_wasp(
    b: &mut GraphBuilder,
    input: NodeId,
    cfg: &WaspConfig,
    prefix: &str,
) -> Result<NodeId> {
    check_rates("wasp", &cfg.rates)?;
    if cfg.rates.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config(format!(
            "wasp: rates must be ordered, got {:?}",
            cfg.rates
        )));
    }
    let mut taps = Vec::new();
    let mut prev = input;
    let mut prev_ch = cfg.in_ch;
    for (i, r) in cfg.rates.iter().enumerate() {
        let conv = b.add(
            format!("{prefix}.b{}.conv", i + 1),
            dilated3x3(prev_ch, cfg.branch_ch, *r),
            &[prev],
        )?;
        let act = b.add(format!("{prefix}.b{}.relu", i + 1), LayerKind::Relu, &[conv])?;
        let tap = b.add(
            format!("{prefix}.b{}.tap", i + 1),
            pointwise(cfg.branch_ch, cfg.branch_ch),
            &[act],
        )?;
        taps.push(tap);
        prev = act;
        prev_ch = cfg.branch_ch;
    }
    if cfg.gap_branch {
        let pool = b.add(format!("{prefix}.gap.pool"), LayerKind::GlobalAvgPool, &[input])?;
        let squeeze = b.add(
            format!("{prefix}.gap.conv"),
            pointwise(cfg.in_ch, cfg.branch_ch),
            &[pool],
        )?;
        let broad = b.add(
            format!("{prefix}.gap.broadcast"),
            LayerKind::Bilinear {
                target: ResizeTarget::MatchRef,
            },
            &[squeeze, input],
        )?;
        taps.push(broad);
    }
    let fused_in = if taps.len() == 1 {
        taps[0]
    } else {
        b.add(format!("{prefix}.concat"), LayerKind::Concat, &taps)?
    };
    b.add(
        format!("{prefix}.fuse"),
        pointwise(taps.len() * cfg.branch_ch, cfg.out_ch),
        &[fused_in],
    )
}

pub fn append_res2net_seg(
    b: &mut GraphBuilder,
    input: NodeId,
    cfg: &Res2netSegConfig,
    prefix: &str,
) -> Result<NodeId> {
    if cfg.scales < 2 {
        return Err(Error::Config("res2net-seg: needs at least 2 scales".into()));
    }
    if cfg.in_ch % cfg.scales != 0 {
        return Err(Error::shape(
            "res2net-seg",
            format!("{} channels not divisible by {} scales", cfg.in_ch, cfg.scales),
        ));
    }
    let rates = cfg.effective_rates()?.to_vec();
    check_rates("res2net-seg", &rates)?;
    let group = cfg.in_ch / cfg.scales;

    let mut splits = Vec::new();
    for s in 0..cfg.scales {
        splits.push(b.add(
            format!("{prefix}.split{}", s + 1),
            LayerKind::Split {
                index: s,
                parts: cfg.scales,
            },
            &[input],
        )?);
    }
    let mut group_outs = vec![splits[0]];
    for s in 1..cfg.scales {
        let add = b.add(
            format!("{prefix}.scale{}.add", s + 1),
            LayerKind::Sum,
            &[splits[s], group_outs[s - 1]],
        )?;
        let conv = b.add(
            format!("{prefix}.scale{}.conv", s + 1),
            dilated3x3(group, group, rates[s - 1]),
            &[add],
        )?;
        let act = b.add(format!("{prefix}.scale{}.relu", s + 1), LayerKind::Relu, &[conv])?;
        group_outs.push(act);
    }

    let pool = b.add(format!("{prefix}.gap.pool"), LayerKind::GlobalAvgPool, &[input])?;
    let broad = b.add(
        format!("{prefix}.gap.broadcast"),
        LayerKind::Bilinear {
            target: ResizeTarget::MatchRef,
        },
        &[pool, input],
    )?;

    let mut cat_in = group_outs;
    cat_in.push(broad);
    let cat = b.add(format!("{prefix}.concat"), LayerKind::Concat, &cat_in)?;
    let gated = b.add(
        format!("{prefix}.se"),
        LayerKind::SeGate {
            channels: 2 * cfg.in_ch,
            reduction: cfg.se_reduction,
        },
        &[cat],
    )?;
    b.add(format!("{prefix}.proj"), pointwise(2 * cfg.in_ch, cfg.out_ch), &[gated])
}

pub fn append_head(
    b: &mut GraphBuilder,
    input: NodeId,
    head: &HeadConfig,
    prefix: &str,
) -> Result<NodeId> {
    if b.channels(input) != head.in_ch() {
        return Err(Error::Config(format!(
            "head {} expects {} input channels, backbone provides {}",
            head.kind_name(),
            head.in_ch(),
            b.channels(input)
        )));
    }
    match head {
        HeadConfig::Aspp(cfg) => append_aspp(b, input, cfg, prefix),
        HeadConfig::Cascade(cfg) => append_cascade(b, input, cfg, prefix),
        HeadConfig::Res2netSeg(cfg) => append_res2net_seg(b, input, cfg, prefix),
        HeadConfig::Wasp(cfg) => append_wasp(b, input, cfg, prefix),
    }
}

/// Decoder: score maps upsampled x2 to the low-level resolution,
/// concatenated, refined by two conv+dropout stages, projected to class
/// logits, and upsampled x4 to the input resolution.
pub fn append_decoder(
    b: &mut GraphBuilder,
    score: NodeId,
    lowlevel: NodeId,
    cfg: &DecoderConfig,
    prefix: &str,
) -> Result<NodeId> {
    if cfg.num_classes == 0 || cfg.score_ch == 0 || cfg.lowlevel_ch == 0 {
        return Err(Error::Config("decoder: channel counts must be positive".into()));
    }
    if b.channels(score) != cfg.score_ch || b.channels(lowlevel) != cfg.lowlevel_ch {
        return Err(Error::Config(format!(
            "decoder expects {}+{} channels, got {}+{}",
            cfg.score_ch,
            cfg.lowlevel_ch,
            b.channels(score),
            b.channels(lowlevel)
        )));
    }
    let up2 = b.add(
        format!("{prefix}.up2"),
        LayerKind::Bilinear {
            target: ResizeTarget::Scale { factor: 2 },
        },
        &[score],
    )?;
    let cat = b.add(format!("{prefix}.concat"), LayerKind::Concat, &[up2, lowlevel])?;
    let mut cur = cat;
    let mut ch = cfg.score_ch + cfg.lowlevel_ch;
    for i in 1..=2 {
        let conv = b.add(
            format!("{prefix}.conv{i}"),
            LayerKind::Conv {
                out_ch: cfg.conv_ch,
                in_ch: ch,
                kh: 3,
                kw: 3,
                stride: (1, 1),
                rate: (1, 1),
                padding: (1, 1),
                bias: true,
            },
            &[cur],
        )?;
        let act = b.add(format!("{prefix}.relu{i}"), LayerKind::Relu, &[conv])?;
        cur = b.add(
            format!("{prefix}.drop{i}"),
            LayerKind::Dropout { p: cfg.dropout },
            &[act],
        )?;
        ch = cfg.conv_ch;
    }
    let proj = b.add(format!("{prefix}.proj"), pointwise(ch, cfg.num_classes), &[cur])?;
    b.add(
        format!("{prefix}.up4"),
        LayerKind::Bilinear {
            target: ResizeTarget::Scale { factor: 4 },
        },
        &[proj],
    )
}

fn conv3x3(in_ch: usize, out_ch: usize, stride: usize, bias: bool) -> LayerKind {
    LayerKind::Conv {
        out_ch,
        in_ch,
        kh: 3,
        kw: 3,
        stride: (stride, stride),
        rate: (1, 1),
        padding: (1, 1),
        bias,
    }
}

/// Conv + batchnorm + relu.
fn cbr(
    b: &mut GraphBuilder,
    input: NodeId,
    kind: LayerKind,
    channels: usize,
    name: &str,
) -> Result<NodeId> {
    let conv = b.add(format!("{name}.conv"), kind, &[input])?;
    let bn = b.add(format!("{name}.bn"), LayerKind::BatchNorm { channels }, &[conv])?;
    b.add(format!("{name}.relu"), LayerKind::Relu, &[bn])
}

pub fn append_toy_resnet(
    b: &mut GraphBuilder,
    input: NodeId,
    depth: usize,
    width: usize,
) -> Result<(NodeId, NodeId)> {
    if depth == 0 || width == 0 {
        return Err(Error::Config("toy-resnet: depth and width must be positive".into()));
    }
    let stem = cbr(b, input, conv3x3(3, width, 2, false), width, "backbone.stem")?;
    let tap = cbr(b, stem, conv3x3(width, width, 2, false), width, "backbone.stage2")?;
    let mut cur = cbr(b, tap, conv3x3(width, 2 * width, 2, false), 2 * width, "backbone.stage3")?;
    for d in 0..depth {
        let name = format!("backbone.block{}", d + 1);
        let c1 = b.add(
            format!("{name}.conv1"),
            conv3x3(2 * width, 2 * width, 1, false),
            &[cur],
        )?;
        let n1 = b.add(
            format!("{name}.bn1"),
            LayerKind::BatchNorm { channels: 2 * width },
            &[c1],
        )?;
        let r1 = b.add(format!("{name}.relu1"), LayerKind::Relu, &[n1])?;
        let c2 = b.add(
            format!("{name}.conv2"),
            conv3x3(2 * width, 2 * width, 1, false),
            &[r1],
        )?;
        let n2 = b.add(
            format!("{name}.bn2"),
            LayerKind::BatchNorm { channels: 2 * width },
            &[c2],
        )?;
        let sum = b.add(format!("{name}.add"), LayerKind::Sum, &[n2, cur])?;
        cur = b.add(format!("{name}.relu2"), LayerKind::Relu, &[sum])?;
    }
    Ok((cur, tap))
}

fn bottleneck(
    b: &mut GraphBuilder,
    input: NodeId,
    in_ch: usize,
    planes: usize,
    stride: usize,
    dilation: usize,
    name: &str,
) -> Result<NodeId> {
    let out_ch = planes * 4;
    let c1 = b.add(
        format!("{name}.conv1"),
        LayerKind::Conv {
            out_ch: planes,
            in_ch,
            kh: 1,
            kw: 1,
            stride: (1, 1),
            rate: (1, 1),
            padding: (0, 0),
            bias: false,
        },
        &[input],
    )?;
    let n1 = b.add(format!("{name}.bn1"), LayerKind::BatchNorm { channels: planes }, &[c1])?;
    let r1 = b.add(format!("{name}.relu1"), LayerKind::Relu, &[n1])?;
    let c2 = b.add(
        format!("{name}.conv2"),
        LayerKind::Conv {
            out_ch: planes,
            in_ch: planes,
            kh: 3,
            kw: 3,
            stride: (stride, stride),
            rate: (dilation, dilation),
            padding: (dilation, dilation),
            bias: false,
        },
        &[r1],
    )?;
    let n2 = b.add(format!("{name}.bn2"), LayerKind::BatchNorm { channels: planes }, &[c2])?;
    let r2 = b.add(format!("{name}.relu2"), LayerKind::Relu, &[n2])?;
    let c3 = b.add(
        format!("{name}.conv3"),
        LayerKind::Conv {
            out_ch,
            in_ch: planes,
            kh: 1,
            kw: 1,
            stride: (1, 1),
            rate: (1, 1),
            padding: (0, 0),
            bias: false,
        },
        &[r2],
    )?;
    let n3 = b.add(format!("{name}.bn3"), LayerKind::BatchNorm { channels: out_ch }, &[c3])?;
    let shortcut = if stride != 1 || in_ch != out_ch {
        let dc = b.add(
            format!("{name}.down.conv"),
            LayerKind::Conv {
                out_ch,
                in_ch,
                kh: 1,
                kw: 1,
                stride: (stride, stride),
                rate: (1, 1),
                padding: (0, 0),
                bias: false,
            },
            &[input],
        )?;
        b.add(format!("{name}.down.bn"), LayerKind::BatchNorm { channels: out_ch }, &[dc])?
    } else {
        input
    };
    let sum = b.add(format!("{name}.add"), LayerKind::Sum, &[n3, shortcut])?;
    b.add(format!("{name}.relu3"), LayerKind::Relu, &[sum])
}

/// ResNet-101 trunk at output stride 8: strides 2-2-1 in the stem and
/// stages 2-4, with stages 3 and 4 dilated (rates 2 and 4) instead of
/// strided. The low-level tap is the stage-1 output at stride 4.
pub fn append_resnet101(b: &mut GraphBuilder, input: NodeId) -> Result<(NodeId, NodeId)> {
    let c1 = b.add(
        "backbone.conv1",
        LayerKind::Conv {
            out_ch: 64,
            in_ch: 3,
            kh: 7,
            kw: 7,
            stride: (2, 2),
            rate: (1, 1),
            padding: (3, 3),
            bias: false,
        },
        &[input],
    )?;
    let n1 = b.add("backbone.bn1", LayerKind::BatchNorm { channels: 64 }, &[c1])?;
    let r1 = b.add("backbone.relu1", LayerKind::Relu, &[n1])?;
    let mut cur = b.add(
        "backbone.pool",
        LayerKind::MaxPool {
            k: 3,
            stride: 2,
            pad: 1,
        },
        &[r1],
    )?;

    let stages: [(usize, usize, usize, usize); 4] = [
        // (planes, blocks, stride of first block, dilation)
        (64, 3, 1, 1),
        (128, 4, 2, 1),
        (256, 23, 1, 2),
        (512, 3, 1, 4),
    ];
    let mut in_ch = 64;
    let mut tap = None;
    for (li, (planes, blocks, stride, dilation)) in stages.iter().enumerate() {
        for bi in 0..*blocks {
            let s = if bi == 0 { *stride } else { 1 };
            cur = bottleneck(
                b,
                cur,
                in_ch,
                *planes,
                s,
                *dilation,
                &format!("backbone.layer{}.b{}", li + 1, bi + 1),
            )?;
            in_ch = planes * 4;
        }
        if li == 0 {
            tap = Some(cur);
        }
    }
    Ok((cur, tap.expect("stage 1 always present")))
}

pub fn append_backbone(
    b: &mut GraphBuilder,
    input: NodeId,
    kind: &BackboneKind,
) -> Result<(NodeId, NodeId)> {
    match kind {
        BackboneKind::Resnet101Counting => append_resnet101(b, input),
        BackboneKind::ToyResnet { depth, width } => append_toy_resnet(b, input, *depth, *width),
    }
}

fn head_meta(b: &mut GraphBuilder, head: &HeadConfig) {
    b.meta_mut().head_kind = Some(head.kind_name().to_string());
    b.meta_mut().rates = head.rates().to_vec();
}

/// Standalone head graph whose input is the backbone feature map.
pub fn build_head(head: &HeadConfig) -> Result<ModuleGraph> {
    let mut b = GraphBuilder::new(head.kind_name());
    head_meta(&mut b, head);
    let input = b.input("input", head.in_ch());
    let out = append_head(&mut b, input, head, head.kind_name())?;
    b.finish(out)
}

pub fn build_aspp(cfg: &AsppConfig) -> Result<ModuleGraph> {
    build_head(&HeadConfig::Aspp(cfg.clone()))
}

pub fn build_cascade(cfg: &CascadeConfig) -> Result<ModuleGraph> {
    build_head(&HeadConfig::Cascade(cfg.clone()))
}

pub fn build_res2net_seg(cfg: &Res2netSegConfig) -> Result<ModuleGraph> {
    build_head(&HeadConfig::Res2netSeg(cfg.clone()))
}

pub fn build_wasp(cfg: &WaspConfig) -> Result<ModuleGraph> {
    build_head(&HeadConfig::Wasp(cfg.clone()))
}

/// Standalone decoder graph with two inputs: score maps and low-level
/// features (in that order).
pub fn build_decoder(cfg: &DecoderConfig) -> Result<ModuleGraph> {
    let mut b = GraphBuilder::new("decoder");
    let score = b.input("score", cfg.score_ch);
    let lowlevel = b.input("lowlevel", cfg.lowlevel_ch);
    let out = append_decoder(&mut b, score, lowlevel, cfg, "decoder")?;
    b.finish(out)
}

/// Standalone backbone graph; the low-level tap node id is recorded in
/// the graph metadata name `lowlevel` for lookup.
pub fn build_backbone(kind: &BackboneKind) -> Result<ModuleGraph> {
    let mut b = GraphBuilder::new("backbone");
    let input = b.input("input", 3);
    let (out, _tap) = append_backbone(&mut b, input, kind)?;
    b.finish(out)
}

/// Full image-to-logits network.
pub fn build_network(cfg: &NetworkConfig) -> Result<ModuleGraph> {
    if cfg.head.in_ch() != cfg.backbone.out_channels() {
        return Err(Error::Config(format!(
            "head expects {} channels but backbone {} provides {}",
            cfg.head.in_ch(),
            match cfg.backbone {
                BackboneKind::Resnet101Counting => "resnet101-counting",
                BackboneKind::ToyResnet { .. } => "toy-resnet",
            },
            cfg.backbone.out_channels()
        )));
    }
    if cfg.decoder.score_ch != cfg.head.out_ch() {
        return Err(Error::Config(format!(
            "decoder expects {} score channels but head emits {}",
            cfg.decoder.score_ch,
            cfg.head.out_ch()
        )));
    }
    if cfg.decoder.lowlevel_ch != cfg.backbone.lowlevel_channels() {
        return Err(Error::Config(format!(
            "decoder expects {} low-level channels but backbone taps {}",
            cfg.decoder.lowlevel_ch,
            cfg.backbone.lowlevel_channels()
        )));
    }
    let mut b = GraphBuilder::new(format!("{}-net", cfg.head.kind_name()));
    head_meta(&mut b, &cfg.head);
    let input = b.input("input", 3);
    let (feat, tap) = append_backbone(&mut b, input, &cfg.backbone)?;
    let score = append_head(&mut b, feat, &cfg.head, cfg.head.kind_name())?;
    let logits = append_decoder(&mut b, score, tap, &cfg.decoder, "decoder")?;
    b.finish(logits)
}

impl NetworkConfig {
    /// The documented default configuration behind the parameter-accounting
    /// report: ResNet-101 trunk, 21 classes, decoder width 128, ASPP
    /// branches at 256 channels, WASP branches and taps at 224, literal
    /// res2net-seg split of the 2048 backbone channels.
    pub fn reference(head_kind: &str) -> Result<NetworkConfig> {
        let head = match head_kind {
            "aspp" => HeadConfig::Aspp(AsppConfig::default()),
            "cascade" => HeadConfig::Cascade(CascadeConfig::default()),
            "res2net-seg" => HeadConfig::Res2netSeg(Res2netSegConfig::default()),
            "wasp" => HeadConfig::Wasp(WaspConfig::default()),
            other => {
                return Err(Error::Config(format!(
                    "unknown head kind {other:?} (expected aspp, cascade, res2net-seg or wasp)"
                )))
            }
        };
        Ok(NetworkConfig {
            backbone: BackboneKind::Resnet101Counting,
            head,
            decoder: DecoderConfig::default(),
        })
    }

    /// Small trainable configuration used by the synthetic-data harness.
    pub fn toy(head_kind: &str, num_classes: usize) -> Result<NetworkConfig> {
        let backbone = BackboneKind::ToyResnet { depth: 2, width: 16 };
        let in_ch = backbone.out_channels();
        let head = match head_kind {
            "aspp" => HeadConfig::Aspp(AsppConfig {
                in_ch,
                branch_ch: 16,
                out_ch: 32,
                ..AsppConfig::default()
            }),
            "cascade" => HeadConfig::Cascade(CascadeConfig {
                in_ch,
                branch_ch: 16,
                out_ch: 32,
                ..CascadeConfig::default()
            }),
            "res2net-seg" => HeadConfig::Res2netSeg(Res2netSegConfig {
                in_ch,
                scales: 4,
                se_reduction: 4,
                out_ch: 32,
                ..Res2netSegConfig::default()
            }),
            "wasp" => HeadConfig::Wasp(WaspConfig {
                in_ch,
                branch_ch: 16,
                out_ch: 32,
                ..WaspConfig::default()
            }),
            other => {
                return Err(Error::Config(format!(
                    "unknown head kind {other:?} (expected aspp, cascade, res2net-seg or wasp)"
                )))
            }
        };
        let decoder = DecoderConfig {
            score_ch: head.out_ch(),
            lowlevel_ch: backbone.lowlevel_channels(),
            num_classes,
            conv_ch: 32,
            dropout: 0.5,
        };
        Ok(NetworkConfig {
            backbone,
            head,
            decoder,
        })
    }
}
