//! The two-path network: a shared residual backbone and decoder producing the
//! occlusion cue `D`, an edge path fusing low-level side outputs with `D`, and
//! an orientation path running MCL, BRF and the stripe head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{resize_to, Brf, BrfConfig, ConvLayer, EdgePath, EdgePathConfig, Mcl, MclConfig, ParamBuilder, StripeConfig, StripeHead};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::ConvSpec;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Total downsampling of the backbone.
pub const BACKBONE_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub stem_channels: usize,
    /// Widths of the three stride-2 stages.
    pub stage_channels: [usize; 3],
    /// Dilation of the extra residual block appended to the last stage
    /// (in place of further striding). 0 disables the block.
    pub last_stage_dilation: usize,
    /// Decoder widths from the coarsest level upwards; the final level emits
    /// `brf.occlusion_channels`.
    pub decoder_channels: [usize; 3],
}

impl BackboneSpec {
    pub fn tiny() -> Self {
        BackboneSpec {
            name: "tiny".into(),
            stem_channels: 16,
            stage_channels: [32, 48, 64],
            last_stage_dilation: 2,
            decoder_channels: [32, 32, 16],
        }
    }

    pub fn small() -> Self {
        BackboneSpec {
            name: "small".into(),
            stem_channels: 32,
            stage_channels: [64, 96, 128],
            last_stage_dilation: 2,
            decoder_channels: [64, 48, 32],
        }
    }

    /// Channels of backbone level `i` (0 = stem at full resolution).
    pub fn level_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.stem_channels
        } else {
            self.stage_channels[i - 1]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelVariant {
    pub backbone: BackboneSpec,
    pub mcl: MclConfig,
    pub brf: BrfConfig,
    pub stripe: StripeConfig,
    pub edge: EdgePathConfig,
    /// MCL runs on the deepest features upsampled to `1/mcl_stride` of the
    /// input resolution.
    pub mcl_stride: usize,
    /// Replace the MCL by a single plain 3x3 conv.
    pub disable_mcl: bool,
    /// Force both stripe kernels to 3x3.
    pub disable_stripe: bool,
    /// Single-flow baseline: both heads read `D` directly, without low-level
    /// cues, MCL, BRF or stripes.
    pub share_decoder_only: bool,
    /// The edge path gets its own decoder instead of the shared one.
    pub single_edge_stream: bool,
    /// The orientation path gets its own decoder instead of the shared one.
    pub single_ori_stream: bool,
}

impl Default for ModelVariant {
    fn default() -> Self {
        Self::tiny()
    }
}

pub const VARIANT_NAMES: [&str; 6] = ["full", "no-mcl", "head-3x3", "baseline", "single-edge", "single-ori"];

impl ModelVariant {
    pub fn tiny() -> Self {
        ModelVariant {
            backbone: BackboneSpec::tiny(),
            mcl: MclConfig { branch_channels: 32, ..MclConfig::default() },
            brf: BrfConfig { bilateral_channels: 64, occlusion_channels: 16, fused_channels: 16 },
            stripe: StripeConfig::default(),
            edge: EdgePathConfig::default(),
            mcl_stride: 2,
            disable_mcl: false,
            disable_stripe: false,
            share_decoder_only: false,
            single_edge_stream: false,
            single_ori_stream: false,
        }
    }

    pub fn small() -> Self {
        ModelVariant {
            backbone: BackboneSpec::small(),
            mcl: MclConfig::default(),
            brf: BrfConfig { bilateral_channels: 64, occlusion_channels: 16, fused_channels: 32 },
            stripe: StripeConfig { channels: 32, ..StripeConfig::default() },
            edge: EdgePathConfig { side_channels: 16, fused_channels: 32, ..EdgePathConfig::default() },
            ..Self::tiny()
        }
    }

    /// Named ablation rows on top of `base`.
    pub fn named(base: ModelVariant, name: &str) -> Result<Self> {
        let mut v = base;
        match name {
            "full" => {}
            "no-mcl" => v.disable_mcl = true,
            "head-3x3" => v.disable_stripe = true,
            "baseline" => v.share_decoder_only = true,
            "single-edge" => v.single_edge_stream = true,
            "single-ori" => v.single_ori_stream = true,
            other => {
                return Err(Error::config(format!("unknown variant {other:?}; expected one of {}", VARIANT_NAMES.join(", "))))
            }
        }
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.stem_channels == 0 || b.stage_channels.contains(&0) || b.decoder_channels.contains(&0) {
            return Err(Error::config(format!("backbone {:?} has a zero width", b.name)));
        }
        self.mcl.validate()?;
        self.brf.validate()?;
        self.stripe.validate()?;
        if self.edge.taps.is_empty() || self.edge.taps.iter().any(|&t| t > 2) {
            return Err(Error::config(format!("edge taps {:?} must be non-empty levels in 0..=2", self.edge.taps)));
        }
        if self.edge.side_channels == 0 || self.edge.fused_channels == 0 {
            return Err(Error::config("edge path widths must be positive"));
        }
        if !matches!(self.mcl_stride, 1 | 2 | 4 | 8) {
            return Err(Error::config(format!("mcl_stride {} must divide the backbone stride", self.mcl_stride)));
        }
        if self.share_decoder_only && (self.disable_mcl || self.disable_stripe) {
            return Err(Error::config("the shared-decoder baseline has no MCL or stripe head to disable"));
        }
        Ok(())
    }

    /// Smallest input side the network accepts without padding.
    pub fn min_input_size(&self) -> usize {
        let mcl = if self.share_decoder_only || self.disable_mcl { 1 } else { self.mcl_stride * self.mcl.min_input_size() };
        round_up(mcl.max(BACKBONE_STRIDE), BACKBONE_STRIDE)
    }

    fn effective_stripe(&self) -> StripeConfig {
        if self.disable_stripe {
            StripeConfig::plain(3, self.stripe.channels)
        } else {
            self.stripe
        }
    }
}

fn round_up(x: usize, m: usize) -> usize {
    x.div_ceil(m) * m
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: ConvLayer,
    conv2: ConvLayer,
    shortcut: Option<ConvLayer>,
}

impl ResBlock {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, stride: usize, dilation: usize) -> Result<Self> {
        let conv1 = pb.conv(&format!("{name}.conv1"), cin, ConvSpec::same(cout, 3, 3, dilation).with_stride(stride))?;
        let conv2 = pb.conv(&format!("{name}.conv2"), cout, ConvSpec::same(cout, 3, 3, dilation))?;
        let shortcut = if stride != 1 || cin != cout {
            Some(pb.conv(&format!("{name}.shortcut"), cin, ConvSpec::same(cout, 1, 1, 1).with_stride(stride))?)
        } else {
            None
        };
        Ok(ResBlock { conv1, conv2, shortcut })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward_relu(g, ps, x)?;
        let y = self.conv2.forward(g, ps, y)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, ps, x)?,
            None => x,
        };
        let sum = g.add(y, skip)?;
        Ok(g.relu(sum))
    }
}

#[derive(Clone, Debug)]
struct Backbone {
    stem: [ConvLayer; 2],
    stages: Vec<Vec<ResBlock>>,
}

impl Backbone {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, spec: &BackboneSpec) -> Result<Self> {
        let c0 = spec.stem_channels;
        let stem = [
            pb.conv("backbone.stem0", 3, ConvSpec::same(c0, 3, 3, 1))?,
            pb.conv("backbone.stem1", c0, ConvSpec::same(c0, 3, 3, 1))?,
        ];
        let mut stages = Vec::new();
        let mut cin = c0;
        for (i, &c) in spec.stage_channels.iter().enumerate() {
            let mut blocks = vec![ResBlock::new(pb, &format!("backbone.stage{}.block0", i + 1), cin, c, 2, 1)?];
            if i == 2 && spec.last_stage_dilation > 0 {
                blocks.push(ResBlock::new(pb, "backbone.stage3.block1", c, c, 1, spec.last_stage_dilation)?);
            }
            stages.push(blocks);
            cin = c;
        }
        Ok(Backbone { stem, stages })
    }

    /// Features at strides 1, 2, 4 and 8.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<[Var; 4]> {
        let s0 = self.stem[0].forward_relu(g, ps, x)?;
        let s0 = self.stem[1].forward_relu(g, ps, s0)?;
        let mut levels = [s0; 4];
        let mut y = s0;
        for (i, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                y = b.forward(g, ps, y)?;
            }
            levels[i + 1] = y;
        }
        Ok(levels)
    }
}

/// Top-down decoder: upsample, concatenate the skip level, 3x3 conv.
#[derive(Clone, Debug)]
struct Decoder {
    reduce: ConvLayer,
    fuse: [ConvLayer; 3],
}

impl Decoder {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, spec: &BackboneSpec, out_channels: usize) -> Result<Self> {
        let [d3, d2, d1] = spec.decoder_channels;
        let reduce = pb.conv(&format!("{name}.reduce"), spec.stage_channels[2], ConvSpec::same(d3, 1, 1, 1))?;
        let fuse = [
            pb.conv(&format!("{name}.fuse2"), d3 + spec.level_channels(2), ConvSpec::same(d2, 3, 3, 1))?,
            pb.conv(&format!("{name}.fuse1"), d2 + spec.level_channels(1), ConvSpec::same(d1, 3, 3, 1))?,
            pb.conv(&format!("{name}.fuse0"), d1 + spec.level_channels(0), ConvSpec::same(out_channels, 3, 3, 1))?,
        ];
        Ok(Decoder { reduce, fuse })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, levels: &[Var; 4]) -> Result<Var> {
        let mut d = self.reduce.forward_relu(g, ps, levels[3])?;
        for (conv, &skip) in self.fuse.iter().zip(levels[..3].iter().rev()) {
            let size = spatial(g, skip)?;
            let up = resize_to(g, d, size)?;
            let cat = g.concat_channels(up, skip)?;
            d = conv.forward_relu(g, ps, cat)?;
        }
        Ok(d)
    }
}

/// Plain conv stack ending in a one-channel output, used by the baseline.
#[derive(Clone, Debug)]
struct PlainHead {
    convs: Vec<ConvLayer>,
    out: ConvLayer,
}

impl PlainHead {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, width: usize, depth: usize) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c = cin;
        for i in 0..depth {
            convs.push(pb.conv(&format!("{name}.conv{i}"), c, ConvSpec::same(width, 3, 3, 1))?);
            c = width;
        }
        let out = pb.conv(&format!("{name}.out"), c, ConvSpec::same(1, 1, 1, 1))?;
        Ok(PlainHead { convs, out })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, mut x: Var) -> Result<Var> {
        for c in &self.convs {
            x = c.forward_relu(g, ps, x)?;
        }
        self.out.forward(g, ps, x)
    }
}

#[derive(Clone, Debug)]
enum Context {
    Mcl(Mcl),
    Plain(ConvLayer),
}

#[derive(Clone, Debug)]
struct OrientationPath {
    context: Context,
    brf: Brf,
    stripe: StripeHead,
    out: ConvLayer,
}

#[derive(Clone, Debug)]
enum EdgeHead {
    Path(EdgePath),
    Plain(PlainHead),
}

#[derive(Clone, Debug)]
enum OriHead {
    Path(OrientationPath),
    Plain(PlainHead),
}

#[derive(Clone, Debug)]
struct Network {
    backbone: Backbone,
    shared_decoder: Option<Decoder>,
    edge_decoder: Option<Decoder>,
    ori_decoder: Option<Decoder>,
    edge: EdgeHead,
    ori: OriHead,
}

/// Graph nodes produced by one forward pass, at the input resolution.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub edge_logits: Var,
    pub edge_prob: Var,
    pub orientation: Var,
}

/// Detached network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub edge_prob: Tensor<T>,
    pub orientation: Tensor<T>,
}

pub struct Model<T> {
    variant: ModelVariant,
    params: ParamStore<T>,
    net: Network,
}

/// Builds a model with parameters drawn deterministically from `seed`.
pub fn build_model<T: Scalar>(variant: &ModelVariant, seed: u64) -> Result<Model<T>> {
    variant.validate()?;
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pb = ParamBuilder::new(&mut params, &mut rng);
    let net = build_network(&mut pb, variant)?;
    Ok(Model { variant: variant.clone(), params, net })
}

fn build_network<T: Scalar>(pb: &mut ParamBuilder<'_, T>, v: &ModelVariant) -> Result<Network> {
    let spec = &v.backbone;
    let occ = v.brf.occlusion_channels;
    let backbone = Backbone::new(pb, spec)?;
    let shared = !(v.single_edge_stream && v.single_ori_stream);
    let shared_decoder = if shared { Some(Decoder::new(pb, "decoder", spec, occ)?) } else { None };
    let edge_decoder = if v.single_edge_stream { Some(Decoder::new(pb, "edge.decoder", spec, occ)?) } else { None };
    let ori_decoder = if v.single_ori_stream { Some(Decoder::new(pb, "ori.decoder", spec, occ)?) } else { None };

    let (edge, ori) = if v.share_decoder_only {
        (
            EdgeHead::Plain(PlainHead::new(pb, "edge.head", occ, v.edge.fused_channels, 1 + v.edge.refine_depth)?),
            OriHead::Plain(PlainHead::new(pb, "ori.head", occ, v.brf.fused_channels, 2)?),
        )
    } else {
        let low: Vec<usize> = v.edge.taps.iter().map(|&t| spec.level_channels(t)).collect();
        let edge = EdgeHead::Path(EdgePath::new(pb, "edge", &low, occ, &v.edge)?);
        let deep = spec.stage_channels[2];
        let bil = v.brf.bilateral_channels;
        let context = if v.disable_mcl {
            Context::Plain(pb.conv("ori.context", deep, ConvSpec::same(bil, 3, 3, 1))?)
        } else {
            Context::Mcl(Mcl::new(pb, "ori.mcl", deep, bil, &v.mcl)?)
        };
        let brf = Brf::new(pb, "ori.brf", &v.brf)?;
        let stripe_cfg = v.effective_stripe();
        let stripe = StripeHead::new(pb, "ori.stripe", v.brf.fused_channels, &stripe_cfg)?;
        let out = pb.conv("ori.out", stripe_cfg.channels, ConvSpec::same(1, 1, 1, 1))?;
        (edge, OriHead::Path(OrientationPath { context, brf, stripe, out }))
    };
    Ok(Network { backbone, shared_decoder, edge_decoder, ori_decoder, edge, ori })
}

fn spatial<T: Scalar>(g: &Graph<T>, v: Var) -> Result<(usize, usize)> {
    let (_, _, h, w) = g.value(v).dims4()?;
    Ok((h, w))
}

impl<T: Scalar> Model<T> {
    pub fn variant(&self) -> &ModelVariant {
        &self.variant
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Records a forward pass. `image` is `N x 3 x H x W` with values in
    /// `[0, 1]`; inputs whose sides are not multiples of the backbone stride
    /// (or are too small for the MCL) are edge-padded and the outputs cropped
    /// back.
    pub fn forward_graph(&self, g: &mut Graph<T>, image: &Tensor<T>) -> Result<Outputs> {
        let (n, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::config(format!("expected a 3-channel image, got {c} channels")));
        }
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::config(format!("empty image batch {n}x{c}x{h}x{w}")));
        }
        image.ensure_finite("input image")?;
        let half = T::from_f64_lossy(0.5);
        let x = g.input(image.map(|v| v - half));
        let min = self.variant.min_input_size();
        let (ph, pw) = (round_up(h.max(min), BACKBONE_STRIDE), round_up(w.max(min), BACKBONE_STRIDE));
        let (top, left) = ((ph - h) / 2, (pw - w) / 2);
        let x = if (ph, pw) == (h, w) { x } else { g.pad_edge(x, top, ph - h - top, left, pw - w - left)? };

        let (edge_logits, orientation) = self.forward_padded(g, x)?;

        let crop = |g: &mut Graph<T>, v: Var| if (ph, pw) == (h, w) { Ok(v) } else { g.crop(v, top, left, h, w) };
        let edge_logits = crop(g, edge_logits)?;
        let orientation = crop(g, orientation)?;
        let edge_prob = g.sigmoid(edge_logits);
        Ok(Outputs { edge_logits, edge_prob, orientation })
    }

    fn forward_padded(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        let ps = &self.params;
        let net = &self.net;
        let levels = net.backbone.forward(g, ps, x)?;
        let shared = match &net.shared_decoder {
            Some(d) => Some(d.forward(g, ps, &levels)?),
            None => None,
        };
        let decode = |g: &mut Graph<T>, private: &Option<Decoder>| -> Result<Var> {
            match private {
                Some(d) => d.forward(g, ps, &levels),
                None => Ok(shared.expect("shared decoder exists when a path has no private one")),
            }
        };
        let d_edge = decode(g, &net.edge_decoder)?;
        let d_ori = decode(g, &net.ori_decoder)?;
        let full = spatial(g, levels[0])?;

        let edge_logits = match &net.edge {
            EdgeHead::Plain(head) => head.forward(g, ps, d_edge)?,
            EdgeHead::Path(path) => {
                let low: Vec<Var> = self.variant.edge.taps.iter().map(|&t| levels[t]).collect();
                path.forward(g, ps, &low, d_edge)?
            }
        };

        let orientation = match &net.ori {
            OriHead::Plain(head) => head.forward(g, ps, d_ori)?,
            OriHead::Path(p) => {
                let s = self.variant.mcl_stride;
                let deep = resize_to(g, levels[3], (full.0 / s, full.1 / s))?;
                let bilateral = match &p.context {
                    Context::Mcl(m) => m.forward(g, ps, deep)?,
                    Context::Plain(c) => c.forward_relu(g, ps, deep)?,
                };
                let bilateral = resize_to(g, bilateral, full)?;
                let fused = p.brf.forward(g, ps, bilateral, d_ori)?;
                let feats = p.stripe.forward(g, ps, fused)?;
                p.out.forward(g, ps, feats)?
            }
        };
        Ok((edge_logits, orientation))
    }

    /// Inference without gradient bookkeeping for the caller.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Prediction<T>> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, image)?;
        let edge_prob = g.value(out.edge_prob).clone();
        let orientation = g.value(out.orientation).clone();
        edge_prob.ensure_finite("edge probability")?;
        orientation.ensure_finite("orientation")?;
        Ok(Prediction { edge_prob, orientation })
    }
}
