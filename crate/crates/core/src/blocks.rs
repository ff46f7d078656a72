//! Network building blocks: the multi-rate context learner, bilateral
//! response fusion, the stripe-convolution reasoning head and the edge path.
//!
//! Blocks own only parameter ids; values live in a [`ParamStore`] and every
//! forward pass records onto a [`Graph`]. A ReLU follows every convolution
//! except the ones producing final logits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::ConvSpec;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Creates parameters with fan-in scaled normal initialisation (MSRA/He).
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder { store, rng }
    }

    pub fn conv(&mut self, name: &str, in_channels: usize, spec: ConvSpec) -> Result<ConvLayer> {
        spec.validate()?;
        if in_channels == 0 {
            return Err(Error::config(format!("{name}: zero input channels")));
        }
        let shape = spec.weight_shape(in_channels);
        let fan_in = (in_channels * spec.kernel_h * spec.kernel_w) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let rng = &mut *self.rng;
        let w = Tensor::from_fn(&shape, |_| T::from_f64_lossy(normal.sample(rng)));
        let weight = self.store.add(format!("{name}.weight"), w)?;
        let bias = self.store.add(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]))?;
        Ok(ConvLayer { weight, bias, spec, in_channels })
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        &mut *self.rng
    }
}

/// One convolution with bias.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
    pub in_channels: usize,
}

impl ConvLayer {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        g.conv2d(x, w, Some(b), &self.spec)
    }

    pub fn forward_relu<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.forward(g, ps, x)?;
        Ok(g.relu(y))
    }

    pub fn out_channels(&self) -> usize {
        self.spec.out_channels
    }
}

fn channels<T: Scalar>(g: &Graph<T>, v: Var) -> Result<usize> {
    Ok(g.value(v).dims4()?.1)
}

fn spatial<T: Scalar>(g: &Graph<T>, v: Var) -> Result<(usize, usize)> {
    let (_, _, h, w) = g.value(v).dims4()?;
    Ok((h, w))
}

/// Upsamples `v` to `(h, w)` unless it already has that size.
pub(crate) fn resize_to<T: Scalar>(g: &mut Graph<T>, v: Var, (h, w): (usize, usize)) -> Result<Var> {
    if spatial(g, v)? == (h, w) {
        Ok(v)
    } else {
        g.upsample_bilinear(v, h, w)
    }
}

// ---------------------------------------------------------------------------
// Multi-rate context learner

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MclConfig {
    pub dilation_rates: Vec<usize>,
    /// Width shared by every branch.
    pub branch_channels: usize,
    pub include_pointwise_branch: bool,
}

impl Default for MclConfig {
    fn default() -> Self {
        MclConfig { dilation_rates: vec![6, 12, 18], branch_channels: 64, include_pointwise_branch: true }
    }
}

impl MclConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilation_rates.iter().any(|&r| r == 0) {
            return Err(Error::config("MCL dilation rates must be positive"));
        }
        let mut sorted = self.dilation_rates.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.dilation_rates.len() {
            return Err(Error::config(format!("MCL dilation rates {:?} are not distinct", self.dilation_rates)));
        }
        if self.dilation_rates.is_empty() && !self.include_pointwise_branch {
            return Err(Error::config("MCL needs at least one branch"));
        }
        if self.branch_channels == 0 {
            return Err(Error::config("MCL branch width must be positive"));
        }
        Ok(())
    }

    /// Smallest input side on which the widest dilated kernel fits.
    pub fn min_input_size(&self) -> usize {
        self.dilation_rates.iter().map(|r| 2 * r + 1).max().unwrap_or(1)
    }
}

#[derive(Clone, Debug)]
struct Branch {
    entry: ConvLayer,
    refine: ConvLayer,
}

/// `B = Conv1x1( sum_i Dilated_i(X) + Conv1x1(X) )`, each branch refined by its own 3x3 conv.
#[derive(Clone, Debug)]
pub struct Mcl {
    cfg: MclConfig,
    branches: Vec<Branch>,
    fuse: ConvLayer,
}

impl Mcl {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, in_channels: usize, out_channels: usize, cfg: &MclConfig) -> Result<Self> {
        cfg.validate()?;
        let bc = cfg.branch_channels;
        let mut branches = Vec::new();
        for (i, &rate) in cfg.dilation_rates.iter().enumerate() {
            branches.push(Branch {
                entry: pb.conv(&format!("{name}.branch{i}.dilated"), in_channels, ConvSpec::same(bc, 3, 3, rate))?,
                refine: pb.conv(&format!("{name}.branch{i}.refine"), bc, ConvSpec::same(bc, 3, 3, 1))?,
            });
        }
        if cfg.include_pointwise_branch {
            branches.push(Branch {
                entry: pb.conv(&format!("{name}.pointwise"), in_channels, ConvSpec::same(bc, 1, 1, 1))?,
                refine: pb.conv(&format!("{name}.pointwise.refine"), bc, ConvSpec::same(bc, 3, 3, 1))?,
            });
        }
        let fuse = pb.conv(&format!("{name}.fuse"), bc, ConvSpec::same(out_channels, 1, 1, 1))?;
        Ok(Mcl { cfg: cfg.clone(), branches, fuse })
    }

    pub fn config(&self) -> &MclConfig {
        &self.cfg
    }

    /// Sum of the refined branch responses, before the fusing 1x1 conv.
    pub fn branch_sum<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let (h, w) = spatial(g, x)?;
        let need = self.cfg.min_input_size();
        if h < need || w < need {
            return Err(Error::config(format!(
                "MCL input {h}x{w} is smaller than the {need}x{need} footprint of dilation {}",
                (need - 1) / 2
            )));
        }
        let mut acc: Option<Var> = None;
        for b in &self.branches {
            let y = b.entry.forward_relu(g, ps, x)?;
            let y = b.refine.forward_relu(g, ps, y)?;
            acc = Some(match acc {
                None => y,
                Some(a) => g.add(a, y)?,
            });
        }
        Ok(acc.expect("validated: at least one branch"))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = self.branch_sum(g, ps, x)?;
        self.fuse.forward_relu(g, ps, s)
    }
}

// ---------------------------------------------------------------------------
// Bilateral response fusion

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrfConfig {
    pub bilateral_channels: usize,
    pub occlusion_channels: usize,
    pub fused_channels: usize,
}

impl Default for BrfConfig {
    fn default() -> Self {
        BrfConfig { bilateral_channels: 64, occlusion_channels: 16, fused_channels: 32 }
    }
}

impl BrfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bilateral_channels == 0 || self.occlusion_channels == 0 || self.fused_channels == 0 {
            return Err(Error::config(format!("BRF channel counts must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// `F = Conv3x3(Conv3x3(Concat(B, D)))`.
#[derive(Clone, Debug)]
pub struct Brf {
    cfg: BrfConfig,
    conv1: ConvLayer,
    conv2: ConvLayer,
}

impl Brf {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &BrfConfig) -> Result<Self> {
        cfg.validate()?;
        let fc = cfg.fused_channels;
        let conv1 = pb.conv(&format!("{name}.conv1"), cfg.bilateral_channels + cfg.occlusion_channels, ConvSpec::same(fc, 3, 3, 1))?;
        let conv2 = pb.conv(&format!("{name}.conv2"), fc, ConvSpec::same(fc, 3, 3, 1))?;
        Ok(Brf { cfg: *cfg, conv1, conv2 })
    }

    pub fn config(&self) -> &BrfConfig {
        &self.cfg
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, bilateral: Var, occlusion: Var) -> Result<Var> {
        let (cb, cd) = (channels(g, bilateral)?, channels(g, occlusion)?);
        if cb != self.cfg.bilateral_channels || cd != self.cfg.occlusion_channels {
            return Err(Error::config(format!(
                "BRF expects {}+{} channels, got {cb}+{cd}",
                self.cfg.bilateral_channels, self.cfg.occlusion_channels
            )));
        }
        let cat = g.concat_channels(bilateral, occlusion)?;
        let y = self.conv1.forward_relu(g, ps, cat)?;
        self.conv2.forward_relu(g, ps, y)
    }
}

// ---------------------------------------------------------------------------
// Stripe-convolution reasoning head

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StripeConfig {
    /// `(h, w)` of the vertical stripe.
    pub vertical_kernel: (usize, usize),
    /// `(h, w)` of the horizontal stripe.
    pub horizontal_kernel: (usize, usize),
    pub refine_kernel: (usize, usize),
    /// Output width of each stripe branch and of the refining conv.
    pub channels: usize,
}

impl Default for StripeConfig {
    fn default() -> Self {
        StripeConfig { vertical_kernel: (11, 3), horizontal_kernel: (3, 11), refine_kernel: (3, 3), channels: 16 }
    }
}

impl StripeConfig {
    /// Plain `k x k` head in place of the stripes.
    pub fn plain(k: usize, channels: usize) -> Self {
        StripeConfig { vertical_kernel: (k, k), horizontal_kernel: (k, k), refine_kernel: (3, 3), channels }
    }

    /// Vertical `long x 3` and horizontal `3 x long` stripes.
    pub fn stripes(long: usize, channels: usize) -> Self {
        StripeConfig { vertical_kernel: (long, 3), horizontal_kernel: (3, long), refine_kernel: (3, 3), channels }
    }

    pub fn validate(&self) -> Result<()> {
        let (vh, vw) = self.vertical_kernel;
        let (hh, hw) = self.horizontal_kernel;
        if (vh, vw) != (hw, hh) {
            return Err(Error::config(format!(
                "stripe kernels {:?} and {:?} are not transposes of each other",
                self.vertical_kernel, self.horizontal_kernel
            )));
        }
        let all = [vh, vw, self.refine_kernel.0, self.refine_kernel.1];
        if all.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::config(format!("stripe head kernels must be odd and positive: {self:?}")));
        }
        if self.channels == 0 {
            return Err(Error::config("stripe head needs at least one channel"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StripeHead {
    cfg: StripeConfig,
    vertical: ConvLayer,
    horizontal: ConvLayer,
    refine: ConvLayer,
}

impl StripeHead {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, in_channels: usize, cfg: &StripeConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let (vh, vw) = cfg.vertical_kernel;
        let (hh, hw) = cfg.horizontal_kernel;
        let (rh, rw) = cfg.refine_kernel;
        Ok(StripeHead {
            cfg: *cfg,
            vertical: pb.conv(&format!("{name}.vertical"), in_channels, ConvSpec::same(c, vh, vw, 1))?,
            horizontal: pb.conv(&format!("{name}.horizontal"), in_channels, ConvSpec::same(c, hh, hw, 1))?,
            refine: pb.conv(&format!("{name}.refine"), 2 * c, ConvSpec::same(c, rh, rw, 1))?,
        })
    }

    pub fn config(&self) -> &StripeConfig {
        &self.cfg
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, fused: Var) -> Result<Var> {
        let v = self.vertical.forward_relu(g, ps, fused)?;
        let h = self.horizontal.forward_relu(g, ps, fused)?;
        let cat = g.concat_channels(v, h)?;
        self.refine.forward_relu(g, ps, cat)
    }
}

// ---------------------------------------------------------------------------
// Edge path

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgePathConfig {
    /// Backbone levels (0 = full resolution) used as low-level side outputs.
    pub taps: Vec<usize>,
    /// Width each side output is reduced to before fusion.
    pub side_channels: usize,
    pub fused_channels: usize,
    /// Number of 3x3 convs in the contour-refining block.
    pub refine_depth: usize,
}

impl Default for EdgePathConfig {
    fn default() -> Self {
        EdgePathConfig { taps: vec![0, 1, 2], side_channels: 8, fused_channels: 16, refine_depth: 2 }
    }
}

/// Fuses full-resolution low-level side outputs with the high-level stream
/// through a BRF, refines the contour and emits one logit channel.
#[derive(Clone, Debug)]
pub struct EdgePath {
    sides: Vec<ConvLayer>,
    brf: Brf,
    refine: Vec<ConvLayer>,
    logits: ConvLayer,
}

impl EdgePath {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        low_channels: &[usize],
        high_channels: usize,
        cfg: &EdgePathConfig,
    ) -> Result<Self> {
        if low_channels.is_empty() {
            return Err(Error::config("edge path needs at least one low-level tap"));
        }
        let sides = low_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| pb.conv(&format!("{name}.side{i}"), c, ConvSpec::same(cfg.side_channels, 1, 1, 1)))
            .collect::<Result<Vec<_>>>()?;
        let brf_cfg = BrfConfig {
            bilateral_channels: cfg.side_channels * low_channels.len(),
            occlusion_channels: high_channels,
            fused_channels: cfg.fused_channels,
        };
        let brf = Brf::new(pb, &format!("{name}.brf"), &brf_cfg)?;
        let refine = (0..cfg.refine_depth)
            .map(|i| pb.conv(&format!("{name}.refine{i}"), cfg.fused_channels, ConvSpec::same(cfg.fused_channels, 3, 3, 1)))
            .collect::<Result<Vec<_>>>()?;
        let logits = pb.conv(&format!("{name}.logits"), cfg.fused_channels, ConvSpec::same(1, 1, 1, 1))?;
        Ok(EdgePath { sides, brf, refine, logits })
    }

    /// Returns `N x 1 x H x W` logits at the resolution of `high`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, low: &[Var], high: Var) -> Result<Var> {
        if low.len() != self.sides.len() {
            return Err(Error::config(format!("edge path built for {} taps, got {}", self.sides.len(), low.len())));
        }
        let target = spatial(g, high)?;
        let mut stream: Option<Var> = None;
        for (side, &x) in self.sides.iter().zip(low) {
            let y = side.forward_relu(g, ps, x)?;
            let (h, w) = spatial(g, y)?;
            if h > target.0 || w > target.1 {
                return Err(Error::config(format!("side output {h}x{w} is larger than the edge map {}x{}", target.0, target.1)));
            }
            let y = resize_to(g, y, target)?;
            stream = Some(match stream {
                None => y,
                Some(s) => g.concat_channels(s, y)?,
            });
        }
        let low_stream = stream.expect("at least one tap");
        let mut y = self.brf.forward(g, ps, low_stream, high)?;
        for conv in &self.refine {
            y = conv.forward_relu(g, ps, y)?;
        }
        self.logits.forward(g, ps, y)
    }
}
