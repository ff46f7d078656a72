//! Training objective: class-balanced attention loss on the edge map plus
//! smooth-L1 on the wrapped orientation residual.
//!
//! For a mini-batch of `M` images,
//!
//! ```text
//! l(W) = 1/M * ( sum_j sum_i AL(y_i, e_i) + lambda * sum_j sum_i SL(f(o_i, a_i)) )
//! ```
//!
//! with the attention term
//!
//! ```text
//! AL(y, 1) = -alpha * (1 - y)^gamma * ln(clip(y))
//! AL(y, 0) = -w_neg * y^gamma       * ln(1 - clip(y))
//! ```
//!
//! where `w_neg` is the fraction of edge pixels in the batch (1 when the batch
//! has none) and `clip` restricts `y` to `[1e-6, 1 - 1e-6]`. Inside the clip
//! range the gradient is exact; outside it the gradient at the clip boundary
//! is passed through unchanged.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PROB_CLIP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Weight on edge pixels.
    pub alpha: f64,
    /// Focusing exponent; larger values down-weight easy pixels more.
    pub gamma: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { alpha: 1.0, gamma: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the orientation term.
    pub lambda: f64,
    pub attention: AttentionConfig,
    /// Supervise orientation only where the ground truth has an edge.
    pub orientation_only_on_gt_edges: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.5, attention: AttentionConfig::default(), orientation_only_on_gt_edges: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.attention.gamma >= 0.0) {
            return Err(Error::config(format!("gamma must be >= 0, got {}", self.attention.gamma)));
        }
        if !(self.attention.alpha >= 0.0) {
            return Err(Error::config(format!("alpha must be >= 0, got {}", self.attention.alpha)));
        }
        Ok(())
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// `f(pred, gt) = wrap(pred - gt)`.
pub fn angular_residual(pred: f64, gt: f64) -> f64 {
    wrap_angle(pred - gt)
}

pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

pub fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Per-class weights of the attention term for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassWeights {
    pub positive: f64,
    pub negative: f64,
}

impl ClassWeights {
    pub fn from_labels<T: Scalar>(gt: &[T], alpha: f64) -> Self {
        let pos = gt.iter().filter(|&&e| e > T::zero()).count();
        let negative = if pos == 0 { 1.0 } else { pos as f64 / gt.len() as f64 };
        ClassWeights { positive: alpha, negative }
    }
}

fn clip(y: f64) -> f64 {
    y.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

/// Attention loss of a single pixel.
pub fn attention_term(y: f64, edge: bool, w: ClassWeights, gamma: f64) -> f64 {
    let target = if edge { 1.0 } else { 0.0 };
    if y == target {
        return 0.0;
    }
    let yc = clip(y);
    if edge {
        -w.positive * (1.0 - y).powf(gamma) * yc.ln()
    } else {
        -w.negative * y.powf(gamma) * (1.0 - yc).ln()
    }
}

/// Derivative of [`attention_term`] with respect to `y`.
pub fn attention_term_grad(y: f64, edge: bool, w: ClassWeights, gamma: f64) -> f64 {
    let yc = clip(y);
    if edge {
        let focus = (1.0 - yc).powf(gamma);
        let dfocus = if gamma == 0.0 { 0.0 } else { -gamma * (1.0 - yc).powf(gamma - 1.0) };
        -w.positive * (dfocus * yc.ln() + focus / yc)
    } else {
        let focus = yc.powf(gamma);
        let dfocus = if gamma == 0.0 { 0.0 } else { gamma * yc.powf(gamma - 1.0) };
        -w.negative * (dfocus * (1.0 - yc).ln() - focus / (1.0 - yc))
    }
}

fn check_probabilities<T: Scalar>(pred: &[T]) -> Result<()> {
    match pred.iter().position(|v| !(*v >= T::zero() && *v <= T::one())) {
        None => Ok(()),
        Some(i) => Err(Error::numeric(format!("edge probability {} at index {i} is outside [0, 1]", pred[i]))),
    }
}

fn check_labels<T: Scalar>(gt: &[T]) -> Result<()> {
    match gt.iter().position(|v| *v != T::zero() && *v != T::one()) {
        None => Ok(()),
        Some(i) => Err(Error::numeric(format!("edge label {} at index {i} is not 0 or 1", gt[i]))),
    }
}

/// Sum of attention terms over all pixels, class weights taken from `gt`.
pub fn attention_loss<T: Scalar>(pred: &[T], gt: &[T], cfg: &AttentionConfig) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::config(format!("prediction has {} pixels, labels {}", pred.len(), gt.len())));
    }
    check_probabilities(pred)?;
    check_labels(gt)?;
    let w = ClassWeights::from_labels(gt, cfg.alpha);
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(&y, &e)| attention_term(y.to_f64_lossy(), e > T::zero(), w, cfg.gamma))
        .sum())
}

/// Batch loss split into its parts. Each part is already divided by the batch size.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossValue {
    pub total: f64,
    pub edge: f64,
    /// Unweighted orientation term (before multiplying by lambda).
    pub orientation: f64,
}

struct Evaluated<T> {
    value: LossValue,
    d_edge: Vec<T>,
    d_ori: Vec<T>,
}

fn evaluate<T: Scalar>(
    edge_pred: &Tensor<T>,
    edge_gt: &Tensor<T>,
    ori_pred: &Tensor<T>,
    ori_gt: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Evaluated<T>> {
    cfg.validate()?;
    let shape = edge_pred.shape();
    for (name, t) in [("edge labels", edge_gt), ("orientation prediction", ori_pred), ("orientation labels", ori_gt)] {
        if t.shape() != shape {
            return Err(Error::config(format!("{name} shape {:?} differs from edge prediction {:?}", t.shape(), shape)));
        }
    }
    let batch = shape.first().copied().unwrap_or(0);
    if batch == 0 || edge_pred.numel() == 0 {
        return Err(Error::config("loss needs a non-empty batch"));
    }
    check_probabilities(edge_pred.data())?;
    check_labels(edge_gt.data())?;
    ori_pred.ensure_finite("orientation prediction")?;

    let inv_m = 1.0 / batch as f64;
    let w = ClassWeights::from_labels(edge_gt.data(), cfg.attention.alpha);
    let gamma = cfg.attention.gamma;
    let n = edge_pred.numel();
    let mut d_edge = Vec::with_capacity(n);
    let mut d_ori = Vec::with_capacity(n);
    let (mut al, mut sl) = (0.0f64, 0.0f64);
    for i in 0..n {
        let y = edge_pred.data()[i].to_f64_lossy();
        let is_edge = edge_gt.data()[i] > T::zero();
        al += attention_term(y, is_edge, w, gamma);
        d_edge.push(T::from_f64_lossy(inv_m * attention_term_grad(y, is_edge, w, gamma)));

        if is_edge || !cfg.orientation_only_on_gt_edges {
            let gt = ori_gt.data()[i].to_f64_lossy();
            if !gt.is_finite() {
                return Err(Error::numeric(format!("orientation label at index {i} is not finite")));
            }
            let d = angular_residual(ori_pred.data()[i].to_f64_lossy(), gt);
            sl += smooth_l1(d);
            d_ori.push(T::from_f64_lossy(inv_m * cfg.lambda * smooth_l1_grad(d)));
        } else {
            d_ori.push(T::zero());
        }
    }
    let value = LossValue { total: inv_m * (al + cfg.lambda * sl), edge: inv_m * al, orientation: inv_m * sl };
    Ok(Evaluated { value, d_edge, d_ori })
}

/// `(1/M) * (sum AL + lambda * sum SL(f(.)))` over an `N x 1 x H x W` batch.
pub fn total_loss<T: Scalar>(
    edge_pred: &Tensor<T>,
    edge_gt: &Tensor<T>,
    ori_pred: &Tensor<T>,
    ori_gt: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<LossValue> {
    evaluate(edge_pred, edge_gt, ori_pred, ori_gt, cfg).map(|e| e.value)
}

/// Records [`total_loss`] on the tape as a differentiable scalar.
pub fn total_loss_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    edge_prob: Var,
    orientation: Var,
    edge_gt: &Tensor<T>,
    ori_gt: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(Var, LossValue)> {
    let ev = evaluate(g.value(edge_prob), edge_gt, g.value(orientation), ori_gt, cfg)?;
    let node = g.fused_scalar(T::from_f64_lossy(ev.value.total), vec![(edge_prob, ev.d_edge), (orientation, ev.d_ori)])?;
    Ok((node, ev.value))
}
