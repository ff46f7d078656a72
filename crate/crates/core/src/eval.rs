//! Boundary benchmark: tolerance matching, EPR/OPR precision-recall curves
//! and the ODS, OIS and AP summaries.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::wrap_angle;
use crate::postprocess::{postprocess, AlignDiagnostics, OcclusionBoundary};
use crate::synth::OcclusionSample;

/// Matching radius as a fraction of the image diagonal.
pub const DEFAULT_TOLERANCE: f64 = 0.0075;
pub const DEFAULT_THRESHOLDS: usize = 99;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub tolerance: f64,
    pub thresholds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { tolerance: DEFAULT_TOLERANCE, thresholds: DEFAULT_THRESHOLDS }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return Err(Error::config(format!("tolerance {} must be finite and non-negative", self.tolerance)));
        }
        if self.thresholds == 0 {
            return Err(Error::config("at least one threshold is required"));
        }
        Ok(())
    }

    pub fn threshold_values(&self) -> Vec<f64> {
        uniform_thresholds(self.thresholds)
    }
}

/// `k / (n + 1)` for `k = 1..=n`.
pub fn uniform_thresholds(n: usize) -> Vec<f64> {
    (1..=n).map(|k| k as f64 / (n + 1) as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    Epr,
    Opr,
}

/// One-to-one matching between predicted and ground-truth pixels, as
/// linear (row-major) indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Correspondence {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
    /// Matching radius in pixels.
    pub radius: f64,
}

impl Correspondence {
    pub fn precision(&self) -> f64 {
        ratio(self.pairs.len(), self.pairs.len() + self.unmatched_pred.len())
    }

    pub fn recall(&self) -> f64 {
        ratio(self.pairs.len(), self.pairs.len() + self.unmatched_gt.len())
    }
}

/// `num / den`, with the empty case counting as perfect.
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f_measure(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn radius_px(tolerance: f64, height: usize, width: usize) -> f64 {
    tolerance * ((height * height + width * width) as f64).sqrt()
}

/// Maximum bipartite matching (Hopcroft-Karp). `adj[u]` lists the right
/// vertices of left vertex `u`; returns the partner of every left vertex.
/// Left vertices are processed in index order and neighbours in list order,
/// so the result is deterministic.
pub fn max_matching(adj: &[Vec<usize>], n_right: usize) -> Vec<Option<usize>> {
    const INF: usize = usize::MAX;
    let n = adj.len();
    let mut match_l: Vec<Option<usize>> = vec![None; n];
    let mut match_r: Vec<Option<usize>> = vec![None; n_right];
    let mut dist = vec![INF; n];
    loop {
        let mut queue = VecDeque::new();
        for u in 0..n {
            if match_l[u].is_none() {
                dist[u] = 0;
                queue.push_back(u);
            } else {
                dist[u] = INF;
            }
        }
        let mut found = false;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                match match_r[v] {
                    None => found = true,
                    Some(w) if dist[w] == INF => {
                        dist[w] = dist[u] + 1;
                        queue.push_back(w);
                    }
                    _ => {}
                }
            }
        }
        if !found {
            break;
        }
        let mut next = vec![0usize; n];
        for root in 0..n {
            if match_l[root].is_some() {
                continue;
            }
            let mut stack = vec![root];
            while let Some(&u) = stack.last() {
                if next[u] == adj[u].len() {
                    dist[u] = INF;
                    stack.pop();
                    if let Some(&p) = stack.last() {
                        next[p] += 1;
                    }
                    continue;
                }
                let v = adj[u][next[u]];
                match match_r[v] {
                    None => {
                        for &a in &stack {
                            let b = adj[a][next[a]];
                            match_l[a] = Some(b);
                            match_r[b] = Some(a);
                        }
                        break;
                    }
                    Some(w) if dist[w] != INF && dist[w] == dist[u] + 1 => stack.push(w),
                    _ => next[u] += 1,
                }
            }
        }
    }
    match_l
}

fn pixels(mask: &Array2<bool>) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

/// Candidate gt partners (sorted linear indices) of each predicted pixel.
fn candidates(pred: &[usize], gt: &Array2<bool>, radius: f64) -> Vec<Vec<usize>> {
    let (h, w) = gt.dim();
    let r = radius.floor() as isize;
    let r2 = radius * radius;
    pred.iter()
        .map(|&p| {
            let (py, px) = ((p / w) as isize, (p % w) as isize);
            let mut out = Vec::new();
            for y in (py - r).max(0)..=(py + r).min(h as isize - 1) {
                for x in (px - r).max(0)..=(px + r).min(w as isize - 1) {
                    let (dy, dx) = ((y - py) as f64, (x - px) as f64);
                    if dx * dx + dy * dy <= r2 && gt[(y as usize, x as usize)] {
                        out.push(y as usize * w + x as usize);
                    }
                }
            }
            out
        })
        .collect()
}

fn correspond(pred: &Array2<bool>, gt: &Array2<bool>, radius: f64) -> Correspondence {
    let pred_px = pixels(pred);
    let gt_px = pixels(gt);
    let mut slot = vec![usize::MAX; gt.len()];
    for (i, &g) in gt_px.iter().enumerate() {
        slot[g] = i;
    }
    let adj: Vec<Vec<usize>> = candidates(&pred_px, gt, radius)
        .into_iter()
        .map(|c| c.into_iter().map(|g| slot[g]).collect())
        .collect();
    let m = max_matching(&adj, gt_px.len());
    let mut gt_used = vec![false; gt_px.len()];
    let mut pairs = Vec::new();
    let mut unmatched_pred = Vec::new();
    for (i, partner) in m.into_iter().enumerate() {
        match partner {
            Some(j) => {
                gt_used[j] = true;
                pairs.push((pred_px[i], gt_px[j]));
            }
            None => unmatched_pred.push(pred_px[i]),
        }
    }
    let unmatched_gt = gt_px.iter().zip(&gt_used).filter(|(_, &u)| !u).map(|(&g, _)| g).collect();
    Correspondence { pairs, unmatched_pred, unmatched_gt, radius }
}

/// Maximum one-to-one matching of predicted to ground-truth pixels within
/// `tolerance * diagonal`.
pub fn match_boundaries(pred: &Array2<bool>, gt: &Array2<bool>, tolerance: f64) -> Result<Correspondence> {
    if pred.dim() != gt.dim() {
        return Err(Error::config(format!("prediction {:?} and ground truth {:?} differ in shape", pred.dim(), gt.dim())));
    }
    let (h, w) = gt.dim();
    Ok(correspond(pred, gt, radius_px(tolerance, h, w)))
}

/// Does an aligned predicted orientation select the same side as the ground truth?
pub fn same_side(pred: f64, gt: f64) -> bool {
    wrap_angle(pred - gt).abs() < std::f64::consts::FRAC_PI_2
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub pred: usize,
    pub gt: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.pred)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.gt)
    }

    pub fn f(&self) -> f64 {
        f_measure(self.precision(), self.recall())
    }
}

/// Per-threshold counts of one image in both modes.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageCounts {
    pub epr: Vec<Counts>,
    pub opr: Vec<Counts>,
}

/// Counts for a post-processed boundary: at threshold `t` the prediction is
/// every thinned pixel with strength `>= t`.
pub fn image_counts(boundary: &OcclusionBoundary, gt: &OcclusionSample, thresholds: &[f64], tolerance: f64) -> Result<ImageCounts> {
    if boundary.thin_edge.dim() != gt.edge.dim() {
        return Err(Error::config(format!(
            "prediction {:?} and ground truth {} {:?} differ in shape",
            boundary.thin_edge.dim(),
            gt.id,
            gt.edge.dim()
        )));
    }
    let (h, w) = gt.edge.dim();
    let radius = radius_px(tolerance, h, w);
    let n_gt = gt.edge.iter().filter(|&&e| e).count();
    let ori = boundary.orientation.as_slice().expect("standard layout");
    let gt_ori = gt.orientation.as_standard_layout();
    let gt_ori = gt_ori.as_slice().expect("standard layout");
    let mut epr = Vec::with_capacity(thresholds.len());
    let mut opr = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let pred = boundary.thin_edge.mapv(|v| v > 0.0 && v as f64 >= t);
        let c = correspond(&pred, &gt.edge, radius);
        let n_pred = c.pairs.len() + c.unmatched_pred.len();
        let oriented = c.pairs.iter().filter(|&&(p, g)| same_side(ori[p] as f64, gt_ori[g] as f64)).count();
        epr.push(Counts { tp: c.pairs.len(), pred: n_pred, gt: n_gt });
        opr.push(Counts { tp: oriented, pred: n_pred, gt: n_gt });
    }
    Ok(ImageCounts { epr, opr })
}

/// Counts per image (outer) and threshold (inner) for one mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub mode: Mode,
    pub thresholds: Vec<f64>,
    pub images: Vec<Vec<Counts>>,
}

impl PrCurve {
    pub fn aggregate(&self) -> Vec<Counts> {
        (0..self.thresholds.len())
            .map(|t| {
                self.images.iter().fold(Counts::default(), |a, img| Counts {
                    tp: a.tp + img[t].tp,
                    pred: a.pred + img[t].pred,
                    gt: a.gt + img[t].gt,
                })
            })
            .collect()
    }
}

/// Network output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePrediction {
    pub edge_prob: Array2<f32>,
    pub orientation: Array2<f32>,
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::config("at least one threshold is required"));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::config(format!("threshold {t} is outside (0, 1)")));
    }
    Ok(())
}

/// Post-processes each prediction and counts it against its ground truth.
pub fn count_all(
    predictions: &[ImagePrediction],
    gts: &[OcclusionSample],
    thresholds: &[f64],
    tolerance: f64,
) -> Result<(Vec<ImageCounts>, AlignDiagnostics)> {
    if predictions.len() != gts.len() {
        return Err(Error::Data(format!("{} predictions for {} ground-truth samples", predictions.len(), gts.len())));
    }
    check_thresholds(thresholds)?;
    let per_image: Vec<(ImageCounts, AlignDiagnostics)> = predictions
        .par_iter()
        .zip(gts)
        .map(|(p, gt)| {
            if p.edge_prob.dim() != p.orientation.dim() {
                return Err(Error::config(format!("edge and orientation maps of {} differ in shape", gt.id)));
            }
            let (boundary, diag) = postprocess(&p.edge_prob, &p.orientation);
            Ok((image_counts(&boundary, gt, thresholds, tolerance)?, diag))
        })
        .collect::<Result<_>>()?;
    let mut diag = AlignDiagnostics::default();
    for (_, d) in &per_image {
        diag.aligned += d.aligned;
        diag.isolated += d.isolated;
        diag.ambiguous += d.ambiguous;
    }
    Ok((per_image.into_iter().map(|(c, _)| c).collect(), diag))
}

pub fn pr_curve(predictions: &[ImagePrediction], gts: &[OcclusionSample], thresholds: &[f64], tolerance: f64, mode: Mode) -> Result<PrCurve> {
    let (counts, _) = count_all(predictions, gts, thresholds, tolerance)?;
    Ok(curve_from(counts, thresholds, mode))
}

fn curve_from(counts: Vec<ImageCounts>, thresholds: &[f64], mode: Mode) -> PrCurve {
    let images = counts
        .into_iter()
        .map(|c| match mode {
            Mode::Epr => c.epr,
            Mode::Opr => c.opr,
        })
        .collect();
    PrCurve { mode, thresholds: thresholds.to_vec(), images }
}

/// Area under the monotone precision envelope of `(recall, precision)`
/// points by the trapezoid rule, divided by the recall range covered. A
/// curve with a single recall value scores its envelope precision there.
pub fn average_precision(points: &[(f64, f64)]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::config("no precision-recall points"));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.dedup_by(|b, a| a.0 == b.0);
    let mut env: Vec<f64> = pts.iter().map(|p| p.1).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let span = pts[pts.len() - 1].0 - pts[0].0;
    if span <= 0.0 {
        return Ok(env[0]);
    }
    let area: f64 = (0..pts.len() - 1).map(|i| (pts[i + 1].0 - pts[i].0) * (env[i] + env[i + 1]) / 2.0).sum();
    Ok(area / span)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: Mode,
    pub ods: f64,
    pub ods_threshold: f64,
    pub ois: f64,
    pub ap: f64,
    /// Aggregate curve over the dataset.
    pub points: Vec<PrPoint>,
    /// Best F of each image.
    pub image_best_f: Vec<f64>,
}

pub fn summarize(curve: &PrCurve) -> Result<MetricsReport> {
    check_thresholds(&curve.thresholds)?;
    if curve.images.is_empty() {
        return Err(Error::Data("no images to summarise".into()));
    }
    if let Some(img) = curve.images.iter().find(|img| img.len() != curve.thresholds.len()) {
        return Err(Error::Data(format!("{} counts for {} thresholds", img.len(), curve.thresholds.len())));
    }
    let agg = curve.aggregate();
    if agg[0].gt == 0 {
        return Err(Error::Data("no ground-truth edge pixels in the dataset; recall is undefined".into()));
    }
    let points: Vec<PrPoint> = curve
        .thresholds
        .iter()
        .zip(&agg)
        .map(|(&threshold, c)| PrPoint { threshold, precision: c.precision(), recall: c.recall() })
        .collect();
    let (mut ods, mut ods_threshold) = (-1.0, curve.thresholds[0]);
    for p in &points {
        let f = f_measure(p.precision, p.recall);
        if f > ods {
            ods = f;
            ods_threshold = p.threshold;
        }
    }
    let image_best_f: Vec<f64> =
        curve.images.iter().map(|img| img.iter().map(Counts::f).fold(0.0, f64::max)).collect();
    let ois = image_best_f.iter().sum::<f64>() / image_best_f.len() as f64;
    let pr: Vec<(f64, f64)> = points.iter().map(|p| (p.recall, p.precision)).collect();
    let ap = average_precision(&pr)?;
    Ok(MetricsReport { mode: curve.mode, ods, ods_threshold, ois, ap, points, image_best_f })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub config: EvalConfig,
    pub images: Vec<String>,
    pub epr: MetricsReport,
    pub opr: MetricsReport,
    /// Ridge pixels left unaligned because they were isolated.
    pub isolated_pixels: usize,
    /// Ridge pixels left unaligned because their neighbourhood had no dominant direction.
    pub ambiguous_pixels: usize,
}

pub fn evaluate(predictions: &[ImagePrediction], gts: &[OcclusionSample], cfg: &EvalConfig) -> Result<Evaluation> {
    cfg.validate()?;
    let thresholds = cfg.threshold_values();
    let (counts, diag) = count_all(predictions, gts, &thresholds, cfg.tolerance)?;
    let epr = summarize(&curve_from(counts.clone(), &thresholds, Mode::Epr))?;
    let opr = summarize(&curve_from(counts, &thresholds, Mode::Opr))?;
    Ok(Evaluation {
        config: *cfg,
        images: gts.iter().map(|s| s.id.clone()).collect(),
        epr,
        opr,
        isolated_pixels: diag.isolated,
        ambiguous_pixels: diag.ambiguous,
    })
}

pub fn curve_csv(report: &MetricsReport) -> String {
    let mut s = String::from("threshold,precision,recall\n");
    for p in &report.points {
        writeln!(s, "{},{},{}", p.threshold, p.precision, p.recall).expect("writing to a String");
    }
    s
}

/// Writes `report.json`, `epr_pr.csv` and `opr_pr.csv` into `dir`.
pub fn write_reports(eval: &Evaluation, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(eval).expect("report serialises");
    for (name, body) in [("report.json", json), ("epr_pr.csv", curve_csv(&eval.epr)), ("opr_pr.csv", curve_csv(&eval.opr))] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
