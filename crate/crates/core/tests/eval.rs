use ndarray::Array2;
use ofnet::eval::{
    average_precision, evaluate, image_counts, match_boundaries, max_matching, radius_px, summarize, uniform_thresholds,
    write_reports, Counts, EvalConfig, ImagePrediction, Mode, PrCurve,
};
use ofnet::postprocess::OcclusionBoundary;
use ofnet::synth::{generate_dataset, OcclusionSample, SceneSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f32::consts::PI;

/// Exhaustive maximum matching size: best over assignments of each left
/// vertex to one of its neighbours or nothing.
fn brute_force_matching(adj: &[Vec<usize>], used: &mut Vec<bool>, u: usize) -> usize {
    if u == adj.len() {
        return 0;
    }
    let mut best = brute_force_matching(adj, used, u + 1);
    for &v in &adj[u] {
        if !used[v] {
            used[v] = true;
            best = best.max(1 + brute_force_matching(adj, used, u + 1));
            used[v] = false;
        }
    }
    best
}

/// Simple augmenting-path matching (Kuhn).
fn kuhn(adj: &[Vec<usize>], n_right: usize) -> usize {
    fn augment(u: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                if owner[v].is_none() || augment(owner[v].unwrap(), adj, seen, owner) {
                    owner[v] = Some(u);
                    return true;
                }
            }
        }
        false
    }
    let mut owner = vec![None; n_right];
    (0..adj.len()).filter(|&u| augment(u, adj, &mut vec![false; n_right], &mut owner)).count()
}

fn random_graph(rng: &mut ChaCha8Rng, n_left: usize, n_right: usize, p: f64) -> Vec<Vec<usize>> {
    (0..n_left).map(|_| (0..n_right).filter(|_| rng.gen_bool(p)).collect()).collect()
}

fn check_valid(adj: &[Vec<usize>], n_right: usize, m: &[Option<usize>]) -> usize {
    let mut taken = vec![false; n_right];
    for (u, v) in m.iter().enumerate() {
        if let Some(v) = *v {
            assert!(adj[u].contains(&v));
            assert!(!taken[v], "right vertex {v} used twice");
            taken[v] = true;
        }
    }
    m.iter().flatten().count()
}

#[test]
fn matching_is_maximum_on_small_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..200 {
        let (nl, nr) = (rng.gen_range(0..8), rng.gen_range(0..8));
        let p = rng.gen_range(0.1..0.7);
        let adj = random_graph(&mut rng, nl, nr, p);
        let m = max_matching(&adj, nr);
        let size = check_valid(&adj, nr, &m);
        assert_eq!(size, brute_force_matching(&adj, &mut vec![false; nr], 0), "case {case}: {adj:?}");
    }
}

#[test]
fn matching_agrees_with_kuhn_on_larger_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..30 {
        let (nl, nr) = (rng.gen_range(50..300), rng.gen_range(50..300));
        let p = rng.gen_range(0.005..0.05);
        let adj = random_graph(&mut rng, nl, nr, p);
        let m = max_matching(&adj, nr);
        assert_eq!(check_valid(&adj, nr, &m), kuhn(&adj, nr));
    }
}

#[test]
fn matching_needs_augmenting_paths() {
    // Greedy matching of vertex 0 to 0 blocks vertex 1.
    let adj = vec![vec![0, 1], vec![0]];
    assert_eq!(max_matching(&adj, 2), vec![Some(1), Some(0)]);
}

fn line(h: usize, w: usize, row: usize) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |(y, _)| y == row)
}

#[test]
fn radius_follows_the_diagonal() {
    assert!((radius_px(0.0075, 96, 96) - 0.0075 * 96.0 * 2f64.sqrt()).abs() < 1e-12);
    assert!((radius_px(0.01, 30, 40) - 0.5).abs() < 1e-12);
}

#[test]
fn one_pixel_shift_is_within_tolerance() {
    let gt = line(96, 96, 40);
    let c = match_boundaries(&line(96, 96, 41), &gt, 0.0075).unwrap();
    assert_eq!((c.precision(), c.recall()), (1.0, 1.0));
    let c = match_boundaries(&line(96, 96, 42), &gt, 0.0075).unwrap();
    assert_eq!((c.precision(), c.recall()), (0.0, 0.0));
    // The same 2 px shift matches once the radius reaches 2.
    let c = match_boundaries(&line(96, 96, 42), &gt, 2.01 / (96.0 * 2f64.sqrt())).unwrap();
    assert_eq!(c.pairs.len(), 96);
}

#[test]
fn diagonal_shift_exceeds_unit_radius() {
    let gt = Array2::from_shape_fn((96, 96), |(y, x)| y == x);
    let pred = Array2::from_shape_fn((96, 96), |(y, x)| y == x + 1 || (y == 0 && x == 95));
    // All but the corner pixel sit one step below a GT pixel, which radius 1.02 covers.
    let c = match_boundaries(&pred, &gt, 0.0075).unwrap();
    assert_eq!(c.pairs.len(), 95);
    assert_eq!(c.unmatched_gt.len(), 1);
    let shifted = Array2::from_shape_fn((96, 96), |(y, x)| y == x + 2);
    assert_eq!(match_boundaries(&shifted, &gt, 0.0075).unwrap().pairs.len(), 0);
}

#[test]
fn matching_is_one_to_one() {
    let gt = line(20, 20, 10);
    let thick = Array2::from_shape_fn((20, 20), |(y, _)| y == 10 || y == 11);
    let c = match_boundaries(&thick, &gt, 0.05).unwrap();
    assert_eq!(c.pairs.len(), 20);
    assert_eq!((c.precision(), c.recall()), (0.5, 1.0));
    assert!(match_boundaries(&thick, &line(20, 21, 3), 0.05).is_err());
}

#[test]
fn empty_sets() {
    let none = Array2::from_elem((8, 8), false);
    let c = match_boundaries(&none, &none, 0.01).unwrap();
    assert_eq!((c.precision(), c.recall()), (1.0, 1.0));
    let c = match_boundaries(&none, &line(8, 8, 2), 0.01).unwrap();
    assert_eq!((c.precision(), c.recall()), (1.0, 0.0));
}

#[test]
fn average_precision_examples() {
    assert!((average_precision(&[(0.0, 1.0), (1.0, 0.5)]).unwrap() - 0.75).abs() < 1e-12);
    assert!((average_precision(&[(1.0, 0.5), (0.0, 1.0)]).unwrap() - 0.75).abs() < 1e-12);
    // A dip is filled in by the envelope: [1, 1, 0.5] over recall 0, 0.5, 1.
    assert!((average_precision(&[(0.0, 0.5), (0.5, 1.0), (1.0, 0.5)]).unwrap() - 0.875).abs() < 1e-12);
    // Span normalisation.
    assert!((average_precision(&[(0.2, 0.8), (0.6, 0.4)]).unwrap() - 0.6).abs() < 1e-12);
    assert_eq!(average_precision(&[(0.3, 0.7)]).unwrap(), 0.7);
    assert!(average_precision(&[]).is_err());
}

fn counts(tp: usize, pred: usize, gt: usize) -> Counts {
    Counts { tp, pred, gt }
}

fn f(tp: f64, pred: f64, gt: f64) -> f64 {
    let (p, r) = (tp / pred, tp / gt);
    2.0 * p * r / (p + r)
}

#[test]
fn ois_exceeds_ods_when_images_peak_at_different_thresholds() {
    let curve = PrCurve {
        mode: Mode::Epr,
        thresholds: vec![0.25, 0.5, 0.75],
        images: vec![
            vec![counts(10, 10, 10), counts(5, 5, 10), counts(0, 0, 10)],
            vec![counts(10, 40, 10), counts(10, 20, 10), counts(10, 12, 10)],
        ],
    };
    let r = summarize(&curve).unwrap();
    let ods = [f(20.0, 50.0, 20.0), f(15.0, 25.0, 20.0), f(10.0, 12.0, 20.0)].into_iter().fold(0.0, f64::max);
    assert!((r.ods - ods).abs() < 1e-12);
    assert_eq!(r.ods_threshold, 0.5);
    assert!((r.image_best_f[1] - f(10.0, 12.0, 10.0)).abs() < 1e-12);
    assert!((r.ois - (1.0 + f(10.0, 12.0, 10.0)) / 2.0).abs() < 1e-12);
    assert!(r.ois > r.ods);
}

#[test]
fn summarize_needs_ground_truth() {
    let curve = PrCurve { mode: Mode::Opr, thresholds: vec![0.5], images: vec![vec![counts(0, 3, 0)]] };
    assert!(summarize(&curve).is_err());
    let curve = PrCurve { mode: Mode::Opr, thresholds: vec![0.5], images: vec![] };
    assert!(summarize(&curve).is_err());
}

/// Maximum matching by dynamic programming over subsets of GT pixels.
fn dp_matching(pred: &[(usize, usize)], gt: &[(usize, usize)], radius: f64) -> usize {
    let mut best = vec![usize::MIN; 1 << gt.len()];
    let mut reach = vec![false; 1 << gt.len()];
    reach[0] = true;
    for &(py, px) in pred {
        let prev = (reach.clone(), best.clone());
        for mask in 0..1usize << gt.len() {
            if !prev.0[mask] {
                continue;
            }
            for (j, &(gy, gx)) in gt.iter().enumerate() {
                let d2 = (py as f64 - gy as f64).powi(2) + (px as f64 - gx as f64).powi(2);
                if mask & (1 << j) == 0 && d2 <= radius * radius {
                    let next = mask | (1 << j);
                    reach[next] = true;
                    best[next] = best[next].max(prev.1[mask] + 1);
                }
            }
        }
    }
    (0..1usize << gt.len()).filter(|&m| reach[m]).map(|m| best[m]).max().unwrap()
}

fn sample(id: &str, edge: Array2<bool>, orientation: Array2<f32>) -> OcclusionSample {
    let (h, w) = edge.dim();
    OcclusionSample { id: id.into(), image: ndarray::Array3::zeros((h, w, 3)), edge, orientation }
}

#[test]
fn exhaustive_two_image_fixture() {
    // Two 4x5 images (20 pixels each) with hand-built thinned maps.
    let thresholds = uniform_thresholds(9);
    let tol = 1.2 / (41f64).sqrt(); // radius 1.2 px
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut per_threshold = vec![(0usize, 0usize, 0usize); thresholds.len()];
    let mut per_image_f = Vec::new();
    let mut curves = Vec::new();
    for img in 0..2 {
        let gt_edge = Array2::from_shape_fn((4, 5), |_| rng.gen_bool(0.35));
        let thin = Array2::from_shape_fn((4, 5), |_| if rng.gen_bool(0.6) { rng.gen_range(0.05f32..1.0) } else { 0.0 });
        let gt_px: Vec<_> = gt_edge.indexed_iter().filter(|(_, &e)| e).map(|(p, _)| p).collect();
        assert!(gt_px.len() <= 12);
        let boundary = OcclusionBoundary { mask: thin.mapv(|v| v > 0.0), orientation: Array2::zeros((4, 5)), thin_edge: thin.clone() };
        let gt = sample(&format!("img{img}"), gt_edge, Array2::zeros((4, 5)));
        let c = image_counts(&boundary, &gt, &thresholds, tol).unwrap();
        let mut best_f = 0.0f64;
        for (k, &t) in thresholds.iter().enumerate() {
            let pred_px: Vec<_> = thin.indexed_iter().filter(|(_, &v)| v as f64 >= t && v > 0.0).map(|(p, _)| p).collect();
            let tp = dp_matching(&pred_px, &gt_px, 1.2);
            assert_eq!(c.epr[k], counts(tp, pred_px.len(), gt_px.len()), "image {img} threshold {t}");
            // Every orientation is 0 on both sides, so every match is oriented.
            assert_eq!(c.opr[k], c.epr[k]);
            per_threshold[k].0 += tp;
            per_threshold[k].1 += pred_px.len();
            per_threshold[k].2 += gt_px.len();
            let p = if pred_px.is_empty() { 1.0 } else { tp as f64 / pred_px.len() as f64 };
            let r = if gt_px.is_empty() { 1.0 } else { tp as f64 / gt_px.len() as f64 };
            best_f = best_f.max(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
        }
        per_image_f.push(best_f);
        curves.push(c.epr);
    }
    let report = summarize(&PrCurve { mode: Mode::Epr, thresholds: thresholds.clone(), images: curves }).unwrap();
    let pts: Vec<(f64, f64)> = per_threshold
        .iter()
        .map(|&(tp, p, g)| (tp as f64 / g as f64, if p == 0 { 1.0 } else { tp as f64 / p as f64 }))
        .collect();
    let ods = pts.iter().map(|&(r, p)| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 }).fold(0.0, f64::max);
    assert!((report.ods - ods).abs() < 1e-12);
    assert!((report.ois - (per_image_f[0] + per_image_f[1]) / 2.0).abs() < 1e-12);
    for (pt, &(r, p)) in report.points.iter().zip(&pts) {
        assert!((pt.recall - r).abs() < 1e-12 && (pt.precision - p).abs() < 1e-12);
    }
}

fn gt_set(n: usize) -> Vec<OcclusionSample> {
    generate_dataset(&SceneSpec::default(), n, 99, "gt_").unwrap()
}

fn as_prediction(s: &OcclusionSample, flip: bool) -> ImagePrediction {
    ImagePrediction {
        edge_prob: s.edge.mapv(|e| if e { 1.0 } else { 0.0 }),
        orientation: s.orientation.mapv(|t| if flip { t + PI } else { t }),
    }
}

#[test]
fn ground_truth_scores_perfectly() {
    let gts = gt_set(6);
    let preds: Vec<_> = gts.iter().map(|s| as_prediction(s, false)).collect();
    let e = evaluate(&preds, &gts, &EvalConfig::default()).unwrap();
    for r in [&e.epr, &e.opr] {
        assert_eq!((r.ods, r.ois, r.ap), (1.0, 1.0, 1.0), "{:?}", r.mode);
    }
}

#[test]
fn flipped_orientations_score_zero_opr() {
    let gts = gt_set(4);
    let preds: Vec<_> = gts.iter().map(|s| as_prediction(s, true)).collect();
    let e = evaluate(&preds, &gts, &EvalConfig::default()).unwrap();
    assert_eq!(e.epr.ods, 1.0);
    assert_eq!(e.opr.ods, 0.0);
    assert_eq!(e.opr.ap, 0.0);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let gts = gt_set(2);
    let preds = vec![as_prediction(&gts[0], false)];
    assert!(evaluate(&preds, &gts, &EvalConfig::default()).is_err());
    assert!(evaluate(&[as_prediction(&gts[0], false)], &gts[..1], &EvalConfig { tolerance: -1.0, thresholds: 9 }).is_err());
    assert!(evaluate(&[as_prediction(&gts[0], false)], &gts[..1], &EvalConfig { tolerance: 0.01, thresholds: 0 }).is_err());
}

#[test]
fn reports_are_written() {
    let gts = gt_set(2);
    let preds: Vec<_> = gts.iter().map(|s| as_prediction(s, false)).collect();
    let e = evaluate(&preds, &gts, &EvalConfig { tolerance: 0.0075, thresholds: 9 }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_reports(&e, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("opr_pr.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("threshold,precision,recall"));
    assert_eq!(csv.lines().count(), 10);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["epr"]["mode"], "EPR");
    assert_eq!(json["images"][1], "gt_0001");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn curves_are_monotone_and_opr_is_bounded(seed in 0u64..1000) {
        let gts = generate_dataset(&SceneSpec { height: 40, width: 40, ..SceneSpec::default() }, 2, seed, "p").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds: Vec<_> = gts
            .iter()
            .map(|s| ImagePrediction {
                edge_prob: s.edge.mapv(|e| (if e { 0.6 } else { 0.0 }) + rng.gen_range(0.0f32..0.4)),
                orientation: s.orientation.mapv(|t| t + rng.gen_range(-2.5f32..2.5)),
            })
            .collect();
        let e = evaluate(&preds, &gts, &EvalConfig { tolerance: 0.0075, thresholds: 19 }).unwrap();
        for w in e.epr.points.windows(2) {
            prop_assert!(w[1].recall <= w[0].recall + 1e-12);
        }
        for (a, b) in e.epr.points.iter().zip(&e.opr.points) {
            prop_assert!(b.recall <= a.recall + 1e-12);
            prop_assert!(b.precision <= a.precision + 1e-12);
        }
        prop_assert!(e.opr.ods <= e.epr.ods + 1e-12);
    }
}
