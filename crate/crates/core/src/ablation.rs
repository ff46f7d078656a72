//! Variant-by-seed sweeps on a fixed synthetic split.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::{build_model, ModelVariant};
use crate::pipeline::{evaluate_model, mean_orientation_error, predict_samples};
use crate::synth::{generate_dataset, OcclusionSample, SceneSpec};
use crate::train::{train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Variant names understood by [`ModelVariant::named`].
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    pub base: ModelVariant,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            variants: vec!["full".into(), "no-mcl".into(), "head-3x3".into()],
            seeds: vec![0, 1, 2],
            base: ModelVariant::tiny(),
            train: TrainConfig { iterations: 3000, ..TrainConfig::default() },
            eval: EvalConfig::default(),
        }
    }
}

/// Split used by the default sweep: 200 training and 50 test scenes at 128x128.
pub fn default_split(seed: u64) -> Result<(Vec<OcclusionSample>, Vec<OcclusionSample>)> {
    let spec = SceneSpec { height: 128, width: 128, ..SceneSpec::default() };
    let train = generate_dataset(&spec, 200, seed, "train_")?;
    let test = generate_dataset(&spec, 50, seed.wrapping_add(1), "test_")?;
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub parameters: usize,
    pub final_loss: f64,
    pub epr_ods: f64,
    pub opr_ods: f64,
    pub opr_ois: f64,
    pub opr_ap: f64,
    pub orientation_error: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub mean_opr_ods: f64,
    pub std_opr_ods: f64,
    pub mean_epr_ods: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<RunResult>,
    pub summary: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn mean_opr_ods(&self, variant: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.variant == variant).map(|s| s.mean_opr_ods)
    }

    /// Plain-text comparison table, one row per variant plus margins
    /// against the first variant.
    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<12} {:>4} {:>10} {:>8} {:>10} {:>10}", "variant", "runs", "OPR ODS", "std", "EPR ODS", "margin").unwrap();
        let reference = self.summary.first().map(|r| r.mean_opr_ods);
        for r in &self.summary {
            let margin = reference.map(|m| m - r.mean_opr_ods).unwrap_or(0.0);
            writeln!(
                s,
                "{:<12} {:>4} {:>10.4} {:>8.4} {:>10.4} {:>+10.4}",
                r.variant, r.runs, r.mean_opr_ods, r.std_opr_ods, r.mean_epr_ods, margin
            )
            .unwrap();
        }
        s
    }
}

fn summarize(runs: &[RunResult], order: &[String]) -> Vec<VariantSummary> {
    order
        .iter()
        .map(|v| {
            let xs: Vec<&RunResult> = runs.iter().filter(|r| &r.variant == v).collect();
            let n = xs.len().max(1) as f64;
            let mean = xs.iter().map(|r| r.opr_ods).sum::<f64>() / n;
            let var = xs.iter().map(|r| (r.opr_ods - mean).powi(2)).sum::<f64>() / n;
            VariantSummary {
                variant: v.clone(),
                runs: xs.len(),
                mean_opr_ods: mean,
                std_opr_ods: var.sqrt(),
                mean_epr_ods: xs.iter().map(|r| r.epr_ods).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Trains every variant with every seed on `train_set` and scores it on
/// `test_set`. The seed drives both initialisation and batch sampling.
/// `on_run` sees each result as it finishes.
pub fn run_ablation(
    cfg: &AblationConfig,
    train_set: &[OcclusionSample],
    test_set: &[OcclusionSample],
    mut on_run: impl FnMut(&RunResult),
) -> Result<AblationReport> {
    if cfg.variants.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::config("an ablation needs at least one variant and one seed"));
    }
    let variants: Vec<ModelVariant> =
        cfg.variants.iter().map(|name| ModelVariant::named(cfg.base.clone(), name)).collect::<Result<_>>()?;
    let mut runs = Vec::new();
    for (name, variant) in cfg.variants.iter().zip(&variants) {
        for &seed in &cfg.seeds {
            let start = std::time::Instant::now();
            let mut model = build_model::<f32>(variant, seed)?;
            let tc = TrainConfig { seed, ..cfg.train.clone() };
            let log = train(&mut model, train_set, &tc, None, |_| {})?;
            let eval = evaluate_model(&model, test_set, &cfg.eval)?;
            let preds = predict_samples(&model, test_set)?;
            let tail = &log[log.len().saturating_sub(100)..];
            let result = RunResult {
                variant: name.clone(),
                seed,
                parameters: model.num_parameters(),
                final_loss: tail.iter().map(|r| r.total).sum::<f64>() / tail.len().max(1) as f64,
                epr_ods: eval.epr.ods,
                opr_ods: eval.opr.ods,
                opr_ois: eval.opr.ois,
                opr_ap: eval.opr.ap,
                orientation_error: mean_orientation_error(&preds, test_set).unwrap_or(f64::NAN),
                seconds: start.elapsed().as_secs_f64(),
            };
            on_run(&result);
            runs.push(result);
        }
    }
    let summary = summarize(&runs, &cfg.variants);
    Ok(AblationReport { runs, summary })
}
