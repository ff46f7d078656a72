use ofnet::ablation::{default_split, run_ablation, AblationConfig, AblationReport, RunResult};
use ofnet::synth::{generate_dataset, SceneSpec};
use ofnet::train::TrainConfig;
use ofnet::Error;

fn tiny_config(variants: &[&str], seeds: &[u64]) -> AblationConfig {
    AblationConfig {
        variants: variants.iter().map(|s| s.to_string()).collect(),
        seeds: seeds.to_vec(),
        train: TrainConfig { iterations: 2, crop: 0, ..TrainConfig::default() },
        ..AblationConfig::default()
    }
}

#[test]
fn defaults_cover_the_three_way_comparison() {
    let cfg = AblationConfig::default();
    assert_eq!(cfg.variants, ["full", "no-mcl", "head-3x3"]);
    assert_eq!(cfg.seeds.len(), 3);
}

#[test]
fn default_split_sizes() {
    let (train, test) = default_split(1).unwrap();
    assert_eq!((train.len(), test.len()), (200, 50));
    assert!(train.iter().chain(&test).all(|s| s.height() == 128 && s.width() == 128));
    assert!(train[0].id.starts_with("train_") && test[0].id.starts_with("test_"));
    assert_ne!(train[0].image, test[0].image);
}

#[test]
fn sweep_runs_every_variant_and_seed() {
    let spec = SceneSpec { height: 40, width: 40, ..SceneSpec::default() };
    let train = generate_dataset(&spec, 2, 0, "tr").unwrap();
    let test = generate_dataset(&spec, 2, 1, "te").unwrap();
    let mut seen = Vec::new();
    let report = run_ablation(&tiny_config(&["full", "no-mcl"], &[3, 4]), &train, &test, |r| seen.push((r.variant.clone(), r.seed))).unwrap();
    assert_eq!(seen, [("full".into(), 3), ("full".into(), 4), ("no-mcl".into(), 3), ("no-mcl".into(), 4)]);

    for s in &report.summary {
        let xs: Vec<f64> = report.runs.iter().filter(|r| r.variant == s.variant).map(|r| r.opr_ods).collect();
        assert_eq!(s.runs, 2);
        assert!((s.mean_opr_ods - (xs[0] + xs[1]) / 2.0).abs() < 1e-15);
        assert!((s.std_opr_ods - (xs[0] - xs[1]).abs() / 2.0).abs() < 1e-15);
    }
    let full = &report.runs[0];
    let no_mcl = &report.runs[2];
    assert!(no_mcl.parameters < full.parameters);
    assert!(report.runs.iter().all(|r| (0.0..=1.0).contains(&r.opr_ods) && r.final_loss.is_finite()));
}

#[test]
fn table_margins_are_against_the_first_variant() {
    let run = |variant: &str, opr: f64| RunResult {
        variant: variant.into(),
        seed: 0,
        parameters: 1,
        final_loss: 0.0,
        epr_ods: 0.5,
        opr_ods: opr,
        opr_ois: opr,
        opr_ap: opr,
        orientation_error: 0.0,
        seconds: 0.0,
    };
    let summary = |v: &str, m: f64| ofnet::ablation::VariantSummary { variant: v.into(), runs: 1, mean_opr_ods: m, std_opr_ods: 0.0, mean_epr_ods: 0.5 };
    let report = AblationReport { runs: vec![run("full", 0.6), run("no-mcl", 0.45)], summary: vec![summary("full", 0.6), summary("no-mcl", 0.45)] };
    let table = report.table();
    let row = table.lines().find(|l| l.starts_with("no-mcl")).unwrap();
    assert!(row.trim_end().ends_with("+0.1500"), "{row}");
    assert_eq!(report.mean_opr_ods("no-mcl"), Some(0.45));
    assert_eq!(report.mean_opr_ods("missing"), None);
}

#[test]
fn empty_sweeps_and_unknown_variants_are_rejected() {
    let spec = SceneSpec { height: 40, width: 40, ..SceneSpec::default() };
    let data = generate_dataset(&spec, 1, 0, "").unwrap();
    assert!(matches!(run_ablation(&tiny_config(&[], &[0]), &data, &data, |_| {}), Err(Error::Config(_))));
    assert!(matches!(run_ablation(&tiny_config(&["full"], &[]), &data, &data, |_| {}), Err(Error::Config(_))));
    assert!(matches!(run_ablation(&tiny_config(&["wide"], &[0]), &data, &data, |_| {}), Err(Error::Config(_))));
}
