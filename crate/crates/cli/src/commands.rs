use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ofnet::ablation::{run_ablation, AblationConfig};
use ofnet::checkpoint::load_checkpoint;
use ofnet::dataset::{read_dataset, read_image, read_manifest, write_dataset, MANIFEST};
use ofnet::eval::{evaluate, write_reports};
use ofnet::model::build_model;
use ofnet::pipeline::predict_image;
use ofnet::plot::{parse_curve_csv, render_pr_svg, Curve};
use ofnet::postprocess::postprocess;
use ofnet::synth::{generate_dataset, SceneSpec};
use ofnet::train::{train, TrainOutput};
use ofnet::{Error, Result};

use crate::config::{AblateConfig, EvalRunConfig, GenDataConfig, InferConfig, PlotConfig, RunConfig, TrainRunConfig, CONFIG_FILE};
use crate::predictions;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Files a previous `gen-data` run may have left behind.
fn is_dataset_file(name: &str) -> bool {
    name == MANIFEST || name == CONFIG_FILE || name.ends_with(".png") || name.ends_with(".ori.f32")
}

pub fn gen_data(cfg: &GenDataConfig, out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let entries: Vec<_> = fs::read_dir(out).map_err(io_err(out))?.collect::<std::io::Result<_>>().map_err(io_err(out))?;
        if !entries.is_empty() {
            if !force {
                return Err(Error::Usage(format!("{} is not empty; pass --force to overwrite", out.display())));
            }
            for e in entries {
                let name = e.file_name().to_string_lossy().into_owned();
                if e.path().is_file() && is_dataset_file(&name) {
                    fs::remove_file(e.path()).map_err(io_err(&e.path()))?;
                }
            }
        }
    }
    create_dir(out)?;
    let spec = SceneSpec { seed: cfg.seed, ..cfg.scene.clone() };
    let samples = generate_dataset(&spec, cfg.count, cfg.seed, &cfg.prefix)?;
    write_dataset(&samples, out)?;
    RunConfig::GenData(cfg.clone()).write_to(out)?;
    eprintln!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

pub fn train_cmd(cfg: &TrainRunConfig, out: &Path, log_every: usize) -> Result<()> {
    let data = read_dataset(&cfg.dataset)?;
    create_dir(out)?;
    RunConfig::Train(cfg.clone()).write_to(out)?;
    let mut model = build_model::<f32>(&cfg.model, cfg.seed)?;
    let tc = ofnet::train::TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    eprintln!(
        "training {} ({} parameters) on {} samples for {} steps",
        cfg.variant,
        model.num_parameters(),
        data.len(),
        tc.iterations
    );
    let start = Instant::now();
    let output = TrainOutput { dir: out.to_path_buf() };
    train(&mut model, &data, &tc, Some(&output), |r| {
        if log_every > 0 && (r.step % log_every == 0 || r.step == 1) {
            eprintln!(
                "step {:>6}  edge {:>10.4}  orientation {:>9.4}  total {:>10.4}  {:.0}s",
                r.step,
                r.edge,
                r.orientation,
                r.total,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    Ok(())
}

pub fn infer(cfg: &InferConfig, out: &Path) -> Result<()> {
    let mut inputs: Vec<(String, PathBuf)> = Vec::new();
    if let Some(dir) = &cfg.dataset {
        for (id, _, _) in read_manifest(dir)? {
            let path = dir.join(format!("{id}.png"));
            inputs.push((id, path));
        }
    }
    for path in &cfg.images {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Error::Usage(format!("{} has no file name", path.display())))?;
        inputs.push((id, path.clone()));
    }
    if inputs.is_empty() {
        return Err(Error::Usage("nothing to infer: pass --dataset or image files".into()));
    }
    let mut seen = BTreeSet::new();
    if let Some((id, _)) = inputs.iter().find(|(id, _)| !seen.insert(id.clone())) {
        return Err(Error::Usage(format!("image id {id:?} appears twice")));
    }
    let (model, step) = load_checkpoint::<f32>(&cfg.checkpoint)?;
    create_dir(out)?;
    RunConfig::Infer(cfg.clone()).write_to(out)?;
    let mut entries = Vec::with_capacity(inputs.len());
    for (id, path) in &inputs {
        let image = read_image(path)?;
        let (h, w, _) = image.dim();
        let pred = predict_image(&model, &image)?;
        let (boundary, _) = postprocess(&pred.edge_prob, &pred.orientation);
        predictions::write_prediction(out, id, &pred, &boundary)?;
        entries.push((id.clone(), h, w));
    }
    predictions::write_manifest(out, &entries)?;
    eprintln!("wrote predictions for {} images (checkpoint step {step}) to {}", entries.len(), out.display());
    Ok(())
}

pub fn eval_cmd(cfg: &EvalRunConfig, out: &Path) -> Result<()> {
    let gts = read_dataset(&cfg.dataset)?;
    let listed = predictions::read_manifest(&cfg.predictions)?;
    let gt_ids: BTreeSet<&str> = gts.iter().map(|s| s.id.as_str()).collect();
    let pred_ids: BTreeSet<&str> = listed.iter().map(|(id, _, _)| id.as_str()).collect();
    let missing: Vec<&str> = gt_ids.difference(&pred_ids).copied().collect();
    let extra: Vec<&str> = pred_ids.difference(&gt_ids).copied().collect();
    if !missing.is_empty() || !extra.is_empty() {
        let mut msg = format!("{} predictions for {} ground-truth samples", listed.len(), gts.len());
        if !missing.is_empty() {
            msg.push_str(&format!("; missing predictions: {}", missing.join(", ")));
        }
        if !extra.is_empty() {
            msg.push_str(&format!("; no ground truth for: {}", extra.join(", ")));
        }
        return Err(Error::Data(msg));
    }
    let mut preds = Vec::with_capacity(gts.len());
    for gt in &gts {
        let (_, h, w) = listed.iter().find(|(id, _, _)| *id == gt.id).expect("ids checked");
        if (*h, *w) != (gt.height(), gt.width()) {
            return Err(Error::Data(format!(
                "prediction {} is {h}x{w}, ground truth is {}x{}",
                gt.id,
                gt.height(),
                gt.width()
            )));
        }
        preds.push(predictions::read_prediction(&cfg.predictions, &gt.id, *h, *w)?);
    }
    let evaluation = evaluate(&preds, &gts, &cfg.eval)?;
    create_dir(out)?;
    write_reports(&evaluation, out)?;
    RunConfig::Eval(cfg.clone()).write_to(out)?;
    for r in [&evaluation.epr, &evaluation.opr] {
        println!("{:?}  ODS {:.4}  OIS {:.4}  AP {:.4}", r.mode, r.ods, r.ois, r.ap);
    }
    Ok(())
}

fn curve_label(path: &Path) -> String {
    let p = if path.is_dir() { path } else { path.parent().unwrap_or(path) };
    let name = p.file_name().map(|s| s.to_string_lossy().into_owned());
    match (path.is_dir(), name) {
        (true, Some(n)) => n,
        (false, _) => path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        (true, None) => path.display().to_string(),
    }
}

/// Curves of one mode: report directories contribute `<mode>_pr.csv`,
/// CSV files whose name starts with the mode contribute themselves.
fn collect_curves(reports: &[PathBuf], mode: &str) -> Result<Vec<Curve>> {
    let mut curves = Vec::new();
    for r in reports {
        let file = if r.is_dir() {
            r.join(format!("{mode}_pr.csv"))
        } else if r.file_name().is_some_and(|n| n.to_string_lossy().to_lowercase().starts_with(mode)) {
            r.clone()
        } else {
            continue;
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::Data(format!("cannot read {}: {e}", file.display())))?;
        let points = parse_curve_csv(&text).map_err(|e| Error::Data(format!("{}: {e}", file.display())))?;
        curves.push(Curve { label: curve_label(r), points });
    }
    Ok(curves)
}

pub fn plot(cfg: &PlotConfig, out: &Path) -> Result<()> {
    if cfg.reports.is_empty() {
        return Err(Error::Usage("plot needs at least one report".into()));
    }
    if let Some(r) = cfg.reports.iter().find(|r| !r.exists()) {
        return Err(Error::Data(format!("report {} does not exist", r.display())));
    }
    let mut written = 0;
    for (mode, title) in [("epr", "EPR"), ("opr", "OPR")] {
        let curves = collect_curves(&cfg.reports, mode)?;
        if curves.is_empty() {
            continue;
        }
        create_dir(out)?;
        let svg = render_pr_svg(&format!("{title} precision-recall"), &curves)?;
        let path = out.join(format!("{mode}_pr.svg"));
        fs::write(&path, svg).map_err(io_err(&path))?;
        written += 1;
    }
    if written == 0 {
        return Err(Error::Data("no epr/opr curves found in the given reports".into()));
    }
    RunConfig::Plot(cfg.clone()).write_to(out)?;
    Ok(())
}

pub fn ablate(cfg: &AblateConfig, out: &Path) -> Result<()> {
    let (train_set, test_set) = match (&cfg.train_dataset, &cfg.test_dataset) {
        (Some(a), Some(b)) => (read_dataset(a)?, read_dataset(b)?),
        (None, None) => {
            let spec = SceneSpec { height: cfg.size, width: cfg.size, ..SceneSpec::default() };
            (
                generate_dataset(&spec, cfg.train_count, cfg.data_seed, "train_")?,
                generate_dataset(&spec, cfg.test_count, cfg.data_seed.wrapping_add(1), "test_")?,
            )
        }
        _ => return Err(Error::Usage("give both --train-dataset and --test-dataset, or neither".into())),
    };
    create_dir(out)?;
    RunConfig::Ablate(cfg.clone()).write_to(out)?;
    let ac = AblationConfig {
        variants: cfg.variants.clone(),
        seeds: cfg.seeds.clone(),
        base: cfg.model.clone(),
        train: cfg.train.clone(),
        eval: cfg.eval,
    };
    let report = run_ablation(&ac, &train_set, &test_set, |r| {
        eprintln!(
            "{:<12} seed {:<3} OPR ODS {:.4}  EPR ODS {:.4}  ({:.0}s)",
            r.variant, r.seed, r.opr_ods, r.epr_ods, r.seconds
        )
    })?;
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    let path = out.join("ablation.json");
    fs::write(&path, json).map_err(io_err(&path))?;
    let table = report.table();
    let path = out.join("table.txt");
    fs::write(&path, &table).map_err(io_err(&path))?;
    print!("{table}");
    Ok(())
}
