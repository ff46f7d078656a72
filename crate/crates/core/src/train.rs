//! Training loop: random crops and flips, the joint loss, Adam/SGD updates,
//! a CSV loss log and periodic checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::dataset::batch;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{total_loss_on_graph, LossConfig, LossValue};
use crate::model::Model;
use crate::optim::{OptimState, OptimizerKind};
use crate::scalar::Scalar;
use crate::synth::{crop_at, flip_horizontal, OcclusionSample};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Cosine decay from the base rate to `final_fraction` of it.
    Cosine { final_fraction: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Side of the square training crop; 0 trains on whole samples.
    pub crop: usize,
    pub flip: bool,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
    /// Rescale the gradient when its global L2 norm exceeds this value.
    pub clip_grad_norm: Option<f64>,
    /// Seed of the sampling/augmentation stream.
    pub seed: u64,
    /// Checkpoint interval in steps (0 = only the initial and final checkpoints).
    pub checkpoint_every: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 1,
            crop: 96,
            flip: true,
            learning_rate: 2e-4,
            weight_decay: 0.0,
            schedule: Schedule::Cosine { final_fraction: 0.05 },
            optimizer: OptimizerKind::default(),
            clip_grad_norm: Some(100.0),
            seed: 0,
            checkpoint_every: 500,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if let Schedule::Cosine { final_fraction } = self.schedule {
            if !(0.0..=1.0).contains(&final_fraction) {
                return Err(Error::config(format!("final_fraction {final_fraction} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine { final_fraction } => {
                let t = if self.iterations <= 1 { 0.0 } else { step as f64 / (self.iterations - 1) as f64 };
                let f = final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
                self.learning_rate * f
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub edge: f64,
    pub orientation: f64,
    pub total: f64,
}

/// Where training writes its artefacts.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn loss_log(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }

    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.dir.join(format!("step_{step:06}.ofnt"))
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.dir.join("last.ofnt")
    }
}

/// Draws the samples of one step. Crops are square, at a uniform offset.
pub fn sample_batch(data: &[OcclusionSample], cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Vec<OcclusionSample>> {
    (0..cfg.batch_size)
        .map(|_| {
            let s = &data[rng.gen_range(0..data.len())];
            let (h, w) = (s.height(), s.width());
            let s = if cfg.crop == 0 || (cfg.crop == h && cfg.crop == w) {
                s.clone()
            } else if cfg.crop > h || cfg.crop > w {
                return Err(Error::config(format!("crop {} exceeds sample {} of {h}x{w}", cfg.crop, s.id)));
            } else {
                let top = rng.gen_range(0..=h - cfg.crop);
                let left = rng.gen_range(0..=w - cfg.crop);
                crop_at(s, top, left, cfg.crop, cfg.crop)
            };
            Ok(if cfg.flip && rng.gen_bool(0.5) { flip_horizontal(&s) } else { s })
        })
        .collect()
}

/// Loss of `model` on `samples` and the gradients written into the
/// parameters' `grad` slots.
pub fn loss_and_gradients<T: Scalar>(model: &mut Model<T>, samples: &[OcclusionSample], loss: &LossConfig) -> Result<LossValue> {
    let refs: Vec<&OcclusionSample> = samples.iter().collect();
    let b = batch::<T>(&refs)?;
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, &b.image)?;
    let (node, value) = total_loss_on_graph(&mut g, out.edge_prob, out.orientation, &b.edge, &b.orientation, loss)?;
    let grads = g.backward(node)?;
    grads.store_into(model.params_mut());
    Ok(value)
}

fn clip_gradients<T: Scalar>(model: &mut Model<T>, max_norm: f64) {
    let ps = model.params_mut();
    let ids: Vec<_> = ps.ids().collect();
    let sq: f64 = ids
        .iter()
        .filter_map(|&id| ps.get(id).grad.as_ref())
        .flat_map(|g| g.iter().map(|v| v.to_f64_lossy().powi(2)))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for id in ids {
            if let Some(g) = ps.get_mut(id).grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

fn append_log(path: &Path, row: &StepLog) -> Result<()> {
    let new = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    if new {
        writeln!(f, "step,edge_loss,orientation_loss,total_loss").map_err(|e| Error::io(path, e))?;
    }
    writeln!(f, "{},{},{},{}", row.step, row.edge, row.orientation, row.total).map_err(|e| Error::io(path, e))
}
/// Names the step in numeric failures raised below the training loop.
fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("non-finite value at step {step}: {msg}")),
        other => other,
    }
}

/// Trains `model` in place. With `output`, writes `loss.csv`, a checkpoint
/// before the first step, every `checkpoint_every` steps, and `last.ofnt`
/// at the end (unless no step was taken). `on_step` sees every logged step.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &[OcclusionSample],
    cfg: &TrainConfig,
    output: Option<&TrainOutput>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if let Some(out) = output {
        fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
        if out.loss_log().exists() {
            fs::remove_file(out.loss_log()).map_err(|e| Error::io(out.loss_log(), e))?;
        }
        save_checkpoint(model, 0, &out.checkpoint(0))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimState::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay, model.params());
    let mut history = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let samples = sample_batch(data, cfg, &mut rng)?;
        let value = loss_and_gradients(model, &samples, &cfg.loss).map_err(|e| at_step(e, step + 1))?;
        let row = StepLog { step: step + 1, edge: value.edge, orientation: value.orientation, total: value.total };
        if !value.total.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss at step {} (edge {}, orientation {})",
                row.step, value.edge, value.orientation
            )));
        }
        if let Some(max) = cfg.clip_grad_norm {
            clip_gradients(model, max);
        }
        opt.learning_rate = cfg.learning_rate_at(step);
        opt.step(model.params_mut()).map_err(|e| at_step(e, step + 1))?;
        if let Some((_, name, _)) = model.params().iter().find(|(_, _, t)| !t.all_finite()) {
            return Err(Error::numeric(format!("parameter {name} became non-finite at step {}", row.step)));
        }
        if let Some(out) = output {
            append_log(&out.loss_log(), &row)?;
            if cfg.checkpoint_every > 0 && row.step % cfg.checkpoint_every == 0 {
                save_checkpoint(model, row.step as u64, &out.checkpoint(row.step))?;
            }
        }
        on_step(&row);
        history.push(row);
    }
    if let Some(out) = output.filter(|_| cfg.iterations > 0) {
        save_checkpoint(model, cfg.iterations as u64, &out.last_checkpoint())?;
    }
    Ok(history)
}
