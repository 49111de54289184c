//! The training loop: deterministic minibatch SGD with AdamW, the
//! warmup+cosine schedule, gradient clipping, per-step CSV metrics, and
//! resumable snapshots.
//!
//! Determinism contract: a run is a pure function of (model config,
//! dataset, spec). Batch composition is a closed-form function of the
//! step index, and every random draw (flip decisions, stochastic-depth
//! coin flips) comes from one stream whose state is checkpointed, so
//! resuming from a snapshot reproduces the interrupted run bit for bit.
//! Only the wall-clock column of the metrics log varies between runs.

use crate::blocks::{CaptureSpec, Mode};
use crate::checkpoint::{apply_to_model, restore_optimizer, snapshot, Checkpoint};
use crate::config::ModelConfig;
use crate::data::{stack_batch, Dataset};
use crate::data::hflip;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::optim::{clip_grad_norm, cosine_lr, empty_grads, grad_norm, AdamW};
use crate::rng::Rng;
use crate::tensor::Scalar;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Smallest batch that still uses minibatch statistics in the stem's
/// batch norm; smaller batches fall back to running statistics.
pub const BN_MIN_BATCH: usize = 8;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_smoothing() -> f64 {
    0.1
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    pub clip_norm: f64,
    /// Overrides the model config's stochastic-depth ceiling when set.
    #[serde(default)]
    pub drop_path_max: Option<f64>,
    pub seed: u64,
    /// Evaluate (and refresh the best snapshot) every this many steps;
    /// 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: usize,
    /// Write a numbered snapshot every this many steps; 0 writes none.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Error::Config {
            path: "$".into(),
            detail,
        };
        if self.steps == 0 {
            return Err(fail("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(fail("batch_size must be at least 1".into()));
        }
        if self.warmup_lr > self.base_lr {
            return Err(fail(format!(
                "warmup_lr {} exceeds base_lr {}",
                self.warmup_lr, self.base_lr
            )));
        }
        if self.min_lr > self.base_lr {
            return Err(fail(format!(
                "min_lr {} exceeds base_lr {}",
                self.min_lr, self.base_lr
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(fail(format!("clip_norm {} must be positive", self.clip_norm)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(fail(format!(
                "label_smoothing {} outside [0,1)",
                self.label_smoothing
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(fail(format!("{name} {b} outside [0,1)")));
            }
        }
        if let Some(dp) = self.drop_path_max {
            if !(0.0..1.0).contains(&dp) {
                return Err(fail(format!("drop_path_max {dp} outside [0,1)")));
            }
        }
        Ok(())
    }

    pub fn parse(json: &str) -> Result<TrainSpec> {
        let spec: TrainSpec = serde_json::from_str(json)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Where a finished run left its artifacts.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Accuracy of the final weights on the eval split, when one was given.
    pub final_accuracy: Option<f64>,
    /// Best eval accuracy seen at any evaluation point.
    pub best_accuracy: Option<f64>,
    /// Per-step training losses of this invocation.
    pub losses: Vec<f64>,
    pub steps_run: usize,
}

/// Sample order for one pass over the dataset, derived only from the
/// run seed and the epoch index so any step can reconstruct it.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = Rng::from_seed(
        seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1),
    );
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
}

/// Top-1 accuracy of a model over a dataset, inference mode.
pub fn evaluate<S: Scalar>(
    model: &mut Model<S>,
    dataset: &Dataset<S>,
    batch: usize,
) -> Result<f64> {
    dataset.validate()?;
    if dataset.classes != model.config.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, model expects {}",
            dataset.classes, model.config.num_classes
        )));
    }
    let batch = batch.max(1);
    let mut correct = 0usize;
    let n = dataset.len();
    let mut at = 0;
    while at < n {
        let end = (at + batch).min(n);
        let images = &dataset.images[at..end];
        let x = stack_batch(images)?;
        let mut g = Graph::new();
        let node = g.constant(x);
        let fp = model.forward(&mut g, node, Mode::Eval, None, CaptureSpec::none())?;
        let logits = g.value(fp.logits);
        let k = model.config.num_classes;
        for (row, &label) in dataset.labels[at..end].iter().enumerate() {
            let scores = &logits.data()[row * k..(row + 1) * k];
            let mut arg = 0;
            for (j, v) in scores.iter().enumerate() {
                if *v > scores[arg] {
                    arg = j;
                }
            }
            if arg == label {
                correct += 1;
            }
        }
        at = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Rebuild the checkpointed model and measure its accuracy.
pub fn evaluate_checkpoint(path: &Path, dataset: &Dataset<f32>, batch: usize) -> Result<f64> {
    let ckpt = Checkpoint::load(path)?;
    let mut model = Model::<f32>::build(&ckpt.config, 0)?;
    apply_to_model(&ckpt, &mut model)?;
    evaluate(&mut model, dataset, batch)
}

/// Run (or resume) a training job, writing `metrics.csv`, `final.ckpt`,
/// `best.ckpt`, and numbered snapshots into `out_dir`.
pub fn train<S: Scalar>(
    config: &ModelConfig,
    train_set: &Dataset<S>,
    eval_set: Option<&Dataset<S>>,
    spec: &TrainSpec,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainResult> {
    spec.validate()?;
    train_set.validate()?;
    if let Some(e) = eval_set {
        e.validate()?;
    }
    let mut cfg = config.clone();
    if let Some(dp) = spec.drop_path_max {
        cfg.drop_path_max = dp;
    }
    let cfg = cfg.resolved()?;
    if cfg.num_classes != train_set.classes {
        return Err(Error::Data(format!(
            "model '{}' has {} classes but the dataset has {}",
            cfg.name, cfg.num_classes, train_set.classes
        )));
    }

    let mut model = Model::<S>::build(&cfg, spec.seed)?;
    let mut opt = AdamW::new(&model.params, spec.beta1, spec.beta2, spec.weight_decay);
    // The loop's stream is separate from the initializer's so resumed
    // and fresh runs share nothing but the checkpoint contents.
    let mut rng = Rng::from_seed(spec.seed ^ 0xD6E8_FEB8_6659_FD93);
    let mut start_step = 0usize;

    if let Some(path) = resume_from {
        let ckpt = Checkpoint::load(path)?;
        let ours = serde_json::to_string(&cfg)?;
        let theirs = serde_json::to_string(&ckpt.config)?;
        if ours != theirs {
            return Err(Error::Data(format!(
                "checkpoint config '{}' differs from requested config '{}'",
                ckpt.config.name, cfg.name
            )));
        }
        apply_to_model(&ckpt, &mut model)?;
        restore_optimizer(&ckpt, &model, &mut opt)?;
        rng = Rng::from_state(ckpt.rng_state()?);
        start_step = ckpt.step()? as usize;
        if start_step >= spec.steps {
            return Err(Error::Usage(format!(
                "checkpoint already covers {start_step} steps, spec asks for {}",
                spec.steps
            )));
        }
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    let final_path = out_dir.join("final.ckpt");
    let best_path = out_dir.join("best.ckpt");
    let mut metrics = std::io::BufWriter::new(
        std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?,
    );
    writeln!(metrics, "step,loss,lr,grad_norm,wall_ms").map_err(|e| Error::io(&metrics_path, e))?;

    let bn_batch_stats = spec.batch_size >= BN_MIN_BATCH;
    if !bn_batch_stats {
        log::warn!(
            "batch size {} is below {BN_MIN_BATCH}; stem batch norm will use running statistics",
            spec.batch_size
        );
    }
    let mode = Mode::Train { bn_batch_stats };

    let n = train_set.len();
    let mut cached_epoch = usize::MAX;
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(spec.steps - start_step);
    let mut best_accuracy: Option<f64> = None;

    for step in start_step..spec.steps {
        let started = std::time::Instant::now();
        let lr = cosine_lr(
            step as u64,
            spec.steps as u64,
            spec.warmup_steps as u64,
            spec.warmup_lr,
            spec.base_lr,
            spec.min_lr,
        );

        let mut images = Vec::with_capacity(spec.batch_size);
        let mut labels = Vec::with_capacity(spec.batch_size);
        for i in 0..spec.batch_size {
            let position = step * spec.batch_size + i;
            let epoch = position / n;
            if epoch != cached_epoch {
                order = epoch_order(spec.seed, epoch, n);
                cached_epoch = epoch;
            }
            let idx = order[position % n];
            let image = &train_set.images[idx];
            images.push(if rng.bernoulli(0.5) {
                hflip(image)
            } else {
                image.clone()
            });
            labels.push(train_set.labels[idx]);
        }
        let x = stack_batch(&images)?;

        let mut g = Graph::new();
        let node = g.constant(x);
        let fp = model.forward(&mut g, node, mode, Some(&mut rng), CaptureSpec::none())?;
        let loss_node = g.cross_entropy(fp.logits, &labels, spec.label_smoothing)?;
        let loss = g.value(loss_node).data()[0].to_f64();
        if !loss.is_finite() {
            return Err(Error::Train {
                step: step as u64,
                detail: format!("loss became non-finite ({loss}) — training diverged"),
            });
        }
        g.backward(loss_node)?;

        let mut grads = empty_grads(&model.params);
        for id in model.params.ids() {
            if let Some(pnode) = fp.param_node(id) {
                if let Some(grad) = g.take_grad(pnode) {
                    grads[id.index()] = Some(grad);
                }
            }
        }
        let gnorm = grad_norm(&grads);
        if !gnorm.is_finite() {
            return Err(Error::Train {
                step: step as u64,
                detail: format!("gradient norm became non-finite ({gnorm})"),
            });
        }
        clip_grad_norm(&mut grads, spec.clip_norm);
        opt.step(&mut model.params, &grads, lr)?;
        losses.push(loss);

        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        writeln!(metrics, "{step},{loss},{lr},{gnorm},{wall_ms:.3}")
            .map_err(|e| Error::io(&metrics_path, e))?;
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;

        let completed = step + 1;
        if spec.checkpoint_every > 0 && completed % spec.checkpoint_every == 0 {
            snapshot(&model, &opt, &rng, completed as u64)?
                .save(&out_dir.join(format!("step_{completed}.ckpt")))?;
        }
        if spec.eval_every > 0 && completed % spec.eval_every == 0 && completed < spec.steps {
            if let Some(eval) = eval_set {
                let acc = evaluate(&mut model, eval, spec.batch_size.max(16))?;
                log::info!("step {completed}: eval accuracy {acc:.4}");
                if best_accuracy.map_or(true, |b| acc > b) {
                    best_accuracy = Some(acc);
                    snapshot(&model, &opt, &rng, completed as u64)?.save(&best_path)?;
                }
            }
        }
    }

    let final_ckpt = snapshot(&model, &opt, &rng, spec.steps as u64)?;
    final_ckpt.save(&final_path)?;
    let mut final_accuracy = None;
    if let Some(eval) = eval_set {
        let acc = evaluate(&mut model, eval, spec.batch_size.max(16))?;
        final_accuracy = Some(acc);
        if best_accuracy.map_or(true, |b| acc >= b) {
            best_accuracy = Some(acc);
            final_ckpt.save(&best_path)?;
        }
    } else {
        final_ckpt.save(&best_path)?;
    }

    Ok(TrainResult {
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        metrics: metrics_path,
        final_accuracy,
        best_accuracy,
        losses,
        steps_run: spec.steps - start_step,
    })
}
