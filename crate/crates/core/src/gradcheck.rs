//! Finite-difference verification of reverse-mode gradients.
//!
//! Runs in `f64` throughout: central differences at a small step size need
//! more precision than `f32` carries. [`check_fn`] probes any scalar-valued
//! graph builder against numeric gradients at randomly sampled coordinates;
//! [`check_model`] does the same for every trainable parameter of a whole
//! model under a classification loss.
//!
//! Model checks run the forward pass in [`Mode::GradCheck`]: batch-norm
//! uses batch statistics but leaves running buffers untouched, and
//! stochastic depth is disabled, so the loss is a deterministic function
//! of the parameters alone.

use crate::blocks::Mode;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::Model;
use crate::params::ParamId;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Knobs for a finite-difference run.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Half-step of the central difference.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Coordinates sampled per tensor (all of them if the tensor is
    /// smaller).
    pub coords_per_tensor: usize,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tolerance: 1e-6,
            coords_per_tensor: 20,
            seed: 0x5eed,
        }
    }
}

/// Verification result for one tensor.
#[derive(Debug, Clone)]
pub struct GradEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(flat index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
}

/// Verification result for a set of tensors.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn worst_entry(&self) -> Option<&GradEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    /// One line per tensor: name, coordinates checked, worst error.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let status = if e.max_rel_err <= self.tolerance {
                "ok"
            } else {
                "FAIL"
            };
            s.push_str(&format!(
                "{status:4} {:<44} coords={:<3} max_rel_err={:.3e}\n",
                e.name, e.checked, e.max_rel_err
            ));
        }
        s
    }
}

/// Relative error with a floor so near-zero gradients compare on an
/// absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(0.01)
}

/// Distinct coordinates to probe in a tensor of `numel` elements.
fn pick_coords(numel: usize, want: usize, rng: &mut Rng) -> Vec<usize> {
    if numel <= want {
        return (0..numel).collect();
    }
    let mut idx: Vec<usize> = (0..numel).collect();
    for i in 0..want {
        let j = i + rng.next_below(numel - i);
        idx.swap(i, j);
    }
    idx.truncate(want);
    idx.sort_unstable();
    idx
}

/// Check the gradients of an arbitrary scalar-valued computation.
///
/// `build` receives a fresh graph and one node per input tensor (in order)
/// and must return the scalar output node. The analytic pass makes the
/// inputs differentiable leaves; numeric evaluations rebuild the graph
/// with perturbed inputs.
pub fn check_fn<F>(inputs: &[(&str, Tensor<f64>)], opts: &GradCheck, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|(_, t)| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Usage(format!(
            "gradient check target must be scalar, got shape {:?}",
            g.value(out).shape()
        )));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, (_, t))| {
            g.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    drop(g);

    let eval = |work: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = work.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok(g.value(out).data()[0])
    };

    let mut work: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut rng = Rng::from_seed(opts.seed);
    let mut entries = Vec::new();
    for ti in 0..inputs.len() {
        let coords = pick_coords(work[ti].numel(), opts.coords_per_tensor, &mut rng);
        let mut entry = GradEntry {
            name: inputs[ti].0.to_string(),
            checked: coords.len(),
            max_rel_err: 0.0,
            worst: None,
        };
        for c in coords {
            let orig = work[ti].data()[c];
            work[ti].data_mut()[c] = orig + opts.step;
            let f_plus = eval(&work)?;
            work[ti].data_mut()[c] = orig - opts.step;
            let f_minus = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * opts.step);
            let a = analytic[ti].data()[c];
            let e = rel_err(a, numeric);
            if entry.worst.is_none() || e > entry.max_rel_err {
                entry.worst = Some((c, a, numeric));
            }
            entry.max_rel_err = entry.max_rel_err.max(e);
        }
        entries.push(entry);
    }
    Ok(GradReport {
        entries,
        tolerance: opts.tolerance,
    })
}

/// Check every trainable parameter of a model against numeric
/// loss gradients on a fixed batch.
pub fn check_model(
    model: &mut Model<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    smoothing: f64,
    opts: &GradCheck,
) -> Result<GradReport> {
    let mut g = Graph::new();
    let (loss, fp) = model.loss(&mut g, images, labels, Mode::GradCheck, None, smoothing)?;
    g.backward(loss)?;
    let mut analytic: Vec<Option<Tensor<f64>>> = vec![None; model.params.len()];
    for i in 0..model.params.len() {
        let pid = ParamId(i);
        if let Some(node) = fp.param_node(pid) {
            analytic[i] = g.take_grad(node);
        }
    }
    drop(g);

    let mut rng = Rng::from_seed(opts.seed);
    let mut entries = Vec::new();
    for i in 0..model.params.len() {
        let pid = ParamId(i);
        if !model.params.entry(pid).trainable {
            continue;
        }
        let name = model.params.name(pid).to_string();
        let coords = pick_coords(model.params.get(pid).numel(), opts.coords_per_tensor, &mut rng);
        let mut entry = GradEntry {
            name,
            checked: coords.len(),
            max_rel_err: 0.0,
            worst: None,
        };
        for c in coords {
            let orig = model.params.get(pid).data()[c];
            model.params.get_mut(pid).data_mut()[c] = orig + opts.step;
            let f_plus = model_loss_value(model, images, labels, smoothing)?;
            model.params.get_mut(pid).data_mut()[c] = orig - opts.step;
            let f_minus = model_loss_value(model, images, labels, smoothing)?;
            model.params.get_mut(pid).data_mut()[c] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * opts.step);
            let a = analytic[i]
                .as_ref()
                .map(|t| t.data()[c])
                .unwrap_or_default();
            let e = rel_err(a, numeric);
            if entry.worst.is_none() || e > entry.max_rel_err {
                entry.worst = Some((c, a, numeric));
            }
            entry.max_rel_err = entry.max_rel_err.max(e);
        }
        entries.push(entry);
    }
    Ok(GradReport {
        entries,
        tolerance: opts.tolerance,
    })
}

fn model_loss_value(
    model: &mut Model<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    smoothing: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let (loss, _) = model.loss(&mut g, images, labels, Mode::GradCheck, None, smoothing)?;
    Ok(g.value(loss).data()[0])
}
