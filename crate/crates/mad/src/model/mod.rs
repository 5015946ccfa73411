//! Classifier backbones, parameter state, gradient evaluation and accuracy.
//!
//! Parameters are stored as named float32 tensors; all arithmetic runs in
//! f64 and results are rounded back to f32 at update points, so repeated runs
//! are bit-identical.

mod checkpoint;
mod layers;
mod network;
pub(crate) mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use network::{loss_on_logits, LossKind, Network};
pub use train::{train_clean, Optimizer, TrainConfig};

use std::collections::BTreeMap;

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{randn, LabeledImages};
use crate::error::{MadError, Result};

/// Chunk size for batched forward/backward sweeps. Fixed so floating-point
/// summation order (and therefore every result) is reproducible.
pub(crate) const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    SmallCnn,
    Resnet18Like,
    AlexnetLike,
    /// Single dense layer over flattened pixels. Not part of the benchmark
    /// protocol; used for closed-form oracles and diagnostics.
    Linear,
}

impl std::str::FromStr for Architecture {
    type Err = MadError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small_cnn" => Ok(Architecture::SmallCnn),
            "resnet18_like" => Ok(Architecture::Resnet18Like),
            "alexnet_like" => Ok(Architecture::AlexnetLike),
            "linear" => Ok(Architecture::Linear),
            other => Err(MadError::Config(format!("unknown architecture_id \"{other}\""))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Architecture::SmallCnn => "small_cnn",
            Architecture::Resnet18Like => "resnet18_like",
            Architecture::AlexnetLike => "alexnet_like",
            Architecture::Linear => "linear",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture_id: Architecture,
    /// (channels, height, width)
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(architecture_id: Architecture, input_shape: (usize, usize, usize), num_classes: usize) -> Self {
        Self { architecture_id, input_shape, num_classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(MadError::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(MadError::Config(format!("input_shape dimensions must be positive, got {:?}", self.input_shape)));
        }
        Ok(())
    }
}

/// A model with its parameter tensors. Training operations take ownership or
/// clone; evaluation and gradient calls are read-only.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub rng_seed: u64,
    pub training_meta: BTreeMap<String, serde_json::Value>,
    params: Vec<ArrayD<f32>>,
}

impl ModelState {
    pub fn network(&self) -> Network {
        // Spec was validated at construction; rebuilding cannot fail.
        Network::from_spec(&self.spec).expect("spec validated at construction")
    }

    pub fn parameters(&self) -> &[ArrayD<f32>] {
        &self.params
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.network().params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn total_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Replace all parameter tensors. Shapes must match the spec-derived
    /// layout and every value must be finite.
    pub fn set_parameters(&mut self, params: Vec<ArrayD<f32>>) -> Result<()> {
        let net = self.network();
        if params.len() != net.params.len() {
            return Err(MadError::Data(format!(
                "expected {} parameter tensors, got {}",
                net.params.len(),
                params.len()
            )));
        }
        for (meta, p) in net.params.iter().zip(&params) {
            if p.shape() != meta.shape.as_slice() {
                return Err(MadError::Data(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    meta.name,
                    p.shape(),
                    meta.shape
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(MadError::Numeric(format!("parameter {} contains non-finite values", meta.name)));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Overwrite one named parameter tensor (test and tooling hook).
    pub fn set_parameter(&mut self, name: &str, value: ArrayD<f32>) -> Result<()> {
        let net = self.network();
        let idx = net
            .params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| MadError::Config(format!("no parameter named {name}")))?;
        let mut params = self.params.clone();
        params[idx] = value;
        self.set_parameters(params)
    }

    pub(crate) fn params_f64(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.iter().map(|&v| v as f64).collect()).collect()
    }

    /// All parameters as one flat f64 vector, in index order.
    pub fn flat_params_f64(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_params());
        for p in &self.params {
            out.extend(p.iter().map(|&v| v as f64));
        }
        out
    }

    /// Rebuild parameter tensors from a flat f64 vector (rounds to f32).
    pub fn with_flat_params_f64(&self, flat: &[f64]) -> Result<ModelState> {
        if flat.len() != self.total_params() {
            return Err(MadError::Data(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.total_params()
            )));
        }
        let mut out = self.clone();
        let mut off = 0;
        let mut params = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let len = p.len();
            let arr = ArrayD::from_shape_vec(
                IxDyn(p.shape()),
                flat[off..off + len].iter().map(|&v| v as f32).collect(),
            )
            .expect("shape preserved");
            params.push(arr);
            off += len;
        }
        out.set_parameters(params)?;
        Ok(out)
    }

    /// Forward pass retaining activations for backprop.
    pub fn forward_pass(&self, x: &Array4<f32>) -> Result<ForwardPass> {
        let net = self.network();
        let params = self.params_f64();
        let cache = net.forward(&params, x)?;
        Ok(ForwardPass { net, params, cache })
    }

    /// Logits for a batch, computed in fixed-size chunks.
    pub fn logits(&self, x: &Array4<f32>) -> Result<Array2<f64>> {
        let n = x.shape()[0];
        let net = self.network();
        let params = self.params_f64();
        let mut out = Array2::<f64>::zeros((n, self.spec.num_classes));
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let chunk = x.slice(ndarray::s![start..end, .., .., ..]).to_owned();
            let cache = net.forward(&params, &chunk)?;
            out.slice_mut(ndarray::s![start..end, ..]).assign(&cache.logits);
            start = end;
        }
        Ok(out)
    }

    pub fn predict(&self, x: &Array4<f32>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(argmax_rows(&logits))
    }
}

pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// A completed forward pass; backprop entry point for losses and per-logit
/// gradients (DeepFool, CW).
pub struct ForwardPass {
    net: Network,
    params: Vec<Vec<f64>>,
    cache: network::ForwardCache,
}

impl ForwardPass {
    pub fn logits(&self) -> &Array2<f64> {
        &self.cache.logits
    }

    /// Backprop an arbitrary logit gradient to (parameter grads, input grad).
    pub fn backward(&self, dlogits: &Array2<f64>) -> Result<(Vec<ArrayD<f64>>, Array4<f64>)> {
        let (grads, dx) = self.net.backward(&self.params, &self.cache, dlogits)?;
        let arrs = self
            .net
            .params
            .iter()
            .zip(grads)
            .map(|(meta, g)| ArrayD::from_shape_vec(IxDyn(&meta.shape), g).expect("grad shape"))
            .collect();
        Ok((arrs, dx))
    }
}

/// Deterministically initialize a model (He-normal weights, zero biases).
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ModelState> {
    let net = Network::from_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(net.params.len());
    for meta in &net.params {
        let arr = if meta.shape.len() == 1 {
            // Small nonzero biases keep ReLU pre-activations off the exact
            // kink for all-zero input regions.
            let data: Vec<f32> = (0..meta.len()).map(|_| (randn(&mut rng) * 0.01) as f32).collect();
            ArrayD::from_shape_vec(IxDyn(&meta.shape), data).expect("init shape")
        } else {
            let fan_in: usize = meta.shape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let data: Vec<f32> = (0..meta.len()).map(|_| (randn(&mut rng) * std) as f32).collect();
            ArrayD::from_shape_vec(IxDyn(&meta.shape), data).expect("init shape")
        };
        params.push(arr);
    }
    Ok(ModelState {
        spec: spec.clone(),
        rng_seed: seed,
        training_meta: BTreeMap::new(),
        params,
    })
}

/// CA in percent: `100 * correct / total`.
pub fn evaluate_accuracy(model: &ModelState, examples: &LabeledImages) -> Result<f64> {
    if examples.is_empty() {
        return Err(MadError::Data("cannot evaluate accuracy on an empty example set".into()));
    }
    examples.check_labels(model.spec.num_classes)?;
    let preds = model.predict(&examples.images)?;
    let correct = preds.iter().zip(&examples.labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * correct as f64 / examples.len() as f64)
}

/// Mean loss and parameter gradient over a batch.
pub fn loss_and_grad(
    model: &ModelState,
    batch: &LabeledImages,
    kind: &LossKind,
) -> Result<(f64, Vec<ArrayD<f64>>)> {
    if batch.is_empty() {
        return Err(MadError::Data("empty batch".into()));
    }
    let n = batch.len() as f64;
    let (loss_sum, grads_sum) = loss_and_grad_sum(model, batch, kind)?;
    let grads = grads_sum.into_iter().map(|g| g / n).collect();
    Ok((loss_sum / n, grads))
}

/// Summed (not averaged) loss and parameter gradient, chunked at a fixed size.
pub(crate) fn loss_and_grad_sum(
    model: &ModelState,
    batch: &LabeledImages,
    kind: &LossKind,
) -> Result<(f64, Vec<ArrayD<f64>>)> {
    let n = batch.len();
    let mut total = 0.0;
    let mut acc: Option<Vec<ArrayD<f64>>> = None;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let sub = batch.subset(&idx);
        let pass = model.forward_pass(&sub.images)?;
        let ref_chunk;
        let chunk_kind = match kind {
            LossKind::CrossEntropy => LossKind::CrossEntropy,
            LossKind::KlToReference(r) => {
                ref_chunk = r.slice(ndarray::s![start..end, ..]).to_owned();
                LossKind::KlToReference(&ref_chunk)
            }
        };
        let (loss, dz) = loss_on_logits(pass.logits(), &sub.labels, &chunk_kind)?;
        total += loss;
        let (grads, _) = pass.backward(&dz)?;
        match &mut acc {
            None => acc = Some(grads),
            Some(a) => {
                for (ai, gi) in a.iter_mut().zip(grads) {
                    *ai += &gi;
                }
            }
        }
        start = end;
    }
    Ok((total, acc.expect("non-empty batch")))
}

/// Gradient of the mean loss w.r.t. the input pixels.
pub fn input_grad(
    model: &ModelState,
    x: &Array4<f32>,
    y: &[usize],
    kind: &LossKind,
) -> Result<Array4<f64>> {
    let n = x.shape()[0];
    if n == 0 {
        return Err(MadError::Data("empty batch".into()));
    }
    if y.len() != n {
        return Err(MadError::Data("label count mismatch".into()));
    }
    let sh = x.shape();
    let mut out = Array4::<f64>::zeros((n, sh[1], sh[2], sh[3]));
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = x.slice(ndarray::s![start..end, .., .., ..]).to_owned();
        let pass = model.forward_pass(&chunk)?;
        let ref_chunk;
        let chunk_kind = match kind {
            LossKind::CrossEntropy => LossKind::CrossEntropy,
            LossKind::KlToReference(r) => {
                ref_chunk = r.slice(ndarray::s![start..end, ..]).to_owned();
                LossKind::KlToReference(&ref_chunk)
            }
        };
        let (_, dz) = loss_on_logits(pass.logits(), &y[start..end], &chunk_kind)?;
        // Mean over the full batch.
        let (_, dx) = pass.backward(&(dz / n as f64))?;
        out.slice_mut(ndarray::s![start..end, .., .., ..]).assign(&dx);
        start = end;
    }
    Ok(out)
}
