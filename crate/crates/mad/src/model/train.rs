//! Clean SGD training.

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_and_grad_sum, LossKind, ModelState};
use crate::data::LabeledImages;
use crate::error::{MadError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    SgdMomentum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Momentum coefficient, used only with `sgd_momentum`.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
            optimizer: Optimizer::Sgd,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(MadError::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(MadError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Shuffled index batches for one epoch. Shared by clean and adversarial
/// training so both consume the RNG identically.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// One SGD step on the model, in place. Gradients are mean gradients.
pub(crate) struct SgdState {
    velocity: Option<Vec<ArrayD<f64>>>,
}

impl SgdState {
    pub(crate) fn new() -> Self {
        Self { velocity: None }
    }

    pub(crate) fn step(
        &mut self,
        model: &mut ModelState,
        grads: &[ArrayD<f64>],
        cfg: &TrainConfig,
    ) -> Result<()> {
        let update: Vec<ArrayD<f64>> = match cfg.optimizer {
            Optimizer::Sgd => grads.to_vec(),
            Optimizer::SgdMomentum => {
                let v = self.velocity.get_or_insert_with(|| {
                    grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect()
                });
                for (vi, gi) in v.iter_mut().zip(grads) {
                    *vi = &*vi * cfg.momentum + gi;
                }
                v.clone()
            }
        };
        let mut params = model.parameters().to_vec();
        for (p, u) in params.iter_mut().zip(&update) {
            for (pv, uv) in p.iter_mut().zip(u.iter()) {
                *pv = (*pv as f64 - cfg.learning_rate * uv) as f32;
            }
        }
        model.set_parameters(params)
    }
}

/// Train on clean examples with plain SGD. Per-epoch mean losses are recorded
/// in `training_meta["epoch_losses"]`.
pub fn train_clean(model: &ModelState, data: &LabeledImages, cfg: &TrainConfig) -> Result<ModelState> {
    cfg.validate()?;
    data.check_labels(model.spec.num_classes)?;
    if data.images.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(MadError::Data("training images must lie in [0,1]".into()));
    }
    let mut out = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = SgdState::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch_idx in epoch_batches(data.len(), cfg.batch_size, &mut rng) {
            let batch = data.subset(&batch_idx);
            let bn = batch.len() as f64;
            let (loss_sum, grads_sum) = loss_and_grad_sum(&out, &batch, &LossKind::CrossEntropy)?;
            let loss = loss_sum / bn;
            if !loss.is_finite() {
                return Err(MadError::Numeric(format!("training diverged: loss = {loss}")));
            }
            let grads: Vec<ArrayD<f64>> = grads_sum.into_iter().map(|g| g / bn).collect();
            sgd.step(&mut out, &grads, cfg)?;
            epoch_loss += loss * bn;
            seen += batch.len();
        }
        epoch_losses.push(epoch_loss / seen.max(1) as f64);
    }
    out.training_meta.insert("epochs_run".into(), serde_json::json!(cfg.epochs));
    out.training_meta.insert("epoch_losses".into(), serde_json::json!(epoch_losses.clone()));
    if let Some(last) = epoch_losses.last() {
        out.training_meta.insert("final_loss".into(), serde_json::json!(last));
    }
    Ok(out)
}
