//! Standard adversarial training: each step regenerates adversarial examples
//! against the current model with a fixed inner attack and minimizes the loss
//! on a mixed clean/adversarial batch.

use ndarray::{Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

use crate::attacks::{registry_entry, run_attack, AttackSpec, Knowledge, Norm};
use crate::data::LabeledImages;
use crate::error::{MadError, Result};
use crate::mad_dataset::{MadDataset, Role, Split};
use crate::model::{loss_and_grad_sum, LossKind, ModelState, Optimizer, TrainConfig};

/// Configuration for the adversarial-training baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ATConfig {
    /// Inner-maximization attack, regenerated per batch against the current model.
    pub inner_attack: AttackSpec,
    /// Mix each batch 50/50 clean/adversarial (±1 example).
    pub mix_clean: bool,
    /// Fraction of the adversarial half drawn from the dataset's pre-generated
    /// AT-role stores instead of fresh generation, in [0, 1].
    pub pregen_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

fn default_inner_attack() -> AttackSpec {
    AttackSpec {
        attack_id: 18,
        name: "PGD".into(),
        norm: Norm::Linf,
        knowledge: Knowledge::WhiteBox,
        epsilon: 0.3,
        step_size: 0.075,
        iterations: 10,
        extra: BTreeMap::new(),
    }
}

impl Default for ATConfig {
    fn default() -> Self {
        Self {
            inner_attack: default_inner_attack(),
            mix_clean: true,
            pregen_ratio: 0.0,
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

impl ATConfig {
    pub fn validate(&self) -> Result<()> {
        let entry = registry_entry(self.inner_attack.attack_id)
            .ok_or_else(|| MadError::Config(format!("unknown inner attack_id {}", self.inner_attack.attack_id)))?;
        if !entry.implemented || entry.knowledge != Knowledge::WhiteBox {
            return Err(MadError::Config(format!(
                "inner attack must be an implemented white-box attack, got {} ({})",
                entry.attack_id, entry.name
            )));
        }
        self.inner_attack.validate()?;
        if !(0.0..=1.0).contains(&self.pregen_ratio) {
            return Err(MadError::Config(format!("pregen_ratio must lie in [0,1], got {}", self.pregen_ratio)));
        }
        if self.learning_rate <= 0.0 {
            return Err(MadError::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(MadError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: Optimizer::Sgd,
            momentum: 0.9,
            seed: self.seed,
        }
    }
}

/// Clean/adversarial counts for one batch of `n` examples: 50/50 ± 1 when
/// mixing, all-adversarial otherwise.
pub(crate) fn batch_composition(n: usize, mix_clean: bool) -> (usize, usize) {
    if mix_clean {
        let adv = n / 2;
        (n - adv, adv)
    } else {
        (0, n)
    }
}

fn labeled_from_classes(
    parts: impl Iterator<Item = (usize, Array4<f32>)>,
    shape: (usize, usize, usize),
) -> Result<LabeledImages> {
    let (c, h, w) = shape;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (cls, block) in parts {
        let n = block.shape()[0];
        images.extend(block.iter().copied());
        labels.extend(std::iter::repeat(cls).take(n));
    }
    let n = labels.len();
    let arr = Array4::from_shape_vec((n, c, h, w), images)
        .map_err(|e| MadError::Data(format!("pool reshape: {e}")))?;
    LabeledImages::new(arr, labels)
}

/// Clean training data for AT: the clean pool's train split per class (the
/// whole pool when no splits are assigned).
pub fn at_clean_pool(dataset: &MadDataset) -> Result<LabeledImages> {
    let split = dataset.clean_splits.len() == dataset.clean_pool.len() && !dataset.clean_splits.is_empty();
    let parts = dataset.clean_pool.iter().enumerate().map(|(cls, store)| {
        let idx: Vec<usize> = if split {
            dataset.clean_splits[cls].of(Split::Train).to_vec()
        } else {
            (0..store.len()).collect()
        };
        (cls, store.select(&idx))
    });
    let pool = labeled_from_classes(parts, dataset.image_shape)?;
    if pool.is_empty() {
        return Err(MadError::Data("AT clean pool is empty".into()));
    }
    Ok(pool)
}

/// Pre-generated adversarial pool for AT: train splits of every attack in
/// the meta_train and meta_val roles.
pub fn at_pregen_pool(dataset: &MadDataset) -> Result<LabeledImages> {
    let mut ids = dataset.attacks_in_role(Role::MetaTrain);
    ids.extend(dataset.attacks_in_role(Role::MetaVal));
    let mut parts = Vec::new();
    for id in ids {
        let store = &dataset.attacks[&id];
        for (cls, class) in store.classes.iter().enumerate() {
            let idx: Vec<usize> = match store.splits.get(cls) {
                Some(ranges) => ranges.of(Split::Train).to_vec(),
                None => (0..class.len()).collect(),
            };
            parts.push((cls, class.select(&idx)));
        }
    }
    let pool = labeled_from_classes(parts.into_iter(), dataset.image_shape)?;
    if pool.is_empty() {
        return Err(MadError::Data("AT pre-generated pool is empty (no meta_train/meta_val attacks)".into()));
    }
    Ok(pool)
}

/// Re-assert the attack-budget invariant on a freshly generated batch.
fn assert_budget(x_adv: &Array4<f32>, x0: &Array4<f32>, spec: &AttackSpec) -> Result<()> {
    let n = x_adv.shape()[0];
    for i in 0..n {
        let a = x_adv.slice(ndarray::s![i, .., .., ..]);
        let b = x0.slice(ndarray::s![i, .., .., ..]);
        let dist = match spec.norm {
            Norm::Linf => a
                .iter()
                .zip(b.iter())
                .map(|(&p, &q)| (p as f64 - q as f64).abs())
                .fold(0.0f64, f64::max),
            Norm::L2 => a
                .iter()
                .zip(b.iter())
                .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
                .sum::<f64>()
                .sqrt(),
            _ => 0.0,
        };
        if dist > spec.epsilon + 1e-6 {
            return Err(MadError::Numeric(format!(
                "inner attack exceeded its ε={} budget: distance {dist}",
                spec.epsilon
            )));
        }
    }
    Ok(())
}

/// Adversarial training (outer min over mixed batches, inner max via the
/// configured attack). The clean data and any pre-generated adversarial
/// examples come from `dataset`; fresh adversarial examples are regenerated
/// per batch against the current parameters.
pub fn at_train(model: &ModelState, dataset: &MadDataset, cfg: &ATConfig) -> Result<ModelState> {
    cfg.validate()?;
    let clean = at_clean_pool(dataset)?;
    clean.check_labels(model.spec.num_classes)?;
    let pregen = if cfg.pregen_ratio > 0.0 { Some(at_pregen_pool(dataset)?) } else { None };

    let mut out = model.clone();
    // The batch stream consumes the RNG exactly like clean training; the
    // pre-generated sampler draws from its own derived stream.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pregen_rng = {
        let mut h = Sha256::new();
        h.update(cfg.seed.to_le_bytes());
        h.update(b"at_pregen");
        ChaCha8Rng::from_seed(h.finalize().into())
    };
    let tc = cfg.train_config();
    let mut sgd = crate::model::train::SgdState::new();
    let mut batch_counter = 0u64;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch_idx in crate::model::train::epoch_batches(clean.len(), cfg.batch_size, &mut rng) {
            let n = batch_idx.len();
            let (clean_count, adv_count) = batch_composition(n, cfg.mix_clean);
            let pregen_count = if pregen.is_some() {
                ((adv_count as f64) * cfg.pregen_ratio).round() as usize
            } else {
                0
            };
            let fresh_count = adv_count - pregen_count.min(adv_count);

            let mut batch = clean.subset(&batch_idx[..clean_count]);
            if fresh_count > 0 {
                let src = clean.subset(&batch_idx[clean_count..clean_count + fresh_count]);
                let outcome =
                    run_attack(&cfg.inner_attack, &out, &src.images, &src.labels, cfg.seed, batch_counter)?;
                assert_budget(&outcome.x_adv, &src.images, &cfg.inner_attack)?;
                batch = batch.concat(&LabeledImages::new(outcome.x_adv, src.labels.clone())?)?;
            }
            if pregen_count > 0 {
                let pool = pregen.as_ref().expect("pregen pool present");
                let idx: Vec<usize> = (0..pregen_count).map(|_| pregen_rng.gen_range(0..pool.len())).collect();
                batch = batch.concat(&pool.subset(&idx))?;
            }
            batch_counter += 1;

            let bn = batch.len() as f64;
            let (loss_sum, grads_sum) = loss_and_grad_sum(&out, &batch, &LossKind::CrossEntropy)?;
            let loss = loss_sum / bn;
            if !loss.is_finite() {
                return Err(MadError::Numeric(format!("adversarial training diverged: loss = {loss}")));
            }
            let grads: Vec<ArrayD<f64>> = grads_sum.into_iter().map(|g| g / bn).collect();
            sgd.step(&mut out, &grads, &tc)?;
            epoch_loss += loss * bn;
            seen += batch.len();
        }
        epoch_losses.push(epoch_loss / seen.max(1) as f64);
    }
    if cfg.epochs > 0 {
        out.training_meta.insert("at_epochs_run".into(), serde_json::json!(cfg.epochs));
        out.training_meta.insert("at_epoch_losses".into(), serde_json::json!(epoch_losses));
        out.training_meta
            .insert("at_inner_attack".into(), serde_json::json!(cfg.inner_attack.attack_id));
    }
    Ok(out)
}
