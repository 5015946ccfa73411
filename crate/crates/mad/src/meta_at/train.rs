//! Model-backed episodic training loop and the K-shot test protocol.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::core::{inner_update_flat, query_gradient_flat};
use super::{Decision, EarlyStopper, EpisodeRecord, MetaParams, MetaTrainLog, StopReason, ValidationPoint};
use crate::data::LabeledImages;
use crate::error::{MadError, Result};
use crate::mad_dataset::{sample_eval_task, sample_train_episode, Episode, MadDataset, Role};
use crate::model::{evaluate_accuracy, loss_and_grad, LossKind, ModelState};

fn sub_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn flatten(grads: Vec<ndarray::ArrayD<f64>>) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        out.extend(g.iter().copied());
    }
    out
}

/// Cross-entropy loss and flat gradient at `flat` parameters.
fn loss_grad_at(template: &ModelState, data: &LabeledImages, flat: &[f64]) -> Result<(f64, Vec<f64>)> {
    let model = template.with_flat_params_f64(flat)?;
    let (loss, grads) = loss_and_grad(&model, data, &LossKind::CrossEntropy)?;
    Ok((loss, flatten(grads)))
}

/// Functional inner update: θ′ = θ − β·∇L(θ; S), `inner_steps` times.
/// The input model is untouched.
pub fn inner_update(model: &ModelState, support: &LabeledImages, beta: f64, inner_steps: usize) -> Result<ModelState> {
    if beta < 0.0 {
        return Err(MadError::Config(format!("beta must be >= 0, got {beta}")));
    }
    let theta = model.flat_params_f64();
    let mut grad = |flat: &[f64]| loss_grad_at(model, support, flat).map(|(_, g)| g);
    let updated = inner_update_flat(&theta, &mut grad, beta, inner_steps)?;
    model.with_flat_params_f64(&updated)
}

/// Outer gradient for one episode, flat over θ's parameters. First-order
/// evaluates ∇L_Q at θ′; second-order differentiates through the inner
/// trajectory (Hessian-vector products by finite differences).
pub fn query_gradient(
    model: &ModelState,
    support: &LabeledImages,
    query: &LabeledImages,
    beta: f64,
    inner_steps: usize,
    second_order: bool,
) -> Result<Vec<f64>> {
    let theta = model.flat_params_f64();
    let mut sg = |flat: &[f64]| loss_grad_at(model, support, flat).map(|(_, g)| g);
    let mut qg = |flat: &[f64]| loss_grad_at(model, query, flat).map(|(_, g)| g);
    query_gradient_flat(&theta, &mut sg, &mut qg, beta, inner_steps, second_order)
}

/// One epoch's episode sweep against a frozen θ: returns Σ g over episodes
/// plus per-episode stats. θ is never mutated here.
pub fn meta_epoch(
    model: &ModelState,
    episodes: &[Episode],
    params: &MetaParams,
) -> Result<(Vec<f64>, Vec<EpisodeRecord>)> {
    if episodes.is_empty() {
        return Err(MadError::Config("meta_epoch needs at least one episode".into()));
    }
    let theta = model.flat_params_f64();
    let mut sum_g = vec![0.0; theta.len()];
    let mut records = Vec::with_capacity(episodes.len());
    for (idx, ep) in episodes.iter().enumerate() {
        let (inner_loss, _) = loss_grad_at(model, &ep.support, &theta)?;
        let g = query_gradient(model, &ep.support, &ep.query, params.beta, params.inner_steps, params.second_order)?;
        for (s, gv) in sum_g.iter_mut().zip(&g) {
            *s += gv;
        }
        let adapted = inner_update(model, &ep.support, params.beta, params.inner_steps)?;
        let (query_loss, _) = loss_and_grad(&adapted, &ep.query, &LossKind::CrossEntropy)?;
        let query_ca = evaluate_accuracy(&adapted, &ep.query)?;
        records.push(EpisodeRecord { epoch: 0, episode: idx, inner_loss, query_loss, query_ca });
    }
    if sum_g.iter().any(|v| !v.is_finite()) {
        return Err(MadError::Numeric("meta-training diverged: non-finite outer gradient".into()));
    }
    Ok((sum_g, records))
}

fn validation_check(model: &ModelState, panel: &[Episode], params: &MetaParams) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut ca_sum = 0.0;
    for task in panel {
        let adapted = inner_update(model, &task.support, params.beta, params.inner_steps)?;
        let (loss, _) = loss_and_grad(&adapted, &task.query, &LossKind::CrossEntropy)?;
        loss_sum += loss;
        ca_sum += evaluate_accuracy(&adapted, &task.query)?;
    }
    let n = panel.len() as f64;
    Ok((loss_sum / n, ca_sum / n))
}

/// Result of a meta-training run: the best-validation parameters, the final
/// parameters (for resuming), and the full log.
#[derive(Debug, Clone)]
pub struct MetaTrainOutcome {
    pub best: ModelState,
    pub last: ModelState,
    pub log: MetaTrainLog,
}

/// Episodic meta-training with per-epoch validation on a fixed panel of
/// meta_val tasks and patience-based early stopping.
pub fn meta_train(
    model: &ModelState,
    dataset: &MadDataset,
    params: &MetaParams,
    seed: u64,
) -> Result<MetaTrainOutcome> {
    params.validate()?;
    let val_attacks = dataset.attacks_in_role(Role::MetaVal);
    if val_attacks.is_empty() {
        return Err(MadError::Config("meta_val role holds no attacks; cannot validate".into()));
    }
    // Fixed validation panel: one K-shot task per meta_val attack.
    let mut val_rng = sub_rng(seed, 0xA1);
    let mut panel = Vec::new();
    for &id in &val_attacks {
        panel.push(sample_eval_task(dataset, id, params.test_shot_k, params.test_query_m, &mut val_rng)?);
    }

    let mut theta_model = model.clone();
    let mut stopper = EarlyStopper::new(params.patience)?;
    let mut best_model = theta_model.clone();
    let mut log = MetaTrainLog {
        episodes: Vec::new(),
        validation: Vec::new(),
        best_check: 0,
        stop_reason: StopReason::EpochsExhausted,
    };

    let mut episode_rng = sub_rng(seed, 0xE1);
    for epoch in 0..params.epochs {
        let episodes: Vec<Episode> = (0..params.episodes_per_epoch)
            .map(|_| {
                sample_train_episode(
                    dataset,
                    params.ways,
                    params.query_ways,
                    params.shot_k,
                    params.query_m,
                    &mut episode_rng,
                )
            })
            .collect::<Result<_>>()?;
        let (sum_g, mut records) = meta_epoch(&theta_model, &episodes, params)?;
        for rec in &mut records {
            rec.epoch = epoch;
        }
        log.episodes.extend(records);

        // θ ← θ − (λ/e)·Σ g
        let scale = params.lambda_ / params.episodes_per_epoch as f64;
        let theta = theta_model.flat_params_f64();
        let updated: Vec<f64> = theta.iter().zip(&sum_g).map(|(&t, &g)| t - scale * g).collect();
        theta_model = theta_model.with_flat_params_f64(&updated)?;

        let (val_loss, val_ca) = validation_check(&theta_model, &panel, params)?;
        if !val_loss.is_finite() {
            return Err(MadError::Numeric("meta-training diverged: non-finite validation loss".into()));
        }
        log.validation.push(ValidationPoint { epoch, val_loss, val_ca });
        let decision = stopper.observe(val_loss);
        let check = log.validation.len() - 1;
        if stopper.best_index() == Some(check) {
            best_model = theta_model.clone();
            log.best_check = check;
        }
        if decision == Decision::Stop {
            log.stop_reason = StopReason::Patience;
            break;
        }
    }
    Ok(MetaTrainOutcome { best: best_model, last: theta_model, log })
}

/// Result of the K-shot fine-tune-and-evaluate protocol on one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneRecord {
    /// CA (%) on Q′ before any adaptation.
    pub ca_before: f64,
    /// CA (%) on Q′ after fine-tuning on S′.
    pub ca_after: f64,
    /// Wall-clock fine-tuning time in hours.
    pub ot_hours: f64,
    pub steps: usize,
}

/// Fine-tune on the support set with β-rate steps, holding out a fixed
/// quarter of the examples (the whole set when smaller than 4) to steer
/// early stopping on its cross-entropy loss. The holdout is drawn from a
/// seeded shuffle so structured support layouts (e.g. attack/clean
/// interleaving) cannot bias it toward one origin. Returns the
/// best-by-holdout model and the steps taken.
pub fn finetune(best: &ModelState, support: &LabeledImages, params: &MetaParams) -> Result<(ModelState, usize)> {
    params.validate()?;
    let mut tuned = best.clone();
    let mut steps = 0;
    if params.finetune_steps > 0 {
        let n = support.len();
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut sub_rng(n as u64, 0xF1));
        let holdout_idx: Vec<usize> = {
            let mut h: Vec<usize> = order.iter().cloned().take(n / 4).collect();
            h.sort_unstable();
            h
        };
        let adapt_idx: Vec<usize> = (0..n).filter(|i| !holdout_idx.contains(i)).collect();
        let (adapt, holdout) = if holdout_idx.is_empty() {
            (support.clone(), support.clone())
        } else {
            (support.subset(&adapt_idx), support.subset(&holdout_idx))
        };
        let mut stopper = EarlyStopper::new(params.patience)?;
        let mut current = best.clone();
        let mut best_loss = f64::INFINITY;
        for _ in 0..params.finetune_steps {
            current = inner_update(&current, &adapt, params.beta, 1)?;
            steps += 1;
            let (holdout_loss, _) = loss_and_grad(&current, &holdout, &LossKind::CrossEntropy)?;
            if holdout_loss < best_loss {
                best_loss = holdout_loss;
                tuned = current.clone();
            }
            if stopper.observe(holdout_loss) == Decision::Stop {
                break;
            }
        }
    }
    Ok((tuned, steps))
}

/// Fine-tune on S′ and measure CA on Q′ before and after. OT covers the
/// fine-tuning phase only.
pub fn finetune_and_eval(best: &ModelState, task: &Episode, params: &MetaParams) -> Result<FinetuneRecord> {
    params.validate()?;
    let ca_before = evaluate_accuracy(best, &task.query)?;
    let start = std::time::Instant::now();
    let (tuned, steps) = finetune(best, &task.support, params)?;
    let ot_hours = start.elapsed().as_secs_f64() / 3600.0;
    let ca_after = evaluate_accuracy(&tuned, &task.query)?;
    Ok(FinetuneRecord { ca_before, ca_after, ot_hours, steps })
}
