//! Black-box attacks: Square (random square search, linf) and One-Pixel
//! (differential evolution, l0).
//!
//! Both operate through [`QueryModel`], which exposes logits only — the
//! type system keeps gradients out of reach.

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{AttackOutcome, AttackSpec};
use crate::error::{MadError, Result};
use crate::model::{argmax_rows, ModelState};

/// Prediction-only model access for black-box attacks.
pub trait QueryModel {
    fn query_logits(&self, x: &Array4<f32>) -> Result<Array2<f64>>;
    fn num_classes(&self) -> usize;
}

impl QueryModel for ModelState {
    fn query_logits(&self, x: &Array4<f32>) -> Result<Array2<f64>> {
        self.logits(x)
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }
}

fn check_inputs_bb(num_classes: usize, x: &Array4<f32>, y: &[usize]) -> Result<()> {
    let n = x.shape()[0];
    if n == 0 {
        return Err(MadError::Data("attack called on an empty batch".into()));
    }
    if y.len() != n {
        return Err(MadError::Data(format!("batch has {n} images but {} labels", y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
        return Err(MadError::Data(format!("label {bad} out of range for {num_classes} classes")));
    }
    if x.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(MadError::Data("attack input pixels must lie in [0,1]".into()));
    }
    Ok(())
}

fn single(img: &Array3<f32>) -> Array4<f32> {
    img.clone().insert_axis(ndarray::Axis(0))
}

/// z_y − max_{j≠y} z_j: negative means misclassified.
fn margin(logits: &Array2<f64>, y: usize) -> f64 {
    let row = logits.row(0);
    let mut other = f64::NEG_INFINITY;
    for j in 0..row.len() {
        if j != y && row[j] > other {
            other = row[j];
        }
    }
    row[y] - other
}

fn identity_outcome_bb(model: &dyn QueryModel, x: &Array4<f32>, y: &[usize]) -> Result<AttackOutcome> {
    let preds = argmax_rows(&model.query_logits(x)?);
    Ok(AttackOutcome {
        x_adv: x.clone(),
        success_mask: preds.iter().zip(y).map(|(p, t)| p != t).collect(),
        queries_or_steps: y.len(),
    })
}

/// Random search over ±ε axis-aligned squares; a proposal is kept only when
/// the margin loss strictly decreases. Extras: "query_budget" (proposals per
/// example, default 1000), "p_init" (initial square area fraction, default
/// 0.8).
pub fn square_attack(
    model: &dyn QueryModel,
    x: &Array4<f32>,
    y: &[usize],
    spec: &AttackSpec,
    rng: &mut ChaCha8Rng,
) -> Result<AttackOutcome> {
    spec.validate()?;
    check_inputs_bb(model.num_classes(), x, y)?;
    if spec.epsilon == 0.0 {
        return identity_outcome_bb(model, x, y);
    }
    let budget = spec.extra_usize_or("query_budget", 1000)?;
    if budget == 0 {
        return Err(MadError::Config(format!("attack {}: query_budget must be >= 1", spec.attack_id)));
    }
    let p_init = spec.extra_f64_or("p_init", 0.8)?;
    if !(0.0..=1.0).contains(&p_init) || p_init == 0.0 {
        return Err(MadError::Config(format!("attack {}: p_init must be in (0, 1], got {p_init}", spec.attack_id)));
    }
    let eps = spec.epsilon as f32;
    let (_, chans, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let n = x.shape()[0];
    let mut x_adv = x.clone();
    let mut queries = 0usize;

    for i in 0..n {
        let x0 = x.slice(ndarray::s![i, .., .., ..]).to_owned();
        let mut best = x0.clone();
        let mut best_loss = margin(&model.query_logits(&single(&best))?, y[i]);
        queries += 1;
        if best_loss < 0.0 {
            continue; // already misclassified
        }
        for t in 0..budget {
            // Square size shrinks as the budget is spent.
            let progress = t as f64 / budget as f64;
            let halvings = [0.1, 0.25, 0.5, 0.75, 0.9].iter().filter(|&&b| progress >= b).count();
            let p = p_init / 2f64.powi(halvings as i32);
            let side = ((p * (h * w) as f64).sqrt().floor() as usize).clamp(1, h.min(w));
            let r0 = rng.gen_range(0..=h - side);
            let c0 = rng.gen_range(0..=w - side);
            let mut candidate = best.clone();
            for ch in 0..chans {
                let delta = if rng.gen::<bool>() { eps } else { -eps };
                for rr in r0..r0 + side {
                    for cc in c0..c0 + side {
                        candidate[[ch, rr, cc]] = (x0[[ch, rr, cc]] + delta).clamp(0.0, 1.0);
                    }
                }
            }
            let loss = margin(&model.query_logits(&single(&candidate))?, y[i]);
            queries += 1;
            if loss < best_loss {
                best_loss = loss;
                best = candidate;
            }
            if best_loss < 0.0 {
                break;
            }
        }
        x_adv.slice_mut(ndarray::s![i, .., .., ..]).assign(&best);
    }

    let preds = argmax_rows(&model.query_logits(&x_adv)?);
    queries += n;
    let success_mask = preds.iter().zip(y).map(|(p, t)| p != t).collect();
    Ok(AttackOutcome { x_adv, success_mask, queries_or_steps: queries })
}

/// One candidate pixel-set: flat genome [row, col, value per channel] × pixels.
struct Genome(Vec<f64>);

impl Genome {
    fn render(&self, x0: &Array3<f32>, pixels: usize, chans: usize) -> Array3<f32> {
        let (h, w) = (x0.shape()[1], x0.shape()[2]);
        let mut img = x0.clone();
        for p in 0..pixels {
            let base = p * (2 + chans);
            let r = (self.0[base].floor() as usize).min(h - 1);
            let c = (self.0[base + 1].floor() as usize).min(w - 1);
            for ch in 0..chans {
                img[[ch, r, c]] = self.0[base + 2 + ch] as f32;
            }
        }
        img
    }
}

/// Differential evolution over (row, col, channel values) tuples, minimizing
/// the true-class softmax probability. Extras: "pixels" (default 1),
/// "population" (≥ 4, default 20), "generations" (default 10).
pub fn one_pixel(
    model: &dyn QueryModel,
    x: &Array4<f32>,
    y: &[usize],
    spec: &AttackSpec,
    rng: &mut ChaCha8Rng,
) -> Result<AttackOutcome> {
    spec.validate()?;
    check_inputs_bb(model.num_classes(), x, y)?;
    if spec.epsilon == 0.0 {
        return identity_outcome_bb(model, x, y);
    }
    let pixels = spec.extra_usize_or("pixels", 1)?;
    if pixels == 0 {
        return Err(MadError::Config(format!("attack {}: pixels must be >= 1", spec.attack_id)));
    }
    let population = spec.extra_usize_or("population", 20)?;
    if population < 4 {
        return Err(MadError::Config(format!(
            "attack {}: differential evolution needs a population of >= 4, got {population}",
            spec.attack_id
        )));
    }
    let generations = spec.extra_usize_or("generations", 10)?;
    let (f_weight, crossover) = (0.5, 0.9);

    let n = x.shape()[0];
    let (chans, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let genome_len = pixels * (2 + chans);
    let dim_max = |d: usize| -> f64 {
        match d % (2 + chans) {
            0 => h as f64,
            1 => w as f64,
            _ => 1.0,
        }
    };
    let mut x_adv = x.clone();
    let mut queries = 0usize;

    for i in 0..n {
        let x0 = x.slice(ndarray::s![i, .., .., ..]).to_owned();
        let fitness_of = |img: &Array3<f32>, queries: &mut usize| -> Result<f64> {
            let logits = model.query_logits(&single(img))?;
            *queries += 1;
            let row: Vec<f64> = logits.row(0).to_vec();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            Ok(exps[y[i]] / sum)
        };

        let mut pop: Vec<Genome> = (0..population)
            .map(|_| Genome((0..genome_len).map(|d| rng.gen::<f64>() * dim_max(d)).collect()))
            .collect();
        let mut fit = Vec::with_capacity(population);
        for g in &pop {
            fit.push(fitness_of(&g.render(&x0, pixels, chans), &mut queries)?);
        }

        for _ in 0..generations {
            for s in 0..population {
                // DE/rand/1/bin with the usual distinct-agent constraint.
                let mut pick = || loop {
                    let j = rng.gen_range(0..population);
                    if j != s {
                        return j;
                    }
                };
                let (a, b, c) = {
                    let a = pick();
                    let b = loop {
                        let v = pick();
                        if v != a {
                            break v;
                        }
                    };
                    let c = loop {
                        let v = pick();
                        if v != a && v != b {
                            break v;
                        }
                    };
                    (a, b, c)
                };
                let forced = rng.gen_range(0..genome_len);
                let mut trial = Vec::with_capacity(genome_len);
                for d in 0..genome_len {
                    let from_mutant = d == forced || rng.gen::<f64>() < crossover;
                    let v = if from_mutant {
                        pop[a].0[d] + f_weight * (pop[b].0[d] - pop[c].0[d])
                    } else {
                        pop[s].0[d]
                    };
                    let hi = dim_max(d);
                    trial.push(v.clamp(0.0, hi - if d % (2 + chans) < 2 { 1e-9 } else { 0.0 }));
                }
                let trial = Genome(trial);
                let trial_fit = fitness_of(&trial.render(&x0, pixels, chans), &mut queries)?;
                if trial_fit < fit[s] {
                    pop[s] = trial;
                    fit[s] = trial_fit;
                }
            }
        }

        let best = fit
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite fitness"))
            .map(|(idx, _)| idx)
            .expect("population is non-empty");
        x_adv
            .slice_mut(ndarray::s![i, .., .., ..])
            .assign(&pop[best].render(&x0, pixels, chans));
    }

    let preds = argmax_rows(&model.query_logits(&x_adv)?);
    queries += n;
    let success_mask = preds.iter().zip(y).map(|(p, t)| p != t).collect();
    Ok(AttackOutcome { x_adv, success_mask, queries_or_steps: queries })
}
