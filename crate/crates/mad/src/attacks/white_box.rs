//! FGSM and its iterative descendants (BIM, PGD, MIFGSM, RFGSM, FFGSM,
//! TPGD, EOTPGD).

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    check_inputs, project_ball, round_f32, to_f64, verify_success, AttackOutcome, AttackSpec, Norm,
};
use crate::data::randn;
use crate::error::Result;
use crate::model::{input_grad, LossKind, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Bim,
    PgdLinf,
    PgdL2,
    Mifgsm,
    Rfgsm,
    Ffgsm,
    Tpgd,
    Eotpgd,
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Single signed-gradient step: x_adv = clip(x + ε·sign(∇_x L), 0, 1).
pub fn fgsm(model: &ModelState, x: &Array4<f32>, y: &[usize], spec: &AttackSpec) -> Result<AttackOutcome> {
    spec.validate()?;
    check_inputs(model, x, y)?;
    if spec.epsilon == 0.0 {
        return super::identity_outcome(model, x, y);
    }
    let grad = input_grad(model, x, y, &LossKind::CrossEntropy)?;
    let mut x_adv = to_f64(x);
    ndarray::Zip::from(&mut x_adv).and(&grad).for_each(|v, &g| {
        *v = (*v + spec.epsilon * sgn(g)).clamp(0.0, 1.0);
    });
    let x_adv = round_f32(&x_adv);
    let success_mask = verify_success(model, &x_adv, y)?;
    Ok(AttackOutcome { x_adv, success_mask, queries_or_steps: 1 })
}

/// Iterative signed/normalized gradient ascent with per-step ε-ball
/// projection and [0,1] clipping.
pub fn iterative_fgsm_family(
    model: &ModelState,
    x: &Array4<f32>,
    y: &[usize],
    spec: &AttackSpec,
    variant: Variant,
    rng: &mut ChaCha8Rng,
) -> Result<AttackOutcome> {
    spec.validate()?;
    check_inputs(model, x, y)?;
    if spec.epsilon == 0.0 {
        return super::identity_outcome(model, x, y);
    }
    let eps = spec.epsilon;
    let alpha = spec.step_size;
    let ball = match variant {
        Variant::PgdL2 => Norm::L2,
        _ => Norm::Linf,
    };

    // Variant extras are read up front so a bad config fails before any work.
    let momentum_decay = if variant == Variant::Mifgsm { spec.extra_f64("momentum_decay")? } else { 0.0 };
    let eot_samples = if variant == Variant::Eotpgd {
        let s = spec.extra_usize("eot_samples")?;
        if s == 0 {
            return Err(crate::MadError::Config(format!("attack {}: eot_samples must be >= 1", spec.attack_id)));
        }
        s
    } else {
        0
    };
    let noise_scale = if variant == Variant::Eotpgd { spec.extra_f64_or("noise_scale", alpha)? } else { 0.0 };
    let init_magnitude = match variant {
        Variant::Rfgsm | Variant::Ffgsm => spec.extra_f64("init_magnitude")?,
        _ => 0.0,
    };
    let random_start = match variant {
        Variant::PgdLinf | Variant::PgdL2 | Variant::Tpgd | Variant::Eotpgd => {
            spec.extra_bool_or("random_start", true)?
        }
        Variant::Rfgsm | Variant::Ffgsm => true,
        Variant::Bim | Variant::Mifgsm => false,
    };

    // TPGD pushes the perturbed softmax away from the clean one.
    let clean_logits: Option<Array2<f64>> = if variant == Variant::Tpgd { Some(model.logits(x)?) } else { None };

    let n = x.shape()[0];
    let per_example: usize = x.len() / n;
    let mut x_adv = to_f64(x);

    if random_start {
        match variant {
            Variant::PgdLinf | Variant::Eotpgd => {
                for v in x_adv.iter_mut() {
                    *v += eps * (2.0 * rng.gen::<f64>() - 1.0);
                }
            }
            Variant::PgdL2 => {
                for i in 0..n {
                    let mut img = x_adv.slice_mut(ndarray::s![i, .., .., ..]);
                    let dir: Vec<f64> = (0..per_example).map(|_| randn(rng)).collect();
                    let norm: f64 = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
                    let radius = eps * rng.gen::<f64>().powf(1.0 / per_example as f64);
                    if norm > 0.0 {
                        for (v, d) in img.iter_mut().zip(&dir) {
                            *v += d / norm * radius;
                        }
                    }
                }
            }
            Variant::Tpgd => {
                for v in x_adv.iter_mut() {
                    *v += 0.001 * randn(rng);
                }
            }
            Variant::Rfgsm => {
                for v in x_adv.iter_mut() {
                    *v += init_magnitude * sgn(randn(rng));
                }
            }
            Variant::Ffgsm => {
                for v in x_adv.iter_mut() {
                    *v += init_magnitude * (2.0 * rng.gen::<f64>() - 1.0);
                }
            }
            Variant::Bim | Variant::Mifgsm => {}
        }
        x_adv = project_ball(&x_adv, x, eps, ball)?;
    }

    let iterations = match variant {
        Variant::Rfgsm | Variant::Ffgsm => 1,
        _ => spec.iterations,
    };
    let mut momentum = Array4::<f64>::zeros(x_adv.raw_dim());
    let mut steps = 0;
    for _ in 0..iterations {
        let x_cur = round_f32(&x_adv);
        let grad = match variant {
            Variant::Tpgd => input_grad(
                model,
                &x_cur,
                y,
                &LossKind::KlToReference(clean_logits.as_ref().expect("tpgd reference")),
            )?,
            Variant::Eotpgd => {
                let mut acc = Array4::<f64>::zeros(x_adv.raw_dim());
                for _ in 0..eot_samples {
                    let mut noisy = x_adv.clone();
                    for v in noisy.iter_mut() {
                        *v = (*v + noise_scale * (2.0 * rng.gen::<f64>() - 1.0)).clamp(0.0, 1.0);
                    }
                    acc += &input_grad(model, &round_f32(&noisy), y, &LossKind::CrossEntropy)?;
                }
                acc / eot_samples as f64
            }
            _ => input_grad(model, &x_cur, y, &LossKind::CrossEntropy)?,
        };
        match variant {
            Variant::PgdL2 => {
                for i in 0..n {
                    let g = grad.slice(ndarray::s![i, .., .., ..]);
                    let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        let mut img = x_adv.slice_mut(ndarray::s![i, .., .., ..]);
                        ndarray::Zip::from(&mut img).and(&g).for_each(|v, &gv| {
                            *v += alpha * gv / norm;
                        });
                    }
                }
            }
            Variant::Mifgsm => {
                for i in 0..n {
                    let g = grad.slice(ndarray::s![i, .., .., ..]);
                    let l1: f64 = g.iter().map(|v| v.abs()).sum();
                    let mut m = momentum.slice_mut(ndarray::s![i, .., .., ..]);
                    ndarray::Zip::from(&mut m).and(&g).for_each(|mv, &gv| {
                        *mv = momentum_decay * *mv + if l1 > 0.0 { gv / l1 } else { 0.0 };
                    });
                }
                ndarray::Zip::from(&mut x_adv).and(&momentum).for_each(|v, &m| {
                    *v += alpha * sgn(m);
                });
            }
            _ => {
                ndarray::Zip::from(&mut x_adv).and(&grad).for_each(|v, &g| {
                    *v += alpha * sgn(g);
                });
            }
        }
        x_adv = project_ball(&x_adv, x, eps, ball)?;
        steps += 1;
    }

    let x_adv = round_f32(&x_adv);
    let success_mask = verify_success(model, &x_adv, y)?;
    Ok(AttackOutcome { x_adv, success_mask, queries_or_steps: steps })
}
