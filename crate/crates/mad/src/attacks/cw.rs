//! Carlini–Wagner L2: margin loss optimized in tanh space.

use ndarray::{Array2, Array4};

use super::{check_inputs, project_ball, round_f32, verify_success, AttackOutcome, AttackSpec, Norm};
use crate::error::{MadError, Result};
use crate::model::ModelState;

/// Minimizes ‖δ‖₂² + c·max(z_y − max_{j≠y} z_j + κ, 0) over the tanh
/// reparameterization x_adv = (tanh(w)+1)/2, keeping the smallest successful
/// δ per example. Extras: "c" (trade-off, default 1.0), "confidence" (κ,
/// default 0), "lr" (default 0.01); spec.iterations is the optimizer budget.
pub fn cw_l2(model: &ModelState, x: &Array4<f32>, y: &[usize], spec: &AttackSpec) -> Result<AttackOutcome> {
    spec.validate()?;
    check_inputs(model, x, y)?;
    if spec.epsilon == 0.0 {
        return super::identity_outcome(model, x, y);
    }
    let c = spec.extra_f64_or("c", 1.0)?;
    if c <= 0.0 {
        return Err(MadError::Config(format!("attack {}: CW trade-off constant c must be > 0, got {c}", spec.attack_id)));
    }
    let kappa = spec.extra_f64_or("confidence", 0.0)?;
    if kappa < 0.0 {
        return Err(MadError::Config(format!("attack {}: confidence must be >= 0, got {kappa}", spec.attack_id)));
    }
    let lr = spec.extra_f64_or("lr", 0.01)?;

    let n = x.shape()[0];
    let ncls = model.spec.num_classes;
    let x0 = super::to_f64(x);
    // atanh needs the open interval; nudge exact 0/1 pixels inward.
    let mut w = x0.mapv(|v| {
        let t = v.clamp(1e-6, 1.0 - 1e-6) * 2.0 - 1.0;
        t.atanh()
    });

    let to_image = |w: &Array4<f64>| w.mapv(|v| (v.tanh() + 1.0) / 2.0);
    let mut best: Vec<Option<(f64, usize)>> = vec![None; n]; // (‖δ‖², step index)
    let mut best_imgs = to_image(&w);
    let mut steps = 0;

    for step in 0..spec.iterations {
        let x_adv = to_image(&w);
        let pass = model.forward_pass(&round_f32(&x_adv))?;
        steps += 1;
        let logits = pass.logits();
        let mut dlogits = Array2::<f64>::zeros((n, ncls));
        for i in 0..n {
            let row = logits.row(i);
            let (mut j_star, mut other) = (usize::MAX, f64::NEG_INFINITY);
            for j in 0..ncls {
                if j != y[i] && row[j] > other {
                    other = row[j];
                    j_star = j;
                }
            }
            let margin = row[y[i]] - other + kappa;
            if margin <= 0.0 {
                // Success with confidence: keep the smallest δ seen.
                let d2: f64 = x_adv
                    .slice(ndarray::s![i, .., .., ..])
                    .iter()
                    .zip(x0.slice(ndarray::s![i, .., .., ..]).iter())
                    .map(|(&a, &b)| (a - b).powi(2))
                    .sum();
                if best[i].map_or(true, |(bd, _)| d2 < bd) {
                    best[i] = Some((d2, step));
                    best_imgs
                        .slice_mut(ndarray::s![i, .., .., ..])
                        .assign(&x_adv.slice(ndarray::s![i, .., .., ..]));
                }
            } else {
                dlogits[[i, y[i]]] = c;
                dlogits[[i, j_star]] = -c;
            }
        }
        let (_, dx_margin) = pass.backward(&dlogits)?;
        // d/dw of [ ‖x_adv − x0‖² + margin term ], x_adv = (tanh w + 1)/2.
        ndarray::Zip::from(&mut w)
            .and(&x_adv)
            .and(&x0)
            .and(&dx_margin)
            .for_each(|wv, &xv, &ov, &gm| {
                let dxdw = (1.0 - wv.tanh().powi(2)) / 2.0;
                *wv -= lr * (2.0 * (xv - ov) + gm) * dxdw;
            });
    }

    // Successful examples keep their best iterate; failures keep the final
    // (best-effort) one. Everything is then held to the ε budget.
    let final_imgs = to_image(&w);
    let mut x_adv = final_imgs;
    for i in 0..n {
        if best[i].is_some() {
            x_adv
                .slice_mut(ndarray::s![i, .., .., ..])
                .assign(&best_imgs.slice(ndarray::s![i, .., .., ..]));
        }
    }
    let x_adv = round_f32(&project_ball(&x_adv, x, spec.epsilon, Norm::L2)?);
    let success_mask = verify_success(model, &x_adv, y)?;
    Ok(AttackOutcome { x_adv, success_mask, queries_or_steps: steps })
}
