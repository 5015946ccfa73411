//! DeepFool: minimal-L2 linearized decision-boundary steps.

use ndarray::{Array2, Array4};

use super::{check_inputs, project_ball, round_f32, verify_success, AttackOutcome, AttackSpec, Norm};
use crate::error::Result;
use crate::model::{argmax_rows, ModelState};

/// Iteratively steps each example across the nearest linearized class
/// boundary (overshoot factor from extra "overshoot", default 0.02), then
/// projects to the l2 ε-ball. Already-misclassified inputs exit untouched.
pub fn deepfool(model: &ModelState, x: &Array4<f32>, y: &[usize], spec: &AttackSpec) -> Result<AttackOutcome> {
    spec.validate()?;
    check_inputs(model, x, y)?;
    if spec.epsilon == 0.0 {
        return super::identity_outcome(model, x, y);
    }
    let overshoot = spec.extra_f64_or("overshoot", 0.02)?;
    let ncls = model.spec.num_classes;
    let n = x.shape()[0];
    let mut x_adv = super::to_f64(x);
    let mut steps = 0;

    for i in 0..n {
        let x0 = x.slice(ndarray::s![i..i + 1, .., .., ..]).to_owned();
        let mut cur = x_adv.slice(ndarray::s![i, .., .., ..]).to_owned();
        for _ in 0..spec.iterations {
            let batch = round_f32(&cur.clone().insert_axis(ndarray::Axis(0)));
            let pass = model.forward_pass(&batch)?;
            steps += 1;
            let logits = pass.logits().row(0).to_owned();
            if argmax_rows(pass.logits())[0] != y[i] {
                break;
            }
            // Input gradient of each logit via one-hot backprop.
            let mut grads = Vec::with_capacity(ncls);
            for k in 0..ncls {
                let mut dl = Array2::<f64>::zeros((1, ncls));
                dl[[0, k]] = 1.0;
                let (_, dx) = pass.backward(&dl)?;
                grads.push(dx.index_axis(ndarray::Axis(0), 0).to_owned());
            }
            let mut best: Option<(f64, usize, f64)> = None; // (ratio, class, |w|²)
            for k in 0..ncls {
                if k == y[i] {
                    continue;
                }
                let f = logits[k] - logits[y[i]];
                let wnorm2: f64 = grads[k]
                    .iter()
                    .zip(grads[y[i]].iter())
                    .map(|(&a, &b)| (a - b).powi(2))
                    .sum();
                if wnorm2 <= 0.0 {
                    continue;
                }
                let ratio = f.abs() / wnorm2.sqrt();
                if best.map_or(true, |(r, _, _)| ratio < r) {
                    best = Some((ratio, k, wnorm2));
                }
            }
            let Some((_, k, wnorm2)) = best else {
                break; // constant model: no usable boundary
            };
            let f = logits[k] - logits[y[i]];
            let scale = (1.0 + overshoot) * f.abs() / wnorm2;
            ndarray::Zip::from(&mut cur)
                .and(&grads[k])
                .and(&grads[y[i]])
                .for_each(|v, &gk, &gy| {
                    *v += scale * (gk - gy);
                });
            let projected = project_ball(&cur.clone().insert_axis(ndarray::Axis(0)), &x0, spec.epsilon, Norm::L2)?;
            cur = projected.index_axis(ndarray::Axis(0), 0).to_owned();
        }
        x_adv.slice_mut(ndarray::s![i, .., .., ..]).assign(&cur);
    }

    let x_adv = round_f32(&x_adv);
    let success_mask = verify_success(model, &x_adv, y)?;
    Ok(AttackOutcome { x_adv, success_mask, queries_or_steps: steps })
}
