//! Flat-parameter primitives for the episodic bilevel update, usable with
//! any gradient closure (model-backed or analytic toy).

use crate::error::{MadError, Result};

pub type GradFn<'a> = dyn FnMut(&[f64]) -> Result<Vec<f64>> + 'a;

fn check_finite(g: &[f64], what: &str) -> Result<()> {
    if g.iter().any(|v| !v.is_finite()) {
        return Err(MadError::Numeric(format!("non-finite {what}")));
    }
    Ok(())
}

/// θ′ = θ − β·∇L_S(θ), applied `inner_steps` times sequentially.
pub fn inner_update_flat(
    theta: &[f64],
    support_grad: &mut GradFn,
    beta: f64,
    inner_steps: usize,
) -> Result<Vec<f64>> {
    let mut cur = theta.to_vec();
    for _ in 0..inner_steps {
        let g = support_grad(&cur)?;
        if g.len() != cur.len() {
            return Err(MadError::Numeric(format!(
                "support gradient has {} entries, parameters have {}",
                g.len(),
                cur.len()
            )));
        }
        check_finite(&g, "support gradient")?;
        for (t, gv) in cur.iter_mut().zip(&g) {
            *t -= beta * gv;
        }
    }
    Ok(cur)
}

/// Hessian-vector product of the support loss by central differences of its
/// gradient; exact for quadratic losses up to floating-point rounding.
fn hvp(theta: &[f64], v: &[f64], support_grad: &mut GradFn) -> Result<Vec<f64>> {
    let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if vnorm == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let t = 1e-5 / vnorm;
    let plus: Vec<f64> = theta.iter().zip(v).map(|(&th, &vv)| th + t * vv).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(&th, &vv)| th - t * vv).collect();
    let gp = support_grad(&plus)?;
    let gm = support_grad(&minus)?;
    Ok(gp.iter().zip(&gm).map(|(&a, &b)| (a - b) / (2.0 * t)).collect())
}

/// Outer gradient g for one episode. First-order: ∇L_Q(θ′) as-is.
/// Second-order: back-propagates through the inner trajectory,
/// v ← (I − β·H_S(θ_i))·v for each inner step i (reverse order).
pub fn query_gradient_flat(
    theta: &[f64],
    support_grad: &mut GradFn,
    query_grad: &mut GradFn,
    beta: f64,
    inner_steps: usize,
    second_order: bool,
) -> Result<Vec<f64>> {
    // Replay the inner trajectory, keeping intermediates for the backward pass.
    let mut trajectory = Vec::with_capacity(inner_steps + 1);
    trajectory.push(theta.to_vec());
    for _ in 0..inner_steps {
        let next = inner_update_flat(trajectory.last().expect("non-empty"), support_grad, beta, 1)?;
        trajectory.push(next);
    }
    let theta_prime = trajectory.last().expect("non-empty");
    let mut v = query_grad(theta_prime)?;
    check_finite(&v, "query gradient")?;
    if v.len() != theta.len() {
        return Err(MadError::Numeric(format!(
            "query gradient has {} entries, parameters have {}",
            v.len(),
            theta.len()
        )));
    }
    if second_order && beta != 0.0 {
        for theta_i in trajectory[..inner_steps].iter().rev() {
            let hv = hvp(theta_i, &v, support_grad)?;
            check_finite(&hv, "Hessian-vector product")?;
            for (vv, h) in v.iter_mut().zip(&hv) {
                *vv -= beta * h;
            }
        }
    }
    Ok(v)
}
