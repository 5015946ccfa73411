//! Adversarial attack library: a 30-entry registry, norm-ball projection,
//! the FGSM family of white-box attacks, DeepFool, CW-L2, and two black-box
//! attacks (Square, One-Pixel).
//!
//! All attacks act on [0,1] pixel-space floats. Budgets (ε) are enforced by
//! projection and re-checked by tests; every attack returns the input
//! unchanged when ε = 0. Stochastic attacks draw from a private RNG stream
//! derived from (seed, attack_id, batch_index).

mod black_box;
mod cw;
mod deepfool;
mod white_box;

pub use black_box::{one_pixel, square_attack, QueryModel};
pub use cw::cw_l2;
pub use deepfool::deepfool;
pub use white_box::{fgsm, iterative_fgsm_family, Variant};

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MadError, Result};
use crate::model::ModelState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
    L1,
    L0,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knowledge {
    WhiteBox,
    BlackBox,
}

/// A named, parameterized attack; the registry key for the attack table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSpec {
    pub attack_id: u32,
    pub name: String,
    pub norm: Norm,
    pub knowledge: Knowledge,
    /// Perturbation budget ε.
    pub epsilon: f64,
    /// Per-iteration step size α.
    pub step_size: f64,
    pub iterations: usize,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(MadError::Config(format!(
                "attack {}: epsilon must be finite and >= 0, got {}",
                self.attack_id, self.epsilon
            )));
        }
        if self.step_size <= 0.0 || !self.step_size.is_finite() {
            return Err(MadError::Config(format!(
                "attack {}: step_size must be finite and > 0, got {}",
                self.attack_id, self.step_size
            )));
        }
        if self.iterations == 0 {
            return Err(MadError::Config(format!("attack {}: iterations must be >= 1", self.attack_id)));
        }
        if let Some(entry) = registry_entry(self.attack_id) {
            if self.norm != entry.norm || self.knowledge != entry.knowledge {
                return Err(MadError::Config(format!(
                    "attack {} ({}): norm/knowledge ({:?}, {:?}) do not match the registry row ({:?}, {:?})",
                    self.attack_id, self.name, self.norm, self.knowledge, entry.norm, entry.knowledge
                )));
            }
        }
        Ok(())
    }

    /// Extra lookup returning a finite f64, with a default.
    pub(crate) fn extra_f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.extra.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| MadError::Config(format!("attack {}: extra \"{key}\" must be a finite number", self.attack_id))),
        }
    }

    /// Extra lookup returning a finite f64; missing key is a config error.
    pub(crate) fn extra_f64(&self, key: &str) -> Result<f64> {
        if !self.extra.contains_key(key) {
            return Err(MadError::Config(format!(
                "attack {} ({}): required extra \"{key}\" is missing",
                self.attack_id, self.name
            )));
        }
        self.extra_f64_or(key, f64::NAN)
    }

    pub(crate) fn extra_usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.extra.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .map(|x| x as usize)
                .ok_or_else(|| MadError::Config(format!("attack {}: extra \"{key}\" must be a non-negative integer", self.attack_id))),
        }
    }

    pub(crate) fn extra_usize(&self, key: &str) -> Result<usize> {
        if !self.extra.contains_key(key) {
            return Err(MadError::Config(format!(
                "attack {} ({}): required extra \"{key}\" is missing",
                self.attack_id, self.name
            )));
        }
        self.extra_usize_or(key, 0)
    }

    pub(crate) fn extra_bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.extra.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_bool()
                .ok_or_else(|| MadError::Config(format!("attack {}: extra \"{key}\" must be a boolean", self.attack_id))),
        }
    }
}

/// Result of running one attack over a batch.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// Same shape as the input, values in [0,1].
    pub x_adv: Array4<f32>,
    /// Per-example: the target model misclassifies x_adv.
    pub success_mask: Vec<bool>,
    /// Iterations used (white-box) or model queries issued (black-box).
    pub queries_or_steps: usize,
}

/// One row of the 30-entry attack registry.
#[derive(Debug, Clone, Copy)]
pub struct RegistryEntry {
    pub attack_id: u32,
    pub name: &'static str,
    pub norm: Norm,
    pub knowledge: Knowledge,
    pub implemented: bool,
}

use Knowledge::{BlackBox as BB, WhiteBox as WB};
use Norm::{L0, L1, L2, Linf, Other};

/// Full attack table. Unimplemented rows stay as named placeholders so
/// dataset manifests can reference every ID. CW (15) is registered under L2:
/// the implemented formulation optimizes the L2 objective.
pub const REGISTRY: [RegistryEntry; 30] = [
    RegistryEntry { attack_id: 0, name: "JSMA", norm: L2, knowledge: WB, implemented: false },
    RegistryEntry { attack_id: 1, name: "DeepFool", norm: L2, knowledge: WB, implemented: true },
    RegistryEntry { attack_id: 2, name: "UniversalPerturbation", norm: Linf, knowledge: WB, implemented: false },
    RegistryEntry { attack_id: 3, name: "NewtonFool", norm: L2, knowledge: WB, implemented: false },
    RegistryEntry { attack_id: 4, name: "BoundaryAttack", norm: L2, knowledge: BB, implemented: false },
    RegistryEntry { attack_id: 5, name: "ElasticNet", norm: L1, knowledge: WB, implemented: false },
    RegistryEntry { attack_id: 6, name: "ZooAttack", norm: L0, knowledge: BB, implemented: false },
    RegistryEntry { attack_id: 7, name: "SpatialTransformation", norm: Other, knowledge: BB, implemented: false },
    RegistryEntry { attack_id: 8, name: "HopSkipJump", norm: Linf, knowledge: BB, implemented: false },
    RegistryEntry { attack_id: 9, name: "SimBA", norm: L2, knowledge: BB, implemented: false },
    RegistryEntry { attack_id: 10, name: "ShadowAttack", norm: Other, knowledge: WB, implemented: false },
    RegistryEntry { attack_id: 11, name: "GeoDA", norm: Linf, knowledge: BB, implemented: false },
    RegistryEntry { attack_id: 12, name: "Wasserstein", norm: Other, knowledge: WB, implemented: false },
    RegistryEntry { attack_id: 13, name: "FGSM", norm: Linf, knowledge: WB, implemented: true },
    RegistryEntry { attack_id: 14, name: "BIM", norm: Linf, knowledge: WB, implemented: true },
    RegistryEntry { attack_id: 15, name: "CW", norm: L2, knowledge: WB, implemented: true },
    RegistryEntry { attack_id: 16, name: "MIFGSM", norm: Linf, knowledge: WB, implemented: true },
    RegistryEntry { attack_id: 17, name: "TIFGSM", norm: Linf, knowledge: WB, implemented: false },
    RegistryEntry { attack_id: 18, name: "PGD", norm: Linf, knowledge: WB, implemented: true },
    RegistryEntry { attack_id: 19, name: "PGD-L2", norm: L2, knowledge: WB, implemented: true },
    RegistryEntry { attack_id: 20, name: "TPGD", norm: Linf, knowledge: WB, implemented: true },
    RegistryEntry { attack_id: 21, name: "RFGSM", norm: Linf, knowledge: WB, implemented: true },
    RegistryEntry { attack_id: 22, name: "APGD", norm: Linf, knowledge: WB, implemented: false },
    RegistryEntry { attack_id: 23, name: "APGD2", norm: Linf, knowledge: WB, implemented: false },
    RegistryEntry { attack_id: 24, name: "FFGSM", norm: Linf, knowledge: WB, implemented: true },
    RegistryEntry { attack_id: 25, name: "Square", norm: Linf, knowledge: BB, implemented: true },
    RegistryEntry { attack_id: 26, name: "TIFGSM2", norm: Linf, knowledge: WB, implemented: false },
    RegistryEntry { attack_id: 27, name: "EOTPGD", norm: Linf, knowledge: WB, implemented: true },
    RegistryEntry { attack_id: 28, name: "One-Pixel", norm: L0, knowledge: BB, implemented: true },
    RegistryEntry { attack_id: 29, name: "FAB", norm: Linf, knowledge: WB, implemented: false },
];

pub fn registry_entry(attack_id: u32) -> Option<&'static RegistryEntry> {
    REGISTRY.iter().find(|e| e.attack_id == attack_id)
}

/// Private RNG stream for one attack invocation.
pub fn attack_rng(seed: u64, attack_id: u32, batch_index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(attack_id.to_le_bytes());
    h.update(batch_index.to_le_bytes());
    let digest = h.finalize();
    ChaCha8Rng::from_seed(digest.into())
}

/// Project `x_adv` onto the ε-ball around `x0` (per example) intersected
/// with [0,1]^d. Coordinate-wise for linf, radial rescaling for l2.
pub fn project_ball(x_adv: &Array4<f64>, x0: &Array4<f32>, epsilon: f64, norm: Norm) -> Result<Array4<f64>> {
    if x_adv.shape() != x0.shape() {
        return Err(MadError::Data(format!(
            "project_ball shape mismatch: {:?} vs {:?}",
            x_adv.shape(),
            x0.shape()
        )));
    }
    if epsilon < 0.0 {
        return Err(MadError::Config(format!("project_ball epsilon must be >= 0, got {epsilon}")));
    }
    let mut out = x_adv.clone();
    match norm {
        Norm::Linf => {
            ndarray::Zip::from(&mut out).and(x0).for_each(|v, &o| {
                let o = o as f64;
                *v = v.clamp(o - epsilon, o + epsilon).clamp(0.0, 1.0);
            });
        }
        Norm::L2 => {
            let n = out.shape()[0];
            for i in 0..n {
                let mut img = out.slice_mut(ndarray::s![i, .., .., ..]);
                let base = x0.slice(ndarray::s![i, .., .., ..]);
                let dist2: f64 = img
                    .iter()
                    .zip(base.iter())
                    .map(|(&v, &o)| (v - o as f64).powi(2))
                    .sum();
                let dist = dist2.sqrt();
                if dist > epsilon {
                    let scale = if dist > 0.0 { epsilon / dist } else { 0.0 };
                    ndarray::Zip::from(&mut img).and(&base).for_each(|v, &o| {
                        let o = o as f64;
                        *v = o + (*v - o) * scale;
                    });
                }
                // Clamping to [0,1] moves every coordinate toward x0, so it
                // never increases the l2 distance.
                img.mapv_inplace(|v| v.clamp(0.0, 1.0));
            }
        }
        other => {
            return Err(MadError::Config(format!("project_ball does not support norm {other:?}")));
        }
    }
    Ok(out)
}

pub(crate) fn to_f64(x: &Array4<f32>) -> Array4<f64> {
    x.mapv(|v| v as f64)
}

pub(crate) fn round_f32(x: &Array4<f64>) -> Array4<f32> {
    x.mapv(|v| v as f32)
}

pub(crate) fn check_inputs(model: &ModelState, x: &Array4<f32>, y: &[usize]) -> Result<()> {
    let n = x.shape()[0];
    if n == 0 {
        return Err(MadError::Data("attack called on an empty batch".into()));
    }
    if y.len() != n {
        return Err(MadError::Data(format!("batch has {n} images but {} labels", y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= model.spec.num_classes) {
        return Err(MadError::Data(format!("label {bad} out of range for {} classes", model.spec.num_classes)));
    }
    if x.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(MadError::Data("attack input pixels must lie in [0,1]".into()));
    }
    Ok(())
}

/// Recompute the success mask from model predictions on x_adv.
pub(crate) fn verify_success(model: &ModelState, x_adv: &Array4<f32>, y: &[usize]) -> Result<Vec<bool>> {
    let preds = model.predict(x_adv)?;
    Ok(preds.iter().zip(y).map(|(p, t)| p != t).collect())
}

/// ε = 0: every budgeted attack is the identity (bitwise).
pub(crate) fn identity_outcome(model: &ModelState, x: &Array4<f32>, y: &[usize]) -> Result<AttackOutcome> {
    Ok(AttackOutcome {
        x_adv: x.clone(),
        success_mask: verify_success(model, x, y)?,
        queries_or_steps: 0,
    })
}

/// Registry dispatch. `seed`/`batch_index` feed the private RNG stream of
/// stochastic attacks; deterministic attacks ignore them.
pub fn run_attack(
    spec: &AttackSpec,
    model: &ModelState,
    x: &Array4<f32>,
    y: &[usize],
    seed: u64,
    batch_index: u64,
) -> Result<AttackOutcome> {
    let entry = registry_entry(spec.attack_id)
        .ok_or_else(|| MadError::Config(format!("unknown attack_id {}", spec.attack_id)))?;
    if !entry.implemented {
        return Err(MadError::NotImplemented { id: entry.attack_id, name: entry.name.to_string() });
    }
    spec.validate()?;
    check_inputs(model, x, y)?;
    if spec.epsilon == 0.0 {
        return identity_outcome(model, x, y);
    }
    let mut rng = attack_rng(seed, spec.attack_id, batch_index);
    match spec.attack_id {
        1 => deepfool(model, x, y, spec),
        13 => fgsm(model, x, y, spec),
        14 => iterative_fgsm_family(model, x, y, spec, Variant::Bim, &mut rng),
        15 => cw_l2(model, x, y, spec),
        16 => iterative_fgsm_family(model, x, y, spec, Variant::Mifgsm, &mut rng),
        18 => iterative_fgsm_family(model, x, y, spec, Variant::PgdLinf, &mut rng),
        19 => iterative_fgsm_family(model, x, y, spec, Variant::PgdL2, &mut rng),
        20 => iterative_fgsm_family(model, x, y, spec, Variant::Tpgd, &mut rng),
        21 => iterative_fgsm_family(model, x, y, spec, Variant::Rfgsm, &mut rng),
        24 => iterative_fgsm_family(model, x, y, spec, Variant::Ffgsm, &mut rng),
        25 => square_attack(model, x, y, spec, &mut rng),
        27 => iterative_fgsm_family(model, x, y, spec, Variant::Eotpgd, &mut rng),
        28 => one_pixel(model, x, y, spec, &mut rng),
        _ => unreachable!("implemented flag covers dispatch"),
    }
}

/// Load an attack suite (JSON list of AttackSpec) and validate every entry.
pub fn load_suite(path: &Path) -> Result<Vec<AttackSpec>> {
    let text = std::fs::read_to_string(path)?;
    let specs: Vec<AttackSpec> = serde_json::from_str(&text)
        .map_err(|e| MadError::Config(format!("{}: invalid attack suite: {e}", path.display())))?;
    if specs.is_empty() {
        return Err(MadError::Config(format!("{}: attack suite is empty", path.display())));
    }
    let mut seen = std::collections::BTreeSet::new();
    for spec in &specs {
        spec.validate()?;
        if !seen.insert(spec.attack_id) {
            return Err(MadError::Config(format!(
                "{}: duplicate attack_id {}",
                path.display(),
                spec.attack_id
            )));
        }
    }
    Ok(specs)
}
