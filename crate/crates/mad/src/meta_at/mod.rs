//! Meta-adversarial training: episodic bilevel optimization with inner
//! fine-tuning on support sets, an averaged outer update from query
//! gradients, validation-driven early stopping, and the K-shot
//! fine-tune-and-evaluate test protocol.

mod core;
mod train;

pub use core::{inner_update_flat, query_gradient_flat, GradFn};
pub use train::{
    finetune, finetune_and_eval, inner_update, meta_epoch, meta_train, query_gradient, FinetuneRecord,
    MetaTrainOutcome,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MadError, Result};

/// Hyper-parameters of the episodic trainer and the K-shot test protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaParams {
    /// Inner (fine-tune) learning rate β.
    pub beta: f64,
    /// Outer (meta) learning rate λ.
    pub lambda_: f64,
    /// Meta-epochs E.
    pub epochs: usize,
    /// Episodes per epoch e.
    pub episodes_per_epoch: usize,
    /// Batch size B for batched loss sweeps.
    pub batch_size: usize,
    /// Validation checks to wait after the last improvement, p.
    pub patience: usize,
    /// Attacks per episode, 𝒜.
    pub ways: usize,
    /// Attacks represented in the query set, 𝒜_Q.
    pub query_ways: usize,
    /// Support examples per class per attack, k.
    pub shot_k: usize,
    /// Query examples per class per attack, m.
    pub query_m: usize,
    /// Test-time support shot K.
    pub test_shot_k: usize,
    /// Test-time query count per class M.
    pub test_query_m: usize,
    pub inner_steps: usize,
    /// Differentiate through the inner step (exact bilevel gradient).
    pub second_order: bool,
    /// Test-time fine-tuning step budget.
    pub finetune_steps: usize,
}

impl Default for MetaParams {
    fn default() -> Self {
        Self {
            beta: 0.01,
            lambda_: 0.001,
            epochs: 50,
            episodes_per_epoch: 100,
            batch_size: 32,
            patience: 25,
            ways: 5,
            query_ways: 1,
            shot_k: 15,
            query_m: 6,
            test_shot_k: 1,
            test_query_m: 15,
            inner_steps: 1,
            second_order: false,
            finetune_steps: 100,
        }
    }
}

impl MetaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.lambda_ > 0.0) {
            return Err(MadError::Config(format!(
                "learning rates must be positive (beta={}, lambda={})",
                self.beta, self.lambda_
            )));
        }
        if self.query_ways == 0 || self.query_ways > self.ways {
            return Err(MadError::Config(format!(
                "query_ways must be in 1..=ways, got {} with ways={}",
                self.query_ways, self.ways
            )));
        }
        let counts = [
            ("epochs", self.epochs),
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("batch_size", self.batch_size),
            ("patience", self.patience),
            ("ways", self.ways),
            ("shot_k", self.shot_k),
            ("query_m", self.query_m),
            ("test_shot_k", self.test_shot_k),
            ("test_query_m", self.test_query_m),
            ("inner_steps", self.inner_steps),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(MadError::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

/// Stops when `patience` consecutive observations fail to strictly improve
/// the best loss. Ties keep the earliest best index.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
    observed: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(MadError::Config("patience must be >= 1".into()));
        }
        Ok(Self { patience, best: None, since_best: 0, observed: 0 })
    }

    pub fn observe(&mut self, loss: f64) -> Decision {
        let improved = match self.best {
            None => true,
            Some((_, best)) => loss < best,
        };
        if improved {
            self.best = Some((self.observed, loss));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.observed += 1;
        if self.since_best >= self.patience {
            Decision::Stop
        } else {
            Decision::Continue
        }
    }

    pub fn best_index(&self) -> Option<usize> {
        self.best.map(|(i, _)| i)
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best.map(|(_, l)| l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    EpochsExhausted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub epoch: usize,
    pub episode: usize,
    pub inner_loss: f64,
    pub query_loss: f64,
    pub query_ca: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub epoch: usize,
    pub val_loss: f64,
    pub val_ca: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaTrainLog {
    pub episodes: Vec<EpisodeRecord>,
    pub validation: Vec<ValidationPoint>,
    /// Index into `validation` of the best (lowest-loss) check.
    pub best_check: usize,
    pub stop_reason: StopReason,
}

impl MetaTrainLog {
    /// JSON-lines episode log plus a summary JSON next to it.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut lines = String::new();
        for rec in &self.episodes {
            lines.push_str(&serde_json::to_string(rec)?);
            lines.push('\n');
        }
        std::fs::write(dir.join("episodes.jsonl"), lines)?;
        let summary = serde_json::json!({
            "validation": self.validation,
            "best_check": self.best_check,
            "stop_reason": self.stop_reason,
            "episodes": self.episodes.len(),
        });
        std::fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
