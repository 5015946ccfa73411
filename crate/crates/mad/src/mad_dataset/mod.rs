//! MAD-style attacked datasets: success-only generation, class balancing,
//! 3:1:1 splits, attack-group roles, and episode/eval-task sampling.

mod generate;
mod sampling;
mod store;

pub use generate::{assign_groups, default_grouping, default_roles, filter_and_balance, generate_mad, split_3_1_1};
pub use sampling::{sample_eval_task, sample_train_episode, Episode, Origin};
pub use store::{load_mad, save_mad, MAD_FORMAT_VERSION};

use std::collections::BTreeMap;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::data::LabeledImages;
use crate::error::{MadError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    MetaTrain,
    MetaVal,
    MetaFinetuneNew,
    TestLearned,
    TestNew,
}

impl Role {
    pub const ALL: [Role; 5] = [Role::MetaTrain, Role::MetaVal, Role::MetaFinetuneNew, Role::TestLearned, Role::TestNew];
}

/// Which attack-group tags serve which evaluation role.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub role_of_group: BTreeMap<Role, Vec<u32>>,
}

impl SplitAssignment {
    /// Groups assigned to distinct roles must be disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<u32, Role> = BTreeMap::new();
        for (&role, groups) in &self.role_of_group {
            for &g in groups {
                if let Some(prev) = seen.insert(g, role) {
                    return Err(MadError::Config(format!(
                        "group {g} assigned to two roles ({prev:?} and {role:?})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn role_of(&self, group: u32) -> Option<Role> {
        self.role_of_group
            .iter()
            .find(|(_, gs)| gs.contains(&group))
            .map(|(&r, _)| r)
    }
}

/// All examples of one class for one origin (an attack or the clean pool).
#[derive(Debug, Clone)]
pub struct ClassStore {
    /// (count, channels, height, width) in [0,1].
    pub images: Array4<f32>,
    /// Index of each example in the originating clean test set.
    pub source_indices: Vec<u32>,
}

impl ClassStore {
    pub fn len(&self) -> usize {
        self.source_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_indices.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Array4<f32> {
        let sh = self.images.shape();
        let mut out = Array4::<f32>::zeros((indices.len(), sh[1], sh[2], sh[3]));
        for (j, &i) in indices.iter().enumerate() {
            out.slice_mut(ndarray::s![j, .., .., ..])
                .assign(&self.images.slice(ndarray::s![i, .., .., ..]));
        }
        out
    }
}

/// Disjoint 3:1:1 partition of one ClassStore, as index lists.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitRanges {
    pub fn of(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Per-class stores for one attack.
#[derive(Debug, Clone)]
pub struct AttackStore {
    pub spec: AttackSpec,
    /// One store per class, indexed by label.
    pub classes: Vec<ClassStore>,
    /// Parallel to `classes`; empty until split_3_1_1 runs.
    pub splits: Vec<SplitRanges>,
}

impl AttackStore {
    pub fn min_class_count(&self) -> usize {
        self.classes.iter().map(ClassStore::len).min().unwrap_or(0)
    }

    /// All examples of this attack as one labeled set.
    pub fn as_labeled(&self) -> Result<LabeledImages> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let sh = self.classes[0].images.shape().to_vec();
        for (cls, store) in self.classes.iter().enumerate() {
            for i in 0..store.len() {
                images.extend(store.images.slice(ndarray::s![i, .., .., ..]).iter().cloned());
                labels.push(cls);
            }
        }
        let n = labels.len();
        let arr = Array4::from_shape_vec((n, sh[1], sh[2], sh[3]), images)
            .map_err(|e| MadError::Data(format!("attack store reshape: {e}")))?;
        LabeledImages::new(arr, labels)
    }
}

/// Per-attack, per-class store of successful adversarial examples with a
/// clean pool, split assignments, and attack-group roles.
#[derive(Debug, Clone)]
pub struct MadDataset {
    pub name: String,
    pub num_classes: usize,
    pub image_shape: (usize, usize, usize),
    pub reference_checkpoint_id: String,
    /// Clean classification accuracy of the reference model on the source
    /// test set, in percent.
    pub cca: f64,
    pub attacks: BTreeMap<u32, AttackStore>,
    /// One store per class of held-out clean examples.
    pub clean_pool: Vec<ClassStore>,
    pub clean_splits: Vec<SplitRanges>,
    /// attack_id → group tag.
    pub group_of: BTreeMap<u32, u32>,
    pub roles: SplitAssignment,
    pub removed_attacks: Vec<u32>,
    /// Generation warnings (e.g. skipped unimplemented attacks).
    pub warnings: Vec<String>,
}

impl MadDataset {
    pub fn group_of(&self, attack_id: u32) -> Option<u32> {
        self.group_of.get(&attack_id).copied()
    }

    pub fn role_of_attack(&self, attack_id: u32) -> Option<Role> {
        self.group_of(attack_id).and_then(|g| self.roles.role_of(g))
    }

    /// Attack ids serving `role`, ascending.
    pub fn attacks_in_role(&self, role: Role) -> Vec<u32> {
        self.attacks
            .keys()
            .filter(|&&id| self.role_of_attack(id) == Some(role))
            .copied()
            .collect()
    }

    pub fn split_of(&self, attack_id: u32, class: usize, index: usize) -> Option<Split> {
        let ranges = self.attacks.get(&attack_id)?.splits.get(class)?;
        for split in [Split::Train, Split::Val, Split::Test] {
            if ranges.of(split).contains(&index) {
                return Some(split);
            }
        }
        None
    }

    /// Every (attack, class, split) index list is non-empty and disjoint.
    pub fn has_splits(&self) -> bool {
        self.attacks.values().all(|a| !a.splits.is_empty())
    }

    /// The clean pool restricted to one split (the whole pool when no clean
    /// splits are assigned), as a labeled set.
    pub fn clean_split(&self, split: Split) -> Result<LabeledImages> {
        let has = self.clean_splits.len() == self.clean_pool.len() && !self.clean_splits.is_empty();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let (c, h, w) = self.image_shape;
        for (cls, store) in self.clean_pool.iter().enumerate() {
            let idx: Vec<usize> = if has {
                self.clean_splits[cls].of(split).to_vec()
            } else {
                (0..store.len()).collect()
            };
            let block = store.select(&idx);
            images.extend(block.iter().copied());
            labels.extend(std::iter::repeat(cls).take(idx.len()));
        }
        let n = labels.len();
        let arr = Array4::from_shape_vec((n, c, h, w), images)
            .map_err(|e| MadError::Data(format!("clean pool reshape: {e}")))?;
        LabeledImages::new(arr, labels)
    }
}
