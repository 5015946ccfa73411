//! Dataset construction: attack the clean test set, keep successes, balance
//! classes, split 3:1:1, and assign attack groups to evaluation roles.

use std::collections::BTreeMap;

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{AttackStore, ClassStore, MadDataset, Role, SplitAssignment, SplitRanges};
use crate::attacks::{registry_entry, run_attack, AttackSpec};
use crate::data::LabeledImages;
use crate::error::{MadError, Result};
use crate::model::{evaluate_accuracy, ModelState};

fn sub_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for t in tags {
        h.update(t.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Run every implemented attack in `suite` over `clean_test`, retaining only
/// successfully attacked examples (re-verified misclassified). Records the
/// reference CCA; unimplemented attacks are skipped with a warning.
pub fn generate_mad(
    reference: &ModelState,
    clean_test: &LabeledImages,
    suite: &[AttackSpec],
    name: &str,
    reference_checkpoint_id: &str,
    batch: usize,
    seed: u64,
) -> Result<MadDataset> {
    if batch == 0 {
        return Err(MadError::Config("generation batch size must be >= 1".into()));
    }
    if suite.is_empty() {
        return Err(MadError::Config("attack suite is empty".into()));
    }
    let n_cls = reference.spec.num_classes;
    clean_test.check_labels(n_cls)?;
    let cca = evaluate_accuracy(reference, clean_test)?;
    let shape = clean_test.image_shape();

    let mut warnings = Vec::new();
    let mut attacks = BTreeMap::new();
    for spec in suite {
        let entry = registry_entry(spec.attack_id)
            .ok_or_else(|| MadError::Config(format!("unknown attack_id {}", spec.attack_id)))?;
        if !entry.implemented {
            warnings.push(format!("attack {} ({}) skipped: not implemented", entry.attack_id, entry.name));
            continue;
        }
        spec.validate()?;
        // Per class: flat pixel buffer + source indices of kept examples.
        let mut kept: Vec<(Vec<f32>, Vec<u32>)> = vec![(Vec::new(), Vec::new()); n_cls];
        let n = clean_test.len();
        let mut start = 0;
        let mut batch_index = 0u64;
        while start < n {
            let end = (start + batch).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let sub = clean_test.subset(&idx);
            let out = run_attack(spec, reference, &sub.images, &sub.labels, seed, batch_index)?;
            // Success masks are computed from model predictions inside each
            // attack; re-verify here so retention never trusts attack code.
            let preds = reference.predict(&out.x_adv)?;
            for (j, (&ok, &pred)) in out.success_mask.iter().zip(&preds).enumerate() {
                let label = sub.labels[j];
                if ok && pred != label {
                    kept[label].0.extend(out.x_adv.slice(ndarray::s![j, .., .., ..]).iter().cloned());
                    kept[label].1.push((start + j) as u32);
                }
            }
            start = end;
            batch_index += 1;
        }
        let classes: Vec<ClassStore> = kept
            .into_iter()
            .map(|(pixels, source_indices)| {
                let count = source_indices.len();
                let images = Array4::from_shape_vec((count, shape.0, shape.1, shape.2), pixels)
                    .expect("pixel buffer matches count");
                ClassStore { images, source_indices }
            })
            .collect();
        attacks.insert(spec.attack_id, AttackStore { spec: spec.clone(), classes, splits: Vec::new() });
    }

    let total_kept: usize = attacks.values().flat_map(|a| a.classes.iter()).map(ClassStore::len).sum();
    if total_kept == 0 {
        return Err(MadError::Data("no attack produced any successful example".into()));
    }

    // Clean pool: the full source test set, grouped by class.
    let mut clean_pool = Vec::with_capacity(n_cls);
    for cls in 0..n_cls {
        let idx: Vec<usize> = (0..clean_test.len()).filter(|&i| clean_test.labels[i] == cls).collect();
        let sub = clean_test.subset(&idx);
        clean_pool.push(ClassStore {
            images: sub.images,
            source_indices: idx.iter().map(|&i| i as u32).collect(),
        });
    }

    Ok(MadDataset {
        name: name.to_string(),
        num_classes: n_cls,
        image_shape: shape,
        reference_checkpoint_id: reference_checkpoint_id.to_string(),
        cca,
        attacks,
        clean_pool,
        clean_splits: Vec::new(),
        group_of: BTreeMap::new(),
        roles: SplitAssignment::default(),
        removed_attacks: Vec::new(),
        warnings,
    })
}

/// Remove attacks whose weakest class has fewer than `min_per_class`
/// successes, then truncate every surviving attack to equal per-class counts
/// (deterministic seed-ordered subsampling).
pub fn filter_and_balance(mut dataset: MadDataset, min_per_class: usize, seed: u64) -> Result<MadDataset> {
    if min_per_class == 0 {
        return Err(MadError::Config("min_per_class must be >= 1".into()));
    }
    let ids: Vec<u32> = dataset.attacks.keys().copied().collect();
    for id in ids {
        let store = dataset.attacks.get(&id).expect("key enumerated above");
        let floor = store.min_class_count();
        if floor < min_per_class {
            dataset.attacks.remove(&id);
            dataset.removed_attacks.push(id);
            continue;
        }
        let store = dataset.attacks.get_mut(&id).expect("key enumerated above");
        for (cls, class_store) in store.classes.iter_mut().enumerate() {
            if class_store.len() == floor {
                continue;
            }
            let mut order: Vec<usize> = (0..class_store.len()).collect();
            order.shuffle(&mut sub_rng(seed, &[u64::from(id), cls as u64, 0xBA1A]));
            let mut chosen: Vec<usize> = order.into_iter().take(floor).collect();
            chosen.sort_unstable();
            *class_store = ClassStore {
                images: class_store.select(&chosen),
                source_indices: chosen.iter().map(|&i| class_store.source_indices[i]).collect(),
            };
        }
    }
    if dataset.attacks.is_empty() {
        return Err(MadError::Data("every attack was removed during balancing".into()));
    }
    Ok(dataset)
}

fn split_ranges(count: usize, rng: &mut ChaCha8Rng) -> SplitRanges {
    let fifth = count / 5;
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    let train = order[..count - 2 * fifth].to_vec();
    let val = order[count - 2 * fifth..count - fifth].to_vec();
    let test = order[count - fifth..].to_vec();
    SplitRanges { train, val, test }
}

/// 3:1:1 split per (attack, class): test = val = ⌊c/5⌋, remainder to train.
/// The clean pool is split the same way so episode sampling can respect
/// split discipline for clean examples too.
pub fn split_3_1_1(mut dataset: MadDataset, seed: u64) -> Result<MadDataset> {
    for (&id, store) in dataset.attacks.iter_mut() {
        let mut splits = Vec::with_capacity(store.classes.len());
        for (cls, class_store) in store.classes.iter().enumerate() {
            let c = class_store.len();
            if c < 5 {
                return Err(MadError::Config(format!(
                    "attack {id} class {cls} has only {c} examples (< 5); filter_and_balance should have removed it"
                )));
            }
            splits.push(split_ranges(c, &mut sub_rng(seed, &[u64::from(id), cls as u64, 0x5117])));
        }
        store.splits = splits;
    }
    let mut clean_splits = Vec::with_capacity(dataset.clean_pool.len());
    for (cls, class_store) in dataset.clean_pool.iter().enumerate() {
        let c = class_store.len();
        if c < 5 {
            return Err(MadError::Config(format!("clean pool class {cls} has only {c} examples (< 5)")));
        }
        clean_splits.push(split_ranges(c, &mut sub_rng(seed, &[u64::MAX, cls as u64, 0x5117])));
    }
    dataset.clean_splits = clean_splits;
    Ok(dataset)
}

/// Attach group tags and role assignments. Every retained attack must be
/// mapped; a group serving two roles is a configuration error.
pub fn assign_groups(
    mut dataset: MadDataset,
    grouping: &BTreeMap<u32, u32>,
    roles: &SplitAssignment,
) -> Result<MadDataset> {
    roles.validate()?;
    for &id in dataset.attacks.keys() {
        if !grouping.contains_key(&id) {
            return Err(MadError::Config(format!("attack {id} missing from the group mapping")));
        }
    }
    dataset.group_of = grouping
        .iter()
        .filter(|(id, _)| dataset.attacks.contains_key(id))
        .map(|(&id, &g)| (id, g))
        .collect();
    dataset.roles = roles.clone();
    Ok(dataset)
}

/// Default grouping: partition the retained attacks into 9 groups of
/// consecutive registry order (earlier groups absorb the remainder).
pub fn default_grouping(attack_ids: &[u32]) -> BTreeMap<u32, u32> {
    let mut ids: Vec<u32> = attack_ids.to_vec();
    ids.sort_unstable();
    let n = ids.len();
    let groups = 9.min(n.max(1));
    let base = n / groups;
    let extra = n % groups;
    let mut out = BTreeMap::new();
    let mut pos = 0;
    for g in 0..groups {
        let size = base + usize::from(g < extra);
        for _ in 0..size {
            if pos < n {
                out.insert(ids[pos], (g + 1) as u32);
                pos += 1;
            }
        }
    }
    out
}

/// Default protocol roles over the 9 default groups: 1–2 meta-train,
/// 4–5 meta-val, 7–8 fine-tune on new attacks, 3 and 6 test on learned
/// attacks, 9 test on a never-seen attack.
pub fn default_roles() -> SplitAssignment {
    let mut role_of_group = BTreeMap::new();
    role_of_group.insert(Role::MetaTrain, vec![1, 2]);
    role_of_group.insert(Role::MetaVal, vec![4, 5]);
    role_of_group.insert(Role::MetaFinetuneNew, vec![7, 8]);
    role_of_group.insert(Role::TestLearned, vec![3, 6]);
    role_of_group.insert(Role::TestNew, vec![9]);
    SplitAssignment { role_of_group }
}
