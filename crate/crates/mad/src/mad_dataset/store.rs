//! On-disk MAD dataset layout: `manifest.json` plus raw little-endian f32
//! image blobs under `attack_<id>/class_<c>.f32` and `clean/class_<c>.f32`,
//! each guarded by a SHA-256 checksum in the manifest.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AttackStore, ClassStore, MadDataset, SplitAssignment, SplitRanges};
use crate::attacks::AttackSpec;
use crate::error::{MadError, Result};

pub const MAD_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ClassEntry {
    count: usize,
    source_indices: Vec<u32>,
    splits: SplitRanges,
}

#[derive(Serialize, Deserialize)]
struct AttackEntry {
    attack_id: u32,
    spec: AttackSpec,
    classes: Vec<ClassEntry>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    name: String,
    num_classes: usize,
    image_shape: (usize, usize, usize),
    reference_checkpoint_id: String,
    cca: f64,
    removed_attacks: Vec<u32>,
    warnings: Vec<String>,
    group_of: BTreeMap<u32, u32>,
    roles: SplitAssignment,
    attacks: Vec<AttackEntry>,
    clean: Vec<ClassEntry>,
    /// Relative blob path → SHA-256 hex digest.
    checksums: BTreeMap<String, String>,
}

fn blob_bytes(store: &ClassStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(store.images.len() * 4);
    for &v in store.images.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_mad(dataset: &MadDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut checksums = BTreeMap::new();
    let mut write_blob = |rel: String, store: &ClassStore| -> Result<()> {
        let bytes = blob_bytes(store);
        checksums.insert(rel.clone(), hex_digest(&bytes));
        let path = dir.join(&rel);
        std::fs::create_dir_all(path.parent().expect("blob paths have a parent"))?;
        std::fs::write(path, bytes)?;
        Ok(())
    };

    let mut attacks = Vec::new();
    for (&id, store) in &dataset.attacks {
        let mut classes = Vec::new();
        for (cls, class_store) in store.classes.iter().enumerate() {
            write_blob(format!("attack_{id}/class_{cls}.f32"), class_store)?;
            classes.push(ClassEntry {
                count: class_store.len(),
                source_indices: class_store.source_indices.clone(),
                splits: store.splits.get(cls).cloned().unwrap_or_default(),
            });
        }
        attacks.push(AttackEntry { attack_id: id, spec: store.spec.clone(), classes });
    }
    let mut clean = Vec::new();
    for (cls, class_store) in dataset.clean_pool.iter().enumerate() {
        write_blob(format!("clean/class_{cls}.f32"), class_store)?;
        clean.push(ClassEntry {
            count: class_store.len(),
            source_indices: class_store.source_indices.clone(),
            splits: dataset.clean_splits.get(cls).cloned().unwrap_or_default(),
        });
    }

    let manifest = Manifest {
        format_version: MAD_FORMAT_VERSION,
        name: dataset.name.clone(),
        num_classes: dataset.num_classes,
        image_shape: dataset.image_shape,
        reference_checkpoint_id: dataset.reference_checkpoint_id.clone(),
        cca: dataset.cca,
        removed_attacks: dataset.removed_attacks.clone(),
        warnings: dataset.warnings.clone(),
        group_of: dataset.group_of.clone(),
        roles: dataset.roles.clone(),
        attacks,
        clean,
        checksums,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn read_blob(
    dir: &Path,
    rel: &str,
    entry: &ClassEntry,
    shape: (usize, usize, usize),
    checksums: &BTreeMap<String, String>,
) -> Result<ClassStore> {
    let path = dir.join(rel);
    let bytes = std::fs::read(&path)?;
    let expected = checksums
        .get(rel)
        .ok_or_else(|| MadError::Integrity(format!("{rel}: no checksum in manifest")))?;
    let actual = hex_digest(&bytes);
    if &actual != expected {
        return Err(MadError::Integrity(format!("{rel}: checksum mismatch")));
    }
    let (c, h, w) = shape;
    let expected_len = entry.count * c * h * w * 4;
    if bytes.len() != expected_len {
        return Err(MadError::Integrity(format!(
            "{rel}: blob holds {} bytes, manifest expects {expected_len}",
            bytes.len()
        )));
    }
    if entry.source_indices.len() != entry.count {
        return Err(MadError::Integrity(format!("{rel}: source index count does not match example count")));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")))
        .collect();
    let images = Array4::from_shape_vec((entry.count, c, h, w), data)
        .map_err(|e| MadError::Integrity(format!("{rel}: {e}")))?;
    Ok(ClassStore { images, source_indices: entry.source_indices.clone() })
}

pub fn load_mad(dir: &Path) -> Result<MadDataset> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| MadError::Integrity(format!("{}: corrupt manifest: {e}", manifest_path.display())))?;
    if manifest.format_version != MAD_FORMAT_VERSION {
        return Err(MadError::Version { expected: MAD_FORMAT_VERSION, found: manifest.format_version });
    }
    let shape = manifest.image_shape;
    let mut attacks = BTreeMap::new();
    for entry in &manifest.attacks {
        if entry.classes.len() != manifest.num_classes {
            return Err(MadError::Integrity(format!(
                "attack {}: {} class entries for {} classes",
                entry.attack_id,
                entry.classes.len(),
                manifest.num_classes
            )));
        }
        let mut classes = Vec::new();
        let mut splits = Vec::new();
        for (cls, class_entry) in entry.classes.iter().enumerate() {
            let rel = format!("attack_{}/class_{cls}.f32", entry.attack_id);
            classes.push(read_blob(dir, &rel, class_entry, shape, &manifest.checksums)?);
            splits.push(class_entry.splits.clone());
        }
        let has_splits = splits.iter().any(|s| !s.train.is_empty() || !s.val.is_empty() || !s.test.is_empty());
        attacks.insert(
            entry.attack_id,
            AttackStore { spec: entry.spec.clone(), classes, splits: if has_splits { splits } else { Vec::new() } },
        );
    }
    let mut clean_pool = Vec::new();
    let mut clean_splits = Vec::new();
    for (cls, class_entry) in manifest.clean.iter().enumerate() {
        let rel = format!("clean/class_{cls}.f32");
        clean_pool.push(read_blob(dir, &rel, class_entry, shape, &manifest.checksums)?);
        clean_splits.push(class_entry.splits.clone());
    }
    let has_clean_splits = clean_splits.iter().any(|s| !s.train.is_empty() || !s.val.is_empty() || !s.test.is_empty());
    Ok(MadDataset {
        name: manifest.name,
        num_classes: manifest.num_classes,
        image_shape: shape,
        reference_checkpoint_id: manifest.reference_checkpoint_id,
        cca: manifest.cca,
        attacks,
        clean_pool,
        clean_splits: if has_clean_splits { clean_splits } else { Vec::new() },
        group_of: manifest.group_of,
        roles: manifest.roles,
        removed_attacks: manifest.removed_attacks,
        warnings: manifest.warnings,
    })
}
