//! Defense scoring: CA, DSR, OT, EDSR, and per-attack / aggregate reports.
//!
//! DSR and EDSR are stored as fractions (1.0 = 100%); accuracies are stored
//! in percent. `report.csv` columns, in order: dataset, method, attack_id,
//! role, cca, ca_attacked, ca_defended, ot_hours, dsr, edsr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MadError, Result};

mod plot;

pub use plot::plot_edsr_curves;

/// Whether the evaluated attack was part of meta-training (learned) or held
/// out (new).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    Learned,
    New,
}

impl std::fmt::Display for RoleTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RoleTag::Learned => write!(f, "learned"),
            RoleTag::New => write!(f, "new"),
        }
    }
}

/// One attack's defense scores. Accuracies in percent, dsr/edsr as fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseRecord {
    pub attack_id: u32,
    pub role: RoleTag,
    /// Clean model on clean test data.
    pub cca: f64,
    /// Clean model on the attacked data (CA_A, 0 by dataset construction).
    pub ca_attacked: f64,
    /// Defended model on the attacked data (CA_D).
    pub ca_defended: f64,
    pub ot_hours: f64,
    pub dsr: f64,
    pub edsr: f64,
}

impl DefenseRecord {
    /// Build a record, computing dsr/edsr from the raw accuracies.
    pub fn new(
        attack_id: u32,
        role: RoleTag,
        cca: f64,
        ca_attacked: f64,
        ca_defended: f64,
        ot_hours: f64,
    ) -> Result<Self> {
        let dsr = compute_dsr(ca_defended, ca_attacked, cca)?;
        let edsr = compute_edsr(dsr, ot_hours)?;
        Ok(Self { attack_id, role, cca, ca_attacked, ca_defended, ot_hours, dsr, edsr })
    }
}

/// Per-role aggregate means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleAggregate {
    pub count: usize,
    pub mean_ca_defended: f64,
    pub mean_ot_hours: f64,
    pub mean_dsr: f64,
    pub mean_edsr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub dataset: String,
    pub method: String,
    pub records: Vec<DefenseRecord>,
    pub aggregates: BTreeMap<RoleTag, RoleAggregate>,
    /// Defended model on clean test data, percent.
    pub cca_defended: f64,
}

/// DSR = (CA_D − CA_A) / (CCA − CA_A). May exceed 1.0.
pub fn compute_dsr(ca_defended: f64, ca_attacked: f64, cca: f64) -> Result<f64> {
    if !(cca > ca_attacked) {
        return Err(MadError::Numeric(format!(
            "DSR undefined: CCA ({cca}) must exceed CA_A ({ca_attacked})"
        )));
    }
    Ok((ca_defended - ca_attacked) / (cca - ca_attacked))
}

/// EDSR = DSR · e^(−OT), OT in hours.
pub fn compute_edsr(dsr: f64, ot_hours: f64) -> Result<f64> {
    if !(ot_hours >= 0.0) {
        return Err(MadError::Numeric(format!("EDSR undefined: OT must be >= 0, got {ot_hours}")));
    }
    Ok(dsr * (-ot_hours).exp())
}

/// Assemble a report: per-role aggregates plus a recompute cross-check of
/// every record's dsr/edsr.
pub fn build_report(
    dataset: &str,
    method: &str,
    records: Vec<DefenseRecord>,
    cca_defended: f64,
) -> Result<DefenseReport> {
    if records.is_empty() {
        return Err(MadError::Data("cannot build a defense report from zero records".into()));
    }
    for rec in &records {
        let dsr = compute_dsr(rec.ca_defended, rec.ca_attacked, rec.cca)?;
        let edsr = compute_edsr(dsr, rec.ot_hours)?;
        if (dsr - rec.dsr).abs() > 1e-9 || (edsr - rec.edsr).abs() > 1e-9 {
            return Err(MadError::Integrity(format!(
                "attack {} record inconsistent: stored dsr/edsr {}/{}, recomputed {}/{}",
                rec.attack_id, rec.dsr, rec.edsr, dsr, edsr
            )));
        }
    }
    let mut aggregates = BTreeMap::new();
    for role in [RoleTag::Learned, RoleTag::New] {
        let members: Vec<&DefenseRecord> = records.iter().filter(|r| r.role == role).collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        aggregates.insert(
            role,
            RoleAggregate {
                count: members.len(),
                mean_ca_defended: members.iter().map(|r| r.ca_defended).sum::<f64>() / n,
                mean_ot_hours: members.iter().map(|r| r.ot_hours).sum::<f64>() / n,
                mean_dsr: members.iter().map(|r| r.dsr).sum::<f64>() / n,
                mean_edsr: members.iter().map(|r| r.edsr).sum::<f64>() / n,
            },
        );
    }
    Ok(DefenseReport { dataset: dataset.into(), method: method.into(), records, aggregates, cca_defended })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    Csv,
}

/// Write a report as JSON or CSV and return the written path.
pub fn export_report(report: &DefenseReport, format: ExportFormat, path: &Path) -> Result<PathBuf> {
    if report.records.is_empty() {
        return Err(MadError::Data("cannot export an empty defense report".into()));
    }
    match format {
        ExportFormat::Json => {
            std::fs::write(path, serde_json::to_vec_pretty(report)?)?;
        }
        ExportFormat::Csv => {
            let mut out = String::from(
                "dataset,method,attack_id,role,cca,ca_attacked,ca_defended,ot_hours,dsr,edsr\n",
            );
            for r in &report.records {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    report.dataset,
                    report.method,
                    r.attack_id,
                    r.role,
                    r.cca,
                    r.ca_attacked,
                    r.ca_defended,
                    r.ot_hours,
                    r.dsr,
                    r.edsr
                ));
            }
            std::fs::write(path, out)?;
        }
    }
    Ok(path.to_path_buf())
}

/// Load a JSON report and re-validate it through build_report.
pub fn load_report_json(path: &Path) -> Result<DefenseReport> {
    let text = std::fs::read_to_string(path)?;
    let report: DefenseReport = serde_json::from_str(&text)
        .map_err(|e| MadError::Integrity(format!("{}: invalid report: {e}", path.display())))?;
    let rebuilt = build_report(&report.dataset, &report.method, report.records.clone(), report.cca_defended)?;
    if rebuilt.aggregates != report.aggregates {
        return Err(MadError::Integrity(format!(
            "{}: stored aggregates do not match their records",
            path.display()
        )));
    }
    Ok(report)
}
