//! Command-line orchestration: one subcommand per pipeline stage, layered
//! configuration (flags > `MAD_*` env > JSON file > defaults), and a run
//! registry at `<workspace>/runs/<run_id>/manifest.json`.

pub mod config;
pub mod registry;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attacks::{load_suite, registry_entry};
use crate::baseline_at::{at_train, ATConfig};
use crate::data::{load_idx, synthetic_digits, LabeledImages};
use crate::error::{MadError, Result};
use crate::mad_dataset::{
    assign_groups, default_grouping, default_roles, filter_and_balance, generate_mad, load_mad,
    sample_eval_task, save_mad, split_3_1_1, MadDataset, Origin, Role, Split,
};
use crate::meta_at::{finetune, meta_train, MetaParams};
use crate::metrics::{
    build_report, export_report, plot_edsr_curves, DefenseRecord, DefenseReport, ExportFormat, RoleTag,
};
use crate::model::{
    build_model, evaluate_accuracy, load_checkpoint, save_checkpoint, train_clean, ModelSpec, ModelState,
    TrainConfig,
};
use config::{load_layered, mad_env, section};
use registry::{load_manifest, run_dir, save_manifest, RunManifest};

#[derive(Parser)]
#[command(name = "mad", version, about = "MAD benchmark toolkit: attacked datasets, meta-AT, defense scoring")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration value, repeatable: section.key=value.
    #[arg(long, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Workspace root holding the run registry.
    #[arg(long, default_value = ".")]
    workspace: PathBuf,
    /// Run id; generated when omitted. Re-using a meta-train run id resumes it.
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a clean reference classifier.
    TrainClean {
        #[command(flatten)]
        common: Common,
        /// Output directory for the checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a MAD dataset from a checkpoint and an attack suite.
    GenMad {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Attack suite (JSON list of attack specs).
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker count for attack generation (reserved; generation is
        /// single-threaded for reproducibility).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Structurally validate a stored MAD dataset.
    ValidateMad {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Meta-adversarial training on a MAD dataset.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Initial model checkpoint (ignored when resuming).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Baseline adversarial training on a MAD dataset.
    AtTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// K-shot fine-tune-and-evaluate every evaluation-role attack.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Defended model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Clean reference checkpoint (measures CA on attacked data).
        #[arg(long)]
        clean_checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defense method label for the records file.
        #[arg(long, default_value = "meta_at")]
        method: String,
    },
    /// Merge evaluation records into defense reports, CSV and plots.
    Report {
        #[command(flatten)]
        common: Common,
        /// records.json files produced by `evaluate`; repeatable.
        #[arg(long = "records", required = true)]
        records: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

// ---- config sections -------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct ModelSection {
    architecture: String,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { architecture: "small_cnn".into(), input_shape: (1, 28, 28), num_classes: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct DataSection {
    /// "synthetic" (built-in digit corpus) or "idx" (MNIST-format files).
    source: String,
    count: usize,
    seed: u64,
    images: Option<PathBuf>,
    labels: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { source: "synthetic".into(), count: 2000, seed: 100, images: None, labels: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct GenSection {
    name: String,
    batch: usize,
    seed: u64,
    min_per_class: usize,
    split_seed: u64,
}

impl Default for GenSection {
    fn default() -> Self {
        Self { name: "mad".into(), batch: 64, seed: 0, min_per_class: 5, split_seed: 0 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunSection {
    seed: u64,
}

fn load_data(data: &DataSection, shape: (usize, usize, usize)) -> Result<LabeledImages> {
    match data.source.as_str() {
        "synthetic" => Ok(synthetic_digits(data.count, shape, data.seed)),
        "idx" => {
            let images = data
                .images
                .as_ref()
                .ok_or_else(|| MadError::Config("data.images path required for source \"idx\"".into()))?;
            let labels = data
                .labels
                .as_ref()
                .ok_or_else(|| MadError::Config("data.labels path required for source \"idx\"".into()))?;
            for path in [images, labels] {
                if !path.exists() {
                    return Err(MadError::Data(format!("dataset file not found: {}", path.display())));
                }
            }
            load_idx(images, labels)
        }
        other => Err(MadError::Config(format!("unknown data.source \"{other}\""))),
    }
}

fn resolved(common: &Common) -> Result<Value> {
    load_layered(common.config.as_deref(), mad_env(), &common.set)
}

fn run_id_for(common: &Common, command: &str, cfg: &Value) -> String {
    common.run_id.clone().unwrap_or_else(|| registry::derive_run_id(command, cfg))
}

// ---- commands --------------------------------------------------------------

fn cmd_train_clean(common: &Common, out: &Path) -> Result<()> {
    let cfg = resolved(common)?;
    let model_s: ModelSection = section(&cfg, "model")?;
    let data_s: DataSection = section(&cfg, "data")?;
    let train_s: TrainConfig = section(&cfg, "train")?;
    let arch = model_s.architecture.parse()?;
    let spec = ModelSpec::new(arch, model_s.input_shape, model_s.num_classes);
    spec.validate()?;
    let model = build_model(&spec, model_s.seed)?;
    let data = load_data(&data_s, spec.input_shape)?;
    let trained = train_clean(&model, &data, &train_s)?;
    let accuracy = evaluate_accuracy(&trained, &data)?;

    std::fs::create_dir_all(out)?;
    let ckpt = out.join("clean.ckpt");
    save_checkpoint(&trained, &ckpt)?;

    let snapshot = serde_json::json!({ "model": model_s, "data": data_s, "train": train_s });
    let run_id = run_id_for(common, "train-clean", &snapshot);
    let mut manifest = RunManifest::new(&run_id, "train-clean", snapshot);
    manifest.add_output(&ckpt, true)?;
    save_manifest(&common.workspace, &manifest)?;
    println!("run {run_id}: trained {arch} on {} examples, train accuracy {accuracy:.2}%", data.len());
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn cmd_gen_mad(common: &Common, checkpoint: &Path, suite_path: &Path, out: &Path) -> Result<()> {
    let cfg = resolved(common)?;
    let data_s: DataSection = section(&cfg, "data")?;
    let gen_s: GenSection = section(&cfg, "gen")?;
    let model = load_checkpoint(checkpoint)?;
    let suite = load_suite(suite_path)?;
    if !suite.iter().any(|s| registry_entry(s.attack_id).is_some_and(|e| e.implemented)) {
        return Err(MadError::Config("attack suite holds no implemented attacks".into()));
    }
    let test = load_data(&data_s, model.spec.input_shape)?;
    let ckpt_id = registry::sha256_file(checkpoint)?[..16].to_string();

    let dataset = generate_mad(&model, &test, &suite, &gen_s.name, &ckpt_id, gen_s.batch, gen_s.seed)?;
    for warning in &dataset.warnings {
        eprintln!("warning: {warning}");
    }
    let dataset = filter_and_balance(dataset, gen_s.min_per_class, gen_s.seed)?;
    let dataset = split_3_1_1(dataset, gen_s.split_seed)?;
    let ids: Vec<u32> = dataset.attacks.keys().copied().collect();
    let dataset = assign_groups(dataset, &default_grouping(&ids), &default_roles())?;
    save_mad(&dataset, out)?;

    // Per-attack success-count table, stdout + CSV.
    let mut csv = String::from("attack_id,name,kept,per_class\n");
    println!("{:>9}  {:<12} {:>6}  per-class", "attack_id", "name", "kept");
    for (id, store) in &dataset.attacks {
        let per_class = store.min_class_count();
        let total: usize = store.classes.iter().map(|c| c.len()).sum();
        println!("{id:>9}  {:<12} {total:>6}  {per_class}", store.spec.name);
        csv.push_str(&format!("{id},{},{total},{per_class}\n", store.spec.name));
    }
    for &id in &dataset.removed_attacks {
        println!("{id:>9}  (removed: under {} per class)", gen_s.min_per_class);
    }
    let counts_path = out.join("success_counts.csv");
    std::fs::write(&counts_path, csv)?;

    let snapshot = serde_json::json!({ "data": data_s, "gen": gen_s });
    let run_id = run_id_for(common, "gen-mad", &snapshot);
    let mut manifest = RunManifest::new(&run_id, "gen-mad", snapshot);
    manifest.add_input(checkpoint);
    manifest.add_input(suite_path);
    manifest.add_output(&out.join("manifest.json"), true)?;
    manifest.add_output(&counts_path, true)?;
    save_manifest(&common.workspace, &manifest)?;
    println!("dataset: {}", out.display());
    Ok(())
}

fn cmd_validate_mad(dir: &Path) -> Result<()> {
    let dataset = load_mad(dir)?;
    validate_dataset(&dataset)?;
    println!(
        "ok: {} attacks, {} classes, cca {:.2}%",
        dataset.attacks.len(),
        dataset.num_classes,
        dataset.cca
    );
    Ok(())
}

/// Structural invariants of a stored dataset: per-attack balance, 3:1:1
/// partitions, and complete role assignments.
pub fn validate_dataset(dataset: &MadDataset) -> Result<()> {
    let fail = |msg: String| Err(MadError::Integrity(msg));
    for (&id, store) in &dataset.attacks {
        let counts: Vec<usize> = store.classes.iter().map(|c| c.len()).collect();
        if counts.iter().any(|&c| c != counts[0]) {
            return fail(format!("attack {id}: unbalanced class counts {counts:?}"));
        }
        if store.splits.len() != store.classes.len() {
            return fail(format!("attack {id}: missing split assignments"));
        }
        for (cls, ranges) in store.splits.iter().enumerate() {
            let count = store.classes[cls].len();
            let quota = count / 5;
            if ranges.val.len() != quota || ranges.test.len() != quota {
                return fail(format!(
                    "attack {id} class {cls}: val/test sizes {}/{} != {quota}",
                    ranges.val.len(),
                    ranges.test.len()
                ));
            }
            let mut all: Vec<usize> =
                ranges.train.iter().chain(&ranges.val).chain(&ranges.test).copied().collect();
            all.sort_unstable();
            if all != (0..count).collect::<Vec<_>>() {
                return fail(format!("attack {id} class {cls}: splits are not a partition"));
            }
        }
        if dataset.role_of_attack(id).is_none() {
            return fail(format!("attack {id}: no role assigned"));
        }
    }
    dataset.roles.validate()?;
    Ok(())
}

fn cmd_meta_train(common: &Common, dataset_dir: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = resolved(common)?;
    let params: MetaParams = section(&cfg, "meta")?;
    let run_s: RunSection = section(&cfg, "run")?;
    params.validate()?;
    let dataset = load_mad(dataset_dir)?;

    let snapshot = serde_json::json!({ "meta": params, "run": run_s });
    let run_id = run_id_for(common, "meta-train", &snapshot);
    let dir = run_dir(&common.workspace, &run_id);
    let last_path = dir.join("last.ckpt");
    let best_path = dir.join("best_val.ckpt");

    // Resume when this run id already has a manifest and a last checkpoint.
    let (start, epochs_done, mut manifest) = match load_manifest(&common.workspace, &run_id) {
        Ok(manifest) if last_path.exists() => {
            let done = manifest.extra.get("epochs_done").and_then(Value::as_u64).unwrap_or(0) as usize;
            println!("resuming run {run_id} from {} ({done} epochs done)", last_path.display());
            (load_checkpoint(&last_path)?, done, manifest)
        }
        _ => {
            let ckpt = checkpoint
                .ok_or_else(|| MadError::Config("--checkpoint is required for a fresh meta-train run".into()))?;
            let mut manifest = RunManifest::new(&run_id, "meta-train", snapshot.clone());
            manifest.add_input(ckpt);
            manifest.add_input(dataset_dir);
            (load_checkpoint(ckpt)?, 0, manifest)
        }
    };
    let remaining = params.epochs.saturating_sub(epochs_done);
    if remaining == 0 {
        println!("run {run_id}: all {} epochs already done", params.epochs);
        return Ok(());
    }
    let chunk = MetaParams { epochs: remaining, ..params.clone() };
    // Resumed chunks draw fresh episode streams.
    let outcome = meta_train(&start, &dataset, &chunk, run_s.seed.wrapping_add(epochs_done as u64))?;

    std::fs::create_dir_all(&dir)?;
    save_checkpoint(&outcome.best, &best_path)?;
    save_checkpoint(&outcome.last, &last_path)?;
    outcome.log.save(&dir)?;
    manifest.updated_at = registry::now_unix();
    manifest.extra.insert(
        "epochs_done".into(),
        serde_json::json!(epochs_done + outcome.log.validation.len()),
    );
    manifest.extra.insert("stop_reason".into(), serde_json::to_value(outcome.log.stop_reason)?);
    manifest.add_output(&best_path, true)?;
    manifest.add_output(&last_path, true)?;
    manifest.add_output(&dir.join("episodes.jsonl"), false)?;
    manifest.add_output(&dir.join("summary.json"), false)?;
    save_manifest(&common.workspace, &manifest)?;

    let best = &outcome.log.validation[outcome.log.best_check];
    println!(
        "run {run_id}: {} epochs, best val loss {:.6} (ca {:.2}%) at check {}",
        outcome.log.validation.len(),
        best.val_loss,
        best.val_ca,
        outcome.log.best_check
    );
    println!("best checkpoint: {}", best_path.display());
    Ok(())
}

fn cmd_at_train(common: &Common, dataset_dir: &Path, checkpoint: &Path) -> Result<()> {
    let cfg = resolved(common)?;
    let at_cfg: ATConfig = section(&cfg, "at")?;
    let dataset = load_mad(dataset_dir)?;
    let model = load_checkpoint(checkpoint)?;
    let trained = at_train(&model, &dataset, &at_cfg)?;

    let snapshot = serde_json::json!({ "at": at_cfg });
    let run_id = run_id_for(common, "at-train", &snapshot);
    let dir = run_dir(&common.workspace, &run_id);
    std::fs::create_dir_all(&dir)?;
    let ckpt = dir.join("at.ckpt");
    save_checkpoint(&trained, &ckpt)?;
    let mut manifest = RunManifest::new(&run_id, "at-train", snapshot);
    manifest.add_input(checkpoint);
    manifest.add_input(dataset_dir);
    manifest.add_output(&ckpt, true)?;
    save_manifest(&common.workspace, &manifest)?;
    println!("run {run_id}: adversarially trained for {} epochs", at_cfg.epochs);
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

/// One evaluated method: the defense records plus the per-task fine-tune
/// details backing them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodRecords {
    pub dataset: String,
    pub method: String,
    /// Defended model on clean test data, percent.
    pub cca_defended: f64,
    pub records: Vec<DefenseRecord>,
    pub details: Vec<TaskDetail>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskDetail {
    pub attack_id: u32,
    /// CA (%) on the full mixed query set before / after fine-tuning.
    pub ca_before: f64,
    pub ca_after: f64,
    pub steps: usize,
    pub ot_hours: f64,
}

fn eval_rng(seed: u64, attack_id: u32) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    use sha2::Digest;
    let mut h = sha2::Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(b"evaluate");
    h.update(attack_id.to_le_bytes());
    rand_chacha::ChaCha8Rng::from_seed(h.finalize().into())
}

/// Run the K-shot protocol for every evaluation-role attack.
pub fn evaluate_defense(
    dataset: &MadDataset,
    defended: &ModelState,
    clean: &ModelState,
    params: &MetaParams,
    method: &str,
    seed: u64,
) -> Result<MethodRecords> {
    params.validate()?;
    let mut targets: Vec<(u32, RoleTag)> = Vec::new();
    for id in dataset.attacks_in_role(Role::TestLearned) {
        targets.push((id, RoleTag::Learned));
    }
    for role in [Role::MetaFinetuneNew, Role::TestNew] {
        for id in dataset.attacks_in_role(role) {
            targets.push((id, RoleTag::New));
        }
    }
    if targets.is_empty() {
        return Err(MadError::Config("dataset has no evaluation-role attacks".into()));
    }
    let mut records = Vec::new();
    let mut details = Vec::new();
    for (id, role) in targets {
        let mut rng = eval_rng(seed, id);
        let task = sample_eval_task(dataset, id, params.test_shot_k, params.test_query_m, &mut rng)?;
        let ca_before = evaluate_accuracy(defended, &task.query)?;
        let start = std::time::Instant::now();
        let (tuned, steps) = finetune(defended, &task.support, params)?;
        let ot_hours = start.elapsed().as_secs_f64() / 3600.0;
        let ca_after = evaluate_accuracy(&tuned, &task.query)?;

        // Defense scores are measured on the adversarial part of Q′ only.
        let adv_idx: Vec<usize> = task
            .query_origin
            .iter()
            .enumerate()
            .filter(|(_, (origin, _))| matches!(origin, Origin::Attack(_)))
            .map(|(i, _)| i)
            .collect();
        let adv = task.query.subset(&adv_idx);
        let ca_attacked = evaluate_accuracy(clean, &adv)?;
        let ca_defended = evaluate_accuracy(&tuned, &adv)?;
        records.push(DefenseRecord::new(id, role, dataset.cca, ca_attacked, ca_defended, ot_hours)?);
        details.push(TaskDetail { attack_id: id, ca_before, ca_after, steps, ot_hours });
    }
    let clean_test = dataset.clean_split(Split::Test)?;
    let cca_defended = evaluate_accuracy(defended, &clean_test)?;
    Ok(MethodRecords {
        dataset: dataset.name.clone(),
        method: method.to_string(),
        cca_defended,
        records,
        details,
    })
}

fn cmd_evaluate(
    common: &Common,
    dataset_dir: &Path,
    checkpoint: &Path,
    clean_checkpoint: &Path,
    out: &Path,
    method: &str,
) -> Result<()> {
    let cfg = resolved(common)?;
    let params: MetaParams = section(&cfg, "meta")?;
    let run_s: RunSection = section(&cfg, "run")?;
    let dataset = load_mad(dataset_dir)?;
    let defended = load_checkpoint(checkpoint)?;
    let clean = load_checkpoint(clean_checkpoint)?;
    let result = evaluate_defense(&dataset, &defended, &clean, &params, method, run_s.seed)?;

    std::fs::create_dir_all(out)?;
    let records_path = out.join("records.json");
    std::fs::write(&records_path, serde_json::to_vec_pretty(&result)?)?;

    let snapshot = serde_json::json!({ "meta": params, "run": run_s, "method": method });
    let run_id = run_id_for(common, "evaluate", &snapshot);
    let mut manifest = RunManifest::new(&run_id, "evaluate", snapshot);
    manifest.add_input(checkpoint);
    manifest.add_input(clean_checkpoint);
    manifest.add_input(dataset_dir);
    manifest.add_output(&records_path, false)?; // carries wall-clock OT
    save_manifest(&common.workspace, &manifest)?;

    for (rec, det) in result.records.iter().zip(&result.details) {
        println!(
            "attack {:>2} ({:<7}): dsr {:.4}, edsr {:.4}, ca {:.2}% -> {:.2}% in {} steps",
            rec.attack_id, rec.role.to_string(), rec.dsr, rec.edsr, det.ca_before, det.ca_after, det.steps
        );
    }
    println!("clean accuracy of defended model: {:.2}%", result.cca_defended);
    println!("records: {}", records_path.display());
    Ok(())
}

fn cmd_report(common: &Common, record_files: &[PathBuf], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut reports: Vec<DefenseReport> = Vec::new();
    for path in record_files {
        let text = std::fs::read_to_string(path)?;
        let method: MethodRecords = serde_json::from_str(&text)
            .map_err(|e| MadError::Integrity(format!("{}: invalid records file: {e}", path.display())))?;
        reports.push(build_report(&method.dataset, &method.method, method.records, method.cca_defended)?);
    }

    // One combined CSV over every method, plus per-method JSON and plots.
    let mut csv = String::from("dataset,method,attack_id,role,cca,ca_attacked,ca_defended,ot_hours,dsr,edsr\n");
    for report in &reports {
        for r in &report.records {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                report.dataset, report.method, r.attack_id, r.role, r.cca, r.ca_attacked, r.ca_defended,
                r.ot_hours, r.dsr, r.edsr
            ));
        }
    }
    let csv_path = out.join("report.csv");
    std::fs::write(&csv_path, csv)?;
    let mut outputs = vec![csv_path.clone()];
    for report in &reports {
        let json_path = out.join(format!("report_{}.json", report.method));
        export_report(report, ExportFormat::Json, &json_path)?;
        outputs.push(json_path);
        outputs.extend(plot_edsr_curves(report, out)?);
        for (role, agg) in &report.aggregates {
            println!(
                "{} / {role:?}: mean dsr {:.4}, mean edsr {:.4} over {} attacks",
                report.method, agg.mean_dsr, agg.mean_edsr, agg.count
            );
        }
    }

    let snapshot = serde_json::json!({ "records": record_files });
    let run_id = run_id_for(common, "report", &snapshot);
    let mut manifest = RunManifest::new(&run_id, "report", snapshot);
    for path in record_files {
        manifest.add_input(path);
    }
    for path in &outputs {
        manifest.add_output(path, false)?; // report rows carry OT values
    }
    save_manifest(&common.workspace, &manifest)?;
    println!("report: {}", csv_path.display());
    Ok(())
}

// ---- entry -----------------------------------------------------------------

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::TrainClean { common, out } => cmd_train_clean(common, out),
        Command::GenMad { common, checkpoint, suite, out, jobs: _ } => {
            cmd_gen_mad(common, checkpoint, suite, out)
        }
        Command::ValidateMad { dataset } => cmd_validate_mad(dataset),
        Command::MetaTrain { common, dataset, checkpoint } => {
            cmd_meta_train(common, dataset, checkpoint.as_deref())
        }
        Command::AtTrain { common, dataset, checkpoint } => cmd_at_train(common, dataset, checkpoint),
        Command::Evaluate { common, dataset, checkpoint, clean_checkpoint, out, method } => {
            cmd_evaluate(common, dataset, checkpoint, clean_checkpoint, out, method)
        }
        Command::Report { common, records, out } => cmd_report(common, records, out),
    }
}

/// Parse std::env::args and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own diagnostics; usage errors map onto the
            // configuration-error exit code.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
