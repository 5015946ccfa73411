use std::collections::BTreeMap;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::core::{inner_update_flat, query_gradient_flat};
use super::*;
use crate::attacks::{registry_entry, AttackSpec};
use crate::data::LabeledImages;
use crate::error::MadError;
use crate::mad_dataset::{
    assign_groups, default_roles, sample_eval_task, split_3_1_1, AttackStore, ClassStore, MadDataset, Role,
    SplitAssignment,
};
use crate::model::{build_model, loss_and_grad, Architecture, LossKind, ModelSpec, ModelState};

// Quadratic toy: L(θ) = 0.5·Σθ², so ∇L = θ and H = I.
fn quad_grad(theta: &[f64]) -> crate::error::Result<Vec<f64>> {
    Ok(theta.to_vec())
}

#[test]
fn inner_update_flat_quadratic_oracle() {
    // θ=1, β=0.01: θ′ = (1 − 0.01)·1 = 0.99.
    let out = inner_update_flat(&[1.0], &mut quad_grad, 0.01, 1).unwrap();
    assert!((out[0] - 0.99).abs() < 1e-9, "got {}", out[0]);

    // β = 0 leaves θ untouched, bitwise.
    let theta = [0.3, -1.7, 4.2];
    let out = inner_update_flat(&theta, &mut quad_grad, 0.0, 3).unwrap();
    assert_eq!(out, theta.to_vec());

    // Two inner steps equal two chained single steps, bitwise.
    let two = inner_update_flat(&theta, &mut quad_grad, 0.05, 2).unwrap();
    let once = inner_update_flat(&theta, &mut quad_grad, 0.05, 1).unwrap();
    let chained = inner_update_flat(&once, &mut quad_grad, 0.05, 1).unwrap();
    assert_eq!(two, chained);
}

#[test]
fn query_gradient_flat_first_and_second_order_oracles() {
    // L_S = L_Q = 0.5θ², θ=1, β=0.1: θ′ = 0.9.
    // First order: g = ∇L_Q(θ′) = 0.9.
    // Second order: g = (I − β·H)·∇L_Q(θ′) = 0.9·(1 − 0.1) = 0.81.
    let first = query_gradient_flat(&[1.0], &mut quad_grad, &mut quad_grad, 0.1, 1, false).unwrap();
    assert!((first[0] - 0.9).abs() < 1e-9, "got {}", first[0]);
    let second = query_gradient_flat(&[1.0], &mut quad_grad, &mut quad_grad, 0.1, 1, true).unwrap();
    assert!((second[0] - 0.81).abs() < 1e-9, "got {}", second[0]);

    // β = 0: both orders reduce to ∇L_Q(θ).
    let f0 = query_gradient_flat(&[1.0], &mut quad_grad, &mut quad_grad, 0.0, 1, false).unwrap();
    let s0 = query_gradient_flat(&[1.0], &mut quad_grad, &mut quad_grad, 0.0, 1, true).unwrap();
    assert_eq!(f0, vec![1.0]);
    assert_eq!(s0, vec![1.0]);
}

#[test]
fn flat_primitives_reject_bad_gradients() {
    let mut wrong_len = |_: &[f64]| Ok(vec![1.0, 2.0]);
    assert!(matches!(
        inner_update_flat(&[1.0], &mut wrong_len, 0.1, 1),
        Err(MadError::Numeric(_))
    ));
    let mut nan = |theta: &[f64]| Ok(vec![f64::NAN; theta.len()]);
    assert!(matches!(
        inner_update_flat(&[1.0], &mut nan, 0.1, 1),
        Err(MadError::Numeric(_))
    ));
    assert!(matches!(
        query_gradient_flat(&[1.0], &mut quad_grad, &mut nan, 0.1, 1, false),
        Err(MadError::Numeric(_))
    ));
}

#[test]
fn early_stopper_semantics() {
    assert!(matches!(EarlyStopper::new(0), Err(MadError::Config(_))));

    // [1, 2, 2] with patience 2: stop on the third observation, best at 0.
    let mut s = EarlyStopper::new(2).unwrap();
    assert_eq!(s.observe(1.0), Decision::Continue);
    assert_eq!(s.observe(2.0), Decision::Continue);
    assert_eq!(s.observe(2.0), Decision::Stop);
    assert_eq!(s.best_index(), Some(0));
    assert_eq!(s.best_loss(), Some(1.0));

    // Ties keep the earliest best.
    let mut s = EarlyStopper::new(3).unwrap();
    for loss in [0.5, 0.5, 0.5] {
        s.observe(loss);
    }
    assert_eq!(s.best_index(), Some(0));

    // Randomized: the stopper fires exactly patience steps after the best.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let p = rng.gen_range(1..4);
        let mut s = EarlyStopper::new(p).unwrap();
        let mut stop_at = None;
        for i in 0..40 {
            let loss: f64 = rng.gen();
            if s.observe(loss) == Decision::Stop {
                stop_at = Some(i);
                break;
            }
        }
        if let Some(i) = stop_at {
            assert_eq!(i, s.best_index().unwrap() + p);
        }
    }
}

/// A tiny linear classifier over 2×2 single-channel inputs.
fn tiny_model(num_classes: usize) -> ModelState {
    let spec = ModelSpec::new(Architecture::Linear, (1, 2, 2), num_classes);
    build_model(&spec, 3).unwrap()
}

fn random_batch(n: usize, num_classes: usize, seed: u64) -> LabeledImages {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Array4::from_shape_fn((n, 1, 2, 2), |_| rng.gen::<f32>());
    let labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    LabeledImages::new(images, labels).unwrap()
}

fn flat_grad(model: &ModelState, data: &LabeledImages, flat: &[f64]) -> Vec<f64> {
    let m = model.with_flat_params_f64(flat).unwrap();
    let (_, grads) = loss_and_grad(&m, data, &LossKind::CrossEntropy).unwrap();
    grads.into_iter().flat_map(|g| g.into_iter().collect::<Vec<_>>()).collect()
}

#[test]
fn inner_update_matches_manual_gradient_step() {
    let model = tiny_model(3);
    let support = random_batch(9, 3, 11);
    let beta = 0.05;
    let updated = inner_update(&model, &support, beta, 1).unwrap();

    let theta = model.flat_params_f64();
    let g = flat_grad(&model, &support, &theta);
    let expected: Vec<f64> = theta.iter().zip(&g).map(|(&t, &gv)| t - beta * gv).collect();
    let expected_model = model.with_flat_params_f64(&expected).unwrap();
    assert_eq!(updated.flat_params_f64(), expected_model.flat_params_f64());

    // The input model is untouched.
    assert_eq!(model.flat_params_f64(), theta);
}

#[test]
fn meta_epoch_matches_brute_force_sum() {
    let model = tiny_model(2);
    let params = MetaParams { beta: 0.05, inner_steps: 1, second_order: false, ..MetaParams::default() };
    // Scripted episodes: support/query pairs, origins unused by meta_epoch.
    let episodes: Vec<crate::mad_dataset::Episode> = (0..3)
        .map(|i| crate::mad_dataset::Episode {
            support: random_batch(8, 2, 100 + i),
            query: random_batch(4, 2, 200 + i),
            support_origin: Vec::new(),
            query_origin: Vec::new(),
            attacks_s: Vec::new(),
            attacks_q: Vec::new(),
        })
        .collect();

    let (sum_g, records) = meta_epoch(&model, &episodes, &params).unwrap();
    assert_eq!(records.len(), 3);

    // Brute force: g_i = ∇L_Q(θ − β·∇L_S(θ)) per episode, summed.
    let theta = model.flat_params_f64();
    let mut expected = vec![0.0; theta.len()];
    for ep in &episodes {
        let gs = flat_grad(&model, &ep.support, &theta);
        let inner: Vec<f64> = theta.iter().zip(&gs).map(|(&t, &g)| t - params.beta * g).collect();
        // Match the trainer's f32 parameter rounding at the inner step.
        let inner = model.with_flat_params_f64(&inner).unwrap().flat_params_f64();
        let gq = flat_grad(&model, &ep.query, &inner);
        for (e, g) in expected.iter_mut().zip(&gq) {
            *e += g;
        }
    }
    for (a, b) in sum_g.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
    for rec in &records {
        assert!(rec.inner_loss.is_finite() && rec.query_loss.is_finite());
        assert!((0.0..=100.0).contains(&rec.query_ca));
    }

    assert!(matches!(meta_epoch(&model, &[], &params), Err(MadError::Config(_))));
}

/// MAD-shaped fixture: attacks 13/18 meta-train, 16 meta-val, 21 test-new,
/// with random payload images over 2×2 inputs and 3 classes.
fn fixture_dataset(per_class: usize) -> MadDataset {
    let num_classes = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut next_source = 0u32;
    let mut make_store = |count: usize| -> ClassStore {
        let images = Array4::from_shape_fn((count, 1, 2, 2), |_| rng.gen::<f32>());
        let start = next_source;
        next_source += count as u32;
        ClassStore { images, source_indices: (start..start + count as u32).collect() }
    };
    let ids = [13u32, 18, 16, 21];
    let mut attacks = BTreeMap::new();
    for &id in &ids {
        let entry = registry_entry(id).unwrap();
        let spec = AttackSpec {
            attack_id: id,
            name: entry.name.to_string(),
            norm: entry.norm,
            knowledge: entry.knowledge,
            epsilon: 0.3,
            step_size: 0.1,
            iterations: 1,
            extra: BTreeMap::new(),
        };
        let classes: Vec<ClassStore> = (0..num_classes).map(|_| make_store(per_class)).collect();
        attacks.insert(id, AttackStore { spec, classes, splits: Vec::new() });
    }
    let clean_pool: Vec<ClassStore> = (0..num_classes).map(|_| make_store(per_class)).collect();
    let dataset = MadDataset {
        name: "meta_fixture".into(),
        num_classes,
        image_shape: (1, 2, 2),
        reference_checkpoint_id: "ref".into(),
        cca: 95.0,
        attacks,
        clean_pool,
        clean_splits: Vec::new(),
        group_of: BTreeMap::new(),
        roles: SplitAssignment::default(),
        removed_attacks: Vec::new(),
        warnings: Vec::new(),
    };
    let dataset = split_3_1_1(dataset, 5).unwrap();
    let mut grouping = BTreeMap::new();
    grouping.insert(13u32, 1u32);
    grouping.insert(18, 2);
    grouping.insert(16, 4);
    grouping.insert(21, 9);
    assign_groups(dataset, &grouping, &default_roles()).unwrap()
}

fn small_params() -> MetaParams {
    MetaParams {
        epochs: 3,
        episodes_per_epoch: 2,
        patience: 2,
        ways: 2,
        query_ways: 1,
        shot_k: 2,
        query_m: 1,
        test_shot_k: 1,
        test_query_m: 2,
        finetune_steps: 4,
        ..MetaParams::default()
    }
}

#[test]
fn meta_train_runs_logs_and_is_deterministic() {
    let dataset = fixture_dataset(10);
    let model = tiny_model(3);
    let params = small_params();

    let out_a = meta_train(&model, &dataset, &params, 42).unwrap();
    let out_b = meta_train(&model, &dataset, &params, 42).unwrap();
    let (best_a, log_a) = (&out_a.best, &out_a.log);
    let (best_b, log_b) = (&out_b.best, &out_b.log);
    assert_eq!(best_a.flat_params_f64(), best_b.flat_params_f64());
    assert_eq!(out_a.last.flat_params_f64(), out_b.last.flat_params_f64());
    assert_eq!(log_a.validation.len(), log_b.validation.len());
    assert_eq!(log_a.best_check, log_b.best_check);

    // One validation point per completed epoch, episodes counted per epoch.
    assert!(!log_a.validation.is_empty());
    assert_eq!(log_a.episodes.len(), log_a.validation.len() * params.episodes_per_epoch);
    for (i, point) in log_a.validation.iter().enumerate() {
        assert_eq!(point.epoch, i);
        assert!(point.val_loss.is_finite());
    }
    // The best check really has the lowest validation loss.
    let best = log_a.validation[log_a.best_check].val_loss;
    assert!(log_a.validation.iter().all(|p| p.val_loss >= best));
    // The starting model is never mutated.
    assert_eq!(model.flat_params_f64(), tiny_model(3).flat_params_f64());

    // A different seed takes a different trajectory.
    let out_c = meta_train(&model, &dataset, &params, 43).unwrap();
    assert_ne!(best_a.flat_params_f64(), out_c.best.flat_params_f64());
}

#[test]
fn meta_train_requires_meta_val_attacks() {
    let mut dataset = fixture_dataset(10);
    dataset.roles.role_of_group.get_mut(&Role::MetaVal).unwrap().clear();
    let result = meta_train(&tiny_model(3), &dataset, &small_params(), 1);
    assert!(matches!(result, Err(MadError::Config(_))), "got {result:?}");

    // Invalid hyper-parameters are rejected up front.
    let bad = MetaParams { beta: -0.1, ..small_params() };
    assert!(matches!(
        meta_train(&tiny_model(3), &fixture_dataset(10), &bad, 1),
        Err(MadError::Config(_))
    ));
}

#[test]
fn finetune_and_eval_mechanics() {
    let dataset = fixture_dataset(10);
    let model = tiny_model(3);
    let params = small_params();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let task = sample_eval_task(&dataset, 21, params.test_shot_k, params.test_query_m, &mut rng).unwrap();

    let record = finetune_and_eval(&model, &task, &params).unwrap();
    assert!(record.steps >= 1 && record.steps <= params.finetune_steps);
    assert!(record.ot_hours >= 0.0);
    assert!((0.0..=100.0).contains(&record.ca_before));
    assert!((0.0..=100.0).contains(&record.ca_after));

    // Zero fine-tuning budget: the model is untouched.
    let frozen = MetaParams { finetune_steps: 0, ..params.clone() };
    let record = finetune_and_eval(&model, &task, &frozen).unwrap();
    assert_eq!(record.steps, 0);
    assert_eq!(record.ca_after, record.ca_before);
    assert!(record.ot_hours >= 0.0);
}

#[test]
fn log_save_writes_episode_and_summary_files() {
    let log = MetaTrainLog {
        episodes: vec![EpisodeRecord { epoch: 0, episode: 0, inner_loss: 1.0, query_loss: 0.5, query_ca: 50.0 }],
        validation: vec![ValidationPoint { epoch: 0, val_loss: 0.4, val_ca: 60.0 }],
        best_check: 0,
        stop_reason: StopReason::EpochsExhausted,
    };
    let dir = tempfile::tempdir().unwrap();
    log.save(dir.path()).unwrap();
    let lines = std::fs::read_to_string(dir.path().join("episodes.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 1);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["best_check"], 0);
    assert_eq!(summary["stop_reason"], "epochs_exhausted");
}
