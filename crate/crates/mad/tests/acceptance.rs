//! Acceptance suite: eight pinned criteria covering metric oracles, attack
//! properties, gradient checks, the end-to-end smoke pipeline, meta-update
//! equivalence, dataset invariants, early stopping, and determinism.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use ndarray::{Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mad::attacks::{
    attack_rng, one_pixel, registry_entry, run_attack, square_attack, AttackSpec, Norm, QueryModel,
};
use mad::cli::{evaluate_defense, validate_dataset, MethodRecords};
use mad::data::{synthetic_digits, LabeledImages};
use mad::mad_dataset::{
    assign_groups, filter_and_balance, generate_mad, load_mad, sample_eval_task, save_mad,
    split_3_1_1, Episode, MadDataset, Role, Split, SplitAssignment,
};
use mad::meta_at::{
    inner_update_flat, meta_epoch, meta_train, query_gradient_flat, Decision, EarlyStopper,
    MetaParams,
};
use mad::metrics::{compute_dsr, compute_edsr};
use mad::model::{
    build_model, evaluate_accuracy, input_grad, loss_and_grad, save_checkpoint, train_clean,
    Architecture, LossKind, ModelSpec, ModelState, Optimizer, TrainConfig,
};

fn make_spec(
    attack_id: u32,
    epsilon: f64,
    step_size: f64,
    iterations: usize,
    extras: &[(&str, serde_json::Value)],
) -> AttackSpec {
    let entry = registry_entry(attack_id).expect("registry id");
    let mut extra = BTreeMap::new();
    for (k, v) in extras {
        extra.insert(k.to_string(), v.clone());
    }
    AttackSpec {
        attack_id,
        name: entry.name.to_string(),
        norm: entry.norm,
        knowledge: entry.knowledge,
        epsilon,
        step_size,
        iterations,
        extra,
    }
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn c1_metric_oracles() {
    // DSR > 1: the defended model beats the original clean accuracy.
    let dsr = compute_dsr(98.84, 0.0, 96.06).unwrap();
    assert!((dsr - 1.0289402456797834).abs() < 1e-9);

    // Plain interior case.
    let dsr = compute_dsr(80.0, 20.0, 90.0).unwrap();
    assert!((dsr - 0.8571428571428571).abs() < 1e-9);

    // EDSR equals DSR at OT = 0.
    let edsr = compute_edsr(dsr, 0.0).unwrap();
    assert!((edsr - dsr).abs() < 1e-9);

    // One-hour discount and a pinned composite value.
    assert!((compute_edsr(0.5, 1.0).unwrap() - 0.18393972058572117).abs() < 1e-9);
    assert!((compute_edsr(dsr, 0.25).unwrap() - 0.6675435283469184).abs() < 1e-9);

    // Undefined denominators and negative time are numeric errors.
    assert!(compute_dsr(80.0, 50.0, 50.0).is_err());
    assert!(compute_edsr(0.5, -1.0).is_err());
}

// ---------------------------------------------------------------- criterion 2

/// Specs for every implemented attack, sized for many small runs.
fn property_specs(epsilon: f64) -> Vec<AttackSpec> {
    let l2_eps = if epsilon == 0.0 { 0.0 } else { epsilon * 5.0 };
    let step = (epsilon / 3.0).max(0.05);
    vec![
        make_spec(1, l2_eps, 0.1, 5, &[]),
        make_spec(13, epsilon, 0.1, 1, &[]),
        make_spec(14, epsilon, step, 4, &[]),
        make_spec(15, l2_eps, 0.1, 10, &[("c", serde_json::json!(1.0))]),
        make_spec(16, epsilon, step, 4, &[("momentum_decay", serde_json::json!(1.0))]),
        make_spec(18, epsilon, step, 4, &[]),
        make_spec(19, l2_eps, step, 4, &[]),
        make_spec(20, epsilon, step, 4, &[]),
        make_spec(21, epsilon, 0.1, 1, &[("init_magnitude", serde_json::json!(epsilon / 2.0))]),
        make_spec(24, epsilon, 0.1, 1, &[("init_magnitude", serde_json::json!(epsilon / 2.0))]),
        make_spec(25, epsilon, 0.1, 1, &[("query_budget", serde_json::json!(20))]),
        make_spec(27, epsilon, step, 2, &[("eot_samples", serde_json::json!(2))]),
        make_spec(
            28,
            if epsilon == 0.0 { 0.0 } else { 1.0 },
            0.1,
            1,
            &[("population", serde_json::json!(6)), ("generations", serde_json::json!(2))],
        ),
    ]
}

fn linf_dist(a: &Array4<f32>, b: &Array4<f32>) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x as f64 - y as f64).abs()).fold(0.0, f64::max)
}

fn l2_dist(a: &Array4<f32>, b: &Array4<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn c2_attack_properties_over_randomized_instances() {
    let models: Vec<ModelState> = (0..5)
        .map(|s| build_model(&ModelSpec::new(Architecture::SmallCnn, (1, 8, 8), 10), s).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let ids: Vec<u32> = property_specs(0.3).iter().map(|s| s.attack_id).collect();
    for id in ids {
        for i in 0..100u64 {
            let eps = if i % 10 == 9 { 0.0 } else { 0.05 + 0.35 * rng.gen::<f64>() };
            let spec = property_specs(eps).into_iter().find(|s| s.attack_id == id).unwrap();
            let model = &models[(i % 5) as usize];
            let batch = synthetic_digits(1, (1, 8, 8), 10_000 + id as u64 * 100 + i);
            let out = run_attack(&spec, model, &batch.images, &batch.labels, i, 0).unwrap();

            if spec.epsilon == 0.0 {
                assert_eq!(out.x_adv, batch.images, "attack {id}: ε=0 must be the identity");
            }
            match spec.norm {
                Norm::Linf => assert!(
                    linf_dist(&out.x_adv, &batch.images) <= spec.epsilon + 1e-6,
                    "attack {id}: L∞ budget violated"
                ),
                Norm::L2 => assert!(
                    l2_dist(&out.x_adv, &batch.images) <= spec.epsilon + 1e-6,
                    "attack {id}: L2 budget violated"
                ),
                Norm::L0 => {
                    // Pixels = 1: at most one spatial position may change.
                    let changed: std::collections::BTreeSet<(usize, usize)> = out
                        .x_adv
                        .indexed_iter()
                        .filter(|(idx, &v)| v != batch.images[[idx.0, idx.1, idx.2, idx.3]])
                        .map(|(idx, _)| (idx.2, idx.3))
                        .collect();
                    assert!(changed.len() <= 1, "attack {id}: L0 budget violated");
                }
                other => panic!("attack {id}: unexpected norm {other:?}"),
            }
            assert!(out.x_adv.iter().all(|&v| (0.0..=1.0).contains(&v)));

            // Re-verify the reported success mask against fresh predictions.
            let preds = model.predict(&out.x_adv).unwrap();
            for (j, &ok) in out.success_mask.iter().enumerate() {
                assert_eq!(ok, preds[j] != batch.labels[j], "attack {id}: stale success mask");
            }
        }
    }
}

/// Counts every model access; the trait exposes logits only, so black-box
/// attacks cannot reach gradients by construction.
struct CountingModel<'a> {
    inner: &'a ModelState,
    calls: std::cell::Cell<usize>,
}

impl QueryModel for CountingModel<'_> {
    fn query_logits(&self, x: &Array4<f32>) -> mad::Result<ndarray::Array2<f64>> {
        self.calls.set(self.calls.get() + x.shape()[0]);
        self.inner.logits(x)
    }

    fn num_classes(&self) -> usize {
        self.inner.spec.num_classes
    }
}

#[test]
fn c2_black_box_attacks_touch_no_gradients() {
    let model = build_model(&ModelSpec::new(Architecture::SmallCnn, (1, 8, 8), 10), 3).unwrap();
    let mut rng_seed = 0u64;
    for i in 0..100u64 {
        let batch = synthetic_digits(1, (1, 8, 8), 500 + i);
        let counter = CountingModel { inner: &model, calls: std::cell::Cell::new(0) };
        let (spec, out) = if i % 2 == 0 {
            let s = make_spec(25, 0.3, 0.1, 1, &[("query_budget", serde_json::json!(15))]);
            let mut rng = attack_rng(rng_seed, 25, 0);
            let o = square_attack(&counter, &batch.images, &batch.labels, &s, &mut rng).unwrap();
            (s, o)
        } else {
            let s = make_spec(
                28,
                1.0,
                0.1,
                1,
                &[("population", serde_json::json!(6)), ("generations", serde_json::json!(2))],
            );
            let mut rng = attack_rng(rng_seed, 28, 0);
            let o = one_pixel(&counter, &batch.images, &batch.labels, &s, &mut rng).unwrap();
            (s, o)
        };
        rng_seed += 1;
        // Every model access went through the logits-only query interface.
        assert_eq!(out.queries_or_steps, counter.calls.get(), "attack {}", spec.attack_id);
        assert!(counter.calls.get() > 0);
    }
}

/// 2-class linear model over a (1, 2, 2) input with chosen weights.
fn logistic_model(weights: &[f64; 8], biases: &[f64; 2]) -> ModelState {
    let spec = ModelSpec::new(Architecture::Linear, (1, 2, 2), 2);
    let mut model = build_model(&spec, 0).unwrap();
    let w: Vec<f32> = weights.iter().map(|&v| v as f32).collect();
    let b: Vec<f32> = biases.iter().map(|&v| v as f32).collect();
    model.set_parameter("fc.weight", ArrayD::from_shape_vec(IxDyn(&[2, 4]), w).unwrap()).unwrap();
    model.set_parameter("fc.bias", ArrayD::from_shape_vec(IxDyn(&[2]), b).unwrap()).unwrap();
    model
}

#[test]
fn c2_fgsm_and_pgd_match_closed_form_on_logistic_model() {
    // On z = Wx + b with label y, ∇_x CE = p_{1−y}·(w_{1−y} − w_y); the sign
    // pattern is constant along the trajectory, so FGSM moves ε·sign per
    // pixel and T-step PGD with step α moves min(Tα, ε)·sign, both clipped.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let mut w = [0.0f64; 8];
        for i in 0..4 {
            // Keep every per-pixel weight difference well away from zero.
            let d: f64 = (0.3 + rng.gen::<f64>()) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
            w[i] = rng.gen::<f64>() - 0.5;
            w[4 + i] = w[i] + d;
        }
        let model = logistic_model(&w, &[0.0, 0.0]);
        let label = rng.gen_range(0..2usize);
        let xv: Vec<f32> = (0..4).map(|_| 0.1 + 0.8 * rng.gen::<f32>()).collect();
        let x = Array4::from_shape_vec((1, 1, 2, 2), xv.clone()).unwrap();
        let eps = 0.05 + 0.3 * rng.gen::<f64>();
        let signs: Vec<f64> = (0..4)
            .map(|i| {
                let d = model.parameters()[0][[1 - label, i]] as f64
                    - model.parameters()[0][[label, i]] as f64;
                d.signum()
            })
            .collect();

        let out = run_attack(&make_spec(13, eps, eps, 1, &[]), &model, &x, &[label], 0, 0).unwrap();
        for i in 0..4 {
            let expected = (xv[i] as f64 + eps * signs[i]).clamp(0.0, 1.0);
            assert!((out.x_adv.as_slice().unwrap()[i] as f64 - expected).abs() <= 1e-6);
        }

        let (iters, alpha) = (4, eps / 6.0);
        let spec = make_spec(18, eps, alpha, iters, &[("random_start", serde_json::json!(false))]);
        let out = run_attack(&spec, &model, &x, &[label], 0, 0).unwrap();
        let travel = (iters as f64 * alpha).min(eps);
        for i in 0..4 {
            let expected = (xv[i] as f64 + travel * signs[i]).clamp(0.0, 1.0);
            assert!((out.x_adv.as_slice().unwrap()[i] as f64 - expected).abs() <= 1e-6);
        }
    }
}

// ---------------------------------------------------------------- criterion 3

fn flatten(grads: &[ArrayD<f64>]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.iter().cloned()).collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

#[test]
fn c3_parameter_gradients_match_finite_differences() {
    let spec = ModelSpec::new(Architecture::Linear, (1, 6, 6), 10);
    let model = build_model(&spec, 5).unwrap();
    assert!(model.total_params() <= 500);
    let batch = synthetic_digits(8, (1, 6, 6), 9);
    let (_, grads) = loss_and_grad(&model, &batch, &LossKind::CrossEntropy).unwrap();
    let analytic = flatten(&grads);

    let theta = model.flat_params_f64();
    let h = 1e-3;
    let loss_at = |t: &[f64]| -> f64 {
        let m = model.with_flat_params_f64(t).unwrap();
        loss_and_grad(&m, &batch, &LossKind::CrossEntropy).unwrap().0
    };
    let mut fd = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[i] += h;
        minus[i] -= h;
        fd.push((loss_at(&plus) - loss_at(&minus)) / (2.0 * h));
    }
    assert!(rel_err(&analytic, &fd) <= 1e-3, "rel err {}", rel_err(&analytic, &fd));
}

#[test]
fn c3_input_gradients_match_finite_differences() {
    let spec = ModelSpec::new(Architecture::Linear, (1, 6, 6), 10);
    let model = build_model(&spec, 6).unwrap();
    for seed in [1u64, 2, 3] {
        let batch = synthetic_digits(1, (1, 6, 6), seed);
        let analytic: Vec<f64> = input_grad(&model, &batch.images, &batch.labels, &LossKind::CrossEntropy)
            .unwrap()
            .iter()
            .cloned()
            .collect();
        let h = 1e-3f32;
        let mut fd = Vec::with_capacity(36);
        for i in 0..36 {
            let mut plus = batch.images.clone();
            let mut minus = batch.images.clone();
            plus.as_slice_mut().unwrap()[i] += h;
            minus.as_slice_mut().unwrap()[i] -= h;
            let lp = loss_and_grad(
                &model,
                &LabeledImages::new(plus, batch.labels.clone()).unwrap(),
                &LossKind::CrossEntropy,
            )
            .unwrap()
            .0;
            let lm = loss_and_grad(
                &model,
                &LabeledImages::new(minus, batch.labels.clone()).unwrap(),
                &LossKind::CrossEntropy,
            )
            .unwrap()
            .0;
            fd.push((lp - lm) / (2.0 * h as f64));
        }
        assert!(rel_err(&analytic, &fd) <= 1e-3, "rel err {}", rel_err(&analytic, &fd));
    }
}

// ------------------------------------------------------- criteria 4, 6 and 8

struct Smoke {
    clean: ModelState,
    clean_test_acc: f64,
    dataset: MadDataset,
    best: ModelState,
    records: MethodRecords,
}

fn smoke_suite() -> Vec<AttackSpec> {
    vec![
        make_spec(13, 0.3, 0.3, 1, &[]),
        make_spec(18, 0.3, 0.075, 10, &[("random_start", serde_json::json!(true))]),
        make_spec(16, 0.3, 0.075, 10, &[("momentum_decay", serde_json::json!(1.0))]),
        make_spec(21, 0.3, 0.15, 1, &[("init_magnitude", serde_json::json!(0.15))]),
        make_spec(14, 0.3, 0.075, 10, &[]),
    ]
}

fn smoke_params() -> MetaParams {
    MetaParams {
        ways: 2,
        query_ways: 1,
        shot_k: 5,
        query_m: 3,
        episodes_per_epoch: 20,
        epochs: 5,
        test_shot_k: 1,
        test_query_m: 15,
        patience: 25,
        lambda_: 0.05,
        beta: 0.02,
        finetune_steps: 500,
        ..MetaParams::default()
    }
}

fn run_smoke() -> Smoke {
    let spec = ModelSpec::new(Architecture::SmallCnn, (1, 28, 28), 10);
    let init = build_model(&spec, 7).unwrap();
    let train_set = synthetic_digits(2000, (1, 28, 28), 11);
    let test_set = synthetic_digits(1500, (1, 28, 28), 12);
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 32,
        learning_rate: 0.1,
        optimizer: Optimizer::Sgd,
        momentum: 0.9,
        seed: 3,
    };
    let clean = train_clean(&init, &train_set, &cfg).unwrap();
    let clean_test_acc = evaluate_accuracy(&clean, &test_set).unwrap();

    let ds = generate_mad(&clean, &test_set, &smoke_suite(), "smoke", "acc4", 64, 21).unwrap();
    let ds = filter_and_balance(ds, 5, 22).unwrap();
    let ds = split_3_1_1(ds, 23).unwrap();
    // FGSM/MIFGSM/PGD train the meta-learner, RFGSM validates it, BIM stays
    // fully held out as the new attack.
    let grouping: BTreeMap<u32, u32> =
        [(13u32, 1u32), (16, 2), (18, 3), (21, 4), (14, 9)].into_iter().collect();
    let mut role_of_group = BTreeMap::new();
    role_of_group.insert(Role::MetaTrain, vec![1, 2, 3]);
    role_of_group.insert(Role::MetaVal, vec![4]);
    role_of_group.insert(Role::TestNew, vec![9]);
    let ds = assign_groups(ds, &grouping, &SplitAssignment { role_of_group }).unwrap();

    let params = smoke_params();
    let out = meta_train(&clean, &ds, &params, 31).unwrap();
    let records = evaluate_defense(&ds, &out.best, &clean, &params, "meta_at", 41).unwrap();
    Smoke { clean, clean_test_acc, dataset: ds, best: out.best, records }
}

fn smoke_runs() -> &'static (Smoke, Smoke) {
    static RUNS: OnceLock<(Smoke, Smoke)> = OnceLock::new();
    RUNS.get_or_init(|| (run_smoke(), run_smoke()))
}

#[test]
fn c4_end_to_end_smoke_reproduction() {
    let smoke = &smoke_runs().0;
    assert!(
        smoke.clean_test_acc >= 95.0,
        "clean test accuracy {:.2}% below 95%",
        smoke.clean_test_acc
    );

    // Every per-attack store scores CA = 0% on the clean model, exactly.
    for store in smoke.dataset.attacks.values() {
        let ca = evaluate_accuracy(&smoke.clean, &store.as_labeled().unwrap()).unwrap();
        assert_eq!(ca, 0.0, "attack {} store is not zero-CA", store.spec.attack_id);
    }

    // Held-out BIM, 1-shot / 15-query: on the attacked queries the fine-tuned
    // defense beats the undefended model by ≥ 5 points.
    let detail = smoke
        .records
        .details
        .iter()
        .find(|d| d.attack_id == 14)
        .expect("BIM evaluated as the new attack");
    assert!(detail.steps > 0, "fine-tuning must actually run");
    let record = smoke.records.records.iter().find(|r| r.attack_id == 14).unwrap();
    assert_eq!(format!("{}", record.role), "new");
    assert!(
        record.ca_defended - record.ca_attacked >= 5.0,
        "defense gain {:.2} − {:.2} below 5 points",
        record.ca_defended,
        record.ca_attacked
    );
    assert!(record.dsr > 0.0);

    // The defense keeps clean accuracy within 5 points of the clean model.
    assert!(
        (smoke.records.cca_defended - smoke.dataset.cca).abs() <= 5.0,
        "defended CCA {:.2} vs clean {:.2}",
        smoke.records.cca_defended,
        smoke.dataset.cca
    );
}

// ---------------------------------------------------------------- criterion 5

fn toy_model() -> ModelState {
    // 4·2 weights + 2 biases = 10 parameters.
    build_model(&ModelSpec::new(Architecture::Linear, (1, 2, 2), 2), 1).unwrap()
}

fn toy_batch(n: usize, seed: u64) -> LabeledImages {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Array4::from_shape_fn((n, 1, 2, 2), |_| rng.gen::<f32>());
    let labels = (0..n).map(|i| i % 2).collect();
    LabeledImages::new(images, labels).unwrap()
}

fn flat_grad(model: &ModelState, batch: &LabeledImages, theta: &[f64]) -> Vec<f64> {
    let m = model.with_flat_params_f64(theta).unwrap();
    let (_, grads) = loss_and_grad(&m, batch, &LossKind::CrossEntropy).unwrap();
    flatten(&grads)
}

#[test]
fn c5_meta_epoch_matches_brute_force_reference() {
    let model = toy_model();
    assert!(model.total_params() <= 20);
    let params = MetaParams { beta: 0.05, inner_steps: 1, second_order: false, ..MetaParams::default() };
    let episodes: Vec<Episode> = (0..3)
        .map(|i| Episode {
            support: toy_batch(8, 300 + i),
            query: toy_batch(4, 400 + i),
            support_origin: Vec::new(),
            query_origin: Vec::new(),
            attacks_s: Vec::new(),
            attacks_q: Vec::new(),
        })
        .collect();
    let (sum_g, records) = meta_epoch(&model, &episodes, &params).unwrap();
    assert_eq!(records.len(), 3);

    // Straight-line reference: g_i = ∇L_Q(θ − β·∇L_S(θ)), summed.
    let theta = model.flat_params_f64();
    let mut expected = vec![0.0; theta.len()];
    for ep in &episodes {
        let gs = flat_grad(&model, &ep.support, &theta);
        let inner: Vec<f64> = theta.iter().zip(&gs).map(|(&t, &g)| t - params.beta * g).collect();
        let inner = model.with_flat_params_f64(&inner).unwrap().flat_params_f64();
        let gq = flat_grad(&model, &ep.query, &inner);
        for (e, g) in expected.iter_mut().zip(&gq) {
            *e += g;
        }
    }
    for (a, b) in sum_g.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn c5_analytic_quadratic_oracles() {
    // L(θ) = ½‖θ‖² so ∇L = θ; one inner step at β=0.01 gives θ′ = 0.99.
    let theta = inner_update_flat(&[1.0], &mut |t| Ok(t.to_vec()), 0.01, 1).unwrap();
    assert!((theta[0] - 0.99).abs() < 1e-9);

    // Same loss on support and query at β=0.1: θ′ = 0.9, and the exact
    // bilevel gradient is (1 − β)·θ′ = 0.81.
    let first =
        query_gradient_flat(&[1.0], &mut |t| Ok(t.to_vec()), &mut |t| Ok(t.to_vec()), 0.1, 1, false)
            .unwrap();
    assert!((first[0] - 0.9).abs() < 1e-9);
    let second =
        query_gradient_flat(&[1.0], &mut |t| Ok(t.to_vec()), &mut |t| Ok(t.to_vec()), 0.1, 1, true)
            .unwrap();
    assert!((second[0] - 0.81).abs() < 1e-9);
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn c6_dataset_invariants_on_smoke_store() {
    let smoke = &smoke_runs().0;
    let ds = &smoke.dataset;
    validate_dataset(ds).unwrap();

    for (&id, store) in &ds.attacks {
        // Zero-CA (already checked exactly in c4, re-stated here per store).
        let ca = evaluate_accuracy(&smoke.clean, &store.as_labeled().unwrap()).unwrap();
        assert_eq!(ca, 0.0);

        // Class balance.
        let counts: Vec<usize> = store.classes.iter().map(|c| c.len()).collect();
        assert!(counts.iter().all(|&c| c == counts[0]), "attack {id} unbalanced: {counts:?}");

        // 3:1:1 (±1) and a disjoint, complete partition per class.
        for (cls, ranges) in store.splits.iter().enumerate() {
            let c = counts[cls];
            let (tr, va, te) = (ranges.train.len(), ranges.val.len(), ranges.test.len());
            assert_eq!(tr + va + te, c);
            assert!((va as i64 - (c / 5) as i64).abs() <= 1);
            assert!((te as i64 - (c / 5) as i64).abs() <= 1);
            // Train takes the remainder, so it may sit up to 2 above 3c/5.
            assert!((tr as f64 - 0.6 * c as f64).abs() <= 2.0);
            let mut seen: Vec<usize> =
                ranges.train.iter().chain(&ranges.val).chain(&ranges.test).cloned().collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..c).collect::<Vec<_>>(), "attack {id} class {cls} not a partition");
        }

        // Exactly one role per attack.
        assert!(ds.role_of_attack(id).is_some());
    }

    // Role-disjointness across the whole store.
    let mut by_role: Vec<u32> = Role::ALL.iter().flat_map(|&r| ds.attacks_in_role(r)).collect();
    by_role.sort_unstable();
    let mut all: Vec<u32> = ds.attacks.keys().cloned().collect();
    all.sort_unstable();
    assert_eq!(by_role, all);

    // Save/load round-trips bitwise.
    let dir = tempfile::tempdir().unwrap();
    save_mad(ds, dir.path()).unwrap();
    let back = load_mad(dir.path()).unwrap();
    assert_eq!(back.cca.to_bits(), ds.cca.to_bits());
    assert_eq!(back.group_of, ds.group_of);
    for (&id, store) in &ds.attacks {
        let other = &back.attacks[&id];
        for (a, b) in store.classes.iter().zip(&other.classes) {
            assert_eq!(a.images, b.images);
        }
        for (a, b) in store.splits.iter().zip(&other.splits) {
            assert_eq!((&a.train, &a.val, &a.test), (&b.train, &b.val, &b.test));
        }
    }
    for (a, b) in ds.clean_pool.iter().zip(&back.clean_pool) {
        assert_eq!(a.images, b.images);
    }
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn c7_early_stopping_over_random_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7007);
    for case in 0..1000 {
        let patience = rng.gen_range(1..=5usize);
        let best_at = rng.gen_range(0..10usize);
        // Strictly decreasing down to a unique minimum, then only worse values.
        let min = rng.gen::<f64>();
        let mut losses = Vec::with_capacity(best_at + patience + 3);
        let mut v = min;
        for _ in 0..best_at + 1 {
            losses.push(v);
            v += 0.1 + rng.gen::<f64>();
        }
        losses.reverse();
        for _ in 0..patience + 2 {
            losses.push(min + 0.01 + rng.gen::<f64>());
        }
        let mut stopper = EarlyStopper::new(patience).unwrap();
        let mut stopped_at = None;
        for (i, &l) in losses.iter().enumerate() {
            if let Decision::Stop = stopper.observe(l) {
                stopped_at = Some(i);
                break;
            }
        }
        // Stop on the (p+1)-th observation after the best, i.e. 1-based
        // stop index = best_index + p + 1.
        let stop = stopped_at.unwrap_or_else(|| panic!("case {case}: never stopped"));
        assert_eq!(stop + 1, best_at + patience + 1, "case {case}");
        assert_eq!(stopper.best_index(), Some(best_at), "case {case}");
    }

    // Ties keep the earliest best.
    let mut stopper = EarlyStopper::new(3).unwrap();
    for l in [5.0, 1.0, 3.0, 1.0] {
        stopper.observe(l);
    }
    assert_eq!(stopper.best_index(), Some(1));
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn c8_smoke_pipeline_is_deterministic_up_to_wall_clock() {
    let (a, b) = smoke_runs();

    // Identical checkpoints, compared as serialized bytes.
    let dir = tempfile::tempdir().unwrap();
    for (name, ma, mb) in [("clean", &a.clean, &b.clean), ("best", &a.best, &b.best)] {
        let pa = dir.path().join(format!("{name}_a.ckpt"));
        let pb = dir.path().join(format!("{name}_b.ckpt"));
        save_checkpoint(ma, &pa).unwrap();
        save_checkpoint(mb, &pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap(), "{name} differs");
    }

    // Identical defense records except wall-clock OT (and the OT-bearing EDSR).
    assert_eq!(a.records.cca_defended.to_bits(), b.records.cca_defended.to_bits());
    assert_eq!(a.records.records.len(), b.records.records.len());
    for (ra, rb) in a.records.records.iter().zip(&b.records.records) {
        assert_eq!(ra.attack_id, rb.attack_id);
        assert_eq!(format!("{}", ra.role), format!("{}", rb.role));
        assert_eq!(ra.cca.to_bits(), rb.cca.to_bits());
        assert_eq!(ra.ca_attacked.to_bits(), rb.ca_attacked.to_bits());
        assert_eq!(ra.ca_defended.to_bits(), rb.ca_defended.to_bits());
        assert_eq!(ra.dsr.to_bits(), rb.dsr.to_bits());
    }
}

// A shared sanity check: the evaluation sampler honors role constraints.
#[test]
fn eval_sampler_rejects_meta_train_attacks() {
    let smoke = &smoke_runs().0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(sample_eval_task(&smoke.dataset, 13, 1, 5, &mut rng).is_err());
    assert!(sample_eval_task(&smoke.dataset, 14, 1, 5, &mut rng).is_ok());
}

// Clean-split accessor stays consistent with the stored pool.
#[test]
fn clean_split_partitions_pool() {
    let smoke = &smoke_runs().0;
    let ds = &smoke.dataset;
    let total: usize = ds.clean_pool.iter().map(|c| c.len()).sum();
    let parts: usize = [Split::Train, Split::Val, Split::Test]
        .iter()
        .map(|&s| ds.clean_split(s).unwrap().len())
        .sum();
    assert_eq!(parts, total);
}
