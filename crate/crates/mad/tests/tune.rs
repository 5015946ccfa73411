//! Scratch tuning harness (not part of the suite; run with --ignored).

use std::collections::BTreeMap;

use mad::attacks::{registry_entry, AttackSpec};
use mad::cli::evaluate_defense;
use mad::data::synthetic_digits;
use mad::mad_dataset::{assign_groups, filter_and_balance, generate_mad, split_3_1_1, Role, SplitAssignment};
use mad::meta_at::{meta_train, MetaParams};
use mad::model::{build_model, evaluate_accuracy, train_clean, Architecture, ModelSpec, Optimizer, TrainConfig};

fn make_spec(attack_id: u32, epsilon: f64, step_size: f64, iterations: usize, extras: &[(&str, serde_json::Value)]) -> AttackSpec {
    let entry = registry_entry(attack_id).unwrap();
    let mut extra = BTreeMap::new();
    for (k, v) in extras {
        extra.insert(k.to_string(), v.clone());
    }
    AttackSpec { attack_id, name: entry.name.to_string(), norm: entry.norm, knowledge: entry.knowledge, epsilon, step_size, iterations, extra }
}

#[test]
#[ignore]
fn tune_smoke() {
    let spec = ModelSpec::new(Architecture::SmallCnn, (1, 28, 28), 10);
    let init = build_model(&spec, 7).unwrap();
    let train_set = synthetic_digits(2000, (1, 28, 28), 11);
    let test_set = synthetic_digits(1500, (1, 28, 28), 12);
    let cfg = TrainConfig { epochs: 5, batch_size: 32, learning_rate: 0.1, optimizer: Optimizer::Sgd, momentum: 0.9, seed: 3 };
    let clean = train_clean(&init, &train_set, &cfg).unwrap();
    println!("clean test acc: {:.2}", evaluate_accuracy(&clean, &test_set).unwrap());

    let suite = vec![
        make_spec(13, 0.3, 0.3, 1, &[]),
        make_spec(18, 0.3, 0.075, 10, &[("random_start", serde_json::json!(true))]),
        make_spec(16, 0.3, 0.075, 10, &[("momentum_decay", serde_json::json!(1.0))]),
        make_spec(21, 0.3, 0.15, 1, &[("init_magnitude", serde_json::json!(0.15))]),
        make_spec(14, 0.3, 0.075, 10, &[]),
    ];
    let ds = generate_mad(&clean, &test_set, &suite, "smoke", "acc4", 64, 21).unwrap();
    let ds = filter_and_balance(ds, 5, 22).unwrap();
    let ds = split_3_1_1(ds, 23).unwrap();
    let grouping: BTreeMap<u32, u32> = [(13u32, 1u32), (16, 2), (18, 3), (21, 4), (14, 9)].into_iter().collect();
    let mut role_of_group = BTreeMap::new();
    role_of_group.insert(Role::MetaTrain, vec![1, 2, 3]);
    role_of_group.insert(Role::MetaVal, vec![4]);
    role_of_group.insert(Role::TestNew, vec![9]);
    let ds = assign_groups(ds, &grouping, &SplitAssignment { role_of_group }).unwrap();
    println!("min class counts: {:?}", ds.attacks.iter().map(|(id, s)| (*id, s.min_class_count())).collect::<Vec<_>>());

    for (beta, lambda_, ft, pat) in [(0.02f64, 0.05f64, 500usize, 25usize), (0.03, 0.05, 500, 25), (0.02, 0.05, 2000, 50)] {
        let params = MetaParams {
            ways: 2, query_ways: 1, shot_k: 5, query_m: 3,
            episodes_per_epoch: 20, epochs: 5,
            test_shot_k: 1, test_query_m: 15, patience: pat,
            beta, lambda_, finetune_steps: ft,
            ..MetaParams::default()
        };
        let out = meta_train(&clean, &ds, &params, 31).unwrap();
        let recs = evaluate_defense(&ds, &out.best, &clean, &params, "meta_at", 41).unwrap();
        let d = &recs.details[0];
        let r = &recs.records[0];
        println!(
            "beta={beta} lambda={lambda_} ft={ft}: ca_before={:.2} ca_after={:.2} steps={} ca_attacked={:.2} ca_defended={:.2} cca_def={:.2}",
            d.ca_before, d.ca_after, d.steps, r.ca_attacked, r.ca_defended, recs.cca_defended
        );
    }
}
