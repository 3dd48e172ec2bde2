use std::collections::HashSet;

use neicl::autodiff::Tensor;
use neicl::harness::{
    agem_project, mbpa_infer, run_experiment, EpisodicMemory, Framework, Learner, MbpaConfig, ModelVariant,
    Projection, RunOutput, TrainConfig,
};
use neicl::neighbor::{NeighborConfig, SelectionMode};
use neicl::tasks::{generate_synthetic_suite, Suite, SuiteConfig};
use neicl::transformer::{ModelConfig, PretrainedModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn suite_config(n_tasks: usize) -> SuiteConfig {
    SuiteConfig {
        n_tasks,
        classes_per_task: 2,
        signal_per_class: 4,
        train_per_class: 12,
        dev_per_class: 6,
        length: 8,
        signal_min: 2,
        signal_max: 3,
        vocab_size: 60,
        ..SuiteConfig::default()
    }
}

fn setup(n_tasks: usize) -> (Suite, PretrainedModel) {
    let sc = suite_config(n_tasks);
    let suite = generate_synthetic_suite(&sc, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mc = ModelConfig {
        d_model: 8,
        n_layers: 4,
        n_heads: 2,
        max_len: 32,
        ffn_mult: 2,
        ..ModelConfig::default()
    };
    let mut base = PretrainedModel::init(mc, sc.vocabulary().unwrap(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    base.freeze();
    (suite, base)
}

fn train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 5e-3,
        epochs: 1,
        batch_size: 4,
        neighbor: NeighborConfig {
            k: 3,
            top_k: 10,
            ..NeighborConfig::default()
        },
        replay_rate: 0.25,
        replay_batch: 4,
        agem_batch: 4,
        mbpa: MbpaConfig {
            retrieve: 4,
            local_steps: 2,
            eval_per_class: 0,
            ..MbpaConfig::default()
        },
        recall_k: 5,
        ..TrainConfig::default()
    }
}

fn run(suite: &Suite, base: &PretrainedModel, v: ModelVariant, f: Framework, seed: u64, cfg: &TrainConfig) -> RunOutput {
    run_experiment(suite, base, v, f, seed, cfg).unwrap()
}

fn values(out: &RunOutput) -> Vec<(String, Vec<f64>)> {
    out.learner
        .model
        .params
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.data().to_vec()))
        .collect()
}

fn changed(out: &RunOutput, base: &PretrainedModel) -> HashSet<String> {
    let mut set = HashSet::new();
    for (_, p) in out.learner.model.params.iter() {
        let before = base.params.id(&p.name).map(|id| base.params.value(id).data().to_vec());
        match before {
            Some(b) if b == p.value.data() => {}
            Some(_) => {
                set.insert(p.name.clone());
            }
            None => {
                set.insert(p.name.clone());
            }
        }
    }
    set
}

#[test]
fn trainable_sets_per_variant() {
    let (suite, base) = setup(2);
    let cfg = train_config();
    let names = |v: ModelVariant| -> HashSet<String> {
        let l = Learner::new(
            &base,
            v,
            &suite,
            cfg.formulation,
            &cfg.neighbor,
            cfg.objective.clone(),
            0.1,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        l.trainable_ids().into_iter().map(|id| l.model.params.get(id).name.clone()).collect()
    };
    assert_eq!(names(ModelVariant::Pretrained), HashSet::from(["classifier.weight".to_string()]));
    let ft = names(ModelVariant::Ft);
    assert_eq!(ft.len(), base.params.len() + 1);
    let nei = names(ModelVariant::NeiAttn);
    let mut expected: HashSet<String> = ["K_theta", "V_theta", "K_b", "V_b"]
        .iter()
        .flat_map(|k| (0..2).map(move |h| format!("layer2.neigh.head{h}.{k}")))
        .collect();
    expected.insert("classifier.weight".into());
    assert_eq!(nei, expected);
    assert_eq!(names(ModelVariant::NeiReg), expected);
}

#[test]
fn prefix_cache_matches_full_forward() {
    let (suite, base) = setup(2);
    let cfg = train_config();
    let l = Learner::new(
        &base,
        ModelVariant::NeiAttn,
        &suite,
        cfg.formulation,
        &cfg.neighbor,
        cfg.objective.clone(),
        0.1,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    for ex in suite.tasks[0].train.iter().take(5) {
        let ids = l.input(ex).unwrap().ids;
        for _ in 0..2 {
            let mut g1 = neicl::autodiff::Graph::new();
            let a = l.forward(&mut g1, &ids, SelectionMode::Eval, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let mut g2 = neicl::autodiff::Graph::new();
            let b = l.model.forward(&mut g2, &ids, SelectionMode::Eval, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert_eq!(g1.value(a.last()), g2.value(b.last()));
        }
    }
}

#[test]
fn single_task_has_zero_forgetting() {
    let (suite, base) = setup(1);
    let out = run(&suite, &base, ModelVariant::Pretrained, Framework::Vanilla, 0, &train_config());
    assert_eq!(out.record.accuracy.tasks(), 1);
    assert_eq!(out.record.forget, Some(0.0));
}

#[test]
fn vanilla_fills_every_row_and_keeps_base() {
    let (suite, base) = setup(3);
    let out = run(&suite, &base, ModelVariant::NeiAttn, Framework::Vanilla, 1, &train_config());
    let m = &out.record.accuracy;
    assert!(m.rows.iter().flatten().all(|v| v.is_some_and(|a| (0.0..=1.0).contains(&a))));
    assert_eq!(out.checkpoints.len(), 3);
    assert_eq!(
        out.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(),
        out.record.task_order
    );
    let expected: HashSet<String> = out
        .learner
        .trainable_ids()
        .into_iter()
        .map(|id| out.learner.model.params.get(id).name.clone())
        .collect();
    assert_eq!(changed(&out, &base), expected);
    assert!(out.record.first_task_drift.is_some());
    assert!((0.0..=1.0).contains(&out.record.recall));
}

#[test]
fn identical_seeds_give_identical_records() {
    let (suite, base) = setup(2);
    let cfg = train_config();
    let a = run(&suite, &base, ModelVariant::NeiReg, Framework::Er, 4, &cfg);
    let b = run(&suite, &base, ModelVariant::NeiReg, Framework::Er, 4, &cfg);
    let strip = |o: &RunOutput| {
        let mut r = o.record.clone();
        r.wall_clock_secs = 0.0;
        r
    };
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(values(&a), values(&b));
}

#[test]
fn seeds_permute_task_order() {
    let (suite, base) = setup(5);
    let cfg = TrainConfig {
        epochs: 0,
        ..train_config()
    };
    let orders: HashSet<Vec<usize>> = (0..5)
        .map(|s| run(&suite, &base, ModelVariant::Pretrained, Framework::Vanilla, s, &cfg).record.task_order)
        .collect();
    assert!(orders.len() >= 2);
    for o in &orders {
        let mut sorted = o.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    }
}

#[test]
fn replay_rate_zero_matches_vanilla() {
    let (suite, base) = setup(2);
    let cfg = TrainConfig {
        replay_rate: 0.0,
        ..train_config()
    };
    let er = run(&suite, &base, ModelVariant::NeiAttn, Framework::Er, 2, &cfg);
    let van = run(&suite, &base, ModelVariant::NeiAttn, Framework::Vanilla, 2, &cfg);
    assert_eq!(values(&er), values(&van));
    assert_eq!(er.record.accuracy, van.record.accuracy);
    assert_eq!(er.record.counters.replays, 0);
}

#[test]
fn er_buffer_holds_every_example_and_replays_on_schedule() {
    let (suite, base) = setup(3);
    let cfg = train_config();
    let out = run(&suite, &base, ModelVariant::Pretrained, Framework::Er, 0, &cfg);
    let total: usize = suite.tasks.iter().map(|t| t.train.len()).sum();
    let c = &out.record.counters;
    assert_eq!(c.buffer_size, total);
    assert_eq!(c.replays, c.steps / cfg.replay_interval());
    assert_eq!(c.replay_skips, 0);
}

#[test]
fn agem_projects_from_second_task() {
    let (suite, base) = setup(3);
    let out = run(&suite, &base, ModelVariant::Ft, Framework::Agem, 0, &train_config());
    let c = &out.record.counters;
    assert!(c.agem_projections <= c.steps);
    assert_eq!(c.buffer_size, suite.tasks.iter().map(|t| t.train.len()).sum::<usize>());
}

#[test]
fn mtl_with_one_task_equals_vanilla() {
    let (suite, base) = setup(1);
    let cfg = train_config();
    let mtl = run(&suite, &base, ModelVariant::NeiAttn, Framework::Mtl, 6, &cfg);
    let van = run(&suite, &base, ModelVariant::NeiAttn, Framework::Vanilla, 6, &cfg);
    assert_eq!(values(&mtl), values(&van));
    assert_eq!(mtl.record.acc, van.record.acc);
    assert_eq!(mtl.record.forget, None);
}

#[test]
fn mtl_reports_only_final_row() {
    let (suite, base) = setup(3);
    let out = run(&suite, &base, ModelVariant::Pretrained, Framework::Mtl, 0, &train_config());
    let m = &out.record.accuracy;
    assert!(m.rows[0].iter().all(Option::is_none));
    assert!(m.rows[2].iter().all(Option::is_some));
}

#[test]
fn mbpa_restores_parameters() {
    let (suite, base) = setup(3);
    let cfg = train_config();
    let mbpa = run(&suite, &base, ModelVariant::NeiAttn, Framework::Mbpa, 3, &cfg);
    let van = run(&suite, &base, ModelVariant::NeiAttn, Framework::Vanilla, 3, &cfg);
    assert_eq!(values(&mbpa), values(&van));
    let plain = mbpa.record.mbpa_unadapted.as_ref().unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(plain.get(i, j), if j <= i { van.record.accuracy.get(i, j) } else { None });
        }
    }
    assert!(mbpa.record.counters.mbpa_queries > 0);
}

#[test]
fn mbpa_final_row_only() {
    let (suite, base) = setup(3);
    let mut cfg = train_config();
    let full = run(&suite, &base, ModelVariant::NeiAttn, Framework::Mbpa, 1, &cfg);
    cfg.mbpa.final_row_only = true;
    let last = run(&suite, &base, ModelVariant::NeiAttn, Framework::Mbpa, 1, &cfg);
    assert_eq!(last.record.forget, None);
    assert!(full.record.forget.is_some());
    assert!(last.record.accuracy.rows[..2].iter().flatten().all(Option::is_none));
    assert!(last.record.accuracy.rows[2].iter().all(Option::is_some));
    assert_eq!(last.record.counters.mbpa_queries * 2, full.record.counters.mbpa_queries);
}

#[test]
fn mbpa_without_local_steps_is_unadapted() {
    let (suite, base) = setup(2);
    let mut cfg = train_config();
    cfg.mbpa.local_steps = 0;
    let out = run(&suite, &base, ModelVariant::Pretrained, Framework::Mbpa, 0, &cfg);
    assert_eq!(Some(&out.record.accuracy), out.record.mbpa_unadapted.as_ref());
}

#[test]
fn mbpa_memorizes_a_lone_entry() {
    let (suite, base) = setup(1);
    let cfg = train_config();
    let mut learner = Learner::new(
        &base,
        ModelVariant::Ft,
        &suite,
        cfg.formulation,
        &cfg.neighbor,
        cfg.objective.clone(),
        0.1,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let before: Vec<Tensor> = learner.model.params.iter().map(|(_, p)| p.value.clone()).collect();
    let mbpa = MbpaConfig {
        retrieve: 1,
        local_steps: 50,
        local_lr: Some(0.5),
        drift_penalty: 0.0,
        eval_per_class: 0,
        final_row_only: false,
    };
    for q in suite.tasks[0].dev.iter().take(6) {
        let mut wrong = q.clone();
        let classes = &suite.tasks[0].descriptor.classes;
        wrong.y = *classes.iter().find(|&&c| c != q.y).unwrap();
        for target in [q, &wrong] {
            let mut memory = EpisodicMemory::new();
            memory.insert(learner.representation(target).unwrap(), target.clone());
            let (adapted, _) =
                mbpa_infer(&mut learner, target, &memory, &mbpa, 1e-3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(adapted, target.y);
        }
    }
    let after: Vec<Tensor> = learner.model.params.iter().map(|(_, p)| p.value.clone()).collect();
    assert_eq!(before, after);
}

#[test]
fn probing_leaves_encoder_untouched() {
    let (suite, base) = setup(2);
    let mut cfg = train_config();
    cfg.probe_epochs = 10;
    let out = run(&suite, &base, ModelVariant::Pretrained, Framework::Probing, 0, &cfg);
    for (_, p) in base.params.iter() {
        let id = out.learner.model.params.id(&p.name).unwrap();
        assert_eq!(out.learner.model.params.value(id), &p.value);
    }
    let last = out.record.accuracy.final_row().unwrap();
    assert!(last.iter().all(|a| (0.0..=1.0).contains(a)));
    let names: Vec<String> = out
        .learner
        .trainable_ids()
        .into_iter()
        .map(|id| out.learner.model.params.get(id).name.clone())
        .collect();
    assert_eq!(names, vec!["classifier.weight".to_string()]);
}

#[test]
fn divergence_aborts() {
    let (suite, base) = setup(1);
    let cfg = TrainConfig {
        learning_rate: f64::MAX,
        epochs: 3,
        ..train_config()
    };
    match run_experiment(&suite, &base, ModelVariant::Ft, Framework::Vanilla, 0, &cfg) {
        Err(neicl::Error::Diverged(_)) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("expected divergence"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn agem_projection_removes_conflict(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, r) = loop {
            let g: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            if g.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
                break (g, r);
            }
        };
        let mut p = g.clone();
        prop_assert_eq!(agem_project(&mut p, &r), Projection::Projected);
        let dot: f64 = p.iter().zip(&r).map(|(a, b)| a * b).sum();
        prop_assert!(dot.abs() <= 1e-12);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(norm(&p) <= norm(&g));
    }
}
