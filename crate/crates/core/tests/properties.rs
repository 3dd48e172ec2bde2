use std::collections::HashSet;

use neicl::autodiff::{Graph, Tensor};
use neicl::harness::{Framework, ModelVariant, ReplayBuffer};
use neicl::runner::ExperimentConfig;
use neicl::tasks::{format_input, generate_synthetic_suite, Formulation, LabeledExample, SuiteConfig};
use neicl::transformer::Vocabulary;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn formulation() -> impl Strategy<Value = Formulation> {
    prop_oneof![Just(Formulation::A), Just(Formulation::B), Just(Formulation::C)]
}

fn small_suite() -> impl Strategy<Value = (SuiteConfig, u64)> {
    (1..4usize, 1..4usize, 1..4usize, 4..10usize, any::<u64>()).prop_map(|(t, p, s, len, seed)| {
        let cfg = SuiteConfig {
            n_tasks: t,
            classes_per_task: p,
            signal_per_class: s,
            train_per_class: 3,
            dev_per_class: 2,
            length: len,
            signal_min: 1,
            signal_max: 2,
            vocab_size: 80,
            ..SuiteConfig::default()
        };
        (cfg, seed)
    })
}

proptest! {
    #[test]
    fn masked_softmax_rows_are_distributions(
        rows in 1..6usize,
        cols in 1..12usize,
        seed in any::<u64>(),
        mask_bits in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor::randn(&[rows, cols], 3.0, &mut rng);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            // keep column 0 open so no row is fully masked
            if i % cols != 0 && mask_bits >> (i % 64) & 1 == 1 {
                *v = f64::NEG_INFINITY;
            }
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.softmax(xv).unwrap();
        for (yr, xr) in g.value(y).data().chunks(cols).zip(x.data().chunks(cols)) {
            prop_assert!((yr.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (p, l) in yr.iter().zip(xr) {
                prop_assert!(*p >= 0.0);
                if *l == f64::NEG_INFINITY {
                    prop_assert_eq!(*p, 0.0);
                }
            }
        }
    }

    #[test]
    fn cross_entropy_ignores_logit_shift(
        logits in prop::collection::vec(-5.0..5.0f64, 2..8),
        shift in -50.0..50.0f64,
        pick in any::<prop::sample::Index>(),
    ) {
        let n = logits.len();
        let target = pick.index(n);
        let ce = |shift: f64| {
            let mut g = Graph::new();
            let row = Tensor::matrix(1, n, logits.iter().map(|v| v + shift).collect()).unwrap();
            let v = g.constant(row);
            let l = g.cross_entropy(v, &[target]).unwrap();
            let s = g.sum(l).unwrap();
            g.value(s).item()
        };
        prop_assert!((ce(0.0) - ce(shift)).abs() < 1e-10);
    }

    #[test]
    fn layer_norm_of_constant_row_is_bias(c in -100.0..100.0f64, bias in prop::collection::vec(-1.0..1.0f64, 4)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 4], c));
        let gain = g.constant(Tensor::vector(vec![1.5; 4]));
        let b = g.constant(Tensor::vector(bias.clone()));
        let y = g.layer_norm(x, gain, b).unwrap();
        for row in g.value(y).data().chunks(4) {
            for (y, b) in row.iter().zip(&bias) {
                prop_assert!((y - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn formatting_recovers_sentences((cfg, seed) in small_suite(), f in formulation()) {
        let suite = generate_synthetic_suite(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let vocab = cfg.vocabulary().unwrap();
        for task in &suite.tasks {
            for ex in task.train.iter().chain(&task.dev) {
                let input = format_input(ex, &task.descriptor, f, &vocab, 64).unwrap();
                input.check_prediction_token().unwrap();
                prop_assert_eq!(input.sentences(), (ex.s1.clone(), ex.s2.clone()));
            }
        }
    }

    #[test]
    fn generated_suites_keep_id_sets_apart((cfg, seed) in small_suite()) {
        let suite = generate_synthetic_suite(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let vocab: Vocabulary = cfg.vocabulary().unwrap();
        let specials: HashSet<usize> = [vocab.pad, vocab.cls, vocab.sep, vocab.mask, vocab.or, vocab.of].into();
        let labels: HashSet<usize> = suite.tasks.iter().flat_map(|t| t.descriptor.label_tokens.clone()).collect();
        prop_assert_eq!(labels.len(), cfg.n_classes());
        let mut signal_owner = std::collections::HashMap::new();
        for class in 0..cfg.n_classes() {
            for s in cfg.signal_tokens(class) {
                prop_assert!(!specials.contains(&s) && !labels.contains(&s));
                prop_assert!(signal_owner.insert(s, class).is_none());
            }
        }
        for task in &suite.tasks {
            for ex in task.train.iter().chain(&task.dev) {
                prop_assert!(!ex.task_tokens.is_empty());
                for w in &ex.task_tokens {
                    prop_assert!(ex.s1.contains(w) || ex.s2.contains(w));
                    prop_assert_eq!(signal_owner.get(w), Some(&ex.y));
                }
            }
        }
    }

    #[test]
    fn replay_buffer_holds_each_example_once(inserts in prop::collection::vec((0..3usize, 0..20usize), 0..80)) {
        let mut buf = ReplayBuffer::new();
        let distinct: HashSet<(usize, usize)> = inserts.iter().copied().collect();
        for &(task, idx) in &inserts {
            let ex = LabeledExample { s1: vec![idx], s2: vec![], y: 0, task, task_tokens: vec![idx] };
            buf.insert(task, idx, &ex);
        }
        prop_assert_eq!(buf.len(), distinct.len());
    }

    #[test]
    fn experiment_config_roundtrips(
        seeds in prop::collection::vec(0..1000u64, 1..6),
        jobs in 1..8usize,
        lambda in 0.0..1.0f64,
        lr in 1e-5..1e-1f64,
        f in formulation(),
        use_neireg: bool,
    ) {
        let mut cfg = ExperimentConfig { seeds, jobs, ..ExperimentConfig::default() };
        cfg.train.neighbor.lambda = lambda;
        cfg.train.learning_rate = lr;
        cfg.train.formulation = f;
        if use_neireg {
            cfg.models.push(ModelVariant::NeiReg);
            cfg.frameworks.push(Framework::Agem);
        }
        let text = cfg.to_toml().unwrap();
        prop_assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }
}
