mod common;

use fesel::harness::{pearson, ExperimentConfig};
use fesel::model::{empirical_nll, forward, Activation, LabeledDataset, ModelSpec, OutputKind, Predictive, Side, Targets};
use fesel::numeric::rng_from;
use fesel::pretrain::{sgd_optimize, Checkpoint, PretrainConfig};
use fesel::selection::{beta0, rank, SelectionScore};
use fesel::surfaces::{random_spd, QuadraticLoss};
use fesel::synth::MetaSplit;
use fesel::transfer::stratified_split;
use proptest::prelude::*;

fn classifier(seed: u64, scale: f64) -> (ModelSpec, fesel::model::ParamVector, Vec<f64>) {
    let mut rng = rng_from(seed, &[1]);
    let spec = ModelSpec::new(3, vec![5, 4], 4, Activation::Tanh, OutputKind::CategoricalSoftmax).unwrap();
    let mut p = spec.init_params(&mut rng);
    for v in &mut p.values {
        *v *= scale;
    }
    use rand::Rng;
    let x: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
    (spec, p, x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one(seed in any::<u64>(), scale in 0.01f64..200.0) {
        let (spec, p, x) = classifier(seed, scale);
        let Predictive::Categorical(probs) = forward(&spec, &p, &x).unwrap() else { panic!("expected categorical") };
        let s: f64 = probs.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
        prop_assert!(probs.iter().all(|q| (0.0..=1.0).contains(q)));
    }

    #[test]
    fn gradient_matches_central_difference(seed in any::<u64>()) {
        let f = common::fixture(seed);
        let err = common::max_fd_rel_error(&f, 1e-6, 1e-4);
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn nll_is_permutation_invariant(seed in any::<u64>()) {
        let f = common::fixture(seed);
        let n = f.data.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.rotate_left(n / 3);
        let shuffled = f.data.subset(&order);
        let a = empirical_nll(&f.spec, &f.params, &f.data).unwrap();
        let b = empirical_nll(&f.spec, &f.params, &shuffled).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn head_swap_and_restore_is_bitwise(seed in any::<u64>(), new_head in 1usize..6) {
        let f = common::fixture(seed);
        let x = f.data.x(0).to_vec();
        let before = forward(&f.spec, &f.params, &x).unwrap();
        let other = f.spec.with_head_dim(new_head);
        let mut rng = rng_from(seed, &[2]);
        let swapped = f.params.reinit_head(&other, &mut rng).unwrap();
        prop_assert_eq!(swapped.backbone(), f.params.backbone());
        prop_assert_eq!(swapped.len(), other.param_count());
        let restored = swapped.with_head(f.params.head());
        prop_assert_eq!(&restored.values, &f.params.values);
        prop_assert_eq!(forward(&f.spec, &restored, &x).unwrap(), before);
    }

    #[test]
    fn param_count_matches_layer_sizes(input in 1usize..6, widths in proptest::collection::vec(1usize..8, 0..4), head in 1usize..6) {
        let spec = ModelSpec::new(input, widths.clone(), head, Activation::Relu, OutputKind::CategoricalSoftmax).unwrap();
        let mut fan_in = input;
        let mut total = 0;
        for &w in widths.iter().chain(std::iter::once(&head)) {
            total += (fan_in + 1) * w;
            fan_in = w;
        }
        prop_assert_eq!(spec.param_count(), total);
        prop_assert_eq!(spec.param_count() - spec.backbone_boundary(), (fan_in_of_head(input, &widths) + 1) * head);
    }

    #[test]
    fn meta_split_is_disjoint(total in 3usize..40, seed in any::<u64>(), frac in 0.0f64..1.0) {
        let max_down = (total - 1) / 2;
        let down = 1 + ((max_down - 1) as f64 * frac) as usize;
        let pre = total - down;
        let split = MetaSplit::random(total, pre, down, seed).unwrap();
        prop_assert_eq!(split.pretrain_class_ids.len(), pre);
        prop_assert_eq!(split.downstream_class_ids.len(), down);
        for c in &split.downstream_class_ids {
            prop_assert!(!split.pretrain_class_ids.contains(c));
            prop_assert!(*c < total);
        }
        prop_assert!(split.pretrain_class_ids.iter().all(|c| *c < total));
    }

    #[test]
    fn stratified_split_partitions(seed in any::<u64>(), per_class in 2usize..20, frac in 0.1f64..0.9) {
        let rows: Vec<Vec<f64>> = (0..3 * per_class).map(|i| vec![i as f64]).collect();
        let labels: Vec<usize> = (0..3 * per_class).map(|i| i % 3).collect();
        let data = LabeledDataset::from_rows(&rows, Targets::Classes(labels), Side::Downstream).unwrap();
        let (train, test) = stratified_split(&data, frac, seed).unwrap();
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..3 * per_class).collect::<Vec<_>>());
    }

    #[test]
    fn rank_is_affine_invariant(
        raw in proptest::collection::vec((0.0f64..10.0, 0.0f64..10.0), 1..12),
        a in 0.01f64..100.0,
        b in -100.0f64..100.0,
    ) {
        let scores: Vec<SelectionScore> = raw
            .iter()
            .enumerate()
            .map(|(i, &(l, c))| SelectionScore::from_terms(format!("c{i}"), i, l, c, 1.0, 100))
            .collect();
        let mapped: Vec<SelectionScore> = scores
            .iter()
            .map(|s| SelectionScore {
                loss_term: a * s.loss_term + b,
                complexity_term: a * s.complexity_term,
                score: a * s.score + b,
                ..s.clone()
            })
            .collect();
        let ids = |v: Vec<SelectionScore>| v.into_iter().map(|s| s.checkpoint_id).collect::<Vec<_>>();
        let r0 = ids(rank(&scores).unwrap());
        let r1 = ids(rank(&mapped).unwrap());
        prop_assert_eq!(&r0[0], &r1[0]);
        if distinct_gaps(&scores) {
            prop_assert_eq!(r0, r1);
        }
    }

    #[test]
    fn beta0_monotone(m_const in 1.0f64..10.0, m in 3usize..100_000, n in 3usize..100_000, bump in 1.01f64..3.0) {
        let b = beta0(m_const, m, n).unwrap();
        prop_assert!(beta0(m_const * bump, m, n).unwrap() > b);
        let m2 = ((m as f64) * bump).ceil() as usize + 1;
        let n2 = ((n as f64) * bump).ceil() as usize + 1;
        prop_assert!(beta0(m_const, m2, n).unwrap() > b);
        prop_assert!(beta0(m_const, m, n2).unwrap() < b);
    }

    #[test]
    fn pearson_symmetric_and_affine_invariant(
        pts in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40),
        a in 0.1f64..10.0,
        b in -50.0f64..50.0,
    ) {
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let Ok(r) = pearson(&xs, &ys) else { return Ok(()) };
        prop_assert!(r.abs() <= 1.0);
        prop_assert!((r - pearson(&ys, &xs).unwrap()).abs() <= 1e-15);
        let xm: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        let ym: Vec<f64> = ys.iter().map(|y| a * y - b).collect();
        prop_assert!((r - pearson(&xm, &ys).unwrap()).abs() <= 1e-12);
        prop_assert!((r - pearson(&xs, &ym).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn config_round_trips_through_toml(
        values in proptest::collection::vec(1e-4f64..1.0, 1..4),
        seeds in proptest::collection::vec(any::<u32>(), 1..4),
        step in 1e-7f64..1e-3,
        chains in 1usize..8,
    ) {
        let mut c = ExperimentConfig::load(std::path::Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml"))).unwrap();
        c.sweep.values = values;
        c.sweep.seeds = seeds.into_iter().map(u64::from).collect();
        c.sgld.step_size = step;
        c.sgld.chains = chains;
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn checkpoint_round_trips_bitwise(seed in any::<u64>()) {
        let f = common::fixture(seed);
        let ck = Checkpoint {
            spec: f.spec.clone(),
            params: f.params.clone(),
            step: 7,
            config: PretrainConfig::default(),
            train_loss: empirical_nll(&f.spec, &f.params, &f.data).unwrap(),
            id: format!("seed{seed}-step7"),
        };
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.params.values), bits(&ck.params.values));
        prop_assert_eq!(back.params.backbone_len(), ck.params.backbone_len());
        prop_assert_eq!(back.train_loss.to_bits(), ck.train_loss.to_bits());
    }
}

fn fan_in_of_head(input: usize, widths: &[usize]) -> usize {
    widths.last().copied().unwrap_or(input)
}

fn distinct_gaps(scores: &[SelectionScore]) -> bool {
    let mut s: Vec<f64> = scores.iter().map(|s| s.score).collect();
    s.sort_by(f64::total_cmp);
    s.windows(2).all(|w| w[1] - w[0] > 1e-6 * w[1].abs().max(1.0))
}

#[test]
fn full_batch_gd_is_monotone_below_inverse_curvature() {
    for seed in 0..10 {
        let a = random_spd(3, 0.5, 4.0, seed);
        let loss = QuadraticLoss::new(a, vec![0.3, -0.2, 1.0], 1).unwrap();
        let cfg = PretrainConfig { learning_rate: 0.2, batch_size: 1, steps: 300, checkpoint_every: 300, ..PretrainConfig::default() };
        let mut prev = f64::INFINITY;
        sgd_optimize(&loss, vec![2.0, -1.0, 0.5], &cfg, |_, w| {
            let v = loss.eval(w);
            assert!(v <= prev + 1e-12, "seed {seed}: {v} > {prev}");
            prev = v;
            Ok(())
        })
        .unwrap();
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"));
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 2);
}
