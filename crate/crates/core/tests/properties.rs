use std::collections::HashSet;

use guide_core::curriculum::{base_mask, corrupt, pixel_probs, soft_target, NoiseSchedule, StageSampler};
use guide_core::metrics::{auroc, mutual_info};
use guide_core::nn::{Activation, Dense};
use guide_core::saliency::{eligible_layers, layer_mass, lrp, lrp_batch, weight_map, MassAccumulator, Stabilizer, WeightMap};
use guide_core::{split, synth_blobs, BlobSpec, Layer, Model, SplitSizes, SplitSpec, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Flatten then tanh dense layers; the first width is the flattened input.
fn mlp(seed: u64, input: &[usize], widths: &[usize], bias: f64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = vec![Layer::Flatten];
    for pair in widths.windows(2) {
        let w = (0..pair[0] * pair[1]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = (0..pair[1]).map(|_| rng.random_range(-bias..=bias)).collect();
        layers.push(Layer::Dense(
            Dense::new(Tensor::new(vec![pair[0], pair[1]], w).unwrap(), Tensor::new(vec![pair[1]], b).unwrap()).unwrap(),
        ));
        layers.push(Layer::Activation(Activation::Tanh));
    }
    layers.pop();
    let mut m = Model::new(input.to_vec(), layers).unwrap();
    m.freeze();
    m
}

fn grey_map(values: Vec<f64>, side: usize) -> WeightMap {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let map: Vec<f64> = values.iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect();
    let mean = map.iter().sum::<f64>() / map.len() as f64;
    WeightMap { map: Tensor::new(vec![side, side], map).unwrap(), mean }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_the_dataset(per_class in 3usize..12, k in 2usize..5, seed in any::<u64>(), stratified in any::<bool>()) {
        let ds = synth_blobs(seed, per_class, k, 6, &BlobSpec::default()).unwrap();
        let n = ds.len();
        let counts = [n - 2 * k, k, k];
        let spec = SplitSpec { sizes: SplitSizes::Counts(counts), stratified, seed };
        let (a, b, c) = split(&ds, &spec).unwrap();
        prop_assert_eq!([a.len(), b.len(), c.len()], counts);
        let rows: HashSet<Vec<u64>> = [&a, &b, &c]
            .iter()
            .flat_map(|d| (0..d.len()).map(|i| d.images.row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>())
            .collect();
        prop_assert_eq!(rows.len(), n);
        let again = split(&ds, &spec).unwrap();
        prop_assert_eq!(again.0.labels, a.labels);
    }

    #[test]
    fn pixel_probs_hit_the_budget(values in prop::collection::vec(0.0f64..1.0, 16), s in 0.0f64..=1.0) {
        let wm = grey_map(values, 4);
        let p = pixel_probs(&wm, s).unwrap();
        prop_assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
        if wm.mean > 0.0 {
            let mean = p.data().iter().sum::<f64>() / 16.0;
            prop_assert!((mean - s).abs() < 1e-12, "mean {} for s {}", mean, s);
        }
    }

    #[test]
    fn corruption_only_writes_salt_or_pepper(seed in any::<u64>(), index in any::<u64>(), s in 0.0f64..=1.0) {
        let wm = grey_map((0..16).map(|i| i as f64).collect(), 4);
        let x = Tensor::full(&[4, 4, 2], 0.5);
        let y = corrupt(&x, &pixel_probs(&wm, s).unwrap(), &base_mask(seed, index, 4, 4)).unwrap();
        for px in y.data().chunks(2) {
            prop_assert!(px[0] == px[1] && [0.0, 0.5, 1.0].contains(&px[0]));
        }
        prop_assert_eq!(base_mask(seed, index, 4, 4), base_mask(seed, index, 4, 4));
    }

    #[test]
    fn soft_targets_are_distributions(s in 0.0f64..=1.0, c in 0.0f64..=1.0, k in 2usize..12, y in 0usize..12) {
        let y = y % k;
        let t = soft_target(s, c, y, k).unwrap();
        prop_assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(t.iter().all(|&v| v >= 0.0));
        prop_assert!(t.iter().enumerate().all(|(j, &v)| j == y || v <= t[y]));
    }

    #[test]
    fn stage_weights_shift_toward_noise(gamma in 0.05f64..2.0, stages in 1usize..8, epochs in 2usize..30, seed in any::<u64>()) {
        let schedule = NoiseSchedule::new(gamma, stages).unwrap();
        let levels = schedule.levels();
        prop_assert_eq!(levels[0], 0.0);
        prop_assert!(levels.windows(2).all(|w| w[0] < w[1] && w[1] < 1.0));
        let last = StageSampler::new(epochs - 1, epochs, &schedule).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert!((0..200).all(|_| last.sample(&mut rng) != 0));
    }

    #[test]
    fn auroc_is_antisymmetric(a in prop::collection::vec(-3.0f64..3.0, 1..30), b in prop::collection::vec(-3.0f64..3.0, 1..30)) {
        let ab = auroc(&a, &b).unwrap();
        let ba = auroc(&b, &a).unwrap();
        prop_assert!((ab + ba - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn weight_maps_are_normalized(seed in any::<u64>(), label in 0usize..3) {
        let ds = synth_blobs(seed, 1, 3, 6, &BlobSpec::default()).unwrap();
        let model = {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = (0..36 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut m = Model::new(
                vec![6, 6, 1],
                vec![Layer::Flatten, Layer::Dense(Dense::new(Tensor::new(vec![36, 3], w).unwrap(), Tensor::zeros(&[3])).unwrap())],
            )
            .unwrap();
            m.freeze();
            m
        };
        let wm = weight_map(&lrp(&model, &ds.image(0), label, Stabilizer::default()).unwrap()).unwrap();
        prop_assert!(wm.map.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((wm.map.max_abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn larger_epsilon_absorbs_more_in_one_layer(seed in any::<u64>(), label in 0usize..3) {
        let model = mlp(seed, &[5], &[5, 3], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = Tensor::new(vec![5], (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut prev = 0.0;
        for eps in [1e-6, 1e-4, 1e-2, 1e-1, 1.0, 10.0] {
            let b = lrp(&model, &x, label, Stabilizer::Absolute(eps)).unwrap();
            let absorbed = (b.logit - b.input.sum()).abs();
            prop_assert!(absorbed >= prev - 1e-12, "eps {}: {} after {}", eps, absorbed, prev);
            prev = absorbed;
        }
    }

    // Sign mixing between neurons breaks step-by-step monotonicity in deeper
    // nets (seed 16516337366146172046 is a counterexample); the trend from
    // negligible to dominant ε still holds.
    #[test]
    fn epsilon_absorption_trend_in_deep_nets(seed in any::<u64>()) {
        let model = mlp(seed, &[5], &[5, 6, 4, 3], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = Tensor::new(vec![5], (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let gap = |eps| {
            let b = lrp(&model, &x, 0, Stabilizer::Absolute(eps)).unwrap();
            (b.logit - b.input.sum()).abs()
        };
        prop_assert!(gap(1e-9) <= gap(1e3));
    }
}

#[test]
fn layer_mass_matches_stored_bundles() {
    let model = mlp(3, &[2, 2, 1], &[4, 6, 5, 3], 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let xs = Tensor::new(vec![8, 2, 2, 1], (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let ys: Vec<usize> = (0..8).map(|i| i % 3).collect();
    let stab = Stabilizer::default();
    let mass = layer_mass(&model, &xs, &ys, stab, 3).unwrap();
    let bundles = lrp_batch(&model, &xs, &ys, stab).unwrap();
    for (l, layer) in eligible_layers(&model).unwrap().iter().enumerate() {
        let brute = bundles.iter().map(|b| b.at(layer).abs_sum() / layer.dim() as f64).sum::<f64>() / 8.0;
        assert!((mass.mass[l] - brute).abs() <= 1e-12 * brute.max(1.0), "{}: {} vs {brute}", layer.name, mass.mass[l]);
    }
    let mut acc = MassAccumulator::new(eligible_layers(&model).unwrap());
    bundles.iter().for_each(|b| acc.add(b));
    assert_eq!(acc.finish().unwrap(), mass);
}

#[test]
fn mutual_information_vanishes_for_confident_dirichlets() {
    assert!(mutual_info(&[1e4, 1e4, 1e4]) < 1e-3);
    assert!(mutual_info(&[1e4, 1.0, 1.0]) < 1e-3);
    assert!(mutual_info(&[1.0, 1.0, 1.0]) > mutual_info(&[10.0, 10.0, 10.0]));
}
