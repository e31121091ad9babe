use std::collections::BTreeMap;

use mvs_core::dataio::{generate_scene, SceneSpec};
use mvs_core::network::{Architecture, DisparityNet, NetworkConfig};
use mvs_core::sweep::make_disparity_grid;
use mvs_core::training::{argmax_accuracy, sample_batch, train_stage, Adam, TrainConfig, TrainSequence};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_sequence(seed: u64) -> TrainSequence {
    let scene = generate_scene(&SceneSpec::toy(64, 48, 5, seed)).unwrap();
    TrainSequence::new("toy", scene.views, scene.ground_truth, make_disparity_grid(0.5, 8).unwrap()).unwrap()
}

// Shortened version of the overfitting run; the acceptance suite runs the
// full 500 steps.
#[test]
fn toy_network_fits_one_sample() {
    let data = vec![toy_sequence(11)];
    let config = TrainConfig {
        stage: 2,
        learning_rate: 1e-3,
        iterations: 150,
        patch: 32,
        n_range: vec![2],
        ..TrainConfig::stage2()
    };
    let sample = sample_batch(&data, &config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut net = DisparityNet::new_random(NetworkConfig::toy(), Architecture::Full, 3).unwrap();
    let mut adam = Adam::from_config(&config);
    let trace = train_stage(&mut net, &mut adam, &config, |_| Ok(sample.clone()), |_, _, _| Ok(())).unwrap();
    assert_eq!(adam.step, 150);
    assert!(trace[149] < 0.5 * trace[0], "loss {} -> {}", trace[0], trace[149]);
    let acc = argmax_accuracy(&net, &sample).unwrap();
    assert!(acc > 0.5, "accuracy {acc}");
}

#[test]
fn sampling_is_seeded() {
    let data = vec![toy_sequence(2), toy_sequence(3)];
    let config = TrainConfig { patch: 24, ..TrainConfig::stage1() };
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..4).map(|_| sample_batch(&data, &config, &mut rng).unwrap()).collect::<Vec<_>>()
    };
    let (a, b) = (draw(9), draw(9));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.sequence, x.frame, x.origin), (y.sequence, y.frame, y.origin));
        assert_eq!(x.volume.neighbor_ids, y.volume.neighbor_ids);
        assert_eq!(x.labels, y.labels);
        assert_eq!(x.volume.data, y.volume.data);
    }
    let c = draw(10);
    assert!(a.iter().zip(&c).any(|(x, y)| (x.sequence, x.frame, x.origin) != (y.sequence, y.frame, y.origin)));
}

#[test]
fn samples_are_patches_with_enough_labels() {
    let data = vec![toy_sequence(4)];
    let config = TrainConfig { patch: 20, ..TrainConfig::stage1() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let s = sample_batch(&data, &config, &mut rng).unwrap();
        assert_eq!((s.volume.width, s.volume.height), (20, 20));
        assert_eq!((s.reference.width(), s.reference.height()), (20, 20));
        assert_eq!(s.labels.len(), 400);
        assert!(s.labels.iter().all(|&l| l < 8));
        assert!(s.valid_count() as f64 >= 0.1 * 400.0);
        assert!(s.origin.0 + 20 <= 64 && s.origin.1 + 20 <= 48);
        let reference_id = data[0].views[s.frame].id;
        assert!(!s.volume.neighbor_ids.contains(&reference_id));
    }
}

#[test]
fn neighbor_counts_are_uniform_over_the_range() {
    let data = vec![toy_sequence(6)];
    let config = TrainConfig { patch: 16, n_range: vec![1, 2, 3, 4], ..TrainConfig::stage1() };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let trials = 400;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for _ in 0..trials {
        *counts.entry(sample_batch(&data, &config, &mut rng).unwrap().volume.num_neighbors()).or_default() += 1;
    }
    assert_eq!(counts.keys().copied().collect::<Vec<_>>(), [1, 2, 3, 4]);
    // Each count expects 100 draws; 5 standard deviations is about 43.
    for (n, c) in counts {
        assert!((c as i64 - 100).abs() < 45, "N = {n} drawn {c} times in {trials}");
    }
}
