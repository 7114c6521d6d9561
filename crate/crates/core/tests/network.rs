mod common;

use common::{network_gradient_error, random_matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatnet::data::{ChannelSelection, PointCloud};
use splatnet::lattice::{LatticeConfig, SparseLattice};
use splatnet::network::{
    backward, forward, forward_input, parse_arch, predict, Mode, NetworkInput, NetworkSpec, Parameters,
};
use splatnet::train::{AugmentConfig, TrainConfig, Trainer};
use splatnet::{Error, FeatureMatrix};

fn tiny_net(arch: &str, features: &[&str], lattice_dim: usize, classes: usize) -> NetworkSpec {
    let lattice: Vec<String> = ["x", "y", "z", "red", "green", "blue"][..lattice_dim]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let features: Vec<String> = features.iter().map(|s| s.to_string()).collect();
    let sel = ChannelSelection::new(&features, &lattice);
    parse_arch(arch, &LatticeConfig::isotropic(lattice_dim, 2.0).unwrap(), classes, &sel).unwrap()
}

fn random_input(rng: &mut ChaCha8Rng, n: usize, f: usize, d: usize) -> NetworkInput {
    NetworkInput {
        features: random_matrix(rng, n, f),
        lattice: random_matrix(rng, n, d),
    }
}

#[test]
fn two_bcl_network_matches_finite_differences() {
    let spec = tiny_net("C4-B4-B3-C5-C3", &["a", "b", "c"], 3, 3);
    let worst = network_gradient_error(&spec, 12, 1);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn stemless_network_matches_finite_differences() {
    let spec = tiny_net("B3-B2-B2-C2", &["a", "b"], 2, 2).with_normalization(false);
    let worst = network_gradient_error(&spec, 10, 2);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let spec = tiny_net("C4-B4-B3-C5-C3", &["a", "b", "c"], 3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = Parameters::init(&spec, &mut rng);
    let input = random_input(&mut rng, 9, 3, 3);
    let (_, tape) = forward_input(&spec, &params, &input, Mode::Training).unwrap();
    let g = backward(&spec, &params, &tape, &FeatureMatrix::zeros(9, 3)).unwrap();
    assert!(g.params.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    assert!(g.input.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn probabilities_are_distributions() {
    let spec = tiny_net("B8-B8-C4", &["x", "y", "z"], 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = Parameters::init(&spec, &mut rng);
    let cloud = PointCloud::new((0..50).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))).collect());
    for mode in [Mode::Training, Mode::Inference] {
        let (p, tape) = forward(&spec, &params, &cloud, mode).unwrap();
        assert_eq!(tape.lattices().len(), 2);
        for r in 0..p.rows() {
            assert!(p.row(r).iter().all(|&v| v >= 0.0));
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn duplicated_points_get_identical_predictions() {
    let spec = tiny_net("C4-B8-B8-C4", &["x", "y", "z"], 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = Parameters::init(&spec, &mut rng);
    let base: Vec<[f64; 3]> = (0..30).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
    let doubled: Vec<[f64; 3]> = base.iter().chain(&base).copied().collect();
    let (p, _) = forward(&spec, &params, &PointCloud::new(doubled), Mode::Inference).unwrap();
    for i in 0..30 {
        let a = p.row(i);
        let b = p.row(i + 30);
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6));
    }
}

#[test]
fn inference_is_bitwise_deterministic() {
    let spec = tiny_net("C4-B8-B8-C4", &["x", "y", "z"], 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = Parameters::init(&spec, &mut rng);
    let cloud = PointCloud::new((0..200).map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0))).collect());
    let (a, _) = forward(&spec, &params, &cloud, Mode::Inference).unwrap();
    let (b, _) = forward(&spec, &params, &cloud, Mode::Inference).unwrap();
    assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn predict_is_invariant_to_positive_logit_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let logits = random_matrix(&mut rng, 6, 4);
        let softmax = |l: &FeatureMatrix| {
            let rows: Vec<Vec<f64>> = (0..l.rows())
                .map(|r| {
                    let e: Vec<f64> = l.row(r).iter().map(|v| v.exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.iter().map(|v| v / s).collect()
                })
                .collect();
            FeatureMatrix::from_rows(&rows).unwrap()
        };
        let mut scaled = logits.clone();
        scaled.scale(rng.random_range(0.1..10.0));
        assert_eq!(predict(&softmax(&logits)), predict(&softmax(&scaled)));
    }
}

#[test]
fn bcl_schedule_coarsens() {
    let spec = tiny_net("B4-B4-B4-B4-C2", &["x", "y", "z"], 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let lattice = random_matrix(&mut rng, 500, 3);
    let counts: Vec<usize> = spec
        .lattice_schedule()
        .iter()
        .map(|s| SparseLattice::build(&lattice, s).unwrap().num_vertices())
        .collect();
    assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
}

#[test]
fn channel_mismatch_is_config_error() {
    let spec = tiny_net("B4-C2", &["x", "y", "z"], 3, 2);
    let params = Parameters::init(&spec, &mut ChaCha8Rng::seed_from_u64(0));
    let input = NetworkInput {
        features: FeatureMatrix::zeros(3, 2),
        lattice: FeatureMatrix::zeros(3, 3),
    };
    assert!(matches!(forward_input(&spec, &params, &input, Mode::Inference), Err(Error::Config(_))));
}

#[test]
fn batchnorm_modes_agree_after_convergence() {
    let spec = tiny_net("C8-B8-B8-C8-C2", &["x", "y", "z"], 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let positions: Vec<[f64; 3]> = (0..48).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
    let labels = positions.iter().map(|p| (p[1] > 0.0) as i32).collect();
    let cloud = PointCloud::new(positions).with_labels(labels).unwrap();
    let clouds = [cloud];
    let config = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 1,
        max_iterations: 600,
        augment: AugmentConfig::none(),
        ..TrainConfig::default()
    };
    let params = Parameters::init(&spec, &mut rng);
    let mut trainer = Trainer::new(spec.clone(), params, config, &clouds, &[]).unwrap();
    for _ in 0..600 {
        trainer.step().unwrap();
    }
    let params = trainer.params().clone();
    let (train_mode, _) = forward(&spec, &params, &clouds[0], Mode::Training).unwrap();
    let (infer_mode, _) = forward(&spec, &params, &clouds[0], Mode::Inference).unwrap();
    let diff = train_mode.max_abs_diff(&infer_mode);
    assert!(diff < 1e-3, "train/inference outputs differ by {diff}");
}
