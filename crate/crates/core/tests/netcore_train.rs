//! Training-loop behavior on a linearly separable toy problem. A threshold
//! on mean brightness already separates the two classes perfectly, so the
//! classifier has no excuse: twenty epochs must reach 100% training
//! accuracy. Also pins the zero-epoch no-op contract.

mod common;

use attention_transfer::net::{
    self, Layer, NetworkParams, NetworkSpec, TrainConfig, TrainOutcome,
};
use attention_transfer::rng;
use attention_transfer::tensor::Tensor;
use common::tensor_from;
use rand::Rng;

const SIDE: usize = 8;

fn toy_spec() -> NetworkSpec {
    NetworkSpec {
        input: [1, SIDE, SIDE],
        layers: vec![
            Layer::Conv2d {
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 0,
            },
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::Dense { out_features: 2 },
        ],
        last_conv: 0,
    }
}

/// Class 0 frames are dim, class 1 frames bright; per-pixel noise is small
/// enough that the class bands never overlap.
fn toy_samples() -> Vec<(Tensor, usize)> {
    let mut samples = Vec::new();
    for class in 0..2usize {
        let level = if class == 0 { 0.25 } else { 0.75 };
        for i in 0..20 {
            let mut r = rng::stream(3, &format!("toy-{class}-{i}"));
            let values: Vec<f64> = (0..SIDE * SIDE)
                .map(|_| level + r.random_range(-0.05..0.05))
                .collect();
            samples.push((tensor_from(&[1, SIDE, SIDE], values), class));
        }
    }
    samples
}

fn accuracy(params: &NetworkParams, samples: &[(Tensor, usize)]) -> f64 {
    let mut hits = 0;
    for (frame, label) in samples {
        let logits = net::forward(params, frame).expect("forward");
        let values = logits.logits().values();
        let predicted = (0..values.len())
            .max_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite"))
            .expect("nonempty");
        if predicted == *label {
            hits += 1;
        }
    }
    hits as f64 / samples.len() as f64
}

/// Independent check that the toy really is linearly separable: a mean
/// brightness threshold fitted on the data classifies it perfectly.
#[test]
fn toy_data_separable_by_linear_probe() {
    let samples = toy_samples();
    let mean = |t: &Tensor| t.values().iter().sum::<f64>() / t.count() as f64;
    let class_mean = |c: usize| {
        let of_class: Vec<f64> = samples
            .iter()
            .filter(|(_, l)| *l == c)
            .map(|(t, _)| mean(t))
            .collect();
        of_class.iter().sum::<f64>() / of_class.len() as f64
    };
    let threshold = 0.5 * (class_mean(0) + class_mean(1));
    for (t, label) in &samples {
        let predicted = usize::from(mean(t) > threshold);
        assert_eq!(predicted, *label, "probe misclassifies a toy sample");
    }
}

#[test]
fn twenty_epochs_reach_full_training_accuracy() {
    let samples = toy_samples();
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 4,
        learning_rate: 0.5,
        weight_decay: 0.0005,
        hflip: false,
        seed: 5,
    };
    let TrainOutcome { params, losses } =
        net::train_classifier(&toy_spec(), &samples, &cfg).expect("train");
    assert_eq!(losses.len(), 20);
    assert!(losses.iter().all(|l| l.is_finite()));
    assert_eq!(accuracy(&params, &samples), 1.0);
}

/// The distribution is mirror-symmetric, so flip augmentation must not stop
/// the model from fitting it.
#[test]
fn flip_augmentation_still_fits_symmetric_data() {
    let samples = toy_samples();
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 4,
        learning_rate: 0.5,
        weight_decay: 0.0005,
        hflip: true,
        seed: 5,
    };
    let outcome = net::train_classifier(&toy_spec(), &samples, &cfg).expect("train");
    assert_eq!(accuracy(&outcome.params, &samples), 1.0);
}

#[test]
fn zero_epochs_returns_initialization_unchanged() {
    let samples = toy_samples();
    let cfg = TrainConfig {
        epochs: 0,
        batch_size: 4,
        learning_rate: 0.5,
        weight_decay: 0.0005,
        hflip: false,
        seed: 5,
    };
    let outcome = net::train_classifier(&toy_spec(), &samples, &cfg).expect("train");
    assert!(outcome.losses.is_empty());
    assert_eq!(
        outcome.params,
        NetworkParams::init(&toy_spec(), 5).expect("init")
    );
}
