//! Dataset-level properties of the synthetic corpus, checked through the
//! pipeline entry point: split bookkeeping on the default fixture, and the
//! domain-shift contract. The shift check uses an independent oracle: a
//! multinomial logistic probe on raw pixels. With a strong class-correlated
//! background tint in the source domain it aces held-out source stills, and
//! since the tint is absent from the target domain it must collapse there.

mod common;

use std::collections::HashSet;

use attention_transfer::config::RunConfig;
use attention_transfer::manifest::{load_manifest, Split};
use attention_transfer::pipeline;
use attention_transfer::tensor::read_frame_file;

#[test]
fn default_fixture_counts_and_split_disjointness() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = RunConfig::default();
    let manifest_path = pipeline::run_synth(&cfg, dir.path()).expect("synth");
    let manifest = load_manifest(&manifest_path, &cfg.concepts).expect("manifest");

    assert_eq!(manifest.records_in(Split::Source).count(), 4 * 64);
    assert_eq!(manifest.records_in(Split::TargetTrain).count(), 4 * 2);
    assert_eq!(manifest.records_in(Split::TargetTest).count(), 4 * 8);
    for record in manifest.records_in(Split::Source) {
        assert_eq!(record.frames.len(), 1);
    }
    for record in manifest.records_in(Split::TargetTest) {
        assert_eq!(record.frames.len(), 12);
    }

    let mut seen = HashSet::new();
    for record in &manifest.records {
        assert!(seen.insert(&record.video_id), "video id listed twice");
    }
}

/// Fits a 4-way logistic regression on flattened pixels with plain
/// full-batch gradient descent. Returns per-class weight rows with a bias
/// column appended.
fn fit_probe(samples: &[(Vec<f64>, usize)], classes: usize, iters: usize) -> Vec<Vec<f64>> {
    let dim = samples[0].0.len() + 1;
    let mut w = vec![vec![0.0; dim]; classes];
    let lr = 0.5;
    for _ in 0..iters {
        let mut grad = vec![vec![0.0; dim]; classes];
        for (x, label) in samples {
            let mut logits: Vec<f64> = w
                .iter()
                .map(|row| {
                    row[dim - 1]
                        + row[..dim - 1].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            let peak = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let norm: f64 = logits.iter().map(|l| (l - peak).exp()).sum();
            for l in &mut logits {
                *l = (*l - peak).exp() / norm;
            }
            for (c, p) in logits.iter().enumerate() {
                let err = p - f64::from(u8::from(c == *label));
                for (g, xi) in grad[c][..dim - 1].iter_mut().zip(x) {
                    *g += err * xi;
                }
                grad[c][dim - 1] += err;
            }
        }
        let scale = lr / samples.len() as f64;
        for (row, g) in w.iter_mut().zip(&grad) {
            for (wi, gi) in row.iter_mut().zip(g) {
                *wi -= scale * gi;
            }
        }
    }
    w
}

fn probe_accuracy(w: &[Vec<f64>], samples: &[(Vec<f64>, usize)]) -> f64 {
    let dim = samples[0].0.len() + 1;
    let mut hits = 0;
    for (x, label) in samples {
        let scores: Vec<f64> = w
            .iter()
            .map(|row| {
                row[dim - 1] + row[..dim - 1].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let predicted = (0..scores.len())
            .max_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite"))
            .expect("nonempty");
        if predicted == *label {
            hits += 1;
        }
    }
    hits as f64 / samples.len() as f64
}

#[test]
fn source_cue_does_not_transfer_to_target() {
    let dir = tempfile::tempdir().expect("tempdir");
    // Make the source-only cue dominate: strong per-class background tint,
    // little background jitter, no clutter. The target style is untouched
    // and carries no tint at all.
    let cfg = RunConfig {
        source_tint_step: 0.06,
        source_background_jitter: 0.02,
        source_distractors: 0,
        source_distractor_amplitude: 0.0,
        seed: 7,
        ..RunConfig::default()
    };
    let manifest_path = pipeline::run_synth(&cfg, dir.path()).expect("synth");
    let manifest = load_manifest(&manifest_path, &cfg.concepts).expect("manifest");
    let class_index = |name: &str| {
        cfg.concepts
            .iter()
            .position(|c| c == name)
            .expect("known class")
    };

    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, record) in manifest.records_in(Split::Source).enumerate() {
        let frame = read_frame_file(&manifest.frame_path(record, 0)).expect("frame");
        let sample = (frame.values().to_vec(), class_index(&record.class));
        if i % 2 == 0 {
            train.push(sample);
        } else {
            val.push(sample);
        }
    }
    let mut target = Vec::new();
    for record in manifest.records_in(Split::TargetTest) {
        for f in 0..record.frames.len() {
            let frame = read_frame_file(&manifest.frame_path(record, f)).expect("frame");
            target.push((frame.values().to_vec(), class_index(&record.class)));
        }
    }

    let w = fit_probe(&train, cfg.concepts.len(), 200);
    let source_val = probe_accuracy(&w, &val);
    let target_acc = probe_accuracy(&w, &target);
    assert!(
        source_val >= 0.99,
        "probe should ace held-out source stills, got {source_val:.4}"
    );
    assert!(
        target_acc <= source_val - 0.10,
        "probe should drop at least 10 points on target frames, got {source_val:.4} -> {target_acc:.4}"
    );
}
