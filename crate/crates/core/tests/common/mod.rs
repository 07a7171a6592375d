//! Shared helpers for the integration suites: finite-difference gradient
//! checking, deterministic random tensors, and a full pipeline runner.
//! Each test target compiles its own copy, so not every helper is used by
//! every target.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use attention_transfer::config::RunConfig;
use attention_transfer::eval::EvalReport;
use attention_transfer::pipeline;
use attention_transfer::rng;
use attention_transfer::tensor::Tensor;
use rand::Rng;

/// Central finite difference of `f` at `x` in coordinate `i`.
pub fn central_diff<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], i: usize) -> f64 {
    let h = 1e-6 * x[i].abs().max(1.0);
    let mut hi = x.to_vec();
    let mut lo = x.to_vec();
    hi[i] += h;
    lo[i] -= h;
    (f(&hi) - f(&lo)) / (2.0 * h)
}

/// Asserts analytic gradients against central differences, coordinate by
/// coordinate, at relative tolerance `rel_tol`.
pub fn assert_grads_match<F: Fn(&[f64]) -> f64>(
    f: &F,
    x: &[f64],
    analytic: &[f64],
    rel_tol: f64,
    label: &str,
) {
    assert_eq!(
        x.len(),
        analytic.len(),
        "{label}: gradient length mismatch"
    );
    for i in 0..x.len() {
        let numeric = central_diff(f, x, i);
        let denom = numeric.abs().max(analytic[i].abs()).max(1.0);
        let rel = (numeric - analytic[i]).abs() / denom;
        assert!(
            rel <= rel_tol,
            "{label}: coordinate {i} analytic {} vs numeric {numeric} (rel {rel:.3e})",
            analytic[i]
        );
    }
}

/// Uniform values in [lo, hi) from a named deterministic stream.
pub fn random_values(tag: &str, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut r = rng::stream(0xACCE97, tag);
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

pub fn tensor_from(shape: &[usize], values: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), values).expect("test tensor")
}

/// Replaces one coordinate of a tensor, returning a new tensor.
pub fn tensor_with(t: &Tensor, i: usize, v: f64) -> Tensor {
    let mut values = t.values().to_vec();
    values[i] = v;
    Tensor::new(t.shape().to_vec(), values).expect("test tensor")
}

/// Artifact paths of one full pipeline run.
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub net: PathBuf,
    pub cache: PathBuf,
    pub unatt_scores: PathBuf,
    pub cnn_scores: PathBuf,
    pub enet_model: PathBuf,
    pub enet_log: PathBuf,
    pub enet_scores: PathBuf,
}

impl RunArtifacts {
    pub fn new(dir: &Path) -> Self {
        RunArtifacts {
            dir: dir.to_path_buf(),
            manifest: dir.join("data/manifest.jsonl"),
            net: dir.join("net.atnw"),
            cache: dir.join("cache.attc"),
            unatt_scores: dir.join("unatt.jsonl"),
            cnn_scores: dir.join("cnn.jsonl"),
            enet_model: dir.join("enet.aten"),
            enet_log: dir.join("enet_log.jsonl"),
            enet_scores: dir.join("enet.jsonl"),
        }
    }
}

/// synth -> pretrain -> cache. The shared front of every chain.
pub fn run_front(cfg: &RunConfig, art: &RunArtifacts) {
    pipeline::run_synth(cfg, &art.dir.join("data")).expect("synth");
    pipeline::run_pretrain(cfg, &art.manifest, &art.net).expect("pretrain");
    pipeline::run_cache(cfg, &art.manifest, &art.net, &art.cache).expect("cache");
}

pub fn eval_scores(cfg: &RunConfig, art: &RunArtifacts, scores: &Path, name: &str) -> EvalReport {
    let report_out = art.dir.join(format!("{name}.json"));
    pipeline::run_eval(cfg, &art.manifest, scores, &report_out).expect("eval")
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Prints one acceptance line; keeps the pass/fail format uniform.
pub fn criterion_line(index: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {index} [{verdict}] {name}: {detail}");
    assert!(pass, "criterion {index} ({name}) failed: {detail}");
}
