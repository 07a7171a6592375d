//! End-to-end stages behind the command-line tool: dataset synthesis,
//! classifier pretraining, attention caching, the three video classifiers,
//! and report evaluation. Each stage reads and writes files, so runs can be
//! resumed, inspected, and diffed between stages.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::energy::{self, argmax_first};
use crate::energynet::{self, EnergyNetTraining, TrainSample};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::gradcam::{self, AttentionCache, AttentionMap};
use crate::manifest::{load_manifest, DatasetManifest, Split, VideoRecord};
use crate::net::{self, NetworkParams, TrainOutcome};
use crate::synthdata;
use crate::tensor::{read_frame_file, Tensor};

/// Frame indices scored for a video: every `stride`-th frame from the first.
pub fn sample_frames(total: usize, stride: usize) -> Result<Vec<usize>> {
    if total == 0 {
        return Err(Error::InvalidArgument("video has no frames".into()));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("frame stride must be positive".into()));
    }
    Ok((0..total).step_by(stride).collect())
}

/// One classified video: per-concept scores (higher is more confident) and
/// the predicted concept index. Serialized one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub video_id: String,
    pub predicted: usize,
    pub scores: Vec<f64>,
}

pub fn write_scores(rows: &[ScoreRow], path: &Path) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        out.push_str(&line);
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            return Err(Error::format(
                path,
                format!("blank line {} in score file", lineno + 1),
            ));
        }
        let row: ScoreRow = serde_json::from_str(line).map_err(|e| {
            Error::format(path, format!("line {}: {e}", lineno + 1))
        })?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::format(path, "score file has no rows"));
    }
    Ok(rows)
}

pub fn run_synth(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    synthdata::generate(&cfg.synth_config(), out_dir)
}

fn load_split_frames(
    manifest: &DatasetManifest,
    split: Split,
    concepts: &[String],
) -> Result<Vec<(Tensor, usize)>> {
    let mut samples = Vec::new();
    for record in manifest.records_in(split) {
        let class = concept_index(concepts, record)?;
        for f in 0..record.frames.len() {
            let tensor = read_frame_file(&manifest.frame_path(record, f))?;
            samples.push((tensor, class));
        }
    }
    if samples.is_empty() {
        return Err(Error::Manifest("split has no frames".into()));
    }
    Ok(samples)
}

fn concept_index(concepts: &[String], record: &VideoRecord) -> Result<usize> {
    concepts
        .iter()
        .position(|c| *c == record.class)
        .ok_or_else(|| {
            Error::Manifest(format!(
                "video {}: class `{}` is not a configured concept",
                record.video_id, record.class
            ))
        })
}

/// Trains the frame classifier on the labeled still images and writes its
/// checkpoint. Returns the trained parameters and per-epoch losses.
pub fn run_pretrain(cfg: &RunConfig, manifest_path: &Path, net_out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = load_manifest(manifest_path, &cfg.concepts)?;
    let samples = load_split_frames(&manifest, Split::Source, &cfg.concepts)?;
    let spec = cfg.network_spec()?;
    let outcome = net::train_classifier(&spec, &samples, &cfg.train_config())?;
    net::save_checkpoint(&outcome.params, net_out)?;
    Ok(outcome)
}

/// Computes attention stacks for every readable frame in the manifest and
/// writes them as one cache file. Returns the number of cached maps.
pub fn run_cache(
    cfg: &RunConfig,
    manifest_path: &Path,
    net_path: &Path,
    cache_out: &Path,
) -> Result<usize> {
    cfg.validate()?;
    let manifest = load_manifest(manifest_path, &cfg.concepts)?;
    let params = net::load_checkpoint(net_path)?;
    let classes = params.spec.class_count()?;
    if classes != cfg.concepts.len() {
        return Err(Error::Config(format!(
            "checkpoint classifies {classes} classes but the run has {} concepts",
            cfg.concepts.len()
        )));
    }
    let cache = gradcam::precompute_cache(&params, &manifest, cfg.unreadable_policy())?;
    cache.write(cache_out)?;
    Ok(cache.entries().len())
}

fn stacks_for(
    cache: &AttentionCache,
    record: &VideoRecord,
    stride: usize,
    n_concepts: usize,
) -> Result<Vec<Vec<AttentionMap>>> {
    sample_frames(record.frames.len(), stride)?
        .into_iter()
        .map(|f| cache.stack(&record.video_id, f as u32, n_concepts))
        .collect()
}

/// Scores held-out videos by peak attention evidence per concept.
pub fn run_classify_unatt(
    cfg: &RunConfig,
    manifest_path: &Path,
    cache_path: &Path,
    scores_out: &Path,
) -> Result<Vec<ScoreRow>> {
    cfg.validate()?;
    let manifest = load_manifest(manifest_path, &cfg.concepts)?;
    let cache = AttentionCache::read(cache_path)?;
    let n = cfg.concepts.len();
    let mut rows = Vec::new();
    for record in manifest.records_in(Split::TargetTest) {
        let stacks = stacks_for(&cache, record, cfg.frame_stride, n)?;
        let (predicted, table) = energy::classify_unatt(&stacks, cfg.window_size)?;
        rows.push(ScoreRow {
            video_id: record.video_id.clone(),
            predicted,
            scores: table.scores,
        });
    }
    if rows.is_empty() {
        return Err(Error::Manifest("no held-out videos to classify".into()));
    }
    write_scores(&rows, scores_out)?;
    Ok(rows)
}

/// Trains the energy model on the few labeled target videos and writes the
/// model plus its per-iteration loss log.
pub fn run_train_energynet(
    cfg: &RunConfig,
    manifest_path: &Path,
    cache_path: &Path,
    model_out: &Path,
    log_out: &Path,
) -> Result<EnergyNetTraining> {
    cfg.validate()?;
    let manifest = load_manifest(manifest_path, &cfg.concepts)?;
    let cache = AttentionCache::read(cache_path)?;
    let vocab = cfg.vocabulary(Path::new("."))?;
    let n = cfg.concepts.len();
    let mut samples = Vec::new();
    for record in manifest.records_in(Split::TargetTrain) {
        let class = concept_index(&cfg.concepts, record)?;
        for f in sample_frames(record.frames.len(), cfg.frame_stride)? {
            samples.push(TrainSample {
                video_id: record.video_id.clone(),
                frame: f as u32,
                class,
                maps: cache.stack(&record.video_id, f as u32, n)?,
            });
        }
    }
    let training = energynet::train_energynet(&samples, &vocab, &cfg.enet_config())?;
    energynet::save_energynet(&training.params, model_out)?;
    write_train_log(&training.log, log_out)?;
    Ok(training)
}

pub fn write_train_log(log: &[energynet::TrainLogEntry], path: &Path) -> Result<()> {
    let mut out = String::new();
    for entry in log {
        let line = serde_json::to_string(entry).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        out.push_str(&line);
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Scores held-out videos by mean learned energy per concept.
pub fn run_classify_energynet(
    cfg: &RunConfig,
    manifest_path: &Path,
    cache_path: &Path,
    model_path: &Path,
    scores_out: &Path,
) -> Result<Vec<ScoreRow>> {
    cfg.validate()?;
    let manifest = load_manifest(manifest_path, &cfg.concepts)?;
    let cache = AttentionCache::read(cache_path)?;
    let vocab = cfg.vocabulary(Path::new("."))?;
    let params = energynet::load_energynet(model_path)?;
    let n = cfg.concepts.len();
    let mut rows = Vec::new();
    for record in manifest.records_in(Split::TargetTest) {
        let stacks = stacks_for(&cache, record, cfg.frame_stride, n)?;
        let (predicted, table) = energynet::classify_energynet(&stacks, &vocab, &params)?;
        rows.push(ScoreRow {
            video_id: record.video_id.clone(),
            predicted,
            scores: table.scores,
        });
    }
    if rows.is_empty() {
        return Err(Error::Manifest("no held-out videos to classify".into()));
    }
    write_scores(&rows, scores_out)?;
    Ok(rows)
}

/// Majority vote over per-frame predictions; ties go to the lowest concept
/// index. The score row is the mean of the rows that voted for the winner.
pub fn vote_from_logits(rows: &[Vec<f64>]) -> Result<(usize, Vec<f64>)> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no frames to vote over".into()));
    }
    let n = rows[0].len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::ShapeMismatch("ragged logit rows".into()));
    }
    let votes: Vec<usize> = rows.iter().map(|r| argmax_first(r)).collect();
    let mut counts = vec![0usize; n];
    for &v in &votes {
        counts[v] += 1;
    }
    let mut winner = 0;
    for (c, &count) in counts.iter().enumerate() {
        if count > counts[winner] {
            winner = c;
        }
    }
    let mut mean = vec![0.0; n];
    let mut supporters = 0usize;
    for (row, &vote) in rows.iter().zip(&votes) {
        if vote == winner {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
            supporters += 1;
        }
    }
    for m in &mut mean {
        *m /= supporters as f64;
    }
    Ok((winner, mean))
}

/// Mean logits over all sampled frames; prediction is the argmax of the mean.
pub fn average_logits(rows: &[Vec<f64>]) -> Result<(usize, Vec<f64>)> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no frames to average".into()));
    }
    let n = rows[0].len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::ShapeMismatch("ragged logit rows".into()));
    }
    let mut mean = vec![0.0; n];
    for row in rows {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= rows.len() as f64;
    }
    Ok((argmax_first(&mean), mean))
}

/// Scores held-out videos directly with the frame classifier, either by
/// majority vote over frames or by averaging logits across frames.
pub fn run_classify_cnn(
    cfg: &RunConfig,
    manifest_path: &Path,
    net_path: &Path,
    scores_out: &Path,
    average_all: bool,
) -> Result<Vec<ScoreRow>> {
    cfg.validate()?;
    let manifest = load_manifest(manifest_path, &cfg.concepts)?;
    let params: NetworkParams = net::load_checkpoint(net_path)?;
    let mut rows = Vec::new();
    for record in manifest.records_in(Split::TargetTest) {
        let mut logit_rows = Vec::new();
        for f in sample_frames(record.frames.len(), cfg.frame_stride)? {
            let tensor = read_frame_file(&manifest.frame_path(record, f))?;
            let trace = net::forward(&params, &tensor)?;
            logit_rows.push(trace.logits().values().to_vec());
        }
        let (predicted, scores) = if average_all {
            average_logits(&logit_rows)?
        } else {
            vote_from_logits(&logit_rows)?
        };
        rows.push(ScoreRow {
            video_id: record.video_id.clone(),
            predicted,
            scores,
        });
    }
    if rows.is_empty() {
        return Err(Error::Manifest("no held-out videos to classify".into()));
    }
    write_scores(&rows, scores_out)?;
    Ok(rows)
}

pub fn timestamp_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Evaluates a score file against the manifest's held-out split and writes
/// the report.
pub fn run_eval(
    cfg: &RunConfig,
    manifest_path: &Path,
    scores_path: &Path,
    report_out: &Path,
) -> Result<EvalReport> {
    cfg.validate()?;
    let manifest = load_manifest(manifest_path, &cfg.concepts)?;
    let rows = read_scores(scores_path)?;
    let mut table = HashMap::new();
    for row in rows {
        if table.insert(row.video_id.clone(), row.scores).is_some() {
            return Err(Error::format(
                scores_path,
                format!("duplicate score row for video {}", row.video_id),
            ));
        }
    }
    let report = eval::evaluate(
        &manifest,
        &cfg.concepts,
        &table,
        cfg.seed,
        &cfg.hash(),
        timestamp_now(),
    )?;
    report.write(report_out)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_sampling_walks_by_stride() {
        assert_eq!(sample_frames(12, 5).unwrap(), vec![0, 5, 10]);
        assert_eq!(sample_frames(3, 1).unwrap(), vec![0, 1, 2]);
        assert_eq!(sample_frames(3, 5).unwrap(), vec![0]);
        assert_eq!(sample_frames(1, 1).unwrap(), vec![0]);
        assert!(sample_frames(0, 1).is_err());
        assert!(sample_frames(3, 0).is_err());
    }

    #[test]
    fn vote_takes_majority_and_averages_supporters() {
        let rows = vec![vec![2.0, 0.0], vec![0.0, 1.0], vec![3.0, 0.0]];
        let (winner, mean) = vote_from_logits(&rows).unwrap();
        assert_eq!(winner, 0);
        assert_eq!(mean, vec![2.5, 0.0]);
    }

    #[test]
    fn vote_ties_go_to_the_lowest_concept() {
        let rows = vec![vec![0.0, 5.0], vec![1.0, 0.0]];
        let (winner, _) = vote_from_logits(&rows).unwrap();
        assert_eq!(winner, 0);
        // A frame tied across concepts votes for the lowest index too.
        let rows = vec![vec![1.0, 1.0]];
        assert_eq!(vote_from_logits(&rows).unwrap().0, 0);
    }

    #[test]
    fn averaging_uses_every_frame() {
        let rows = vec![vec![2.0, 0.0], vec![0.0, 1.0], vec![0.0, 2.0]];
        let (winner, mean) = average_logits(&rows).unwrap();
        assert_eq!(winner, 1);
        assert_eq!(mean, vec![2.0 / 3.0, 1.0]);
    }

    #[test]
    fn logit_helpers_reject_bad_input() {
        assert!(vote_from_logits(&[]).is_err());
        assert!(average_logits(&[]).is_err());
        let ragged = vec![vec![1.0], vec![1.0, 2.0]];
        assert!(vote_from_logits(&ragged).is_err());
        assert!(average_logits(&ragged).is_err());
    }

    #[test]
    fn score_rows_round_trip_as_json_lines() {
        let rows = vec![
            ScoreRow {
                video_id: "v1".into(),
                predicted: 0,
                scores: vec![0.5, 0.25],
            },
            ScoreRow {
                video_id: "v2".into(),
                predicted: 1,
                scores: vec![0.0, 1.0],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.jsonl");
        write_scores(&rows, &path).unwrap();
        assert_eq!(read_scores(&path).unwrap(), rows);
        // Byte-stable output.
        let first = std::fs::read(&path).unwrap();
        write_scores(&rows, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn score_reader_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.jsonl");
        std::fs::write(&path, "not json\n").unwrap();
        assert!(read_scores(&path).is_err());
        std::fs::write(&path, "").unwrap();
        assert!(read_scores(&path).is_err());
        std::fs::write(
            &path,
            "{\"video_id\":\"v\",\"predicted\":0,\"scores\":[1.0]}\n\n",
        )
        .unwrap();
        assert!(read_scores(&path).is_err());
    }
}
