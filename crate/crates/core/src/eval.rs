//! Retrieval and classification metrics over per-video score tables, plus the
//! JSON evaluation report. The report fingerprint covers everything except
//! the timestamp, so two runs of the same experiment can be compared byte-free.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::energy::argmax_first;
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Split};
use crate::rng::sha256_hex;

/// Average precision of one ranked list. `flags[i]` marks whether the item at
/// rank i (best first) is relevant: mean of precision-at-k over relevant ranks.
pub fn average_precision(flags: &[bool]) -> Result<f64> {
    let positives = flags.iter().filter(|&&f| f).count();
    if positives == 0 {
        return Err(Error::InvalidArgument(
            "ranked list has no relevant items".into(),
        ));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &flag) in flags.iter().enumerate() {
        if flag {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub concepts: Vec<String>,
    pub videos: usize,
    pub per_class_ap: Vec<f64>,
    pub mean_ap: f64,
    pub top1: f64,
    pub top3: f64,
    /// confusion[true_class][predicted_class]
    pub confusion: Vec<Vec<usize>>,
    pub seed: u64,
    pub config_hash: String,
    pub timestamp: u64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    /// SHA-256 over the report with the timestamp removed; stable across runs
    /// that produced identical results at different times.
    pub fn fingerprint(&self) -> String {
        let mut value = serde_json::to_value(self).expect("report serializes");
        value
            .as_object_mut()
            .expect("report is an object")
            .remove("timestamp");
        sha256_hex(value.to_string().as_bytes())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Scores the held-out split of `manifest` against a score table.
///
/// `scores` maps video id to one row of per-concept scores (higher is more
/// confident). Every held-out video must have a row; rows must be finite and
/// match the concept count. Rankings break ties by manifest order, top-k by
/// lowest concept index.
pub fn evaluate(
    manifest: &DatasetManifest,
    concepts: &[String],
    scores: &HashMap<String, Vec<f64>>,
    seed: u64,
    config_hash: &str,
    timestamp: u64,
) -> Result<EvalReport> {
    let n = concepts.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no concepts to evaluate".into()));
    }
    let records: Vec<_> = manifest.records_in(Split::TargetTest).collect();
    if records.is_empty() {
        return Err(Error::Manifest("no held-out videos to evaluate".into()));
    }

    let mut rows = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for record in &records {
        let class = concepts
            .iter()
            .position(|c| *c == record.class)
            .ok_or_else(|| {
                Error::Manifest(format!(
                    "video {}: class `{}` is not an evaluated concept",
                    record.video_id, record.class
                ))
            })?;
        let row = scores.get(&record.video_id).ok_or_else(|| {
            Error::InvalidArgument(format!("no scores for video {}", record.video_id))
        })?;
        if row.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "video {}: {} scores for {} concepts",
                record.video_id,
                row.len(),
                n
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "score row for video {}",
                record.video_id
            )));
        }
        rows.push(row.clone());
        labels.push(class);
    }

    let mut top1_hits = 0usize;
    let mut top3_hits = 0usize;
    let mut confusion = vec![vec![0usize; n]; n];
    let depth = n.min(3);
    for (row, &class) in rows.iter().zip(&labels) {
        let predicted = argmax_first(row);
        if predicted == class {
            top1_hits += 1;
        }
        confusion[class][predicted] += 1;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        if order[..depth].contains(&class) {
            top3_hits += 1;
        }
    }

    let mut per_class_ap = Vec::with_capacity(n);
    for class in 0..n {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| rows[b][class].total_cmp(&rows[a][class]));
        let flags: Vec<bool> = order.iter().map(|&i| labels[i] == class).collect();
        let ap = average_precision(&flags).map_err(|_| {
            Error::Manifest(format!(
                "concept `{}` has no held-out videos",
                concepts[class]
            ))
        })?;
        per_class_ap.push(ap);
    }
    let mean_ap = per_class_ap.iter().sum::<f64>() / n as f64;

    Ok(EvalReport {
        concepts: concepts.to_vec(),
        videos: records.len(),
        per_class_ap,
        mean_ap,
        top1: top1_hits as f64 / records.len() as f64,
        top3: top3_hits as f64 / records.len() as f64,
        confusion,
        seed,
        config_hash: config_hash.to_string(),
        timestamp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::VideoRecord;

    #[test]
    fn average_precision_matches_hand_computation() {
        let ap = average_precision(&[true, false, true]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true]).unwrap(), 1.0);
        assert_eq!(average_precision(&[false, true]).unwrap(), 0.5);
        assert_eq!(average_precision(&[true, true, false]).unwrap(), 1.0);
        assert!(average_precision(&[false, false]).is_err());
        assert!(average_precision(&[]).is_err());
    }

    fn fixture() -> (DatasetManifest, Vec<String>, HashMap<String, Vec<f64>>) {
        let concepts = vec!["a".to_string(), "b".to_string()];
        let mut records = Vec::new();
        for (id, class) in [("a0", "a"), ("a1", "a"), ("b0", "b"), ("b1", "b")] {
            records.push(VideoRecord {
                video_id: id.to_string(),
                class: class.to_string(),
                split: Split::TargetTest,
                frames: vec!["f".to_string()],
            });
        }
        let manifest = DatasetManifest::new(records, std::path::PathBuf::from("."));
        let mut scores = HashMap::new();
        scores.insert("a0".to_string(), vec![0.9, 0.1]);
        scores.insert("a1".to_string(), vec![0.2, 0.8]);
        scores.insert("b0".to_string(), vec![0.3, 0.7]);
        scores.insert("b1".to_string(), vec![0.1, 0.6]);
        (manifest, concepts, scores)
    }

    #[test]
    fn evaluate_matches_hand_worked_example() {
        let (manifest, concepts, scores) = fixture();
        let report = evaluate(&manifest, &concepts, &scores, 7, "hash", 123).unwrap();
        assert_eq!(report.videos, 4);
        assert_eq!(report.top1, 0.75);
        // Two concepts: depth min(3, 2) = 2 covers every class here.
        assert_eq!(report.top3, 1.0);
        assert_eq!(report.confusion, vec![vec![1, 1], vec![0, 2]]);
        // Rank by concept-a score: a0 .9, b0 .3, a1 .2, b1 .1 -> AP 5/6.
        assert!((report.per_class_ap[0] - 5.0 / 6.0).abs() < 1e-15);
        // Rank by concept-b score: a1 .8, b0 .7, b1 .6, a0 .1 -> AP 7/12.
        assert!((report.per_class_ap[1] - 7.0 / 12.0).abs() < 1e-15);
        assert!((report.mean_ap - 17.0 / 24.0).abs() < 1e-15);
        assert_eq!(report.seed, 7);
        assert_eq!(report.config_hash, "hash");
        assert_eq!(report.timestamp, 123);
    }

    #[test]
    fn ranking_ties_keep_manifest_order() {
        let (manifest, concepts, mut scores) = fixture();
        for row in scores.values_mut() {
            *row = vec![0.5, 0.5];
        }
        let report = evaluate(&manifest, &concepts, &scores, 0, "h", 0).unwrap();
        // All tied: ranking is manifest order a0 a1 b0 b1.
        // Concept a flags [1,1,0,0] -> AP 1; concept b flags [0,0,1,1] -> (1/3 + 2/4)/2.
        assert!((report.per_class_ap[0] - 1.0).abs() < 1e-15);
        assert!((report.per_class_ap[1] - (1.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15);
        // Tied rows predict the lowest concept index.
        assert_eq!(report.confusion[0], vec![2, 0]);
        assert_eq!(report.confusion[1], vec![2, 0]);
    }

    #[test]
    fn evaluate_rejects_missing_and_malformed_rows() {
        let (manifest, concepts, scores) = fixture();

        let mut missing = scores.clone();
        missing.remove("b1");
        assert!(evaluate(&manifest, &concepts, &missing, 0, "h", 0).is_err());

        let mut short = scores.clone();
        short.insert("a0".into(), vec![0.5]);
        assert!(evaluate(&manifest, &concepts, &short, 0, "h", 0).is_err());

        let mut bad = scores;
        bad.insert("a0".into(), vec![f64::NAN, 0.0]);
        assert!(evaluate(&manifest, &concepts, &bad, 0, "h", 0).is_err());
    }

    #[test]
    fn evaluate_requires_positives_for_every_concept() {
        let (manifest, mut concepts, scores) = fixture();
        concepts.push("c".to_string());
        let mut padded = HashMap::new();
        for (k, v) in scores {
            let mut row = v.clone();
            row.push(0.0);
            padded.insert(k, row);
        }
        let err = evaluate(&manifest, &concepts, &padded, 0, "h", 0).unwrap_err();
        assert!(err.to_string().contains("no held-out videos"));
    }

    #[test]
    fn fingerprint_ignores_timestamp_but_not_results() {
        let (manifest, concepts, scores) = fixture();
        let a = evaluate(&manifest, &concepts, &scores, 0, "h", 1).unwrap();
        let b = evaluate(&manifest, &concepts, &scores, 0, "h", 99).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = evaluate(&manifest, &concepts, &scores, 1, "h", 1).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn report_writes_and_reads_back() {
        let (manifest, concepts, scores) = fixture();
        let report = evaluate(&manifest, &concepts, &scores, 0, "h", 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/report.json");
        report.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.fingerprint(), report.fingerprint());
        assert_eq!(text, report.to_json());
    }
}
