//! Attention energy: the maximum sum of any s x s window of a map. A video's
//! score for a concept is the mean energy over its sampled frames; the
//! predicted concept is the argmax, lowest index on ties.

use crate::error::{Error, Result};
use crate::gradcam::AttentionMap;

/// Per-concept video scores; index is the concept index.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoScoreTable {
    pub scores: Vec<f64>,
}

fn check_window(map: &AttentionMap, s: usize) -> Result<()> {
    if s == 0 {
        return Err(Error::InvalidArgument("window size must be positive".into()));
    }
    if s > map.width || s > map.height {
        return Err(Error::InvalidArgument(format!(
            "window {s} does not fit a {}x{} map",
            map.width, map.height
        )));
    }
    Ok(())
}

/// Reference implementation: enumerates every window position and sums its
/// cells directly.
pub fn window_energy(map: &AttentionMap, s: usize) -> Result<f64> {
    check_window(map, s)?;
    let mut best = f64::NEG_INFINITY;
    for y0 in 0..=map.height - s {
        for x0 in 0..=map.width - s {
            let mut sum = 0.0;
            for y in y0..y0 + s {
                let row = y * map.width;
                for x in x0..x0 + s {
                    sum += map.values[row + x];
                }
            }
            if sum > best {
                best = sum;
            }
        }
    }
    Ok(best)
}

/// Same result via a summed-area table: each window sum is four lookups, so
/// the whole scan is linear in the map size.
pub fn window_energy_fast(map: &AttentionMap, s: usize) -> Result<f64> {
    check_window(map, s)?;
    let (w, h) = (map.width, map.height);
    // sat is (h+1) x (w+1) with a zero top row and left column;
    // sat[y+1][x+1] = sum of the rectangle [0..=y] x [0..=x].
    let stride = w + 1;
    let mut sat = vec![0.0; (h + 1) * stride];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * stride + (x + 1)] = map.values[y * w + x] + sat[y * stride + (x + 1)]
                + sat[(y + 1) * stride + x]
                - sat[y * stride + x];
        }
    }
    let mut best = f64::NEG_INFINITY;
    for y0 in 0..=h - s {
        for x0 in 0..=w - s {
            let (y1, x1) = (y0 + s, x0 + s);
            let sum = sat[y1 * stride + x1] - sat[y0 * stride + x1] - sat[y1 * stride + x0]
                + sat[y0 * stride + x0];
            if sum > best {
                best = sum;
            }
        }
    }
    Ok(best)
}

/// Mean window energy over the frames of one concept.
pub fn video_score(frames: &[AttentionMap], s: usize) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("video has no frames".into()));
    }
    let mut sum = 0.0;
    for map in frames {
        sum += window_energy_fast(map, s)?;
    }
    Ok(sum / frames.len() as f64)
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Classifies a video from per-frame attention stacks. `stacks[f][c]` is the
/// map of sampled frame f for concept c; every stack must cover the same
/// concepts in index order.
pub fn classify_unatt(
    stacks: &[Vec<AttentionMap>],
    s: usize,
) -> Result<(usize, VideoScoreTable)> {
    if stacks.is_empty() {
        return Err(Error::InvalidArgument("no frames to classify".into()));
    }
    let n = stacks[0].len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty attention stack".into()));
    }
    for (f, stack) in stacks.iter().enumerate() {
        if stack.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "frame {f} has {} concepts, frame 0 has {n}",
                stack.len()
            )));
        }
        for (c, map) in stack.iter().enumerate() {
            if map.concept != c {
                return Err(Error::InvalidArgument(format!(
                    "frame {f} position {c} holds concept {}",
                    map.concept
                )));
            }
        }
    }
    let mut scores = Vec::with_capacity(n);
    for c in 0..n {
        let mut sum = 0.0;
        for stack in stacks {
            sum += window_energy_fast(&stack[c], s)?;
        }
        scores.push(sum / stacks.len() as f64);
    }
    let predicted = argmax_first(&scores);
    Ok((predicted, VideoScoreTable { scores }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map_of(width: usize, height: usize, values: Vec<f64>) -> AttentionMap {
        AttentionMap::new(0, width, height, values).unwrap()
    }

    #[test]
    fn diagonal_example() {
        // 4x4 identity: the best 3x3 window catches three diagonal ones.
        let mut values = vec![0.0; 16];
        for i in 0..4 {
            values[i * 4 + i] = 1.0;
        }
        let map = map_of(4, 4, values);
        assert_eq!(window_energy(&map, 3).unwrap(), 3.0);
        assert_eq!(window_energy_fast(&map, 3).unwrap(), 3.0);
    }

    #[test]
    fn full_window_sums_everything() {
        let map = map_of(2, 2, vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(window_energy(&map, 2).unwrap(), 2.5);
        assert_eq!(window_energy_fast(&map, 2).unwrap(), 2.5);
    }

    #[test]
    fn window_of_one_picks_the_peak() {
        let map = map_of(3, 2, vec![0.0, 4.0, 1.0, 2.0, 3.0, 0.5]);
        assert_eq!(window_energy(&map, 1).unwrap(), 4.0);
        assert_eq!(window_energy_fast(&map, 1).unwrap(), 4.0);
    }

    #[test]
    fn rejects_bad_window_sizes() {
        let map = map_of(3, 3, vec![0.0; 9]);
        assert!(window_energy(&map, 0).is_err());
        assert!(window_energy(&map, 4).is_err());
        assert!(window_energy_fast(&map, 0).is_err());
        assert!(window_energy_fast(&map, 4).is_err());
    }

    #[test]
    fn video_score_is_mean_of_frame_energies() {
        // 1x1 maps with s=1: energy equals the single value.
        let frames = vec![map_of(1, 1, vec![0.2]), map_of(1, 1, vec![0.8])];
        assert!((video_score(&frames, 1).unwrap() - 0.5).abs() < 1e-12);
        assert!(video_score(&[], 1).is_err());
    }

    #[test]
    fn classify_breaks_ties_toward_lowest_index() {
        // Concept 0 energies (0.2, 0.8), concept 1 (0.6, 0.4): both mean
        // 0.5, so the tie goes to concept 0.
        let f0 = vec![
            AttentionMap::new(0, 1, 1, vec![0.2]).unwrap(),
            AttentionMap::new(1, 1, 1, vec![0.6]).unwrap(),
        ];
        let f1 = vec![
            AttentionMap::new(0, 1, 1, vec![0.8]).unwrap(),
            AttentionMap::new(1, 1, 1, vec![0.4]).unwrap(),
        ];
        let (pred, table) = classify_unatt(&[f0, f1], 1).unwrap();
        assert_eq!(pred, 0);
        assert!((table.scores[0] - 0.5).abs() < 1e-12);
        assert!((table.scores[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn classify_picks_highest_mean_energy() {
        let f0 = vec![
            AttentionMap::new(0, 1, 1, vec![0.1]).unwrap(),
            AttentionMap::new(1, 1, 1, vec![0.9]).unwrap(),
        ];
        let (pred, table) = classify_unatt(&[f0], 1).unwrap();
        assert_eq!(pred, 1);
        assert_eq!(table.scores.len(), 2);
    }

    #[test]
    fn classify_rejects_inconsistent_stacks() {
        let ok = vec![
            AttentionMap::new(0, 1, 1, vec![0.1]).unwrap(),
            AttentionMap::new(1, 1, 1, vec![0.9]).unwrap(),
        ];
        let short = vec![AttentionMap::new(0, 1, 1, vec![0.1]).unwrap()];
        assert!(classify_unatt(&[ok.clone(), short], 1).is_err());
        let misordered = vec![
            AttentionMap::new(1, 1, 1, vec![0.1]).unwrap(),
            AttentionMap::new(0, 1, 1, vec![0.9]).unwrap(),
        ];
        assert!(classify_unatt(&[misordered], 1).is_err());
        assert!(classify_unatt(&[], 1).is_err());
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax_first(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax_first(&[0.5, 1.0, 1.0]), 1);
        assert_eq!(argmax_first(&[0.5]), 0);
    }

    proptest! {
        /// Continuous values: the two implementations agree to tight
        /// relative tolerance on random maps and window sizes.
        #[test]
        fn fast_matches_naive_on_continuous_values(
            (w, h, s, values) in (3usize..=16, 3usize..=16)
                .prop_flat_map(|(w, h)| {
                    let max_s = w.min(h);
                    (Just(w), Just(h), 1..=max_s,
                     proptest::collection::vec(-4.0f64..4.0, w * h))
                })
        ) {
            let map = AttentionMap::new(0, w, h, values).unwrap();
            let naive = window_energy(&map, s).unwrap();
            let fast = window_energy_fast(&map, s).unwrap();
            let scale = naive.abs().max(1.0);
            prop_assert!((naive - fast).abs() <= 1e-12 * scale,
                "naive {naive} vs fast {fast}");
        }
    }
}
