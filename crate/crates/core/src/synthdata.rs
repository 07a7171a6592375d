//! Synthetic two-domain fixture. Each class draws a distinct 7x7 stamp on a
//! noisy background. Source images are stills with class-correlated
//! background tint, near-fixed stamp positions and full contrast. Target
//! videos drop the tint, randomize position per video, lower contrast,
//! double the noise, and scatter faint stamps of random classes as clutter,
//! so models keyed to source shortcuts or to whole-frame pooling degrade
//! while the subject stamp itself stays recognizable.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::manifest::{save_manifest, Split, VideoRecord};
use crate::rng;
use crate::tensor::{write_frame_file, Tensor};

const STAMP: usize = 7;
const MAX_CONCEPTS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct DomainStyle {
    pub background: f64,
    /// Background offset added per class index: the class-correlated tint.
    pub tint_step: f64,
    pub background_jitter: f64,
    pub contrast: f64,
    /// Uniform stamp displacement, per image (source) or per video (target).
    pub position_jitter: usize,
    pub noise_scale: f64,
    /// Clutter stamps drawn per frame: each is a random class's stamp at
    /// `distractor_amplitude` contrast, placed anywhere in the frame.
    pub distractors: usize,
    pub distractor_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub concepts: Vec<String>,
    pub image_size: usize,
    pub frames_per_video: usize,
    pub source_images_per_class: usize,
    pub train_videos_per_class: usize,
    pub test_videos_per_class: usize,
    pub noise_level: f64,
    pub seed: u64,
    pub source: DomainStyle,
    pub target: DomainStyle,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            concepts: ["handshake", "highfive", "hug", "kiss"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            image_size: 24,
            frames_per_video: 12,
            source_images_per_class: 64,
            train_videos_per_class: 2,
            test_videos_per_class: 8,
            noise_level: 0.02,
            seed: 0,
            source: DomainStyle {
                background: 0.15,
                tint_step: 0.02,
                background_jitter: 0.12,
                contrast: 1.0,
                position_jitter: 1,
                noise_scale: 1.0,
                // Source stills carry mild context clutter; without it the
                // classifier never needs contrast-selective detectors and
                // its attention fields inherit class-dependent scales.
                distractors: 3,
                distractor_amplitude: 0.25,
            },
            target: DomainStyle {
                background: 0.25,
                tint_step: 0.0,
                background_jitter: 0.02,
                contrast: 0.8,
                position_jitter: 4,
                noise_scale: 2.0,
                distractors: 4,
                distractor_amplitude: 0.3,
            },
        }
    }
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    let n = cfg.concepts.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 concepts, got {n}"
        )));
    }
    if n > MAX_CONCEPTS {
        return Err(Error::InvalidArgument(format!(
            "generator draws {MAX_CONCEPTS} distinct stamp shapes, cannot cover {n} concepts"
        )));
    }
    for (i, c) in cfg.concepts.iter().enumerate() {
        if c.is_empty() {
            return Err(Error::InvalidArgument(format!("concept {i} has an empty name")));
        }
        if cfg.concepts[..i].contains(c) {
            return Err(Error::InvalidArgument(format!("duplicate concept `{c}`")));
        }
    }
    if cfg.image_size < 12 {
        return Err(Error::InvalidArgument(format!(
            "image size must be at least 12, got {}",
            cfg.image_size
        )));
    }
    if cfg.frames_per_video == 0 {
        return Err(Error::InvalidArgument("frames per video must be positive".into()));
    }
    if cfg.source_images_per_class == 0
        || cfg.train_videos_per_class == 0
        || cfg.test_videos_per_class == 0
    {
        return Err(Error::InvalidArgument(
            "per-class image and video counts must be positive".into(),
        ));
    }
    if !(cfg.noise_level >= 0.0 && cfg.noise_level.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise level must be a finite non-negative number, got {}",
            cfg.noise_level
        )));
    }
    for style in [&cfg.source, &cfg.target] {
        if !(style.contrast.is_finite() && style.contrast >= 0.0) {
            return Err(Error::InvalidArgument("contrast must be non-negative".into()));
        }
        if !(style.noise_scale.is_finite() && style.noise_scale >= 0.0) {
            return Err(Error::InvalidArgument("noise scale must be non-negative".into()));
        }
        if !(style.distractor_amplitude.is_finite() && style.distractor_amplitude >= 0.0) {
            return Err(Error::InvalidArgument(
                "distractor amplitude must be non-negative".into(),
            ));
        }
    }
    Ok(())
}

/// Binary 7x7 stamp for a class. The first four are the same striped
/// texture at four orientations: 2px stripes with 1px gaps, horizontal,
/// vertical, diagonal and anti-diagonal. Equal coverage keeps per-class
/// energy balanced, dense texture survives pooling, and a 2px stripe
/// contains no 3-run of any other orientation, so no 3x3 window of one
/// class reads as another. Classes 4 and 5 (dot grid, ring) extend the
/// family for wider concept sets. Diagonal orientation is a class
/// distinction here, so mirror augmentation does not suit this data.
fn stamp(class: usize) -> [[f64; STAMP]; STAMP] {
    let mut cells = [[0.0; STAMP]; STAMP];
    for y in 0..STAMP {
        for x in 0..STAMP {
            let on = match class {
                0 => y % 3 != 2,
                1 => x % 3 != 2,
                2 => (x as isize - y as isize).rem_euclid(3) != 2,
                3 => (x + y) % 3 != 2,
                4 => y % 3 != 2 && x % 3 != 2,
                _ => y == 0 || y == STAMP - 1 || x == 0 || x == STAMP - 1,
            };
            if on {
                cells[y][x] = 1.0;
            }
        }
    }
    cells
}

/// Home position (top-left corner) of a class's stamp.
fn base_position(class: usize, size: usize) -> (usize, usize) {
    let near = 2;
    let far = size - STAMP - 2;
    let mid = (size - STAMP) / 2;
    match class {
        0 => (near, near),
        1 => (far, far),
        2 => (near, far),
        3 => (far, near),
        4 => (mid, mid),
        _ => (near, mid),
    }
}

fn clamp_pos(v: isize, size: usize) -> usize {
    v.clamp(0, (size - STAMP) as isize) as usize
}

struct FrameSpec {
    background: f64,
    top: usize,
    left: usize,
    amplitude: f64,
    noise_sigma: f64,
    distractor_amplitude: f64,
}

/// A clutter stamp: class shape plus top-left placement.
type Distractor = (usize, usize, usize);

fn render_frame<R: Rng>(
    spec: &FrameSpec,
    class: usize,
    size: usize,
    distractors: &[Distractor],
    rng: &mut R,
) -> Result<Tensor> {
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::InvalidArgument(format!("noise distribution: {e}")))?;
    let mut values = vec![spec.background; size * size];
    for &(d_class, top, left) in distractors {
        let cells = stamp(d_class);
        for y in 0..STAMP {
            for x in 0..STAMP {
                values[(top + y) * size + left + x] += spec.distractor_amplitude * cells[y][x];
            }
        }
    }
    let cells = stamp(class);
    for y in 0..STAMP {
        for x in 0..STAMP {
            values[(spec.top + y) * size + spec.left + x] += spec.amplitude * cells[y][x];
        }
    }
    for v in &mut values {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    Tensor::new(vec![1, size, size], values)
}

fn jitter<R: Rng>(rng: &mut R, radius: usize) -> isize {
    if radius == 0 {
        return 0;
    }
    let r = radius as i64;
    rng.random_range(-r..=r) as isize
}

/// Generates the dataset under `out_dir` and returns the manifest path.
/// Frames are written as frame tensor files; every pixel lands in [0, 1].
/// Fully deterministic per seed: each video draws from its own RNG stream,
/// so generation order cannot leak between videos.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    validate(cfg)?;
    let size = cfg.image_size;
    let mut records = Vec::new();

    let splits = [
        (Split::Source, "src", cfg.source_images_per_class, 1),
        (
            Split::TargetTrain,
            "trn",
            cfg.train_videos_per_class,
            cfg.frames_per_video,
        ),
        (
            Split::TargetTest,
            "tst",
            cfg.test_videos_per_class,
            cfg.frames_per_video,
        ),
    ];
    for (split, prefix, per_class, frames) in splits {
        let style = if split == Split::Source {
            &cfg.source
        } else {
            &cfg.target
        };
        for (class, concept) in cfg.concepts.iter().enumerate() {
            let (base_top, base_left) = base_position(class, size);
            for v in 0..per_class {
                let video_id = format!("{prefix}_{concept}_{v:02}");
                let mut r = rng::stream(cfg.seed, &format!("synth/{prefix}/{class}/{v}"));
                let background = style.background
                    + style.tint_step * class as f64
                    + if style.background_jitter > 0.0 {
                        r.random_range(-style.background_jitter..=style.background_jitter)
                    } else {
                        0.0
                    };
                let video_top = base_top as isize + jitter(&mut r, style.position_jitter);
                let video_left = base_left as isize + jitter(&mut r, style.position_jitter);
                let mut frame_paths = Vec::with_capacity(frames);
                for f in 0..frames {
                    // Stills sit at the video position; video frames wobble
                    // by one pixel around it.
                    let (top, left) = if frames == 1 {
                        (video_top, video_left)
                    } else {
                        (video_top + jitter(&mut r, 1), video_left + jitter(&mut r, 1))
                    };
                    let subject = (clamp_pos(top, size), clamp_pos(left, size));
                    let mut distractors: Vec<Distractor> =
                        Vec::with_capacity(style.distractors);
                    for _ in 0..style.distractors {
                        // Clutter is always some other class's shape.
                        let d = r.random_range(0..cfg.concepts.len() - 1);
                        let d_class = if d >= class { d + 1 } else { d };
                        // Keep clutter off the subject and off other clutter
                        // so overlaps cannot stack up to subject contrast.
                        // Bounded attempts keep generation total; the final
                        // draw is used as-is if no clear spot turns up.
                        let mut spot = (0, 0);
                        for _attempt in 0..20 {
                            spot = (
                                r.random_range(0..=size - STAMP),
                                r.random_range(0..=size - STAMP),
                            );
                            let clear = std::iter::once(subject)
                                .chain(distractors.iter().map(|&(_, y, x)| (y, x)))
                                .all(|(y, x)| {
                                    spot.0 + STAMP <= y
                                        || y + STAMP <= spot.0
                                        || spot.1 + STAMP <= x
                                        || x + STAMP <= spot.1
                                });
                            if clear {
                                break;
                            }
                        }
                        distractors.push((d_class, spot.0, spot.1));
                    }
                    let frame = render_frame(
                        &FrameSpec {
                            background,
                            top: clamp_pos(top, size),
                            left: clamp_pos(left, size),
                            amplitude: 0.6 * style.contrast,
                            noise_sigma: cfg.noise_level * style.noise_scale,
                            distractor_amplitude: style.distractor_amplitude,
                        },
                        class,
                        size,
                        &distractors,
                        &mut r,
                    )?;
                    let rel = format!("frames/{video_id}/f{f:02}.atim");
                    write_frame_file(&out_dir.join(&rel), &frame)?;
                    frame_paths.push(rel);
                }
                records.push(VideoRecord {
                    video_id,
                    class: concept.clone(),
                    split,
                    frames: frame_paths,
                });
            }
        }
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    save_manifest(&records, &manifest_path)?;
    Ok(manifest_path)
}
