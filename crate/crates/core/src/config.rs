//! Run configuration: a flat `key = value` text file with `#` comments.
//! Unknown and duplicate keys are errors. The canonical rendering fixes key
//! order and formatting, and its SHA-256 is the config hash recorded in
//! evaluation reports.

use std::path::Path;

use crate::embedding::{self, ConceptVocabulary};
use crate::energynet::EnergyNetTrainConfig;
use crate::error::{Error, Result};
use crate::gradcam::UnreadablePolicy;
use crate::net::{self, NetworkSpec, TrainConfig};
use crate::rng::sha256_hex;
use crate::synthdata::{DomainStyle, SynthConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub concepts: Vec<String>,
    pub image_size: usize,
    pub frames_per_video: usize,
    pub source_images_per_class: usize,
    pub train_videos_per_class: usize,
    pub test_videos_per_class: usize,
    pub noise_level: f64,
    pub source_background: f64,
    pub source_tint_step: f64,
    pub source_background_jitter: f64,
    pub source_contrast: f64,
    pub source_position_jitter: usize,
    pub source_noise_scale: f64,
    pub source_distractors: usize,
    pub source_distractor_amplitude: f64,
    pub target_background: f64,
    pub target_tint_step: f64,
    pub target_background_jitter: f64,
    pub target_contrast: f64,
    pub target_position_jitter: usize,
    pub target_noise_scale: f64,
    pub target_distractors: usize,
    pub target_distractor_amplitude: f64,
    pub architecture: String,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub hflip: bool,
    pub window_size: usize,
    pub frame_stride: usize,
    /// `onehot` or a path to an embedding text file.
    pub embeddings: String,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub enet_epochs: usize,
    pub enet_learning_rate: f64,
    pub enet_weight_decay: f64,
    pub margin: f64,
    pub triplet_margin: f64,
    pub triplet_weight: f64,
    pub hard_k: usize,
    pub random_r: usize,
    pub small_pool: usize,
    pub large_pool: usize,
    pub growth_threshold: f64,
    /// `abort` or `skip`: reaction to unreadable frames while caching.
    pub cache_unreadable: String,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        RunConfig {
            concepts: synth.concepts.clone(),
            image_size: synth.image_size,
            frames_per_video: synth.frames_per_video,
            source_images_per_class: synth.source_images_per_class,
            train_videos_per_class: synth.train_videos_per_class,
            test_videos_per_class: synth.test_videos_per_class,
            noise_level: synth.noise_level,
            source_background: synth.source.background,
            source_tint_step: synth.source.tint_step,
            source_background_jitter: synth.source.background_jitter,
            source_contrast: synth.source.contrast,
            source_position_jitter: synth.source.position_jitter,
            source_noise_scale: synth.source.noise_scale,
            source_distractors: synth.source.distractors,
            source_distractor_amplitude: synth.source.distractor_amplitude,
            target_background: synth.target.background,
            target_tint_step: synth.target.tint_step,
            target_background_jitter: synth.target.background_jitter,
            target_contrast: synth.target.contrast,
            target_position_jitter: synth.target.position_jitter,
            target_noise_scale: synth.target.noise_scale,
            target_distractors: synth.target.distractors,
            target_distractor_amplitude: synth.target.distractor_amplitude,
            architecture: "conv(16,3) relu maxpool(2) conv(16,3,last) relu gap dense(n)".into(),
            pretrain_epochs: 220,
            batch_size: 32,
            learning_rate: 0.4,
            weight_decay: 0.0005,
            hflip: false,
            window_size: 3,
            frame_stride: 1,
            embeddings: "onehot".into(),
            hidden_dim: 128,
            embed_dim: 64,
            enet_epochs: 90,
            enet_learning_rate: 0.01,
            enet_weight_decay: 0.0005,
            margin: 1.0,
            triplet_margin: 0.5,
            triplet_weight: 1.0,
            hard_k: 16,
            random_r: 4,
            small_pool: 32,
            large_pool: 256,
            growth_threshold: 0.5,
            cache_unreadable: "abort".into(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Parses overrides on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.contains(&key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
            seen.push(key.to_string());
            cfg.apply(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn usize_of(key: &str, v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("key `{key}`: bad integer `{v}`")))
        }
        fn u64_of(key: &str, v: &str) -> Result<u64> {
            v.parse()
                .map_err(|_| Error::Config(format!("key `{key}`: bad integer `{v}`")))
        }
        fn f64_of(key: &str, v: &str) -> Result<f64> {
            let x: f64 = v
                .parse()
                .map_err(|_| Error::Config(format!("key `{key}`: bad number `{v}`")))?;
            if !x.is_finite() {
                return Err(Error::Config(format!("key `{key}`: non-finite value `{v}`")));
            }
            Ok(x)
        }
        fn bool_of(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!(
                    "key `{key}`: expected true or false, got `{v}`"
                ))),
            }
        }
        match key {
            "concepts" => {
                let names: Vec<String> = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                self.concepts = names;
            }
            "image_size" => self.image_size = usize_of(key, value)?,
            "frames_per_video" => self.frames_per_video = usize_of(key, value)?,
            "source_images_per_class" => self.source_images_per_class = usize_of(key, value)?,
            "train_videos_per_class" => self.train_videos_per_class = usize_of(key, value)?,
            "test_videos_per_class" => self.test_videos_per_class = usize_of(key, value)?,
            "noise_level" => self.noise_level = f64_of(key, value)?,
            "source_background" => self.source_background = f64_of(key, value)?,
            "source_tint_step" => self.source_tint_step = f64_of(key, value)?,
            "source_background_jitter" => self.source_background_jitter = f64_of(key, value)?,
            "source_contrast" => self.source_contrast = f64_of(key, value)?,
            "source_position_jitter" => self.source_position_jitter = usize_of(key, value)?,
            "source_noise_scale" => self.source_noise_scale = f64_of(key, value)?,
            "source_distractors" => self.source_distractors = usize_of(key, value)?,
            "source_distractor_amplitude" => {
                self.source_distractor_amplitude = f64_of(key, value)?
            }
            "target_background" => self.target_background = f64_of(key, value)?,
            "target_tint_step" => self.target_tint_step = f64_of(key, value)?,
            "target_background_jitter" => self.target_background_jitter = f64_of(key, value)?,
            "target_contrast" => self.target_contrast = f64_of(key, value)?,
            "target_position_jitter" => self.target_position_jitter = usize_of(key, value)?,
            "target_noise_scale" => self.target_noise_scale = f64_of(key, value)?,
            "target_distractors" => self.target_distractors = usize_of(key, value)?,
            "target_distractor_amplitude" => {
                self.target_distractor_amplitude = f64_of(key, value)?
            }
            "architecture" => self.architecture = value.to_string(),
            "pretrain_epochs" => self.pretrain_epochs = usize_of(key, value)?,
            "batch_size" => self.batch_size = usize_of(key, value)?,
            "learning_rate" => self.learning_rate = f64_of(key, value)?,
            "weight_decay" => self.weight_decay = f64_of(key, value)?,
            "hflip" => self.hflip = bool_of(key, value)?,
            "window_size" => self.window_size = usize_of(key, value)?,
            "frame_stride" => self.frame_stride = usize_of(key, value)?,
            "embeddings" => self.embeddings = value.to_string(),
            "hidden_dim" => self.hidden_dim = usize_of(key, value)?,
            "embed_dim" => self.embed_dim = usize_of(key, value)?,
            "enet_epochs" => self.enet_epochs = usize_of(key, value)?,
            "enet_learning_rate" => self.enet_learning_rate = f64_of(key, value)?,
            "enet_weight_decay" => self.enet_weight_decay = f64_of(key, value)?,
            "margin" => self.margin = f64_of(key, value)?,
            "triplet_margin" => self.triplet_margin = f64_of(key, value)?,
            "triplet_weight" => self.triplet_weight = f64_of(key, value)?,
            "hard_k" => self.hard_k = usize_of(key, value)?,
            "random_r" => self.random_r = usize_of(key, value)?,
            "small_pool" => self.small_pool = usize_of(key, value)?,
            "large_pool" => self.large_pool = usize_of(key, value)?,
            "growth_threshold" => self.growth_threshold = f64_of(key, value)?,
            "cache_unreadable" => self.cache_unreadable = value.to_string(),
            "seed" => self.seed = u64_of(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown key `{other}`")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.concepts.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 concepts, got {}",
                self.concepts.len()
            )));
        }
        for (i, c) in self.concepts.iter().enumerate() {
            if self.concepts[..i].contains(c) {
                return Err(Error::Config(format!("duplicate concept `{c}`")));
            }
        }
        if self.image_size < 12 {
            return Err(Error::Config(format!(
                "image_size must be at least 12, got {}",
                self.image_size
            )));
        }
        if self.window_size == 0 {
            return Err(Error::Config("window_size must be positive".into()));
        }
        if self.frame_stride == 0 {
            return Err(Error::Config("frame_stride must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.hard_k == 0 {
            return Err(Error::Config("hard_k must be positive".into()));
        }
        if self.small_pool < self.hard_k + self.random_r {
            return Err(Error::Config(format!(
                "small_pool {} cannot cover hard_k {} + random_r {}",
                self.small_pool, self.hard_k, self.random_r
            )));
        }
        if self.large_pool < self.small_pool {
            return Err(Error::Config(format!(
                "large_pool {} below small_pool {}",
                self.large_pool, self.small_pool
            )));
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("enet_learning_rate", self.enet_learning_rate),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("enet_weight_decay", self.enet_weight_decay),
            ("margin", self.margin),
            ("triplet_margin", self.triplet_margin),
            ("triplet_weight", self.triplet_weight),
            ("noise_level", self.noise_level),
            ("source_distractor_amplitude", self.source_distractor_amplitude),
            ("target_distractor_amplitude", self.target_distractor_amplitude),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        match self.cache_unreadable.as_str() {
            "abort" | "skip" => {}
            other => {
                return Err(Error::Config(format!(
                    "cache_unreadable must be `abort` or `skip`, got `{other}`"
                )))
            }
        }
        if self.embeddings.is_empty() {
            return Err(Error::Config("embeddings must not be empty".into()));
        }
        Ok(())
    }

    /// Fixed-order rendering; two configs with equal values render to equal
    /// bytes regardless of the files they came from.
    pub fn render_canonical(&self) -> String {
        let mut out = String::new();
        let mut push = |key: &str, value: String| {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        };
        push("concepts", self.concepts.join(","));
        push("image_size", self.image_size.to_string());
        push("frames_per_video", self.frames_per_video.to_string());
        push(
            "source_images_per_class",
            self.source_images_per_class.to_string(),
        );
        push(
            "train_videos_per_class",
            self.train_videos_per_class.to_string(),
        );
        push(
            "test_videos_per_class",
            self.test_videos_per_class.to_string(),
        );
        push("noise_level", self.noise_level.to_string());
        push("source_background", self.source_background.to_string());
        push("source_tint_step", self.source_tint_step.to_string());
        push(
            "source_background_jitter",
            self.source_background_jitter.to_string(),
        );
        push("source_contrast", self.source_contrast.to_string());
        push(
            "source_position_jitter",
            self.source_position_jitter.to_string(),
        );
        push("source_noise_scale", self.source_noise_scale.to_string());
        push("source_distractors", self.source_distractors.to_string());
        push(
            "source_distractor_amplitude",
            self.source_distractor_amplitude.to_string(),
        );
        push("target_background", self.target_background.to_string());
        push("target_tint_step", self.target_tint_step.to_string());
        push(
            "target_background_jitter",
            self.target_background_jitter.to_string(),
        );
        push("target_contrast", self.target_contrast.to_string());
        push(
            "target_position_jitter",
            self.target_position_jitter.to_string(),
        );
        push("target_noise_scale", self.target_noise_scale.to_string());
        push("target_distractors", self.target_distractors.to_string());
        push(
            "target_distractor_amplitude",
            self.target_distractor_amplitude.to_string(),
        );
        push("architecture", self.architecture.clone());
        push("pretrain_epochs", self.pretrain_epochs.to_string());
        push("batch_size", self.batch_size.to_string());
        push("learning_rate", self.learning_rate.to_string());
        push("weight_decay", self.weight_decay.to_string());
        push("hflip", self.hflip.to_string());
        push("window_size", self.window_size.to_string());
        push("frame_stride", self.frame_stride.to_string());
        push("embeddings", self.embeddings.clone());
        push("hidden_dim", self.hidden_dim.to_string());
        push("embed_dim", self.embed_dim.to_string());
        push("enet_epochs", self.enet_epochs.to_string());
        push("enet_learning_rate", self.enet_learning_rate.to_string());
        push("enet_weight_decay", self.enet_weight_decay.to_string());
        push("margin", self.margin.to_string());
        push("triplet_margin", self.triplet_margin.to_string());
        push("triplet_weight", self.triplet_weight.to_string());
        push("hard_k", self.hard_k.to_string());
        push("random_r", self.random_r.to_string());
        push("small_pool", self.small_pool.to_string());
        push("large_pool", self.large_pool.to_string());
        push("growth_threshold", self.growth_threshold.to_string());
        push("cache_unreadable", self.cache_unreadable.clone());
        push("seed", self.seed.to_string());
        out
    }

    /// SHA-256 of the canonical rendering of the effective configuration.
    pub fn hash(&self) -> String {
        sha256_hex(self.render_canonical().as_bytes())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            concepts: self.concepts.clone(),
            image_size: self.image_size,
            frames_per_video: self.frames_per_video,
            source_images_per_class: self.source_images_per_class,
            train_videos_per_class: self.train_videos_per_class,
            test_videos_per_class: self.test_videos_per_class,
            noise_level: self.noise_level,
            seed: self.seed,
            source: DomainStyle {
                background: self.source_background,
                tint_step: self.source_tint_step,
                background_jitter: self.source_background_jitter,
                contrast: self.source_contrast,
                position_jitter: self.source_position_jitter,
                noise_scale: self.source_noise_scale,
                distractors: self.source_distractors,
                distractor_amplitude: self.source_distractor_amplitude,
            },
            target: DomainStyle {
                background: self.target_background,
                tint_step: self.target_tint_step,
                background_jitter: self.target_background_jitter,
                contrast: self.target_contrast,
                position_jitter: self.target_position_jitter,
                noise_scale: self.target_noise_scale,
                distractors: self.target_distractors,
                distractor_amplitude: self.target_distractor_amplitude,
            },
        }
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        net::parse_architecture(
            &self.architecture,
            self.concepts.len(),
            [1, self.image_size, self.image_size],
        )
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            hflip: self.hflip,
            seed: self.seed,
        }
    }

    pub fn enet_config(&self) -> EnergyNetTrainConfig {
        EnergyNetTrainConfig {
            epochs: self.enet_epochs,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            learning_rate: self.enet_learning_rate,
            weight_decay: self.enet_weight_decay,
            margin: self.margin,
            triplet_margin: self.triplet_margin,
            triplet_weight: self.triplet_weight,
            hard_k: self.hard_k,
            random_r: self.random_r,
            small_pool: self.small_pool,
            large_pool: self.large_pool,
            growth_threshold: self.growth_threshold,
            seed: self.seed,
        }
    }

    /// Resolves the concept vocabulary: one-hot or an embedding file. A
    /// relative file path is taken relative to `base_dir`.
    pub fn vocabulary(&self, base_dir: &Path) -> Result<ConceptVocabulary> {
        if self.embeddings == "onehot" {
            embedding::one_hot_vocabulary(&self.concepts)
        } else {
            let path = Path::new(&self.embeddings);
            let resolved = if path.is_absolute() {
                path.to_path_buf()
            } else {
                base_dir.join(path)
            };
            embedding::load_embeddings(&resolved, &self.concepts)
        }
    }

    pub fn unreadable_policy(&self) -> UnreadablePolicy {
        match self.cache_unreadable.as_str() {
            "skip" => UnreadablePolicy::Skip,
            _ => UnreadablePolicy::Abort,
        }
    }
}
