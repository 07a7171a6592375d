//! Class-conditional attention maps. For a concept c the map is
//! relu(sum_k alpha_k * A_k) where A is the designated conv layer's output
//! and alpha_k is the spatial mean of the gradient of the raw class score
//! with respect to channel k. Maps are deliberately not normalized: their
//! absolute magnitudes carry the evidence the downstream scoring relies on.

use std::collections::HashMap;
use std::path::Path;

use crate::bytesio::{self, Reader};
use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;
use crate::net::{self, ForwardTrace, NetworkParams};
use crate::tensor::{read_frame_file, Tensor};

/// Spatial attention map for one (frame, concept) pair. Row-major values,
/// non-negative, not normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub concept: usize,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl AttentionMap {
    pub fn new(concept: usize, width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ShapeMismatch(format!(
                "attention map extents must be positive, got {width}x{height}"
            )));
        }
        if values.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{width}x{height} map holds {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "attention map value at index {pos} is {}",
                values[pos]
            )));
        }
        Ok(AttentionMap {
            concept,
            width,
            height,
            values,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Per-channel weights of the designated conv layer for one concept.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWeights {
    pub concept: usize,
    pub values: Vec<f64>,
}

/// Spatial mean of d(score_concept)/d(A_k) per channel k. The seed gradient
/// is a one-hot on the raw scores, before any softmax.
pub fn channel_weights(
    params: &NetworkParams,
    trace: &ForwardTrace,
    concept: usize,
) -> Result<ChannelWeights> {
    let n = trace.logits().count();
    if concept >= n {
        return Err(Error::InvalidArgument(format!(
            "concept {concept} out of range for {n} scores"
        )));
    }
    let mut seed = vec![0.0; n];
    seed[concept] = 1.0;
    let seed = Tensor::new(vec![n], seed)?;
    let grad = net::activation_gradient(params, trace, &seed, params.spec.last_conv)?;
    let shape = grad.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "attention source must be rank 3, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let area = (h * w) as f64;
    let gv = grad.values();
    let mut values = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum = 0.0;
        for &g in &gv[ch * h * w..(ch + 1) * h * w] {
            sum += g;
        }
        values.push(sum / area);
    }
    Ok(ChannelWeights { concept, values })
}

/// Attention map for one concept from an existing forward trace.
pub fn attention_map_from_trace(
    params: &NetworkParams,
    trace: &ForwardTrace,
    concept: usize,
) -> Result<AttentionMap> {
    let weights = channel_weights(params, trace, concept)?;
    let source = trace.attention_source(&params.spec);
    let shape = source.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let sv = source.values();
    let mut values = vec![0.0; h * w];
    for ch in 0..c {
        let alpha = weights.values[ch];
        let base = ch * h * w;
        for (i, slot) in values.iter_mut().enumerate() {
            *slot += alpha * sv[base + i];
        }
    }
    for v in &mut values {
        *v = v.max(0.0);
    }
    AttentionMap::new(concept, w, h, values)
}

/// Runs the network on one frame and extracts the map for `concept`.
pub fn attention_map(
    params: &NetworkParams,
    frame: &Tensor,
    concept: usize,
) -> Result<AttentionMap> {
    let trace = net::forward(params, frame)?;
    attention_map_from_trace(params, &trace, concept)
}

/// Maps for every concept of one frame, sharing a single forward pass.
/// Element i holds the map for concept i.
pub fn attention_stack(params: &NetworkParams, frame: &Tensor) -> Result<Vec<AttentionMap>> {
    let trace = net::forward(params, frame)?;
    let n = trace.logits().count();
    (0..n)
        .map(|c| attention_map_from_trace(params, &trace, c))
        .collect()
}

/// What to do when a frame file cannot be read while filling the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnreadablePolicy {
    Skip,
    Abort,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub video_id: String,
    pub frame: u32,
    pub map: AttentionMap,
}

/// Precomputed attention maps keyed by (video, frame, concept).
#[derive(Debug, Clone)]
pub struct AttentionCache {
    entries: Vec<CacheEntry>,
    index: HashMap<(String, u32, u32), usize>,
}

impl AttentionCache {
    pub fn new(entries: Vec<CacheEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            let key = (e.video_id.clone(), e.frame, e.map.concept as u32);
            if index.insert(key, i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate cache entry for video `{}` frame {} concept {}",
                    e.video_id, e.frame, e.map.concept
                )));
            }
        }
        Ok(AttentionCache { entries, index })
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn get(&self, video_id: &str, frame: u32, concept: usize) -> Option<&AttentionMap> {
        self.index
            .get(&(video_id.to_owned(), frame, concept as u32))
            .map(|&i| &self.entries[i].map)
    }

    /// All concept maps of one frame, ordered by concept index.
    pub fn stack(&self, video_id: &str, frame: u32, n_concepts: usize) -> Result<Vec<AttentionMap>> {
        (0..n_concepts)
            .map(|c| {
                self.get(video_id, frame, c).cloned().ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "cache has no map for video `{video_id}` frame {frame} concept {c}"
                    ))
                })
            })
            .collect()
    }

    /// Writes the cache: magic, version, entry count, then per entry the
    /// video id, frame index, concept, dims and 32-bit LE values. Entry
    /// order is preserved, so write-read-write is byte-identical.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        bytesio::put_u32(&mut out, CACHE_VERSION);
        bytesio::put_usize_as_u32(&mut out, self.entries.len(), "cache entry count")?;
        for e in &self.entries {
            bytesio::put_usize_as_u32(&mut out, e.video_id.len(), "video id length")?;
            out.extend_from_slice(e.video_id.as_bytes());
            bytesio::put_u32(&mut out, e.frame);
            bytesio::put_usize_as_u32(&mut out, e.map.concept, "concept index")?;
            let w = u16::try_from(e.map.width)
                .map_err(|_| Error::InvalidArgument("map width exceeds u16".into()))?;
            let h = u16::try_from(e.map.height)
                .map_err(|_| Error::InvalidArgument("map height exceeds u16".into()))?;
            bytesio::put_u16(&mut out, w);
            bytesio::put_u16(&mut out, h);
            for &v in &e.map.values {
                bytesio::put_f32(&mut out, v as f32);
            }
        }
        bytesio::write_file(path, &out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = bytesio::read_file(path)?;
        let mut r = Reader::new(path, &buf);
        r.magic(CACHE_MAGIC)?;
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(r.error(format!(
                "unsupported cache version {version}, expected {CACHE_VERSION}"
            )));
        }
        let count = r.u32()?;
        // 16 bytes is the smallest possible entry (empty id, 1x1 map).
        let count = r.checked_count(count, 16, "cache entry")?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let id_len = r.u32()? as usize;
            let id_bytes = r.bytes(id_len)?;
            let video_id = std::str::from_utf8(id_bytes)
                .map_err(|_| r.error("video id is not valid UTF-8"))?
                .to_owned();
            let frame = r.u32()?;
            let concept = r.u32()? as usize;
            let w = r.u16()? as usize;
            let h = r.u16()? as usize;
            let n = r.checked_count((w * h) as u32, 4, "map value")?;
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                values.push(r.f32()? as f64);
            }
            let map = AttentionMap::new(concept, w, h, values)
                .map_err(|e| r.error(e.to_string()))?;
            entries.push(CacheEntry {
                video_id,
                frame,
                map,
            });
        }
        r.finish()?;
        AttentionCache::new(entries)
    }
}

const CACHE_MAGIC: &[u8; 4] = b"ATTC";
const CACHE_VERSION: u32 = 1;

/// Computes attention stacks for every frame of every manifest record, in
/// manifest order. Unreadable frames are skipped with a warning or abort the
/// run, per `policy`.
pub fn precompute_cache(
    params: &NetworkParams,
    manifest: &DatasetManifest,
    policy: UnreadablePolicy,
) -> Result<AttentionCache> {
    let mut entries = Vec::new();
    for record in &manifest.records {
        for (frame_idx, _) in record.frames.iter().enumerate() {
            let path = manifest.frame_path(record, frame_idx);
            let tensor = match read_frame_file(&path) {
                Ok(t) => t,
                Err(e) => match policy {
                    UnreadablePolicy::Skip => {
                        log::warn!(
                            "skipping unreadable frame {} of video `{}`: {e}",
                            frame_idx,
                            record.video_id
                        );
                        continue;
                    }
                    UnreadablePolicy::Abort => return Err(e),
                },
            };
            let stack = attention_stack(params, &tensor)?;
            for map in stack {
                entries.push(CacheEntry {
                    video_id: record.video_id.clone(),
                    frame: frame_idx as u32,
                    map,
                });
            }
        }
    }
    AttentionCache::new(entries)
}
