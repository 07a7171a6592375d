//! Learned energy model. A flattened attention map concatenated with a
//! concept vector passes through two fully connected layers (ReLU between)
//! into an embedding f; the scalar energy is wf . f. Four weight-sharing
//! branches of one parameter set score (map, concept) pairs jointly: a
//! false-versus-true energy hinge plus a cosine triplet over embeddings.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bytesio::{self, Reader};
use crate::embedding::ConceptVocabulary;
use crate::energy::{argmax_first, VideoScoreTable};
use crate::error::{Error, Result};
use crate::gradcam::AttentionMap;
use crate::net::glorot_uniform;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyNetParams {
    /// [hidden, input]; input = map cells + concept dim.
    pub w1: Tensor,
    pub b1: Tensor,
    /// [embed, hidden].
    pub w2: Tensor,
    pub b2: Tensor,
    /// [embed]: projects the embedding to the scalar energy.
    pub wf: Tensor,
    pub concept_dim: usize,
    pub seed: u64,
}

impl EnergyNetParams {
    pub fn init(
        map_cells: usize,
        concept_dim: usize,
        hidden_dim: usize,
        embed_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if map_cells == 0 || concept_dim == 0 || hidden_dim == 0 || embed_dim == 0 {
            return Err(Error::InvalidArgument(
                "energy model dimensions must be positive".into(),
            ));
        }
        let input_dim = map_cells + concept_dim;
        let mut r = rng::stream(seed, "energynet-init");
        let w1 = Tensor::new(
            vec![hidden_dim, input_dim],
            glorot_uniform(&mut r, input_dim, hidden_dim, hidden_dim * input_dim),
        )?;
        let w2 = Tensor::new(
            vec![embed_dim, hidden_dim],
            glorot_uniform(&mut r, hidden_dim, embed_dim, embed_dim * hidden_dim),
        )?;
        let wf = Tensor::new(
            vec![embed_dim],
            glorot_uniform(&mut r, embed_dim, 1, embed_dim),
        )?;
        Ok(EnergyNetParams {
            w1,
            b1: Tensor::zeros(&[hidden_dim]),
            w2,
            b2: Tensor::zeros(&[embed_dim]),
            wf,
            concept_dim,
            seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.shape()[0]
    }

    pub fn map_cells(&self) -> usize {
        self.input_dim() - self.concept_dim
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_dim();
        let d = self.embed_dim();
        if self.w1.shape().len() != 2 || self.w2.shape().len() != 2 {
            return Err(Error::ShapeMismatch("weight matrices must be rank 2".into()));
        }
        if self.concept_dim == 0 || self.concept_dim >= self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "concept dim {} must be positive and below input dim {}",
                self.concept_dim,
                self.input_dim()
            )));
        }
        if self.b1.shape() != [h] {
            return Err(Error::ShapeMismatch("b1 does not match hidden dim".into()));
        }
        if self.w2.shape()[1] != h {
            return Err(Error::ShapeMismatch("w2 does not match hidden dim".into()));
        }
        if self.b2.shape() != [d] || self.wf.shape() != [d] {
            return Err(Error::ShapeMismatch("b2/wf do not match embed dim".into()));
        }
        Ok(())
    }
}

/// Gradients with the same shapes as [`EnergyNetParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyNetGrads {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub wf: Tensor,
}

impl EnergyNetGrads {
    pub fn zeros_like(params: &EnergyNetParams) -> Self {
        EnergyNetGrads {
            w1: Tensor::zeros(params.w1.shape()),
            b1: Tensor::zeros(params.b1.shape()),
            w2: Tensor::zeros(params.w2.shape()),
            b2: Tensor::zeros(params.b2.shape()),
            wf: Tensor::zeros(params.wf.shape()),
        }
    }

    pub fn add_assign(&mut self, other: &EnergyNetGrads) {
        for (a, b) in [
            (&mut self.w1, &other.w1),
            (&mut self.b1, &other.b1),
            (&mut self.w2, &other.w2),
            (&mut self.b2, &other.b2),
            (&mut self.wf, &other.wf),
        ] {
            for (x, y) in a.values_mut().iter_mut().zip(b.values()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.wf,
        ] {
            for v in t.values_mut() {
                *v *= factor;
            }
        }
    }

    fn ensure_finite(&self) -> Result<()> {
        self.w1.ensure_finite("w1 gradient")?;
        self.b1.ensure_finite("b1 gradient")?;
        self.w2.ensure_finite("w2 gradient")?;
        self.b2.ensure_finite("b2 gradient")?;
        self.wf.ensure_finite("wf gradient")
    }
}

/// One SGD step; weight decay applies to w1, w2 and wf but not to biases.
pub fn sgd_step(
    params: &mut EnergyNetParams,
    grads: &EnergyNetGrads,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<()> {
    grads.ensure_finite()?;
    for (p, g) in [
        (&mut params.w1, &grads.w1),
        (&mut params.w2, &grads.w2),
        (&mut params.wf, &grads.wf),
    ] {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch(
                "gradient shapes do not match parameters".into(),
            ));
        }
        for (w, gw) in p.values_mut().iter_mut().zip(g.values()) {
            *w -= learning_rate * (gw + weight_decay * *w);
        }
    }
    for (p, g) in [(&mut params.b1, &grads.b1), (&mut params.b2, &grads.b2)] {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch(
                "gradient shapes do not match parameters".into(),
            ));
        }
        for (b, gb) in p.values_mut().iter_mut().zip(g.values()) {
            *b -= learning_rate * gb;
        }
    }
    Ok(())
}

struct BranchTrace {
    x: Vec<f64>,
    z1: Vec<f64>,
    f: Vec<f64>,
    energy: f64,
}

fn branch_forward(
    params: &EnergyNetParams,
    map: &AttentionMap,
    concept_vec: &[f64],
) -> Result<BranchTrace> {
    if map.values.len() != params.map_cells() {
        return Err(Error::ShapeMismatch(format!(
            "map has {} cells, model expects {}",
            map.values.len(),
            params.map_cells()
        )));
    }
    if concept_vec.len() != params.concept_dim {
        return Err(Error::ShapeMismatch(format!(
            "concept vector has dim {}, model expects {}",
            concept_vec.len(),
            params.concept_dim
        )));
    }
    let input_dim = params.input_dim();
    let hidden = params.hidden_dim();
    let embed = params.embed_dim();
    let mut x = Vec::with_capacity(input_dim);
    x.extend_from_slice(&map.values);
    x.extend_from_slice(concept_vec);

    let w1 = params.w1.values();
    let b1 = params.b1.values();
    let mut z1 = vec![0.0; hidden];
    for (j, slot) in z1.iter_mut().enumerate() {
        let row = j * input_dim;
        let mut acc = b1[j];
        for (k, &xv) in x.iter().enumerate() {
            acc += w1[row + k] * xv;
        }
        *slot = acc;
    }
    let h: Vec<f64> = z1.iter().map(|&v| v.max(0.0)).collect();

    let w2 = params.w2.values();
    let b2 = params.b2.values();
    let mut f = vec![0.0; embed];
    for (i, slot) in f.iter_mut().enumerate() {
        let row = i * hidden;
        let mut acc = b2[i];
        for (j, &hv) in h.iter().enumerate() {
            acc += w2[row + j] * hv;
        }
        *slot = acc;
    }

    let wf = params.wf.values();
    let mut energy = 0.0;
    for (i, &fv) in f.iter().enumerate() {
        energy += wf[i] * fv;
    }
    Ok(BranchTrace { x, z1, f, energy })
}

/// Accumulates parameter gradients for one branch given the gradient with
/// respect to its embedding f and its scalar energy.
fn branch_backward(
    params: &EnergyNetParams,
    trace: &BranchTrace,
    df: &[f64],
    d_energy: f64,
    grads: &mut EnergyNetGrads,
) {
    let input_dim = params.input_dim();
    let hidden = params.hidden_dim();
    let embed = params.embed_dim();
    let wf = params.wf.values();

    // Total gradient at f combines the direct embedding path and the energy
    // path through wf.
    let mut df_total = vec![0.0; embed];
    for i in 0..embed {
        df_total[i] = df[i] + d_energy * wf[i];
    }
    {
        let gwf = grads.wf.values_mut();
        for i in 0..embed {
            gwf[i] += d_energy * trace.f[i];
        }
    }

    let w2 = params.w2.values();
    let mut dh = vec![0.0; hidden];
    {
        let gw2 = grads.w2.values_mut();
        let gb2 = grads.b2.values_mut();
        for i in 0..embed {
            let g = df_total[i];
            gb2[i] += g;
            let row = i * hidden;
            for j in 0..hidden {
                let hj = trace.z1[j].max(0.0);
                gw2[row + j] += g * hj;
                dh[j] += g * w2[row + j];
            }
        }
    }

    let gw1 = grads.w1.values_mut();
    let gb1 = grads.b1.values_mut();
    for j in 0..hidden {
        if trace.z1[j] <= 0.0 {
            continue;
        }
        let g = dh[j];
        gb1[j] += g;
        let row = j * input_dim;
        for (k, &xv) in trace.x.iter().enumerate() {
            gw1[row + k] += g * xv;
        }
    }
}

/// Embedding f of a (map, concept vector) pair.
pub fn embed(
    params: &EnergyNetParams,
    map: &AttentionMap,
    concept_vec: &[f64],
) -> Result<Vec<f64>> {
    params.validate()?;
    Ok(branch_forward(params, map, concept_vec)?.f)
}

/// Scalar energy of a (map, concept vector) pair.
pub fn energy_net(
    params: &EnergyNetParams,
    map: &AttentionMap,
    concept_vec: &[f64],
) -> Result<f64> {
    params.validate()?;
    Ok(branch_forward(params, map, concept_vec)?.energy)
}

/// Hinge on the energy gap: max(0, e_false - e_true + margin). Zero exactly
/// when the true pairing beats the false one by at least the margin.
pub fn energy_loss(e_true: f64, e_false: f64, margin: f64) -> f64 {
    (e_false - e_true + margin).max(0.0)
}

/// Cosine distance 1 - u.v / (|u||v|). A zero-norm input has no direction;
/// the distance degrades to the neutral value 1 and is logged.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    Ok(cosine_distance_grads(u, v)?.0)
}

const NORM_EPSILON: f64 = 1e-12;

/// Distance plus its gradients with respect to both inputs.
fn cosine_distance_grads(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine distance over dims {} and {}",
            u.len(),
            v.len()
        )));
    }
    if u.is_empty() {
        return Err(Error::InvalidArgument("cosine distance of empty vectors".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu < NORM_EPSILON || nv < NORM_EPSILON {
        log::warn!("cosine distance of a zero-norm vector: returning 1");
        return Ok((1.0, vec![0.0; u.len()], vec![0.0; v.len()]));
    }
    let d = 1.0 - dot / (nu * nv);
    let mut du = Vec::with_capacity(u.len());
    let mut dv = Vec::with_capacity(v.len());
    for i in 0..u.len() {
        du.push(-v[i] / (nu * nv) + dot * u[i] / (nu * nu * nu * nv));
        dv.push(-u[i] / (nu * nv) + dot * v[i] / (nv * nv * nv * nu));
    }
    Ok((d, du, dv))
}

/// Triplet hinge over cosine distances: max(0, d_pos - d_neg + margin).
pub fn triplet_loss(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    (d_pos - d_neg + margin).max(0.0)
}

/// References into caller-owned maps for the four branches of one item.
#[derive(Debug, Clone, Copy)]
pub struct SiameseBatchItem<'a> {
    pub anchor_true: &'a AttentionMap,
    pub c_gt: usize,
    pub anchor_false: &'a AttentionMap,
    pub c_fa: usize,
    pub triplet: Option<TripletRefs<'a>>,
}

#[derive(Debug, Clone, Copy)]
pub struct TripletRefs<'a> {
    pub positive: &'a AttentionMap,
    pub c_pos: usize,
    pub negative: &'a AttentionMap,
    pub c_neg: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub margin: f64,
    pub triplet_margin: f64,
    pub triplet_weight: f64,
}

#[derive(Debug)]
pub struct JointLossOutcome {
    pub joint: f64,
    pub energy_term: f64,
    pub triplet_term: f64,
    pub e_true: f64,
    pub e_false: f64,
    pub d_pos: Option<f64>,
    pub d_neg: Option<f64>,
    pub grads: EnergyNetGrads,
}

fn concept_vec<'a>(vocab: &'a ConceptVocabulary, concept: usize) -> Result<&'a [f64]> {
    if concept >= vocab.len() {
        return Err(Error::InvalidArgument(format!(
            "concept {concept} out of range for vocabulary of {}",
            vocab.len()
        )));
    }
    Ok(vocab.vector(concept))
}

/// Joint energy + triplet loss of one item, with gradients. All four
/// branches run the same parameter set.
pub fn joint_loss(
    params: &EnergyNetParams,
    item: &SiameseBatchItem,
    vocab: &ConceptVocabulary,
    weights: &LossWeights,
) -> Result<JointLossOutcome> {
    params.validate()?;
    if item.c_fa == item.c_gt {
        return Err(Error::InvalidArgument(format!(
            "false concept equals true concept {}",
            item.c_gt
        )));
    }
    let anchor = branch_forward(params, item.anchor_true, concept_vec(vocab, item.c_gt)?)?;
    let false_branch =
        branch_forward(params, item.anchor_false, concept_vec(vocab, item.c_fa)?)?;
    let energy_term = energy_loss(anchor.energy, false_branch.energy, weights.margin);
    let energy_active = false_branch.energy - anchor.energy + weights.margin > 0.0;

    let mut grads = EnergyNetGrads::zeros_like(params);
    let embed_dim = params.embed_dim();
    let mut df_anchor = vec![0.0; embed_dim];

    let mut triplet_term = 0.0;
    let mut d_pos_out = None;
    let mut d_neg_out = None;
    let mut pos_branch = None;
    let mut neg_branch = None;
    let mut df_pos = vec![0.0; embed_dim];
    let mut df_neg = vec![0.0; embed_dim];

    if let Some(t) = &item.triplet {
        let pos = branch_forward(params, t.positive, concept_vec(vocab, t.c_pos)?)?;
        let neg = branch_forward(params, t.negative, concept_vec(vocab, t.c_neg)?)?;
        let (d_pos, d_pos_da, d_pos_dp) = cosine_distance_grads(&anchor.f, &pos.f)?;
        let (d_neg, d_neg_da, d_neg_dn) = cosine_distance_grads(&anchor.f, &neg.f)?;
        triplet_term = triplet_loss(d_pos, d_neg, weights.triplet_margin);
        let triplet_active = d_pos - d_neg + weights.triplet_margin > 0.0;
        if triplet_active && weights.triplet_weight != 0.0 {
            let lambda = weights.triplet_weight;
            for i in 0..embed_dim {
                df_anchor[i] += lambda * (d_pos_da[i] - d_neg_da[i]);
                df_pos[i] += lambda * d_pos_dp[i];
                df_neg[i] -= lambda * d_neg_dn[i];
            }
        }
        d_pos_out = Some(d_pos);
        d_neg_out = Some(d_neg);
        pos_branch = Some(pos);
        neg_branch = Some(neg);
    }

    let zero_df = vec![0.0; embed_dim];
    let (d_e_true, d_e_false) = if energy_active {
        (-1.0, 1.0)
    } else {
        (0.0, 0.0)
    };
    branch_backward(params, &anchor, &df_anchor, d_e_true, &mut grads);
    branch_backward(params, &false_branch, &zero_df, d_e_false, &mut grads);
    if let (Some(pos), Some(neg)) = (&pos_branch, &neg_branch) {
        branch_backward(params, pos, &df_pos, 0.0, &mut grads);
        branch_backward(params, neg, &df_neg, 0.0, &mut grads);
    }

    Ok(JointLossOutcome {
        joint: energy_term + weights.triplet_weight * triplet_term,
        energy_term,
        triplet_term,
        e_true: anchor.energy,
        e_false: false_branch.energy,
        d_pos: d_pos_out,
        d_neg: d_neg_out,
        grads,
    })
}

/// Loss value only, for ranking mining candidates.
pub fn joint_loss_value(
    params: &EnergyNetParams,
    item: &SiameseBatchItem,
    vocab: &ConceptVocabulary,
    weights: &LossWeights,
) -> Result<f64> {
    if item.c_fa == item.c_gt {
        return Err(Error::InvalidArgument(format!(
            "false concept equals true concept {}",
            item.c_gt
        )));
    }
    let anchor = branch_forward(params, item.anchor_true, concept_vec(vocab, item.c_gt)?)?;
    let false_branch =
        branch_forward(params, item.anchor_false, concept_vec(vocab, item.c_fa)?)?;
    let energy_term = energy_loss(anchor.energy, false_branch.energy, weights.margin);
    let mut triplet_term = 0.0;
    if let Some(t) = &item.triplet {
        let pos = branch_forward(params, t.positive, concept_vec(vocab, t.c_pos)?)?;
        let neg = branch_forward(params, t.negative, concept_vec(vocab, t.c_neg)?)?;
        let d_pos = cosine_distance(&anchor.f, &pos.f)?;
        let d_neg = cosine_distance(&anchor.f, &neg.f)?;
        triplet_term = triplet_loss(d_pos, d_neg, weights.triplet_margin);
    }
    Ok(energy_term + weights.triplet_weight * triplet_term)
}

/// Picks the k highest-loss candidates (stable order on ties) plus r random
/// others from the remainder, in the order the sampler yields them.
pub fn mine_hard_negatives<R: Rng>(
    losses: &[f64],
    k: usize,
    r: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if let Some(pos) = losses.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "candidate loss at index {pos} is {}",
            losses[pos]
        )));
    }
    if losses.len() < k + r {
        return Err(Error::InvalidArgument(format!(
            "pool of {} cannot supply {k} hard + {r} random candidates",
            losses.len()
        )));
    }
    let mut order: Vec<usize> = (0..losses.len()).collect();
    // Stable sort: equal losses keep candidate order.
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]));
    let mut selected: Vec<usize> = order[..k].to_vec();
    let rest = &order[k..];
    if r > 0 {
        let picks = rand::seq::index::sample(rng, rest.len(), r);
        for p in picks.iter() {
            selected.push(rest[p]);
        }
    }
    Ok(selected)
}

/// Candidate-pool sizing for mining. The pool starts small and grows to
/// `large_pool` exactly once, when the recent mean joint loss drops below
/// the threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningState {
    pub pool_size: usize,
    pub large_pool: usize,
    pub threshold: f64,
    pub grown: bool,
}

pub fn grow_schedule(state: &MiningState, recent_mean_loss: f64) -> MiningState {
    let mut next = *state;
    if !state.grown && recent_mean_loss < state.threshold {
        next.pool_size = state.large_pool;
        next.grown = true;
        log::info!(
            "mining pool grows to {} (recent mean loss {recent_mean_loss:.4})",
            state.large_pool
        );
    }
    next
}

/// One training sample: the per-concept attention stack of one target-domain
/// frame plus its class.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub video_id: String,
    pub frame: u32,
    pub class: usize,
    /// maps[i] is the map for concept i.
    pub maps: Vec<AttentionMap>,
}

#[derive(Debug, Clone)]
pub struct EnergyNetTrainConfig {
    pub epochs: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub margin: f64,
    pub triplet_margin: f64,
    pub triplet_weight: f64,
    pub hard_k: usize,
    pub random_r: usize,
    pub small_pool: usize,
    pub large_pool: usize,
    pub growth_threshold: f64,
    pub seed: u64,
}

/// One line of the training log, serialized as JSON lines. Loss fields are
/// means over the selected batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub iter: usize,
    pub joint_loss: f64,
    pub energy_loss: f64,
    pub triplet_loss: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct EnergyNetTraining {
    pub params: EnergyNetParams,
    pub log: Vec<TrainLogEntry>,
}

/// Window of recent iteration losses that gates pool growth.
const GROWTH_WINDOW: usize = 10;

struct CandidateDraw {
    anchor: usize,
    c_fa: usize,
    pos: Option<usize>,
    neg: Option<usize>,
}

/// Trains the energy model on target-domain samples with online hard
/// negative mining. Only false/negative pairings are mined; positives are
/// drawn uniformly. Deterministic per seed.
pub fn train_energynet(
    samples: &[TrainSample],
    vocab: &ConceptVocabulary,
    cfg: &EnergyNetTrainConfig,
) -> Result<EnergyNetTraining> {
    let n_concepts = vocab.len();
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    if cfg.hard_k == 0 {
        return Err(Error::InvalidArgument("hard_k must be positive".into()));
    }
    if cfg.small_pool < cfg.hard_k + cfg.random_r || cfg.large_pool < cfg.small_pool {
        return Err(Error::InvalidArgument(format!(
            "pool sizes must satisfy hard_k + random_r <= small <= large, got {}+{} vs {}..{}",
            cfg.hard_k, cfg.random_r, cfg.small_pool, cfg.large_pool
        )));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::InvalidArgument("learning rate must be positive".into()));
    }
    let mut map_cells = None;
    for (i, s) in samples.iter().enumerate() {
        if s.class >= n_concepts {
            return Err(Error::InvalidArgument(format!(
                "sample {i} class {} out of range for {n_concepts} concepts",
                s.class
            )));
        }
        if s.maps.len() != n_concepts {
            return Err(Error::InvalidArgument(format!(
                "sample {i} has {} maps for {n_concepts} concepts",
                s.maps.len()
            )));
        }
        for (c, map) in s.maps.iter().enumerate() {
            if map.concept != c {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} position {c} holds concept {}",
                    map.concept
                )));
            }
            let cells = map.values.len();
            match map_cells {
                None => map_cells = Some(cells),
                Some(expected) if expected != cells => {
                    return Err(Error::ShapeMismatch(format!(
                        "sample {i} map has {cells} cells, expected {expected}"
                    )))
                }
                _ => {}
            }
        }
    }
    let map_cells = map_cells.expect("samples is non-empty");
    if n_concepts < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 concepts to form false pairings".into(),
        ));
    }
    let distinct_classes = {
        let mut seen = vec![false; n_concepts];
        for s in samples {
            seen[s.class] = true;
        }
        seen.iter().filter(|&&b| b).count()
    };
    if distinct_classes < 2 {
        return Err(Error::InvalidArgument(
            "need samples from at least 2 classes to form triplets".into(),
        ));
    }

    // Per-class index pools and their complements, in sample order.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_concepts];
    for (i, s) in samples.iter().enumerate() {
        by_class[s.class].push(i);
    }
    let mut not_class: Vec<Vec<usize>> = vec![Vec::new(); n_concepts];
    for (i, s) in samples.iter().enumerate() {
        for (c, pool) in not_class.iter_mut().enumerate() {
            if c != s.class {
                pool.push(i);
            }
        }
    }
    let mut warned_single = vec![false; n_concepts];
    let mut warned_same_video = vec![false; n_concepts];

    let mut params = EnergyNetParams::init(
        map_cells,
        vocab.dim(),
        cfg.hidden_dim,
        cfg.embed_dim,
        cfg.seed,
    )?;
    let mut rng = rng::stream(cfg.seed, "energynet-train");
    let weights = LossWeights {
        margin: cfg.margin,
        triplet_margin: cfg.triplet_margin,
        triplet_weight: cfg.triplet_weight,
    };
    let mut state = MiningState {
        pool_size: cfg.small_pool,
        large_pool: cfg.large_pool,
        threshold: cfg.growth_threshold,
        grown: false,
    };
    let per_iter = cfg.hard_k + cfg.random_r;
    let iterations = cfg.epochs * samples.len().div_ceil(per_iter);
    let mut log = Vec::with_capacity(iterations);
    let mut recent: Vec<f64> = Vec::new();

    for iter in 0..iterations {
        // Draw the candidate pool.
        let mut draws = Vec::with_capacity(state.pool_size);
        for _ in 0..state.pool_size {
            let anchor = rng.random_range(0..samples.len());
            let class = samples[anchor].class;
            let c_fa = {
                let off = rng.random_range(0..n_concepts - 1);
                if off >= class {
                    off + 1
                } else {
                    off
                }
            };
            let (pos, neg) = if by_class[class].len() >= 2 {
                let other_video: Vec<usize> = by_class[class]
                    .iter()
                    .copied()
                    .filter(|&i| samples[i].video_id != samples[anchor].video_id)
                    .collect();
                let pos = if other_video.is_empty() {
                    if !warned_same_video[class] {
                        log::warn!(
                            "class {class} has a single video: positives come from other frames of it"
                        );
                        warned_same_video[class] = true;
                    }
                    let pool: Vec<usize> = by_class[class]
                        .iter()
                        .copied()
                        .filter(|&i| i != anchor)
                        .collect();
                    pool[rng.random_range(0..pool.len())]
                } else {
                    other_video[rng.random_range(0..other_video.len())]
                };
                let neg_pool = &not_class[class];
                let neg = neg_pool[rng.random_range(0..neg_pool.len())];
                (Some(pos), Some(neg))
            } else {
                if !warned_single[class] {
                    log::warn!(
                        "class {class} has no positive partner: excluded from triplet anchoring"
                    );
                    warned_single[class] = true;
                }
                (None, None)
            };
            draws.push(CandidateDraw {
                anchor,
                c_fa,
                pos,
                neg,
            });
        }

        let items: Vec<SiameseBatchItem> = draws
            .iter()
            .map(|d| {
                let anchor = &samples[d.anchor];
                SiameseBatchItem {
                    anchor_true: &anchor.maps[anchor.class],
                    c_gt: anchor.class,
                    anchor_false: &anchor.maps[d.c_fa],
                    c_fa: d.c_fa,
                    triplet: d.pos.map(|p| {
                        let n = d.neg.expect("pos and neg are set together");
                        TripletRefs {
                            positive: &samples[p].maps[samples[p].class],
                            c_pos: samples[p].class,
                            negative: &samples[n].maps[samples[n].class],
                            c_neg: samples[n].class,
                        }
                    }),
                }
            })
            .collect();

        let mut losses = Vec::with_capacity(items.len());
        for item in &items {
            losses.push(joint_loss_value(&params, item, vocab, &weights)?);
        }
        let selected = mine_hard_negatives(&losses, cfg.hard_k, cfg.random_r, &mut rng)?;

        let mut grads = EnergyNetGrads::zeros_like(&params);
        let mut joint_sum = 0.0;
        let mut energy_sum = 0.0;
        let mut triplet_sum = 0.0;
        for &idx in &selected {
            let outcome = joint_loss(&params, &items[idx], vocab, &weights)?;
            joint_sum += outcome.joint;
            energy_sum += outcome.energy_term;
            triplet_sum += outcome.triplet_term;
            grads.add_assign(&outcome.grads);
        }
        let batch = selected.len() as f64;
        grads.scale(1.0 / batch);
        sgd_step(&mut params, &grads, cfg.learning_rate, cfg.weight_decay)?;

        let joint_mean = joint_sum / batch;
        if !joint_mean.is_finite() {
            return Err(Error::Diverged {
                epoch: iter / samples.len().div_ceil(per_iter).max(1),
                reason: format!("joint loss {joint_mean} at iteration {iter}"),
            });
        }
        log.push(TrainLogEntry {
            iter,
            joint_loss: joint_mean,
            energy_loss: energy_sum / batch,
            triplet_loss: triplet_sum / batch,
            batch_size: state.pool_size,
        });

        recent.push(joint_mean);
        if recent.len() > GROWTH_WINDOW {
            recent.remove(0);
        }
        let recent_mean = recent.iter().sum::<f64>() / recent.len() as f64;
        state = grow_schedule(&state, recent_mean);
    }

    Ok(EnergyNetTraining { params, log })
}

/// Classifies a video by mean learned energy per concept over its sampled
/// frame stacks. Ties go to the lowest concept index.
pub fn classify_energynet(
    stacks: &[Vec<AttentionMap>],
    vocab: &ConceptVocabulary,
    params: &EnergyNetParams,
) -> Result<(usize, VideoScoreTable)> {
    params.validate()?;
    let n = vocab.len();
    if stacks.is_empty() {
        return Err(Error::InvalidArgument("no frames to classify".into()));
    }
    for (f, stack) in stacks.iter().enumerate() {
        if stack.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "frame {f} has {} concepts, vocabulary has {n}",
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
            sum += branch_forward(params, &stack[c], vocab.vector(c))?.energy;
        }
        scores.push(sum / stacks.len() as f64);
    }
    let predicted = argmax_first(&scores);
    Ok((predicted, VideoScoreTable { scores }))
}

// ---- checkpoint format ----

const ENERGYNET_MAGIC: &[u8; 4] = b"ATEN";
const ENERGYNET_VERSION: u32 = 1;

/// Writes the model: magic, version, dims (input, hidden, embed, concept),
/// then w1, b1, w2, b2, wf as 64-bit LE reals.
pub fn save_energynet(params: &EnergyNetParams, path: &Path) -> Result<()> {
    params.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(ENERGYNET_MAGIC);
    bytesio::put_u32(&mut out, ENERGYNET_VERSION);
    bytesio::put_usize_as_u32(&mut out, params.input_dim(), "input dim")?;
    bytesio::put_usize_as_u32(&mut out, params.hidden_dim(), "hidden dim")?;
    bytesio::put_usize_as_u32(&mut out, params.embed_dim(), "embed dim")?;
    bytesio::put_usize_as_u32(&mut out, params.concept_dim, "concept dim")?;
    for t in [&params.w1, &params.b1, &params.w2, &params.b2, &params.wf] {
        for &v in t.values() {
            bytesio::put_f64(&mut out, v);
        }
    }
    bytesio::write_file(path, &out)
}

/// Reads a model written by [`save_energynet`]. The seed is not stored; the
/// loaded value is zero.
pub fn load_energynet(path: &Path) -> Result<EnergyNetParams> {
    let buf = bytesio::read_file(path)?;
    let mut r = Reader::new(path, &buf);
    r.magic(ENERGYNET_MAGIC)?;
    let version = r.u32()?;
    if version != ENERGYNET_VERSION {
        return Err(r.error(format!(
            "unsupported model version {version}, expected {ENERGYNET_VERSION}"
        )));
    }
    let input_dim = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let embed = r.u32()? as usize;
    let concept_dim = r.u32()? as usize;
    if input_dim == 0 || hidden == 0 || embed == 0 || concept_dim == 0 || concept_dim >= input_dim
    {
        return Err(r.error(format!(
            "implausible dims input={input_dim} hidden={hidden} embed={embed} concept={concept_dim}"
        )));
    }
    let total = hidden * input_dim + hidden + embed * hidden + embed + embed;
    let _ = r.checked_count(
        u32::try_from(total).map_err(|_| r.error("dims overflow"))?,
        8,
        "parameter value",
    )?;
    let mut take = |shape: Vec<usize>| -> Result<Tensor> {
        let count: usize = shape.iter().product();
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(r.f64()?);
        }
        Tensor::new(shape, values).map_err(|e| Error::format(path, e.to_string()))
    };
    let w1 = take(vec![hidden, input_dim])?;
    let b1 = take(vec![hidden])?;
    let w2 = take(vec![embed, hidden])?;
    let b2 = take(vec![embed])?;
    let wf = take(vec![embed])?;
    r.finish()?;
    let params = EnergyNetParams {
        w1,
        b1,
        w2,
        b2,
        wf,
        concept_dim,
        seed: 0,
    };
    params
        .validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(params)
}
