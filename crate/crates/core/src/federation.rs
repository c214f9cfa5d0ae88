//! The federation engine: client selection, local training with optional
//! loss hooks, the aggregation algorithms and the round loop.
//!
//! Only hot parameters travel between clients and the server. Every upload is
//! serialized to its wire form and decoded again before aggregation, so the
//! byte counts in the trace are the real payload sizes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::EncodedSample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, EvaluationReport};
use crate::numkit::{cosine_slices, dot, weighted_sum, FlatVector, Segmented};
use crate::refmodel::{loss_terms, write_checkpoint, Batch, LossHook, ParamSet};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAvg,
    FedProx,
    CluSamp,
    FedCross,
    Moon,
    FedMut,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::FedAvg,
        Algorithm::FedProx,
        Algorithm::CluSamp,
        Algorithm::FedCross,
        Algorithm::Moon,
        Algorithm::FedMut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
            Algorithm::CluSamp => "clusamp",
            Algorithm::FedCross => "fedcross",
            Algorithm::Moon => "moon",
            Algorithm::FedMut => "fedmut",
        }
    }
}

/// What clients are clustered on when sampling by clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMode {
    /// Scalar local sample counts.
    Size,
    /// Direction of each client's last local update (cosine geometry).
    Similarity,
}

/// Granularity of the random sign masks used to mutate the global model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskGranularity {
    /// One sign per parameter segment (weight matrix, bias, adapter factor).
    Segment,
    Parameter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmParams {
    /// Proximal coefficient.
    pub mu: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub contrastive_weight: f64,
    /// Number of clusters; `None` means `min(selected, 5)`.
    pub n_clusters: Option<usize>,
    pub cluster_mode: ClusterMode,
    /// Weight of a model's own parameters when crossing with its peer.
    pub cross_alpha: f64,
    pub mutate_beta: f64,
    pub mutation_granularity: MaskGranularity,
}

impl Default for AlgorithmParams {
    fn default() -> Self {
        AlgorithmParams {
            mu: 0.01,
            tau: 0.5,
            contrastive_weight: 1.0,
            n_clusters: None,
            cluster_mode: ClusterMode::Similarity,
            cross_alpha: 0.9,
            mutate_beta: 1.0,
            mutation_granularity: MaskGranularity::Segment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub rounds: usize,
    pub select_fraction: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub algorithm: Algorithm,
    pub algorithm_params: AlgorithmParams,
    pub seed: u64,
    /// Local-training worker threads; 0 uses every available core.
    /// Results do not depend on this value.
    pub workers: usize,
    /// Write a checkpoint every this many rounds; 0 disables checkpoints.
    pub checkpoint_every: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            n_clients: 10,
            rounds: 50,
            select_fraction: 0.5,
            local_epochs: 1,
            batch_size: 16,
            learning_rate: 0.05,
            algorithm: Algorithm::FedAvg,
            algorithm_params: AlgorithmParams::default(),
            seed: 0,
            workers: 0,
            checkpoint_every: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_clients == 0 {
            return bad("n_clients must be at least 1".into());
        }
        if !(self.select_fraction > 0.0 && self.select_fraction <= 1.0) {
            return bad(format!(
                "select_fraction {} outside (0, 1]",
                self.select_fraction
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate {} must be a nonnegative real",
                self.learning_rate
            ));
        }
        let p = &self.algorithm_params;
        if !(p.mu >= 0.0 && p.mu.is_finite()) {
            return bad(format!("mu {} must be nonnegative", p.mu));
        }
        if !(p.tau > 0.0 && p.tau.is_finite()) {
            return bad(format!("tau {} must be positive", p.tau));
        }
        if !p.contrastive_weight.is_finite() {
            return bad("contrastive_weight must be finite".into());
        }
        if !(0.0..=1.0).contains(&p.cross_alpha) {
            return bad(format!("cross_alpha {} outside [0, 1]", p.cross_alpha));
        }
        if !(p.mutate_beta >= 0.0 && p.mutate_beta.is_finite()) {
            return bad(format!("mutate_beta {} must be nonnegative", p.mutate_beta));
        }
        if let Some(k) = p.n_clusters {
            if k == 0 || k > self.selection_count() {
                return bad(format!(
                    "n_clusters {k} must be between 1 and the selection count {}",
                    self.selection_count()
                ));
            }
        }
        Ok(())
    }

    /// Clients selected per round, `ceil(n_clients * select_fraction)`.
    pub fn selection_count(&self) -> usize {
        let k = (self.n_clients as f64 * self.select_fraction - 1e-9).ceil();
        (k.max(1.0) as usize).min(self.n_clients)
    }

    pub fn n_clusters(&self) -> usize {
        self.algorithm_params
            .n_clusters
            .unwrap_or_else(|| self.selection_count().min(5))
    }
}

/// One client's upload at the end of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundUpdate {
    pub client_id: usize,
    pub hot_params: FlatVector,
    pub n_samples: usize,
    /// Cross-entropy only, without proximal or contrastive terms.
    pub train_loss: f64,
}

const UPDATE_MAGIC: &[u8; 4] = b"FVRU";
const UPDATE_VERSION: u32 = 1;

impl RoundUpdate {
    /// Fixed wire header size in bytes.
    pub const HEADER_BYTES: usize = 4 + 4 + 4 + 8 + 8 + 8;

    /// Wire form, little-endian: `"FVRU"`, `u32` version, `u32` client id,
    /// `u64` sample count, `f64` train loss, `u64` value count, then the hot
    /// values as `f64`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::HEADER_BYTES + 8 * self.hot_params.len());
        out.extend_from_slice(UPDATE_MAGIC);
        out.extend_from_slice(&UPDATE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.client_id as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_samples as u64).to_le_bytes());
        out.extend_from_slice(&self.train_loss.to_le_bytes());
        out.extend_from_slice(&(self.hot_params.len() as u64).to_le_bytes());
        for v in self.hot_params.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<RoundUpdate> {
        let bad = |m: &str| Error::State(format!("malformed update: {m}"));
        if bytes.len() < Self::HEADER_BYTES {
            return Err(bad("truncated header"));
        }
        if &bytes[..4] != UPDATE_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        if u32_at(4) != UPDATE_VERSION {
            return Err(bad("unsupported version"));
        }
        let client_id = u32_at(8) as usize;
        let n_samples = u64_at(12) as usize;
        let train_loss = f64::from_bits(u64_at(20));
        let len = u64_at(28) as usize;
        if bytes.len() != Self::HEADER_BYTES + 8 * len {
            return Err(bad("length does not match value count"));
        }
        let values = bytes[Self::HEADER_BYTES..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if n_samples == 0 {
            return Err(bad("zero samples"));
        }
        Ok(RoundUpdate {
            client_id,
            hot_params: FlatVector::new(values),
            n_samples,
            train_loss,
        })
    }
}

/// A client's private training data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub client_id: usize,
    pub samples: Vec<EncodedSample>,
}

/// Algorithm-specific server state carried between rounds.
#[derive(Debug, Clone, PartialEq)]
pub enum Extras {
    None,
    /// Each client's last locally trained hot vector.
    Moon {
        previous: BTreeMap<usize, FlatVector>,
    },
    /// Each client's last local update direction (returned minus dispatched).
    CluSamp {
        last_delta: BTreeMap<usize, FlatVector>,
    },
    /// Intermediate models, one per selection slot.
    FedCross {
        pool: Vec<FlatVector>,
    },
    /// Global hot vector of the previous round.
    FedMut {
        previous_global: FlatVector,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    pub round_index: usize,
    pub global: ParamSet,
    pub extras: Extras,
}

impl RoundState {
    pub fn new(config: &FederationConfig, initial: &ParamSet) -> RoundState {
        let hot = initial.hot_vector();
        let extras = match config.algorithm {
            Algorithm::FedAvg | Algorithm::FedProx => Extras::None,
            Algorithm::Moon => Extras::Moon {
                previous: BTreeMap::new(),
            },
            Algorithm::CluSamp => Extras::CluSamp {
                last_delta: BTreeMap::new(),
            },
            Algorithm::FedCross => Extras::FedCross {
                pool: vec![hot; config.selection_count()],
            },
            Algorithm::FedMut => Extras::FedMut {
                previous_global: hot,
            },
        };
        RoundState {
            round_index: 0,
            global: initial.clone(),
            extras,
        }
    }
}

/// Uniformly sample `selection_count` distinct clients for a round.
pub fn select_clients(round_index: usize, config: &FederationConfig) -> Vec<usize> {
    let mut rng = rng::stream(config.seed, &[rng::TAG_SELECT, round_index as u64]);
    let mut ids = index::sample(&mut rng, config.n_clients, config.selection_count()).into_vec();
    ids.sort_unstable();
    ids
}

/// `(mu/2)·‖w − w_g‖²` and its gradient `mu·(w − w_g)`.
pub fn fedprox_term(w: &FlatVector, w_global: &FlatVector, mu: f64) -> Result<(f64, FlatVector)> {
    let diff = w.sub(w_global)?;
    let loss = 0.5 * mu * diff.dot(&diff)?;
    Ok((loss, diff.scale(mu)))
}

/// Proximal pull toward the dispatched global hot vector.
#[derive(Debug, Clone)]
pub struct ProximalHook {
    pub global_hot: FlatVector,
    pub mu: f64,
}

impl LossHook for ProximalHook {
    fn parameter_term(&self, hot: &FlatVector, grad: &mut [f64]) -> Result<f64> {
        if self.mu == 0.0 {
            return Ok(0.0);
        }
        let (loss, g) = fedprox_term(hot, &self.global_hot, self.mu)?;
        for (a, b) in grad.iter_mut().zip(g.iter()) {
            *a += b;
        }
        Ok(loss)
    }
}

fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Cosine of `z` and `v` with its gradient in `z`; `None` for a zero vector.
fn cosine_with_grad(z: &[f64], v: &[f64]) -> Option<(f64, Vec<f64>)> {
    let nz = dot(z, z).sqrt();
    let nv = dot(v, v).sqrt();
    if nz == 0.0 || nv == 0.0 {
        return None;
    }
    let c = dot(z, v) / (nz * nv);
    let g = z
        .iter()
        .zip(v)
        .map(|(zi, vi)| vi / (nz * nv) - c * zi / (nz * nz))
        .collect();
    Some((c, g))
}

/// Model-contrastive loss for one representation and its gradient in `z`.
///
/// `-weight · log(e^{s_g/τ} / (e^{s_g/τ} + e^{s_p/τ}))` with `s_g = cos(z, z_global)`
/// and `s_p = cos(z, z_prev)`. Without a previous representation, or when a
/// vector has zero norm, the term is zero.
pub fn moon_term(
    z: &[f64],
    z_global: &[f64],
    z_prev: Option<&[f64]>,
    tau: f64,
    weight: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau {tau} must be positive")));
    }
    let zero = || (0.0, vec![0.0; z.len()]);
    let Some(z_prev) = z_prev else {
        return Ok(zero());
    };
    let (Some((sg, gg)), Some((sp, gp))) =
        (cosine_with_grad(z, z_global), cosine_with_grad(z, z_prev))
    else {
        return Ok(zero());
    };
    let u = (sp - sg) / tau;
    let coef = weight * sigmoid(u) / tau;
    let grad = gp.iter().zip(&gg).map(|(p, g)| coef * (p - g)).collect();
    Ok((weight * softplus(u), grad))
}

/// Contrastive term against the global model and the client's previous
/// local model, averaged over the batch.
pub struct ContrastiveHook<'a> {
    pub global: &'a ParamSet,
    pub previous: Option<ParamSet>,
    pub tau: f64,
    pub weight: f64,
}

impl LossHook for ContrastiveHook<'_> {
    fn representation_term(
        &self,
        batch: &Batch,
        representations: &[Vec<f64>],
        grad: &mut [Vec<f64>],
    ) -> Result<f64> {
        let Some(previous) = &self.previous else {
            return Ok(0.0);
        };
        if self.weight == 0.0 {
            return Ok(0.0);
        }
        let zg = crate::refmodel::forward(self.global, batch)?.representations;
        let zp = crate::refmodel::forward(previous, batch)?.representations;
        let inv_b = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for i in 0..batch.len() {
            let (l, g) = moon_term(
                &representations[i],
                &zg[i],
                Some(&zp[i]),
                self.tau,
                self.weight,
            )?;
            loss += l * inv_b;
            for (a, b) in grad[i].iter_mut().zip(g) {
                *a += b * inv_b;
            }
        }
        Ok(loss)
    }
}

/// Sample-count weighted mean of the uploads, consumed in client-id order.
pub fn aggregate_fedavg(updates: &[RoundUpdate]) -> Result<FlatVector> {
    let mut sorted: Vec<&RoundUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let items: Vec<(&FlatVector, f64)> = sorted
        .iter()
        .map(|u| (&u.hot_params, u.n_samples as f64))
        .collect();
    weighted_sum(&items)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Lloyd's k-means with k-means++ seeding and a few restarts. With
/// `spherical`, centroids are renormalised (points must be unit or zero).
/// Returns cluster assignments in `0..k'` where `k' ≤ k` is the number of
/// nonempty clusters.
fn kmeans(points: &[Vec<f64>], k: usize, spherical: bool, rng: &mut StreamRng) -> Vec<usize> {
    const RESTARTS: usize = 8;
    const MAX_ITERS: usize = 100;
    let n = points.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..RESTARTS {
        let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
        while centers.len() < k {
            let d: Vec<f64> = points
                .iter()
                .map(|p| {
                    centers
                        .iter()
                        .map(|c| sq_dist(p, c))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let total: f64 = d.iter().sum();
            if total <= 1e-300 {
                break;
            }
            let mut r = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, di) in d.iter().enumerate() {
                if r < *di {
                    pick = i;
                    break;
                }
                r -= di;
            }
            centers.push(points[pick].clone());
        }
        let mut assign = vec![usize::MAX; n];
        for _ in 0..MAX_ITERS {
            let next: Vec<usize> = points
                .iter()
                .map(|p| {
                    let mut bi = 0;
                    let mut bd = f64::INFINITY;
                    for (ci, c) in centers.iter().enumerate() {
                        let d = sq_dist(p, c);
                        if d < bd {
                            bd = d;
                            bi = ci;
                        }
                    }
                    bi
                })
                .collect();
            if next == assign {
                break;
            }
            assign = next;
            for (ci, c) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = points
                    .iter()
                    .zip(&assign)
                    .filter(|(_, a)| **a == ci)
                    .map(|(p, _)| p)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let mut mean = vec![0.0; c.len()];
                for m in &members {
                    for (a, b) in mean.iter_mut().zip(m.iter()) {
                        *a += b;
                    }
                }
                for a in &mut mean {
                    *a /= members.len() as f64;
                }
                *c = if spherical { normalized(&mean) } else { mean };
            }
        }
        let inertia: f64 = points
            .iter()
            .zip(&assign)
            .map(|(p, &a)| sq_dist(p, &centers[a]))
            .sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    // relabel by first appearance, dropping empty clusters
    let assign = best.expect("at least one restart").1;
    let mut relabel = BTreeMap::new();
    assign
        .iter()
        .map(|a| {
            let next = relabel.len();
            *relabel.entry(*a).or_insert(next)
        })
        .collect()
}

/// Split `quota` selection slots across clusters in proportion to their
/// sample mass, at least one per cluster and never more than a cluster's size.
fn allocate_slots(quota: usize, masses: &[f64], sizes: &[usize]) -> Vec<usize> {
    let total: f64 = masses.iter().sum();
    let shares: Vec<f64> = masses.iter().map(|m| m / total).collect();
    let mut slots = crate::partition::largest_remainder(quota, &shares);
    let target = |c: usize| quota as f64 * shares[c];
    while let Some(empty) = slots.iter().position(|&s| s == 0) {
        let donor = (0..slots.len())
            .filter(|&c| slots[c] > 1)
            .max_by(|&a, &b| slots[a].cmp(&slots[b]).then(b.cmp(&a)))
            .expect("quota covers every cluster");
        slots[donor] -= 1;
        slots[empty] += 1;
    }
    while let Some(over) = (0..slots.len()).find(|&c| slots[c] > sizes[c]) {
        let excess = slots[over] - sizes[over];
        slots[over] = sizes[over];
        for _ in 0..excess {
            let taker = (0..slots.len())
                .filter(|&c| slots[c] < sizes[c])
                .max_by(|&a, &b| {
                    (target(a) - slots[a] as f64)
                        .total_cmp(&(target(b) - slots[b] as f64))
                        .then(b.cmp(&a))
                })
                .expect("quota never exceeds the client count");
            slots[taker] += 1;
        }
    }
    slots
}

/// Cluster clients and sample them cluster by cluster.
///
/// Clients are grouped by k-means, on sample counts when `directions` is
/// `None` and on the cosine geometry of the given per-client vectors
/// otherwise. Each cluster receives selection slots in proportion to its
/// total sample count (at least one each), filled by uniform sampling of its
/// members. Returns sorted client ids.
pub fn clusamp_select(
    sizes: &[usize],
    directions: Option<&[FlatVector]>,
    n_clusters: usize,
    quota: usize,
    rng: &mut StreamRng,
) -> Result<Vec<usize>> {
    let n = sizes.len();
    if quota == 0 || quota > n {
        return Err(Error::Config(format!(
            "selection quota {quota} for {n} clients"
        )));
    }
    if n_clusters == 0 || n_clusters > quota {
        return Err(Error::Config(format!(
            "n_clusters {n_clusters} must be between 1 and the quota {quota}"
        )));
    }
    let (points, spherical): (Vec<Vec<f64>>, bool) = match directions {
        Some(d) => {
            if d.len() != n {
                return Err(Error::dim(n, d.len()));
            }
            (d.iter().map(|v| normalized(v.as_slice())).collect(), true)
        }
        None => (sizes.iter().map(|&s| vec![s as f64]).collect(), false),
    };
    let assign = kmeans(&points, n_clusters, spherical, rng);
    let k = assign.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (client, &c) in assign.iter().enumerate() {
        members[c].push(client);
    }
    let masses: Vec<f64> = members
        .iter()
        .map(|m| m.iter().map(|&i| sizes[i] as f64).sum())
        .collect();
    let counts: Vec<usize> = members.iter().map(Vec::len).collect();
    let slots = allocate_slots(quota, &masses, &counts);
    let mut selected = Vec::with_capacity(quota);
    for (m, s) in members.iter().zip(slots) {
        for i in index::sample(rng, m.len(), s) {
            selected.push(m[i]);
        }
    }
    selected.sort_unstable();
    Ok(selected)
}

fn similarity(a: &FlatVector, b: &FlatVector) -> Result<f64> {
    match cosine_slices(a.as_slice(), b.as_slice()) {
        Err(Error::DegenerateVector) => Ok(0.0),
        other => other,
    }
}

/// Cross-aggregate trained intermediate models.
///
/// Each trained model is blended with its least similar peer (minimum
/// cosine, ties to the lower index): `α·w_i + (1−α)·w_j`. The global model is
/// the unweighted mean of the new pool.
pub fn fedcross_round(
    pool: &[FlatVector],
    trained: &[FlatVector],
    cross_alpha: f64,
) -> Result<(Vec<FlatVector>, FlatVector)> {
    if pool.len() != trained.len() || pool.is_empty() {
        return Err(Error::State(format!(
            "pool holds {} models but {} were trained",
            pool.len(),
            trained.len()
        )));
    }
    let k = trained.len();
    let mut new_pool = Vec::with_capacity(k);
    for i in 0..k {
        let mut peer = None;
        let mut lowest = f64::INFINITY;
        for j in (0..k).filter(|&j| j != i) {
            let s = similarity(&trained[i], &trained[j])?;
            if s < lowest {
                lowest = s;
                peer = Some(j);
            }
        }
        let blended = match peer {
            Some(j) => FlatVector::new(
                trained[i]
                    .iter()
                    .zip(trained[j].iter())
                    .map(|(a, b)| cross_alpha * a + (1.0 - cross_alpha) * b)
                    .collect(),
            ),
            None => trained[i].clone(),
        };
        new_pool.push(blended);
    }
    let items: Vec<(&FlatVector, f64)> = new_pool.iter().map(|v| (v, 1.0)).collect();
    let global = weighted_sum(&items)?;
    Ok((new_pool, global))
}

/// Mutated copies of a global model, generated in `±` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct MutationSet {
    pub base: FlatVector,
    /// One offset `beta·(m ⊙ delta)` per pair.
    pub offsets: Vec<FlatVector>,
    /// The sign mask drawn for each pair, expanded to parameter length.
    pub masks: Vec<Vec<f64>>,
    /// Whether an unmutated copy of `base` completes an odd count.
    pub unmutated: bool,
}

impl MutationSet {
    pub fn len(&self) -> usize {
        2 * self.offsets.len() + usize::from(self.unmutated)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Variants in dispatch order: `base + o_1, base − o_1, base + o_2, ...`,
    /// then the unmutated copy.
    pub fn variants(&self) -> Vec<FlatVector> {
        let mut out = Vec::with_capacity(self.len());
        for o in &self.offsets {
            out.push(FlatVector::new(
                self.base.iter().zip(o.iter()).map(|(b, x)| b + x).collect(),
            ));
            out.push(FlatVector::new(
                self.base.iter().zip(o.iter()).map(|(b, x)| b - x).collect(),
            ));
        }
        if self.unmutated {
            out.push(self.base.clone());
        }
        out
    }

    /// Mean of the variants, computed in offset space where each `±` pair
    /// cancels exactly; this is always `base`.
    pub fn mean(&self) -> FlatVector {
        let mut offset_sum = vec![0.0; self.base.len()];
        for o in &self.offsets {
            for (s, x) in offset_sum.iter_mut().zip(o.iter()) {
                *s += x + (-x);
            }
        }
        let n = self.len().max(1) as f64;
        FlatVector::new(
            self.base
                .iter()
                .zip(&offset_sum)
                .map(|(b, s)| if *s == 0.0 { *b } else { b + s / n })
                .collect(),
        )
    }
}

/// Draw a sign mask: one sign per segment (lengths in `segment_lens`) or per
/// parameter.
pub fn draw_sign_mask(
    segment_lens: &[usize],
    granularity: MaskGranularity,
    rng: &mut StreamRng,
) -> Vec<f64> {
    let sign = |rng: &mut StreamRng| if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut mask = Vec::with_capacity(segment_lens.iter().sum());
    for &len in segment_lens {
        match granularity {
            MaskGranularity::Segment => {
                let s = sign(rng);
                mask.extend(std::iter::repeat_n(s, len));
            }
            MaskGranularity::Parameter => mask.extend((0..len).map(|_| sign(rng))),
        }
    }
    mask
}

/// Mutate with given masks: pair `i` uses offset `beta·(masks[i] ⊙ delta)`.
pub fn mutate_with_masks(
    w_global: &FlatVector,
    delta: &FlatVector,
    masks: Vec<Vec<f64>>,
    beta: f64,
    unmutated: bool,
) -> Result<MutationSet> {
    if delta.len() != w_global.len() {
        return Err(Error::dim(w_global.len(), delta.len()));
    }
    let mut offsets = Vec::with_capacity(masks.len());
    for m in &masks {
        if m.len() != delta.len() {
            return Err(Error::dim(delta.len(), m.len()));
        }
        offsets.push(FlatVector::new(
            m.iter()
                .zip(delta.iter())
                .map(|(s, d)| beta * (s * d))
                .collect(),
        ));
    }
    Ok(MutationSet {
        base: w_global.clone(),
        offsets,
        masks,
        unmutated,
    })
}

/// Generate `n_variants` mutated copies of the global hot vector along the
/// last global change `delta`.
pub fn fedmut_mutate(
    w_global: &FlatVector,
    delta: &FlatVector,
    n_variants: usize,
    beta: f64,
    segment_lens: &[usize],
    granularity: MaskGranularity,
    rng: &mut StreamRng,
) -> Result<MutationSet> {
    if segment_lens.iter().sum::<usize>() != w_global.len() {
        return Err(Error::dim(w_global.len(), segment_lens.iter().sum()));
    }
    let masks = (0..n_variants / 2)
        .map(|_| draw_sign_mask(segment_lens, granularity, rng))
        .collect();
    mutate_with_masks(w_global, delta, masks, beta, n_variants % 2 == 1)
}

fn hot_segment_lens(params: &ParamSet) -> Vec<usize> {
    params
        .segments()
        .iter()
        .zip(&params.hot_mask)
        .filter(|(_, h)| **h)
        .map(|(m, _)| m.len())
        .collect()
}

fn batch_of(samples: &[EncodedSample], idx: &[usize]) -> Batch {
    let chosen: Vec<&EncodedSample> = idx.iter().map(|&i| &samples[i]).collect();
    let width = chosen.iter().map(|s| s.ids.len()).max().unwrap_or(1).max(1);
    Batch::from_samples(&chosen, width)
}

/// Local mini-batch gradient descent on the hot parameters of `start`.
///
/// Runs `local_epochs` shuffled passes over `samples`. The reported loss is
/// the sample-weighted mean batch cross-entropy of the final epoch (or that
/// of `start` when no epoch runs); hook terms are optimised but not reported.
pub fn local_train(
    client_id: usize,
    samples: &[EncodedSample],
    start: &ParamSet,
    config: &FederationConfig,
    hooks: &[&dyn LossHook],
    rng: &mut StreamRng,
) -> Result<RoundUpdate> {
    if samples.is_empty() {
        return Err(Error::Input(format!("client {client_id} has no samples")));
    }
    let n = samples.len();
    let bs = config.batch_size.max(1);
    let mut params = start.clone();
    let mut order: Vec<usize> = (0..n).collect();
    let mut train_loss = 0.0;
    for _ in 0..config.local_epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let terms = loss_terms(&params, &batch_of(samples, chunk), hooks)?;
            params.descend(&terms.grads, config.learning_rate);
            total += terms.cross_entropy * chunk.len() as f64;
        }
        train_loss = total / n as f64;
    }
    if config.local_epochs == 0 {
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            total += loss_terms(&params, &batch_of(samples, chunk), hooks)?.cross_entropy
                * chunk.len() as f64;
        }
        train_loss = total / n as f64;
    }
    if !train_loss.is_finite() {
        return Err(Error::NonFinite("local training loss"));
    }
    let hot_params = params.hot_vector();
    if !hot_params.is_finite() {
        return Err(Error::NonFinite("local parameters"));
    }
    Ok(RoundUpdate {
        client_id,
        hot_params,
        n_samples: n,
        train_loss,
    })
}

/// One line of the per-round trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub algorithm: Algorithm,
    pub selected: Vec<usize>,
    pub mean_train_loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Serialized size of every upload this round.
    pub upload_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationOutcome {
    pub report: EvaluationReport,
    pub trace: Vec<RoundRecord>,
    pub state: RoundState,
}

fn check_clients(config: &FederationConfig, clients: &[ClientData]) -> Result<()> {
    if clients.len() != config.n_clients {
        return Err(Error::Config(format!(
            "{} client shards for n_clients = {}",
            clients.len(),
            config.n_clients
        )));
    }
    for (i, c) in clients.iter().enumerate() {
        if c.client_id != i {
            return Err(Error::Config(format!(
                "client at position {i} has id {}",
                c.client_id
            )));
        }
        if c.samples.is_empty() {
            return Err(Error::Config(format!("client {i} has no samples")));
        }
    }
    Ok(())
}

fn save_checkpoint(dir: &Path, name: &str, params: &ParamSet) -> Result<()> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(params, &mut w)?;
    std::io::Write::flush(&mut w).map_err(|e| Error::io(&path, e))
}

fn with_hot(template: &ParamSet, hot: &FlatVector) -> Result<ParamSet> {
    let mut p = template.clone();
    p.set_hot_vector(hot)?;
    Ok(p)
}

/// Run the configured federation from `initial` and evaluate the global model
/// on `test` after every round.
///
/// Checkpoints go to `checkpoint_dir` when given and `checkpoint_every > 0`.
pub fn run_federation(
    config: &FederationConfig,
    initial: &ParamSet,
    clients: &[ClientData],
    test: &[EncodedSample],
    checkpoint_dir: Option<&Path>,
) -> Result<FederationOutcome> {
    config.validate()?;
    check_clients(config, clients)?;
    if test.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let mut state = RoundState::new(config, initial);
    let mut report = evaluate_model(&state.global, test)?;
    let mut trace = Vec::with_capacity(config.rounds);
    if config.rounds == 0 {
        return Ok(FederationOutcome {
            report,
            trace,
            state,
        });
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::State(format!("worker pool: {e}")))?;
    let p = &config.algorithm_params;
    let quota = config.selection_count();
    let sizes: Vec<usize> = clients.iter().map(|c| c.samples.len()).collect();
    let seg_lens = hot_segment_lens(initial);
    let hot_len = initial.hot_count();

    for round in 1..=config.rounds {
        state.round_index = round;
        let global_hot = state.global.hot_vector();

        let selected = match &state.extras {
            Extras::CluSamp { last_delta } => {
                let mut rng = rng::stream(config.seed, &[rng::TAG_SELECT, round as u64]);
                let directions: Option<Vec<FlatVector>> = (p.cluster_mode
                    == ClusterMode::Similarity
                    && !last_delta.is_empty())
                .then(|| {
                    (0..config.n_clients)
                        .map(|c| {
                            last_delta
                                .get(&c)
                                .cloned()
                                .unwrap_or_else(|| FlatVector::zeros(hot_len))
                        })
                        .collect()
                });
                clusamp_select(
                    &sizes,
                    directions.as_deref(),
                    config.n_clusters(),
                    quota,
                    &mut rng,
                )?
            }
            _ => select_clients(round, config),
        };

        let dispatched: Vec<FlatVector> = match &state.extras {
            Extras::FedCross { pool } => pool.clone(),
            Extras::FedMut { previous_global } => {
                let delta = global_hot.sub(previous_global)?;
                let mut rng = rng::stream(config.seed, &[rng::TAG_MUTATE, round as u64]);
                fedmut_mutate(
                    &global_hot,
                    &delta,
                    quota,
                    p.mutate_beta,
                    &seg_lens,
                    p.mutation_granularity,
                    &mut rng,
                )?
                .variants()
            }
            _ => vec![global_hot.clone(); selected.len()],
        };

        let global = &state.global;
        let extras = &state.extras;
        let uploads: Vec<Result<Vec<u8>>> = pool.install(|| {
            selected
                .par_iter()
                .zip(dispatched.par_iter())
                .map(|(&cid, start_hot)| {
                    let start = with_hot(global, start_hot)?;
                    let mut rng =
                        rng::stream(config.seed, &[rng::TAG_LOCAL, round as u64, cid as u64]);
                    let samples = &clients[cid].samples;
                    let update = match (config.algorithm, extras) {
                        (Algorithm::FedProx, _) => {
                            let hook = ProximalHook {
                                global_hot: start_hot.clone(),
                                mu: p.mu,
                            };
                            local_train(cid, samples, &start, config, &[&hook], &mut rng)?
                        }
                        (Algorithm::Moon, Extras::Moon { previous }) => {
                            let hook = ContrastiveHook {
                                global,
                                previous: previous
                                    .get(&cid)
                                    .map(|h| with_hot(global, h))
                                    .transpose()?,
                                tau: p.tau,
                                weight: p.contrastive_weight,
                            };
                            local_train(cid, samples, &start, config, &[&hook], &mut rng)?
                        }
                        _ => local_train(cid, samples, &start, config, &[], &mut rng)?,
                    };
                    Ok(update.encode())
                })
                .collect()
        });

        let mut updates = Vec::with_capacity(uploads.len());
        let mut upload_bytes = 0;
        for bytes in uploads {
            let bytes = bytes?;
            upload_bytes += bytes.len();
            let update = RoundUpdate::decode(&bytes)?;
            if update.hot_params.len() != hot_len {
                return Err(Error::State(format!(
                    "client {} uploaded {} values, expected {hot_len} hot values",
                    update.client_id,
                    update.hot_params.len()
                )));
            }
            updates.push(update);
        }
        let total_samples: usize = updates.iter().map(|u| u.n_samples).sum();
        let mean_train_loss = updates
            .iter()
            .map(|u| u.train_loss * u.n_samples as f64)
            .sum::<f64>()
            / total_samples as f64;

        let new_global = match &mut state.extras {
            Extras::FedCross { pool } => {
                let trained: Vec<FlatVector> =
                    updates.iter().map(|u| u.hot_params.clone()).collect();
                let (new_pool, g) = fedcross_round(pool, &trained, p.cross_alpha)?;
                *pool = new_pool;
                g
            }
            Extras::FedMut { previous_global } => {
                *previous_global = global_hot.clone();
                aggregate_fedavg(&updates)?
            }
            Extras::Moon { previous } => {
                for u in &updates {
                    previous.insert(u.client_id, u.hot_params.clone());
                }
                aggregate_fedavg(&updates)?
            }
            Extras::CluSamp { last_delta } => {
                for (u, d) in updates.iter().zip(&dispatched) {
                    last_delta.insert(u.client_id, u.hot_params.sub(d)?);
                }
                aggregate_fedavg(&updates)?
            }
            Extras::None => aggregate_fedavg(&updates)?,
        };
        state.global.set_hot_vector(&new_global)?;

        report = evaluate_model(&state.global, test)?;
        trace.push(RoundRecord {
            round,
            algorithm: config.algorithm,
            selected,
            mean_train_loss,
            accuracy: report.accuracy,
            precision: report.precision,
            recall: report.recall,
            f1: report.f1,
            upload_bytes,
        });

        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && round % config.checkpoint_every == 0 {
                save_checkpoint(dir, &format!("round-{round:04}.ckpt"), &state.global)?;
                if let Extras::FedCross { pool } = &state.extras {
                    for (k, hot) in pool.iter().enumerate() {
                        let member = with_hot(&state.global, hot)?;
                        save_checkpoint(dir, &format!("round-{round:04}-pool-{k}.ckpt"), &member)?;
                    }
                }
            }
        }
    }
    Ok(FederationOutcome {
        report,
        trace,
        state,
    })
}

#[cfg(test)]
mod tests;
