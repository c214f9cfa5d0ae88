//! Parameter-efficient training schemes on the reference model.
//!
//! | kind   | hot segments                                   |
//! |--------|------------------------------------------------|
//! | full   | everything                                     |
//! | ptv1   | soft prompt rows + reparameterisation MLP      |
//! | ptv2   | one additive prefix per block input            |
//! | lora   | `A (out x r)`, `B (r x in)` per adapted weight |
//! | loha   | `A1, B1, A2, B2` per adapted weight            |
//! | ia3    | one scaling vector per block activation        |
//!
//! The classification head is hot under every scheme. Adapter segments are
//! appended after the base segments in the order listed in
//! [`AdapterState::segment_names`].

use std::borrow::Cow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::refmodel::ParamSet;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Full,
    Ptv1,
    Ptv2,
    Lora,
    Loha,
    Ia3,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 6] = [
        SchemeKind::Full,
        SchemeKind::Ptv1,
        SchemeKind::Ptv2,
        SchemeKind::Lora,
        SchemeKind::Loha,
        SchemeKind::Ia3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Full => "full",
            SchemeKind::Ptv1 => "ptv1",
            SchemeKind::Ptv2 => "ptv2",
            SchemeKind::Lora => "lora",
            SchemeKind::Loha => "loha",
            SchemeKind::Ia3 => "ia3",
        }
    }
}

/// Which block weights receive low-rank adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterTargets {
    Both,
    W1,
    W2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSpec {
    #[serde(default = "default_kind")]
    pub kind: SchemeKind,
    /// Adapter rank for lora / loha.
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// Number of soft prompt rows for ptv1.
    #[serde(default = "default_prompts")]
    pub n_prompt: usize,
    /// Low-rank scaling numerator; the update is scaled by `alpha_scale / rank`.
    /// Defaults to `2 * rank`.
    #[serde(default)]
    pub alpha_scale: Option<f64>,
    #[serde(default = "default_targets")]
    pub targets: AdapterTargets,
    #[serde(default)]
    pub seed: u64,
}

fn default_kind() -> SchemeKind {
    SchemeKind::Full
}
fn default_rank() -> usize {
    4
}
fn default_prompts() -> usize {
    4
}
fn default_targets() -> AdapterTargets {
    AdapterTargets::Both
}

impl Default for SchemeSpec {
    fn default() -> Self {
        SchemeSpec::new(SchemeKind::Full)
    }
}

impl SchemeSpec {
    pub fn new(kind: SchemeKind) -> Self {
        SchemeSpec {
            kind,
            rank: default_rank(),
            n_prompt: default_prompts(),
            alpha_scale: None,
            targets: default_targets(),
            seed: 0,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha_scale.unwrap_or(2.0 * self.rank as f64) / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SchemeKind::Lora | SchemeKind::Loha if self.rank == 0 => {
                Err(Error::Config("adapter rank must be at least 1".into()))
            }
            SchemeKind::Ptv1 if self.n_prompt == 0 => {
                Err(Error::Config("n_prompt must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightSlot {
    W1,
    W2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub block: usize,
    pub slot: WeightSlot,
}

/// `delta = scale * A B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRank {
    pub target: Target,
    pub a: Matrix,
    pub b: Matrix,
}

/// `delta = scale * (A1 B1) * (A2 B2)` (elementwise product).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hadamard {
    pub target: Target,
    pub a1: Matrix,
    pub b1: Matrix,
    pub a2: Matrix,
    pub b2: Matrix,
}

/// Soft prompt rows `P` and the reparameterisation
/// `Q = P + Wb relu(Wa P + ba) + bb` applied row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptAdapter {
    pub prompts: Matrix,
    pub w_a: Matrix,
    pub b_a: Matrix,
    pub w_b: Matrix,
    pub b_b: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AdapterState {
    PromptV1(PromptAdapter),
    PromptV2 { prefixes: Vec<Matrix> },
    Lora { scale: f64, pairs: Vec<LowRank> },
    Loha { scale: f64, pairs: Vec<Hadamard> },
    Ia3 { scales: Vec<Matrix> },
}

fn slot_name(t: &Target) -> String {
    match t.slot {
        WeightSlot::W1 => format!("block{}.w1", t.block),
        WeightSlot::W2 => format!("block{}.w2", t.block),
    }
}

impl AdapterState {
    pub fn kind(&self) -> SchemeKind {
        match self {
            AdapterState::PromptV1(_) => SchemeKind::Ptv1,
            AdapterState::PromptV2 { .. } => SchemeKind::Ptv2,
            AdapterState::Lora { .. } => SchemeKind::Lora,
            AdapterState::Loha { .. } => SchemeKind::Loha,
            AdapterState::Ia3 { .. } => SchemeKind::Ia3,
        }
    }

    pub fn segments(&self) -> Vec<&Matrix> {
        match self {
            AdapterState::PromptV1(p) => vec![&p.prompts, &p.w_a, &p.b_a, &p.w_b, &p.b_b],
            AdapterState::PromptV2 { prefixes } => prefixes.iter().collect(),
            AdapterState::Lora { pairs, .. } => pairs.iter().flat_map(|p| [&p.a, &p.b]).collect(),
            AdapterState::Loha { pairs, .. } => pairs
                .iter()
                .flat_map(|p| [&p.a1, &p.b1, &p.a2, &p.b2])
                .collect(),
            AdapterState::Ia3 { scales } => scales.iter().collect(),
        }
    }

    pub fn segments_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            AdapterState::PromptV1(p) => vec![
                &mut p.prompts,
                &mut p.w_a,
                &mut p.b_a,
                &mut p.w_b,
                &mut p.b_b,
            ],
            AdapterState::PromptV2 { prefixes } => prefixes.iter_mut().collect(),
            AdapterState::Lora { pairs, .. } => pairs
                .iter_mut()
                .flat_map(|p| [&mut p.a, &mut p.b])
                .collect(),
            AdapterState::Loha { pairs, .. } => pairs
                .iter_mut()
                .flat_map(|p| [&mut p.a1, &mut p.b1, &mut p.a2, &mut p.b2])
                .collect(),
            AdapterState::Ia3 { scales } => scales.iter_mut().collect(),
        }
    }

    pub fn segment_names(&self) -> Vec<String> {
        match self {
            AdapterState::PromptV1(_) => [
                "prompt.rows",
                "prompt.w_a",
                "prompt.b_a",
                "prompt.w_b",
                "prompt.b_b",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            AdapterState::PromptV2 { prefixes } => (0..prefixes.len())
                .map(|l| format!("prefix.block{l}"))
                .collect(),
            AdapterState::Lora { pairs, .. } => pairs
                .iter()
                .flat_map(|p| {
                    let s = slot_name(&p.target);
                    [format!("lora.{s}.a"), format!("lora.{s}.b")]
                })
                .collect(),
            AdapterState::Loha { pairs, .. } => pairs
                .iter()
                .flat_map(|p| {
                    let s = slot_name(&p.target);
                    ["a1", "b1", "a2", "b2"].map(|part| format!("loha.{s}.{part}"))
                })
                .collect(),
            AdapterState::Ia3 { scales } => {
                (0..scales.len()).map(|l| format!("ia3.block{l}")).collect()
            }
        }
    }

    pub fn ia3_scales(&self) -> Option<&[Matrix]> {
        match self {
            AdapterState::Ia3 { scales } => Some(scales),
            _ => None,
        }
    }

    pub fn prefixes(&self) -> Option<&[Matrix]> {
        match self {
            AdapterState::PromptV2 { prefixes } => Some(prefixes),
            _ => None,
        }
    }

    pub fn prompt(&self) -> Option<&PromptAdapter> {
        match self {
            AdapterState::PromptV1(p) => Some(p),
            _ => None,
        }
    }
}

/// Reparameterised prompt rows and the intermediates needed for backprop.
#[derive(Debug, Clone)]
pub struct PromptForward {
    pub q: Matrix,
    pub pre: Matrix,
    pub act: Matrix,
    /// Sum of the rows of `q`; enters the pooled mean.
    pub sum: Vec<f64>,
}

pub fn prompt_forward(p: &PromptAdapter) -> PromptForward {
    let n = p.prompts.rows();
    let d = p.prompts.cols();
    let mut q = Matrix::zeros(n, d);
    let mut pre = Matrix::zeros(n, d);
    let mut act = Matrix::zeros(n, d);
    let mut sum = vec![0.0; d];
    for r in 0..n {
        let row = p.prompts.row(r);
        let pre_r = pre.row_mut(r);
        p.w_a.matvec(row, pre_r);
        for (a, b) in pre_r.iter_mut().zip(p.b_a.values()) {
            *a += b;
        }
        let act_r: Vec<f64> = pre.row(r).iter().map(|v| v.max(0.0)).collect();
        act.row_mut(r).copy_from_slice(&act_r);
        let q_r = q.row_mut(r);
        p.w_b.matvec(&act_r, q_r);
        for ((qv, pv), b) in q_r.iter_mut().zip(row).zip(p.b_b.values()) {
            *qv += pv + b;
        }
        for (s, qv) in sum.iter_mut().zip(q.row(r)) {
            *s += qv;
        }
    }
    PromptForward { q, pre, act, sum }
}

fn lora_delta(scale: f64, p: &LowRank) -> Result<Matrix> {
    let mut d = p.a.matmul(&p.b)?;
    d.values_mut().iter_mut().for_each(|v| *v *= scale);
    Ok(d)
}

fn loha_delta(scale: f64, p: &Hadamard) -> Result<Matrix> {
    let m1 = p.a1.matmul(&p.b1)?;
    let m2 = p.a2.matmul(&p.b2)?;
    let mut d = m1.hadamard(&m2)?;
    d.values_mut().iter_mut().for_each(|v| *v *= scale);
    Ok(d)
}

fn slot_mut<'m, 'p>(
    w1: &'m mut [Cow<'p, Matrix>],
    w2: &'m mut [Cow<'p, Matrix>],
    t: &Target,
) -> Result<&'m mut Matrix> {
    let slot = match t.slot {
        WeightSlot::W1 => w1.get_mut(t.block),
        WeightSlot::W2 => w2.get_mut(t.block),
    };
    slot.map(Cow::to_mut)
        .ok_or_else(|| Error::Config(format!("adapter targets missing block {}", t.block)))
}

/// Block weights with low-rank updates added. IA3 scaling is not folded here;
/// the forward pass applies it to activations.
pub fn effective_block_weights(
    params: &ParamSet,
) -> Result<(Vec<Cow<'_, Matrix>>, Vec<Cow<'_, Matrix>>)> {
    let mut w1: Vec<Cow<Matrix>> = params.blocks.iter().map(|b| Cow::Borrowed(&b.w1)).collect();
    let mut w2: Vec<Cow<Matrix>> = params.blocks.iter().map(|b| Cow::Borrowed(&b.w2)).collect();
    match &params.adapters {
        Some(AdapterState::Lora { scale, pairs }) => {
            for p in pairs {
                let delta = lora_delta(*scale, p)?;
                slot_mut(&mut w1, &mut w2, &p.target)?.axpy(1.0, &delta)?;
            }
        }
        Some(AdapterState::Loha { scale, pairs }) => {
            for p in pairs {
                let delta = loha_delta(*scale, p)?;
                slot_mut(&mut w1, &mut w2, &p.target)?.axpy(1.0, &delta)?;
            }
        }
        _ => {}
    }
    Ok((w1, w2))
}

/// Gradients of the loss with respect to the quantities adapters feed into.
pub struct UpstreamGrads<'g> {
    /// Per block, gradient w.r.t. the effective `W1` / `W2`.
    pub w1: &'g [Matrix],
    pub w2: &'g [Matrix],
    /// Per block, gradient w.r.t. the IA3 scaling vector.
    pub ia3: &'g [Vec<f64>],
    /// Per block, gradient w.r.t. the block input (prefix gradient).
    pub prefix: &'g [Vec<f64>],
    /// Gradient w.r.t. each reparameterised prompt row (identical for all rows).
    pub prompt_row: &'g [f64],
}

fn upstream_for<'g>(up: &UpstreamGrads<'g>, t: &Target) -> &'g Matrix {
    match t.slot {
        WeightSlot::W1 => &up.w1[t.block],
        WeightSlot::W2 => &up.w2[t.block],
    }
}

fn scaled(mut m: Matrix, s: f64) -> Matrix {
    m.values_mut().iter_mut().for_each(|v| *v *= s);
    m
}

/// Fill the adapter segments of `grads` from upstream gradients.
pub fn backprop_adapters(
    params: &ParamSet,
    grads: &mut ParamSet,
    up: &UpstreamGrads<'_>,
    prompt: Option<&PromptForward>,
) -> Result<()> {
    let (Some(state), Some(out)) = (&params.adapters, &mut grads.adapters) else {
        return Ok(());
    };
    match (state, out) {
        (AdapterState::Lora { scale, pairs }, AdapterState::Lora { pairs: gp, .. }) => {
            for (p, g) in pairs.iter().zip(gp.iter_mut()) {
                let gw = upstream_for(up, &p.target);
                g.a = scaled(gw.matmul(&p.b.transpose())?, *scale);
                g.b = scaled(p.a.transpose().matmul(gw)?, *scale);
            }
        }
        (AdapterState::Loha { scale, pairs }, AdapterState::Loha { pairs: gp, .. }) => {
            for (p, g) in pairs.iter().zip(gp.iter_mut()) {
                let gw = upstream_for(up, &p.target);
                let m1 = p.a1.matmul(&p.b1)?;
                let m2 = p.a2.matmul(&p.b2)?;
                let d1 = scaled(gw.hadamard(&m2)?, *scale);
                let d2 = scaled(gw.hadamard(&m1)?, *scale);
                g.a1 = d1.matmul(&p.b1.transpose())?;
                g.b1 = p.a1.transpose().matmul(&d1)?;
                g.a2 = d2.matmul(&p.b2.transpose())?;
                g.b2 = p.a2.transpose().matmul(&d2)?;
            }
        }
        (AdapterState::Ia3 { .. }, AdapterState::Ia3 { scales }) => {
            for (g, u) in scales.iter_mut().zip(up.ia3) {
                g.values_mut().copy_from_slice(u);
            }
        }
        (AdapterState::PromptV2 { .. }, AdapterState::PromptV2 { prefixes }) => {
            for (g, u) in prefixes.iter_mut().zip(up.prefix) {
                g.values_mut().copy_from_slice(u);
            }
        }
        (AdapterState::PromptV1(p), AdapterState::PromptV1(g)) => {
            let fwd = prompt.ok_or_else(|| Error::State("prompt forward missing".into()))?;
            let dq = up.prompt_row;
            let n = p.prompts.rows();
            for r in 0..n {
                g.w_b.add_outer(1.0, dq, fwd.act.row(r));
                let mut d_act = vec![0.0; dq.len()];
                p.w_b.matvec_t_acc(dq, &mut d_act);
                let d_pre: Vec<f64> = d_act
                    .iter()
                    .zip(fwd.pre.row(r))
                    .map(|(d, &a)| if a > 0.0 { *d } else { 0.0 })
                    .collect();
                g.w_a.add_outer(1.0, &d_pre, p.prompts.row(r));
                for (gb, d) in g.b_a.values_mut().iter_mut().zip(&d_pre) {
                    *gb += d;
                }
                let row = g.prompts.row_mut(r);
                row.copy_from_slice(dq);
                p.w_a.matvec_t_acc(&d_pre, row);
            }
            for (gb, d) in g.b_b.values_mut().iter_mut().zip(dq) {
                *gb = d * n as f64;
            }
        }
        _ => {
            return Err(Error::State(
                "gradient adapters differ from parameters".into(),
            ))
        }
    }
    Ok(())
}

fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Matrix {
    let values = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix::from_vec(rows, cols, values).expect("shape matches")
}

fn targets(params: &ParamSet, which: AdapterTargets) -> Vec<Target> {
    let mut out = Vec::new();
    for block in 0..params.blocks.len() {
        if matches!(which, AdapterTargets::Both | AdapterTargets::W1) {
            out.push(Target {
                block,
                slot: WeightSlot::W1,
            });
        }
        if matches!(which, AdapterTargets::Both | AdapterTargets::W2) {
            out.push(Target {
                block,
                slot: WeightSlot::W2,
            });
        }
    }
    out
}

fn target_shape(params: &ParamSet, t: &Target) -> (usize, usize) {
    let w = match t.slot {
        WeightSlot::W1 => &params.blocks[t.block].w1,
        WeightSlot::W2 => &params.blocks[t.block].w2,
    };
    (w.rows(), w.cols())
}

/// Install the adapters of `scheme` and rebuild the hot mask.
pub fn attach(scheme: &SchemeSpec, params: &ParamSet) -> Result<ParamSet> {
    scheme.validate()?;
    if params.adapters.is_some() {
        return Err(Error::Config("parameters already carry adapters".into()));
    }
    let mut out = params.clone();
    let d = params.embed_dim();
    let h = params.hidden_dim();
    let mut rng = rng::stream(scheme.seed, &[rng::TAG_ADAPTER]);
    let r = scheme.rank;
    if matches!(scheme.kind, SchemeKind::Lora | SchemeKind::Loha) {
        for t in targets(params, scheme.targets) {
            let (rows, cols) = target_shape(params, &t);
            if r > rows.min(cols) {
                return Err(Error::Config(format!(
                    "rank {r} exceeds the {rows}x{cols} weight {}",
                    slot_name(&t)
                )));
            }
        }
    }
    let bound_r = 1.0 / (r.max(1) as f64).sqrt();
    out.adapters = match scheme.kind {
        SchemeKind::Full => None,
        SchemeKind::Lora => Some(AdapterState::Lora {
            scale: scheme.scale(),
            pairs: targets(params, scheme.targets)
                .into_iter()
                .map(|t| {
                    let (rows, cols) = target_shape(params, &t);
                    LowRank {
                        target: t,
                        a: uniform(rows, r, bound_r, &mut rng),
                        b: Matrix::zeros(r, cols),
                    }
                })
                .collect(),
        }),
        SchemeKind::Loha => Some(AdapterState::Loha {
            scale: scheme.scale(),
            pairs: targets(params, scheme.targets)
                .into_iter()
                .map(|t| {
                    let (rows, cols) = target_shape(params, &t);
                    // A2 B2 starts as the all-ones matrix through its first
                    // rank component; the remaining B2 rows are random.
                    let mut a2 = Matrix::zeros(rows, r);
                    for i in 0..rows {
                        a2.set(i, 0, 1.0);
                    }
                    let mut b2 = uniform(r, cols, bound_r, &mut rng);
                    b2.row_mut(0).iter_mut().for_each(|v| *v = 1.0);
                    Hadamard {
                        target: t,
                        a1: uniform(rows, r, bound_r, &mut rng),
                        b1: Matrix::zeros(r, cols),
                        a2,
                        b2,
                    }
                })
                .collect(),
        }),
        SchemeKind::Ia3 => Some(AdapterState::Ia3 {
            scales: (0..params.blocks.len())
                .map(|_| Matrix::filled(h, 1, 1.0))
                .collect(),
        }),
        SchemeKind::Ptv2 => Some(AdapterState::PromptV2 {
            prefixes: (0..params.blocks.len())
                .map(|_| Matrix::zeros(d, 1))
                .collect(),
        }),
        SchemeKind::Ptv1 => {
            let bound_d = 1.0 / (d as f64).sqrt();
            Some(AdapterState::PromptV1(PromptAdapter {
                prompts: uniform(scheme.n_prompt, d, bound_d, &mut rng),
                w_a: uniform(d, d, bound_d, &mut rng),
                b_a: Matrix::zeros(d, 1),
                w_b: Matrix::zeros(d, d),
                b_b: Matrix::zeros(d, 1),
            }))
        }
    };
    let base = out.base_segment_count();
    out.hot_mask = if out.adapters.is_none() {
        out.all_hot_mask()
    } else {
        let n = out.segment_count();
        (0..n).map(|i| i >= base - 2).collect()
    };
    Ok(out)
}

/// Fold weight adapters into the backbone. Prompt adapters change inputs
/// rather than weights and are kept as they are.
pub fn effective_params(params: &ParamSet) -> Result<ParamSet> {
    let fold = |mut out: ParamSet| {
        out.adapters = None;
        out.hot_mask = out.all_hot_mask();
        out
    };
    match &params.adapters {
        None | Some(AdapterState::PromptV1(_)) | Some(AdapterState::PromptV2 { .. }) => {
            Ok(params.clone())
        }
        Some(AdapterState::Lora { .. }) | Some(AdapterState::Loha { .. }) => {
            let (w1, w2) = effective_block_weights(params)?;
            let (w1, w2): (Vec<Matrix>, Vec<Matrix>) = (
                w1.into_iter().map(Cow::into_owned).collect(),
                w2.into_iter().map(Cow::into_owned).collect(),
            );
            let mut out = params.clone();
            for ((b, n1), n2) in out.blocks.iter_mut().zip(w1).zip(w2) {
                b.w1 = n1;
                b.w2 = n2;
            }
            Ok(fold(out))
        }
        Some(AdapterState::Ia3 { scales }) => {
            let mut out = params.clone();
            for (b, s) in out.blocks.iter_mut().zip(scales) {
                for r in 0..b.w2.rows() {
                    for (w, sv) in b.w2.row_mut(r).iter_mut().zip(s.values()) {
                        *w *= sv;
                    }
                }
            }
            Ok(fold(out))
        }
    }
}

/// Hot entries divided by the base model's entry count (adapters excluded
/// from the denominator, so the rate is the communicated fraction of a
/// full-parameter update).
pub fn hot_param_rate(params: &ParamSet) -> f64 {
    params.hot_count() as f64 / params.base_param_count() as f64
}
