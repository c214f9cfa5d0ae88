//! The compact reference classifier.
//!
//! Mean-pooled token embeddings feed a stack of residual feed-forward blocks
//! and a linear classification head. The pooled-and-transformed vector that
//! reaches the head is exposed as the sample's representation. Gradients are
//! computed by hand-written reverse-mode differentiation.

mod params;

use std::borrow::Cow;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use params::{read_checkpoint, write_checkpoint, Block, ParamSet};

use crate::corpus::{EncodedSample, PAD};
use crate::error::{Error, Result};
use crate::numkit::{FlatVector, Matrix};
use crate::peft::{self, PromptForward};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("n_blocks", self.n_blocks),
            ("hidden_dim", self.hidden_dim),
            ("max_len", self.max_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        Ok(())
    }
}

fn uniform_matrix<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Matrix {
    let values = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix::from_vec(rows, cols, values).expect("shape matches")
}

/// Seeded initialisation: every weight is uniform in `±1/sqrt(fan_in)`,
/// every bias is zero. An embedding row is a lookup of one active input, so
/// its fan-in is 1 and its entries are uniform in `±1`.
pub fn init(config: &ModelConfig) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, &[rng::TAG_INIT]);
    let d = config.embed_dim;
    let h = config.hidden_dim;
    let embedding = uniform_matrix(config.vocab_size, d, 1.0, &mut rng);
    let blocks = (0..config.n_blocks)
        .map(|_| {
            let w1 = uniform_matrix(h, d, 1.0 / (d as f64).sqrt(), &mut rng);
            let w2 = uniform_matrix(d, h, 1.0 / (h as f64).sqrt(), &mut rng);
            Block {
                w1,
                b1: Matrix::zeros(h, 1),
                w2,
                b2: Matrix::zeros(d, 1),
            }
        })
        .collect();
    let head_w = uniform_matrix(config.n_classes, d, 1.0 / (d as f64).sqrt(), &mut rng);
    let mut params = ParamSet {
        embedding,
        blocks,
        head_w,
        head_b: Matrix::zeros(config.n_classes, 1),
        adapters: None,
        hot_mask: Vec::new(),
    };
    params.hot_mask = params.all_hot_mask();
    Ok(params)
}

/// Token id sequences (PAD-padded) and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(ids: Vec<Vec<u32>>, labels: Vec<usize>) -> Result<Self> {
        if ids.len() != labels.len() {
            return Err(Error::Input(format!(
                "{} sequences but {} labels",
                ids.len(),
                labels.len()
            )));
        }
        Ok(Batch { ids, labels })
    }

    /// Pad (or truncate) every sample to `max_len`.
    pub fn from_samples(samples: &[&EncodedSample], max_len: usize) -> Self {
        let ids = samples
            .iter()
            .map(|s| {
                let mut v: Vec<u32> = s.ids.iter().copied().take(max_len).collect();
                v.resize(max_len, PAD);
                v
            })
            .collect();
        let labels = samples.iter().map(|s| s.label.class()).collect();
        Batch { ids, labels }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<Vec<f64>>,
    pub representations: Vec<Vec<f64>>,
}

/// An extra differentiable term added to the training loss.
pub trait LossHook: Sync {
    /// Term on the hot parameter vector; adds its gradient into `grad`.
    fn parameter_term(&self, _hot: &FlatVector, _grad: &mut [f64]) -> Result<f64> {
        Ok(0.0)
    }

    /// Term on the batch representations; adds d(term)/d(representation)
    /// into `grad`.
    fn representation_term(
        &self,
        _batch: &Batch,
        _representations: &[Vec<f64>],
        _grad: &mut [Vec<f64>],
    ) -> Result<f64> {
        Ok(0.0)
    }
}

/// Parameters resolved for computation: adapted weights materialised,
/// soft prompts evaluated once per call.
pub(crate) struct Plan<'a> {
    params: &'a ParamSet,
    w1: Vec<Cow<'a, Matrix>>,
    w2: Vec<Cow<'a, Matrix>>,
    ia3: Option<&'a [Matrix]>,
    prefixes: Option<&'a [Matrix]>,
    prompt: Option<PromptForward>,
}

struct BlockTrace {
    input: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    scaled: Vec<f64>,
}

struct SampleTrace {
    tokens: Vec<u32>,
    n_pooled: usize,
    blocks: Vec<BlockTrace>,
    repr: Vec<f64>,
    logits: Vec<f64>,
}

impl<'a> Plan<'a> {
    pub(crate) fn new(params: &'a ParamSet) -> Result<Self> {
        let (w1, w2) = peft::effective_block_weights(params)?;
        let adapters = params.adapters.as_ref();
        Ok(Plan {
            params,
            w1,
            w2,
            ia3: adapters.and_then(|a| a.ia3_scales()),
            prefixes: adapters.and_then(|a| a.prefixes()),
            prompt: adapters.and_then(|a| a.prompt()).map(peft::prompt_forward),
        })
    }

    fn pool(&self, ids: &[u32]) -> Result<(Vec<f64>, usize)> {
        let p = self.params;
        let vocab = p.vocab_size() as u32;
        let mut x = vec![0.0; p.embed_dim()];
        let mut n_tokens = 0;
        for &t in ids {
            if t == PAD {
                continue;
            }
            if t >= vocab {
                return Err(Error::Input(format!(
                    "token id {t} out of range for vocab {vocab}"
                )));
            }
            for (xi, e) in x.iter_mut().zip(p.embedding.row(t as usize)) {
                *xi += e;
            }
            n_tokens += 1;
        }
        if n_tokens == 0 {
            return Err(Error::Input("sequence has no non-PAD tokens".into()));
        }
        let mut n = n_tokens;
        if let Some(prompt) = &self.prompt {
            for (xi, q) in x.iter_mut().zip(&prompt.sum) {
                *xi += q;
            }
            n += prompt.q.rows();
        }
        let inv = 1.0 / n as f64;
        x.iter_mut().for_each(|v| *v *= inv);
        Ok((x, n))
    }

    fn trace(&self, ids: &[u32]) -> Result<SampleTrace> {
        let p = self.params;
        let (mut x, n_pooled) = self.pool(ids)?;
        let tokens = ids.iter().copied().filter(|&t| t != PAD).collect();
        let mut blocks = Vec::with_capacity(p.blocks.len());
        for (l, block) in p.blocks.iter().enumerate() {
            if let Some(prefixes) = self.prefixes {
                for (xi, pv) in x.iter_mut().zip(prefixes[l].values()) {
                    *xi += pv;
                }
            }
            let input = x;
            let mut pre = vec![0.0; block.w1.rows()];
            self.w1[l].matvec(&input, &mut pre);
            for (a, b) in pre.iter_mut().zip(block.b1.values()) {
                *a += b;
            }
            let act: Vec<f64> = pre.iter().map(|&a| a.max(0.0)).collect();
            let scaled = match self.ia3 {
                Some(scales) => act
                    .iter()
                    .zip(scales[l].values())
                    .map(|(h, s)| h * s)
                    .collect(),
                None => act.clone(),
            };
            let mut out = vec![0.0; input.len()];
            self.w2[l].matvec(&scaled, &mut out);
            for ((o, xi), b) in out.iter_mut().zip(&input).zip(block.b2.values()) {
                *o += xi + b;
            }
            blocks.push(BlockTrace {
                input,
                pre,
                act,
                scaled,
            });
            x = out;
        }
        let mut logits = vec![0.0; p.n_classes()];
        p.head_w.matvec(&x, &mut logits);
        for (l, b) in logits.iter_mut().zip(p.head_b.values()) {
            *l += b;
        }
        Ok(SampleTrace {
            tokens,
            n_pooled,
            blocks,
            repr: x,
            logits,
        })
    }

    /// Logits and representation of one (possibly padded) sequence.
    pub(crate) fn run(&self, ids: &[u32]) -> Result<(Vec<f64>, Vec<f64>)> {
        let t = self.trace(ids)?;
        Ok((t.logits, t.repr))
    }
}

pub fn forward(params: &ParamSet, batch: &Batch) -> Result<ForwardOutput> {
    let plan = Plan::new(params)?;
    let mut logits = Vec::with_capacity(batch.len());
    let mut representations = Vec::with_capacity(batch.len());
    for ids in &batch.ids {
        let (l, r) = plan.run(ids)?;
        logits.push(l);
        representations.push(r);
    }
    Ok(ForwardOutput {
        logits,
        representations,
    })
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy plus hook terms, and the gradient of that loss with
/// respect to every hot parameter. Cold segments of the gradient are zero.
pub fn loss_and_grad(
    params: &ParamSet,
    batch: &Batch,
    hooks: &[&dyn LossHook],
) -> Result<(f64, ParamSet)> {
    let terms = loss_terms(params, batch, hooks)?;
    Ok((terms.total, terms.grads))
}

/// Result of [`loss_terms`].
#[derive(Debug, Clone)]
pub struct LossTerms {
    /// Mean cross-entropy alone.
    pub cross_entropy: f64,
    /// Cross-entropy plus every hook term.
    pub total: f64,
    /// Gradient of `total`.
    pub grads: ParamSet,
}

/// Like [`loss_and_grad`], keeping the cross-entropy separate from the hook
/// terms.
pub fn loss_terms(params: &ParamSet, batch: &Batch, hooks: &[&dyn LossHook]) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let n_classes = params.n_classes();
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Input(format!("label {bad} out of range")));
    }
    let plan = Plan::new(params)?;
    let traces = batch
        .ids
        .iter()
        .map(|ids| plan.trace(ids))
        .collect::<Result<Vec<_>>>()?;
    let inv_b = 1.0 / batch.len() as f64;

    let mut loss = 0.0;
    let mut d_logits = Vec::with_capacity(traces.len());
    for (t, &y) in traces.iter().zip(&batch.labels) {
        let lse = log_sum_exp(&t.logits);
        loss += lse - t.logits[y];
        let d: Vec<f64> = t
            .logits
            .iter()
            .enumerate()
            .map(|(k, &l)| ((l - lse).exp() - if k == y { 1.0 } else { 0.0 }) * inv_b)
            .collect();
        d_logits.push(d);
    }
    loss *= inv_b;
    let cross_entropy = loss;

    let reps: Vec<Vec<f64>> = traces.iter().map(|t| t.repr.clone()).collect();
    let mut d_reps: Vec<Vec<f64>> = vec![vec![0.0; params.embed_dim()]; traces.len()];
    for hook in hooks {
        loss += hook.representation_term(batch, &reps, &mut d_reps)?;
    }

    let mut grads = params.zeros_like();
    let embedding_hot = grads.hot_mask[0];
    let n_blocks = params.blocks.len();
    let mut g_w1: Vec<Matrix> = plan
        .w1
        .iter()
        .map(|w| Matrix::zeros(w.rows(), w.cols()))
        .collect();
    let mut g_w2: Vec<Matrix> = plan
        .w2
        .iter()
        .map(|w| Matrix::zeros(w.rows(), w.cols()))
        .collect();
    let mut g_ia3: Vec<Vec<f64>> = vec![vec![0.0; params.hidden_dim()]; n_blocks];
    let mut g_prefix: Vec<Vec<f64>> = vec![vec![0.0; params.embed_dim()]; n_blocks];
    let mut g_prompt_row = vec![0.0; params.embed_dim()];

    for ((trace, d_logit), d_rep) in traces.iter().zip(&d_logits).zip(d_reps) {
        grads.head_w.add_outer(1.0, d_logit, &trace.repr);
        for (g, d) in grads.head_b.values_mut().iter_mut().zip(d_logit) {
            *g += d;
        }
        let mut dx = d_rep;
        params.head_w.matvec_t_acc(d_logit, &mut dx);

        for l in (0..n_blocks).rev() {
            let bt = &trace.blocks[l];
            for (g, d) in grads.blocks[l].b2.values_mut().iter_mut().zip(&dx) {
                *g += d;
            }
            g_w2[l].add_outer(1.0, &dx, &bt.scaled);
            let mut d_scaled = vec![0.0; bt.scaled.len()];
            plan.w2[l].matvec_t_acc(&dx, &mut d_scaled);
            let d_act: Vec<f64> = match plan.ia3 {
                Some(scales) => {
                    for ((g, ds), h) in g_ia3[l].iter_mut().zip(&d_scaled).zip(&bt.act) {
                        *g += ds * h;
                    }
                    d_scaled
                        .iter()
                        .zip(scales[l].values())
                        .map(|(ds, s)| ds * s)
                        .collect()
                }
                None => d_scaled,
            };
            let d_pre: Vec<f64> = d_act
                .iter()
                .zip(&bt.pre)
                .map(|(d, &a)| if a > 0.0 { *d } else { 0.0 })
                .collect();
            for (g, d) in grads.blocks[l].b1.values_mut().iter_mut().zip(&d_pre) {
                *g += d;
            }
            g_w1[l].add_outer(1.0, &d_pre, &bt.input);
            plan.w1[l].matvec_t_acc(&d_pre, &mut dx);
            if plan.prefixes.is_some() {
                for (g, d) in g_prefix[l].iter_mut().zip(&dx) {
                    *g += d;
                }
            }
        }

        let inv_n = 1.0 / trace.n_pooled as f64;
        if plan.prompt.is_some() {
            for (g, d) in g_prompt_row.iter_mut().zip(&dx) {
                *g += d * inv_n;
            }
        }
        if embedding_hot {
            for &t in &trace.tokens {
                for (g, d) in grads.embedding.row_mut(t as usize).iter_mut().zip(&dx) {
                    *g += d * inv_n;
                }
            }
        }
    }

    for (l, block) in grads.blocks.iter_mut().enumerate() {
        block.w1.values_mut().copy_from_slice(g_w1[l].values());
        block.w2.values_mut().copy_from_slice(g_w2[l].values());
    }
    peft::backprop_adapters(
        params,
        &mut grads,
        &peft::UpstreamGrads {
            w1: &g_w1,
            w2: &g_w2,
            ia3: &g_ia3,
            prefix: &g_prefix,
            prompt_row: &g_prompt_row,
        },
        plan.prompt.as_ref(),
    )?;
    grads.mask_cold();

    if !hooks.is_empty() {
        let hot = params.hot_vector();
        let mut g_hot = grads.hot_vector();
        for hook in hooks {
            loss += hook.parameter_term(&hot, g_hot.as_mut_slice())?;
        }
        grads.set_hot_vector(&g_hot)?;
    }
    Ok(LossTerms {
        cross_entropy,
        total: loss,
        grads,
    })
}

/// Argmax of the logits, ties to the lower class.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = k;
        }
    }
    best
}

pub fn predict(params: &ParamSet, batch: &Batch) -> Result<Vec<usize>> {
    let plan = Plan::new(params)?;
    batch
        .ids
        .iter()
        .map(|ids| plan.run(ids).map(|(l, _)| argmax(&l)))
        .collect()
}

/// Predictions for encoded samples without building padded batches.
pub fn predict_samples(params: &ParamSet, samples: &[EncodedSample]) -> Result<Vec<usize>> {
    let plan = Plan::new(params)?;
    samples
        .iter()
        .map(|s| plan.run(&s.ids).map(|(l, _)| argmax(&l)))
        .collect()
}
