use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{flatten, FlatVector, Matrix, Segmented};
use crate::peft::AdapterState;

/// One residual feed-forward block: `x + W2 relu(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    /// hidden x embed
    pub w1: Matrix,
    pub b1: Matrix,
    /// embed x hidden
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Model parameters plus the hot mask.
///
/// Canonical segment order (used by flatten, checkpoints and the wire
/// format): embedding, then per block `w1, b1, w2, b2`, then head `w, b`,
/// then adapter segments in attach order (see [`AdapterState`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    /// vocab x embed
    pub embedding: Matrix,
    pub blocks: Vec<Block>,
    /// classes x embed
    pub head_w: Matrix,
    pub head_b: Matrix,
    pub adapters: Option<AdapterState>,
    /// One flag per segment in canonical order.
    pub hot_mask: Vec<bool>,
}

impl Segmented for ParamSet {
    fn segments(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.embedding];
        for b in &self.blocks {
            out.extend([&b.w1, &b.b1, &b.w2, &b.b2]);
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        if let Some(a) = &self.adapters {
            out.extend(a.segments());
        }
        out
    }

    fn segments_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embedding];
        for b in &mut self.blocks {
            out.extend([&mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2]);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        if let Some(a) = &mut self.adapters {
            out.extend(a.segments_mut());
        }
        out
    }
}

impl ParamSet {
    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.w1.rows())
    }

    pub fn n_classes(&self) -> usize {
        self.head_w.rows()
    }

    pub fn segment_count(&self) -> usize {
        self.segments().len()
    }

    /// Number of segments belonging to the base model (embedding, blocks, head).
    pub fn base_segment_count(&self) -> usize {
        1 + 4 * self.blocks.len() + 2
    }

    /// Entries in the base model, excluding adapters.
    pub fn base_param_count(&self) -> usize {
        self.segments()
            .iter()
            .take(self.base_segment_count())
            .map(|m| m.len())
            .sum()
    }

    pub fn segment_names(&self) -> Vec<String> {
        let mut names = vec!["embedding".to_string()];
        for (i, _) in self.blocks.iter().enumerate() {
            for part in ["w1", "b1", "w2", "b2"] {
                names.push(format!("block{i}.{part}"));
            }
        }
        names.push("head.w".into());
        names.push("head.b".into());
        if let Some(a) = &self.adapters {
            names.extend(a.segment_names());
        }
        names
    }

    /// Mask with every segment hot, matching the current segment list.
    pub fn all_hot_mask(&self) -> Vec<bool> {
        vec![true; self.segment_count()]
    }

    pub fn hot_count(&self) -> usize {
        self.segments()
            .iter()
            .zip(&self.hot_mask)
            .filter(|(_, h)| **h)
            .map(|(m, _)| m.len())
            .sum()
    }

    /// Hot segments concatenated in canonical order.
    pub fn hot_vector(&self) -> FlatVector {
        let mut out = Vec::with_capacity(self.hot_count());
        for (m, hot) in self.segments().into_iter().zip(&self.hot_mask) {
            if *hot {
                out.extend_from_slice(m.values());
            }
        }
        FlatVector::new(out)
    }

    pub fn set_hot_vector(&mut self, v: &FlatVector) -> Result<()> {
        let expected = self.hot_count();
        if v.len() != expected {
            return Err(Error::dim(expected, v.len()));
        }
        let mask = self.hot_mask.clone();
        let mut offset = 0;
        for (m, hot) in self.segments_mut().into_iter().zip(mask) {
            if hot {
                let n = m.len();
                m.values_mut()
                    .copy_from_slice(&v.as_slice()[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// Same shape and mask, every value zero.
    pub fn zeros_like(&self) -> ParamSet {
        let mut out = self.clone();
        for m in out.segments_mut() {
            m.fill(0.0);
        }
        out
    }

    /// Zero every cold segment.
    pub fn mask_cold(&mut self) {
        let mask = self.hot_mask.clone();
        for (m, hot) in self.segments_mut().into_iter().zip(mask) {
            if !hot {
                m.fill(0.0);
            }
        }
    }

    /// Gradient-descent step on hot segments only.
    pub fn descend(&mut self, grads: &ParamSet, learning_rate: f64) {
        let mask = self.hot_mask.clone();
        for ((p, g), hot) in self
            .segments_mut()
            .into_iter()
            .zip(grads.segments())
            .zip(mask)
        {
            if hot {
                for (pv, gv) in p.values_mut().iter_mut().zip(g.values()) {
                    *pv -= learning_rate * gv;
                }
            }
        }
    }

    fn check_mask(&self) -> Result<()> {
        if self.hot_mask.len() != self.segment_count() {
            return Err(Error::State(format!(
                "hot mask covers {} segments, parameter set has {}",
                self.hot_mask.len(),
                self.segment_count()
            )));
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FVPS";
const CHECKPOINT_VERSION: u32 = 1;

/// Write a checkpoint.
///
/// Layout, all little-endian:
/// `"FVPS"`, `u32` version, `u32` segment count, then per segment
/// `u32 rows, u32 cols, u8 hot`, then `u64` value count and the values as
/// `f64` in canonical flatten order.
pub fn write_checkpoint<W: Write>(params: &ParamSet, out: &mut W) -> Result<()> {
    params.check_mask()?;
    let io = |e| Error::io("<checkpoint>", e);
    out.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())
        .map_err(io)?;
    let segs = params.segments();
    out.write_all(&(segs.len() as u32).to_le_bytes())
        .map_err(io)?;
    for (m, hot) in segs.iter().zip(&params.hot_mask) {
        out.write_all(&(m.rows() as u32).to_le_bytes())
            .map_err(io)?;
        out.write_all(&(m.cols() as u32).to_le_bytes())
            .map_err(io)?;
        out.write_all(&[u8::from(*hot)]).map_err(io)?;
    }
    let flat = flatten(params);
    out.write_all(&(flat.len() as u64).to_le_bytes())
        .map_err(io)?;
    for v in flat.iter() {
        out.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    Ok(())
}

/// Read a checkpoint into the shape of `template`.
pub fn read_checkpoint<R: Read>(input: &mut R, template: &ParamSet) -> Result<ParamSet> {
    let bad = |message: &str| Error::Format {
        path: "<checkpoint>".into(),
        message: message.to_string(),
    };
    let io = |e| Error::io("<checkpoint>", e);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    input.read_exact(&mut u32buf).map_err(io)?;
    if u32::from_le_bytes(u32buf) != CHECKPOINT_VERSION {
        return Err(bad("unsupported version"));
    }
    input.read_exact(&mut u32buf).map_err(io)?;
    let n_segments = u32::from_le_bytes(u32buf) as usize;
    let template_segs = template.segments();
    if n_segments != template_segs.len() {
        return Err(bad("segment count differs from template"));
    }
    let mut mask = Vec::with_capacity(n_segments);
    for m in &template_segs {
        let mut rows = [0u8; 4];
        let mut cols = [0u8; 4];
        let mut hot = [0u8; 1];
        input.read_exact(&mut rows).map_err(io)?;
        input.read_exact(&mut cols).map_err(io)?;
        input.read_exact(&mut hot).map_err(io)?;
        if u32::from_le_bytes(rows) as usize != m.rows()
            || u32::from_le_bytes(cols) as usize != m.cols()
        {
            return Err(bad("segment shape differs from template"));
        }
        mask.push(hot[0] != 0);
    }
    let mut u64buf = [0u8; 8];
    input.read_exact(&mut u64buf).map_err(io)?;
    let count = u64::from_le_bytes(u64buf) as usize;
    if count != template.param_count() {
        return Err(Error::dim(template.param_count(), count));
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        input.read_exact(&mut u64buf).map_err(io)?;
        values.push(f64::from_le_bytes(u64buf));
    }
    let mut out = crate::numkit::unflatten(&FlatVector::new(values), template)?;
    out.hot_mask = mask;
    Ok(out)
}
