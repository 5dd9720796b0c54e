//! Pooling, type embedding, fused decoding, projection and scoring.

use std::rc::Rc;

use super::layers::{block, layer_norm, linear, per_item_blocks, BlockDropout, Bound};
use super::{ModelConfig, Params};
use crate::data::Record;
use crate::error::{Error, Result};
use crate::temporal::{self, MaskPlan};
use crate::tensor::{AttnBlock, AttnSpec, Tape, Tensor, Var};

fn mean_of(rows: &[Vec<f64>], what: &str) -> Result<Vec<f64>> {
    let Some(first) = rows.first() else {
        return Err(Error::Contract(format!("cannot pool an empty {what} sequence")));
    };
    let d = first.len();
    let mut out = vec![0.0; d];
    for r in rows {
        if r.len() != d {
            return Err(Error::Contract(format!("ragged {what} sequence")));
        }
        for (o, x) in out.iter_mut().zip(r) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|x| *x /= rows.len() as f64);
    Ok(out)
}

/// Temporal mean of the frames and mean of the text tokens.
pub fn pool_features(frames: &[Vec<f64>], text: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((mean_of(frames, "frame")?, mean_of(text, "text")?))
}

/// The `D_e × N` type embedding matrix `W`; type `q` is column `q`.
#[derive(Clone, Debug, PartialEq)]
pub struct TypeEmbeddingTable {
    w: Tensor,
}

impl TypeEmbeddingTable {
    pub fn new(w: Tensor) -> Result<Self> {
        if w.shape().len() != 2 {
            return Err(Error::Shape("type table must be a matrix".into()));
        }
        Ok(Self { w })
    }

    /// Reads the table out of model parameters, which store it transposed
    /// (one row per type) so a batch can gather its rows directly.
    pub fn from_params(params: &Params) -> Result<Self> {
        let t = params.get("qtype.table")?;
        let (n, de) = t.dims2();
        let mut w = vec![0.0; n * de];
        for q in 0..n {
            for j in 0..de {
                w[j * n + q] = t.data()[q * de + j];
            }
        }
        Self::new(Tensor::matrix(de, n, w)?)
    }

    pub fn num_types(&self) -> usize {
        self.w.dims2().1
    }

    pub fn width(&self) -> usize {
        self.w.dims2().0
    }
}

/// `e_q = W · onehot(q)`.
pub fn embed_qtype(q: usize, table: &TypeEmbeddingTable) -> Result<Vec<f64>> {
    let (de, n) = table.w.dims2();
    if q >= n {
        return Err(Error::Contract(format!("question type {q} outside {n} types")));
    }
    Ok((0..de).map(|j| table.w.data()[j * n + q]).collect())
}

/// Fused decoder output `F` for a single item (`1×d_model`).
///
/// `fbar` and `gbar` are `1×D`, `e_q` is `1×D_e`. The type token enters the
/// cross-attention memory as `lift(w_q · e_q)`.
#[allow(clippy::too_many_arguments)]
pub fn fuse_decoder(
    t: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    fbar: Var,
    gbar: Var,
    e_q: Var,
    w_q: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&w_q) {
        return Err(Error::Contract(format!("type weight {w_q} outside [0, 1]")));
    }
    for (v, want, what) in [(fbar, cfg.feature_dim, "visual"), (gbar, cfg.feature_dim, "text"), (e_q, cfg.type_dim, "type")] {
        if t.shape(v) != [1, want] {
            return Err(Error::Contract(format!(
                "{what} input has shape {:?}, expected [1, {want}]",
                t.shape(v)
            )));
        }
    }
    let e = cfg.qtg_attention.then_some(e_q);
    decode(t, b, cfg, fbar, gbar, e, &[w_q], None, &mut None)
}

/// Per-item extra memory rows appended after the type and text tokens.
pub(crate) struct ExtraMemory {
    pub rows: Var,
    pub per_item: usize,
}

/// Batched decoder: `fbar`, `gbar` are `B×D`, `e` is `B×D_e`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn decode(
    t: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    fbar: Var,
    gbar: Var,
    e: Option<Var>,
    w: &[f64],
    extra: Option<ExtraMemory>,
    drop: &mut Option<BlockDropout>,
) -> Result<Var> {
    let n = t.shape(fbar)[0];
    let x = linear(t, b, "visual", fbar)?;
    let text = linear(t, b, "text", gbar)?;
    let mut parts = Vec::new();
    let mut per_item = 1;
    if let Some(e) = e {
        let scaled = t.scale_rows(e, w.to_vec())?;
        parts.push(linear(t, b, "qtype.lift", scaled)?);
        per_item += 1;
    }
    parts.push(text);
    if let Some(ex) = &extra {
        parts.push(ex.rows);
        per_item += ex.per_item;
    }
    // Interleave the parts so each item's memory rows are contiguous.
    let mut idx = Vec::with_capacity(n * per_item);
    for i in 0..n {
        let mut base = 0;
        for (p, &part) in parts.iter().enumerate() {
            let rows = if extra.is_some() && p == parts.len() - 1 {
                extra.as_ref().map_or(1, |ex| ex.per_item)
            } else {
                1
            };
            for r in 0..rows {
                idx.push(base + i * rows + r);
            }
            base += t.shape(part)[0];
        }
    }
    let all = t.concat_rows(&parts)?;
    let mem = t.gather_rows(all, idx)?;

    let singles: Vec<(usize, usize)> = (0..n).map(|i| (i, 1)).collect();
    let self_spec = Rc::new(AttnSpec {
        heads: cfg.heads,
        blocks: per_item_blocks(&singles, false),
    });
    let cross_spec = Rc::new(AttnSpec {
        heads: cfg.heads,
        blocks: (0..n)
            .map(|i| AttnBlock {
                q_start: i,
                q_len: 1,
                k_start: i * per_item,
                k_len: per_item,
                causal: false,
            })
            .collect(),
    });
    let mut x = x;
    for l in 0..cfg.layers {
        x = block(t, b, &format!("decoder.{l}"), x, None, &self_spec, mem, &cross_spec, drop)?;
    }
    layer_norm(t, b, "decoder.ln", x)
}

/// `F̂ = P·F + b` for every row of `f`.
pub fn project(t: &mut Tape, b: &Bound, f: Var) -> Result<Var> {
    let w = b.get("proj.w")?;
    if t.shape(f).last() != t.shape(w).first() {
        return Err(Error::Contract(format!(
            "projection expects width {:?}, got {:?}",
            t.shape(w).first(),
            t.shape(f)
        )));
    }
    linear(t, b, "proj", f)
}

/// Dot product of `fhat` with every candidate.
pub fn score_answers(fhat: &[f64], candidates: &[Vec<f64>]) -> Result<Vec<f64>> {
    if candidates.len() < 2 {
        return Err(Error::Contract("scoring needs at least two candidates".into()));
    }
    candidates
        .iter()
        .map(|c| {
            if c.len() != fhat.len() {
                return Err(Error::Contract(format!(
                    "candidate width {} vs projection width {}",
                    c.len(),
                    fhat.len()
                )));
            }
            Ok(c.iter().zip(fhat).map(|(a, b)| a * b).sum())
        })
        .collect()
}

/// Index of the highest score; the lowest index wins ties.
pub fn predict(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Constant tensors for a minibatch of records.
pub struct BatchInputs {
    pub frames: Tensor,
    pub t: usize,
    pub frame_groups: Vec<(usize, usize)>,
    pub text: Tensor,
    pub text_groups: Vec<(usize, usize)>,
    pub candidates: Tensor,
    pub cand_groups: Vec<(usize, usize)>,
    pub qtypes: Vec<usize>,
    pub answers: Vec<usize>,
}

impl BatchInputs {
    /// Text tokens are the question vector followed by the candidates.
    pub fn from_records(records: &[&Record]) -> Result<Self> {
        let Some(first) = records.first() else {
            return Err(Error::Contract("empty batch".into()));
        };
        let (t, d) = (first.clip.len(), first.clip.width());
        let mut frames = Vec::with_capacity(records.len() * t * d);
        let mut text = Vec::new();
        let mut cands = Vec::new();
        let (mut text_groups, mut cand_groups, mut frame_groups) = (Vec::new(), Vec::new(), Vec::new());
        for (i, r) in records.iter().enumerate() {
            if r.clip.len() != t || r.clip.width() != d {
                return Err(Error::Contract("batch mixes clip shapes".into()));
            }
            frames.extend_from_slice(r.clip.frames());
            frame_groups.push((i * t, t));
            let q = &r.question;
            text_groups.push((text.len() / d, 1 + q.candidates.len()));
            text.extend_from_slice(&q.question_vec);
            cand_groups.push((cands.len() / d, q.candidates.len()));
            for c in &q.candidates {
                text.extend_from_slice(c);
                cands.extend_from_slice(c);
            }
        }
        let n = records.len();
        let text_rows = text.len() / d;
        let cand_rows = cands.len() / d;
        Ok(Self {
            frames: Tensor::matrix(n * t, d, frames)?,
            t,
            frame_groups,
            text: Tensor::matrix(text_rows, d, text)?,
            text_groups,
            candidates: Tensor::matrix(cand_rows, d, cands)?,
            cand_groups,
            qtypes: records.iter().map(|r| r.question.qtype).collect(),
            answers: records.iter().map(|r| r.question.answer_idx).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.qtypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qtypes.is_empty()
    }
}

pub struct BatchOutput {
    /// Candidate scores, one segment per item.
    pub scores: Var,
    pub fhat: Var,
    /// Next-frame predictions for every frame, `B·T × D`.
    pub future: Option<Var>,
    /// Reconstructions of masked frames and the frame rows they target.
    pub recon: Option<(Var, Vec<usize>)>,
    /// The frames constant, for loss targets.
    pub frames: Var,
}

/// Full forward pass for a minibatch. `weights[q]` is the current type
/// weight; `masks` holds one plan per item when the temporal module is on.
pub fn forward_batch(
    t: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    inp: &BatchInputs,
    weights: &[f64],
    masks: &[MaskPlan],
    drop: &mut Option<BlockDropout>,
) -> Result<BatchOutput> {
    let n = inp.len();
    if weights.len() != cfg.num_types {
        return Err(Error::Contract(format!(
            "{} type weights for {} types",
            weights.len(),
            cfg.num_types
        )));
    }
    if let Some(&q) = inp.qtypes.iter().find(|&&q| q >= cfg.num_types) {
        return Err(Error::Contract(format!("question type {q} outside {} types", cfg.num_types)));
    }
    let frames = t.constant(inp.frames.clone());
    let text = t.constant(inp.text.clone());
    let fbar = t.mean_rows(frames, inp.frame_groups.clone())?;
    let gbar = t.mean_rows(text, inp.text_groups.clone())?;
    let e = if cfg.qtg_attention {
        let table = b.get("qtype.table")?;
        Some(t.gather_rows(table, inp.qtypes.clone())?)
    } else {
        None
    };
    let w: Vec<f64> = inp.qtypes.iter().map(|&q| weights[q]).collect();

    let (extra, future, recon) = if cfg.temporal_ar {
        if masks.len() != n {
            return Err(Error::Contract(format!("{} mask plans for {n} items", masks.len())));
        }
        let out = temporal::forward(t, b, cfg, frames, inp.t, fbar, gbar, masks, drop)?;
        (
            Some(ExtraMemory {
                rows: out.states,
                per_item: inp.t + 1,
            }),
            Some(out.future),
            out.recon,
        )
    } else {
        (None, None, None)
    };

    let f = decode(t, b, cfg, fbar, gbar, e, &w, extra, drop)?;
    let fhat = project(t, b, f)?;
    let cands = t.constant(inp.candidates.clone());
    let scores = t.segment_dot(fhat, cands, inp.cand_groups.clone())?;
    Ok(BatchOutput {
        scores,
        fhat,
        future,
        recon,
        frames,
    })
}
