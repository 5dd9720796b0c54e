//! Temporal autoregression: next-frame prediction under a causal mask and
//! masked-frame reconstruction under a bidirectional mask.
//!
//! Both passes share one decoder block. The causal sequence per clip is
//! `[start, frame_0, .., frame_{T-1}]`; position `i` predicts frame `i`
//! and the final position summarises the clip. The masked sequence is the
//! clip with masked frames replaced by a learned token. Both cross-attend
//! to the lifted pooled visual and text features.

use std::rc::Rc;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{block, layer_norm, linear, BlockDropout, Bound, ModelConfig};
use crate::rng::rng_from;
use crate::tensor::{AttnBlock, AttnSpec, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// Sorted, distinct frame indices.
    pub masked_indices: Vec<usize>,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl MaskPlan {
    pub fn empty() -> Self {
        Self {
            masked_indices: Vec::new(),
            mask_ratio: 0.0,
            seed: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.masked_indices.is_empty()
    }

    pub fn validate(&self, t: usize) -> Result<()> {
        let ok = self.masked_indices.windows(2).all(|w| w[0] < w[1])
            && self.masked_indices.iter().all(|&i| i < t)
            && (t == 1 || self.masked_indices.len() < t);
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("mask plan is not valid for {t} frames")))
        }
    }
}

/// `round(ratio·T)` distinct uniformly drawn frames, at most `T-1` of them
/// when `T > 1`.
pub fn make_mask_plan(t: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if t == 0 || !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Contract(format!("bad mask request: T = {t}, ratio = {ratio}")));
    }
    let mut k = (ratio * t as f64).round() as usize;
    if t > 1 {
        k = k.min(t - 1);
    }
    let mut rng = rng_from(seed);
    let mut idx = index::sample(&mut rng, t, k).into_vec();
    idx.sort_unstable();
    Ok(MaskPlan {
        masked_indices: idx,
        mask_ratio: ratio,
        seed,
    })
}

/// Row `pos` of the fixed sinusoidal position table.
pub fn positional_row(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|c| {
            let freq = 10000f64.powf(-((c / 2 * 2) as f64) / d as f64);
            let a = pos as f64 * freq;
            if c % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

pub fn positional_table(len: usize, d: usize) -> Result<Tensor> {
    let data = (0..len).flat_map(|p| positional_row(p, d)).collect();
    Tensor::matrix(len, d, data)
}

pub(crate) struct Output {
    /// Causal-pass states, `T+1` rows per clip.
    pub states: Var,
    /// Next-frame predictions, `T` rows per clip.
    pub future: Var,
    pub recon: Option<(Var, Vec<usize>)>,
}

/// Batched pass over `B` clips stored as `B·T` frame rows.
///
/// `fbar`/`gbar` are the `B×D` pooled features. The masked pass is
/// conditioned on the mean of each clip's visible frames unless `fvis`
/// supplies one row per clip with a nonempty plan.
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward_with(
    t: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    frames: Var,
    tlen: usize,
    fbar: Var,
    gbar: Var,
    masks: &[MaskPlan],
    fvis: Option<Var>,
    drop: &mut Option<BlockDropout>,
) -> Result<Output> {
    let n = masks.len();
    if t.shape(frames)[0] != n * tlen {
        return Err(Error::Contract("frame rows disagree with the clip count".into()));
    }
    if tlen + 1 > cfg.pos_len {
        return Err(Error::Contract(format!("{tlen} frames exceed the position table")));
    }
    for m in masks {
        m.validate(tlen)?;
    }
    let d = cfg.d_model;
    let masked: Vec<usize> = (0..n).filter(|&i| !masks[i].is_empty()).collect();
    let nm = masked.len();

    let lifted = linear(t, b, "ta.in", frames)?;
    // Scaled so frame content is not swamped by the position signal.
    let lifted = if cfg.scale_frames {
        t.scale(lifted, (cfg.d_model as f64).sqrt())?
    } else {
        lifted
    };
    let start = b.get("ta.start")?;
    let mask_tok = b.get("ta.mask")?;
    let src = t.concat_rows(&[lifted, start, mask_tok])?;
    let (start_row, mask_row) = (n * tlen, n * tlen + 1);

    let mut idx = Vec::new();
    let mut pos = Vec::new();
    for i in 0..n {
        idx.push(start_row);
        pos.extend(positional_row(0, d));
        for j in 0..tlen {
            idx.push(i * tlen + j);
            pos.extend(positional_row(j + 1, d));
        }
    }
    // Only the causal rows and the masked rows are carried through the
    // block; unmasked frames of the masked pass serve as keys alone.
    let mut queries: Vec<usize> = (0..n * (tlen + 1)).collect();
    let mut targets = Vec::new();
    let mut masked_runs = Vec::new();
    for (k, &i) in masked.iter().enumerate() {
        let plan = &masks[i].masked_indices;
        masked_runs.push((queries.len(), plan.len()));
        for j in 0..tlen {
            if plan.binary_search(&j).is_ok() {
                idx.push(mask_row);
                queries.push(n * (tlen + 1) + k * tlen + j);
                targets.push(i * tlen + j);
            } else {
                idx.push(i * tlen + j);
            }
            pos.extend(positional_row(j + 1, d));
        }
    }
    let rows = idx.len();
    let x = t.gather_rows(src, idx)?;
    let pos = t.constant(Tensor::matrix(rows, d, pos)?);
    let x = t.add(x, pos)?;

    // Conditioning memory: two rows per sequence.
    let fv = linear(t, b, "visual", fbar)?;
    let tv = linear(t, b, "text", gbar)?;
    let mut cond = vec![fv, tv];
    if nm > 0 {
        let vis = match fvis {
            Some(v) => v,
            None => {
                let mut keep = Vec::new();
                let mut groups = Vec::new();
                for &i in &masked {
                    let plan = &masks[i].masked_indices;
                    let s = keep.len();
                    keep.extend((0..tlen).filter(|j| plan.binary_search(j).is_err()).map(|j| i * tlen + j));
                    groups.push((s, keep.len() - s));
                }
                let rows = t.gather_rows(frames, keep)?;
                t.mean_rows(rows, groups)?
            }
        };
        if t.shape(vis)[0] != nm {
            return Err(Error::Contract("one visible-frame feature per masked clip".into()));
        }
        cond.push(linear(t, b, "visual", vis)?);
    }
    let cond = t.concat_rows(&cond)?;
    let mut midx = Vec::new();
    for i in 0..n {
        midx.extend([i, n + i]);
    }
    for (k, &i) in masked.iter().enumerate() {
        midx.extend([2 * n + k, n + i]);
    }
    let mem = t.gather_rows(cond, midx)?;

    let mut self_blocks = Vec::new();
    let mut cross_blocks = Vec::new();
    for i in 0..n {
        let s = i * (tlen + 1);
        self_blocks.push(AttnBlock {
            q_start: s,
            q_len: tlen + 1,
            k_start: s,
            k_len: tlen + 1,
            causal: true,
        });
        cross_blocks.push(AttnBlock {
            q_start: s,
            q_len: tlen + 1,
            k_start: 2 * i,
            k_len: 2,
            causal: false,
        });
    }
    for (k, &(qs, ql)) in masked_runs.iter().enumerate() {
        self_blocks.push(AttnBlock {
            q_start: qs,
            q_len: ql,
            k_start: n * (tlen + 1) + k * tlen,
            k_len: tlen,
            causal: false,
        });
        cross_blocks.push(AttnBlock {
            q_start: qs,
            q_len: ql,
            k_start: 2 * (n + k),
            k_len: 2,
            causal: false,
        });
    }
    let self_spec = Rc::new(AttnSpec {
        heads: cfg.heads,
        blocks: self_blocks,
    });
    let cross_spec = Rc::new(AttnSpec {
        heads: cfg.heads,
        blocks: cross_blocks,
    });
    let recon_rows: Vec<usize> = (n * (tlen + 1)..queries.len()).collect();
    let h = block(t, b, "ta.block", x, Some(queries), &self_spec, mem, &cross_spec, drop)?;
    let h = layer_norm(t, b, "ta.ln", h)?;

    let states = t.gather_rows(h, (0..n * (tlen + 1)).collect())?;
    let fut_rows = (0..n).flat_map(|i| (0..tlen).map(move |p| i * (tlen + 1) + p)).collect();
    let fut = t.gather_rows(h, fut_rows)?;
    let future = linear(t, b, "ta.out", fut)?;
    let recon = if recon_rows.is_empty() {
        None
    } else {
        let r = t.gather_rows(h, recon_rows)?;
        Some((linear(t, b, "ta.out", r)?, targets))
    };
    Ok(Output {
        states,
        future,
        recon,
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn forward(
    t: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    frames: Var,
    tlen: usize,
    fbar: Var,
    gbar: Var,
    masks: &[MaskPlan],
    drop: &mut Option<BlockDropout>,
) -> Result<Output> {
    forward_with(t, b, cfg, frames, tlen, fbar, gbar, masks, None, drop)
}

fn check_single(t: &Tape, cfg: &ModelConfig, frames: Var, f: Var, g: Var) -> Result<usize> {
    let shape = t.shape(frames);
    if shape.len() != 2 || shape[1] != cfg.feature_dim {
        return Err(Error::Contract(format!("frames of shape {shape:?}")));
    }
    for v in [f, g] {
        if t.shape(v) != [1, cfg.feature_dim] {
            return Err(Error::Contract("conditioning features must be 1×D".into()));
        }
    }
    Ok(shape[0])
}

/// Next-frame predictions (`T×D`) for one clip; row `i` depends only on
/// frames before `i` and on the conditioning features `f`, `g` (`1×D`).
pub fn predict_future(t: &mut Tape, b: &Bound, cfg: &ModelConfig, frames: Var, f: Var, g: Var) -> Result<Var> {
    let tlen = check_single(t, cfg, frames, f, g)?;
    if tlen < 2 {
        return Err(Error::Contract("future prediction needs at least two frames".into()));
    }
    let out = forward_with(t, b, cfg, frames, tlen, f, g, &[MaskPlan::empty()], None, &mut None)?;
    Ok(out.future)
}

/// Reconstructions at the plan's masked frames, in index order, or `None`
/// for an empty plan.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_masked(
    t: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    frames: Var,
    plan: &MaskPlan,
    f: Var,
    g: Var,
) -> Result<Option<Var>> {
    let tlen = check_single(t, cfg, frames, f, g)?;
    plan.validate(tlen)?;
    if plan.is_empty() {
        return Ok(None);
    }
    let out = forward_with(t, b, cfg, frames, tlen, f, g, std::slice::from_ref(plan), Some(f), &mut None)?;
    Ok(out.recon.map(|(r, _)| r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_rounding_and_cap() {
        assert!(make_mask_plan(10, 0.0, 1).unwrap().is_empty());
        assert_eq!(make_mask_plan(10, 1.0, 1).unwrap().masked_indices.len(), 9);
        let a = make_mask_plan(10, 0.15, 4).unwrap();
        assert_eq!(a.masked_indices.len(), 2);
        assert_eq!(a, make_mask_plan(10, 0.15, 4).unwrap());
        assert_eq!(make_mask_plan(1, 1.0, 0).unwrap().masked_indices, vec![0]);
    }

    #[test]
    fn positional_rows_match_table() {
        let tab = positional_table(5000, 8).unwrap();
        assert_eq!(tab.row(17), positional_row(17, 8).as_slice());
        assert_eq!(tab.row(0)[1], 1.0);
    }
}
