//! Shared building blocks: bound parameters, linear maps, decoder blocks.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Params;
use crate::error::{Error, Result};
use crate::tensor::{AttnBlock, AttnSpec, Tape, Var};

/// Parameters recorded on one tape, addressed by name.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new(tape: &mut Tape, params: &Params) -> Self {
        let vars = params
            .iter()
            .map(|(n, t)| (n.clone(), tape.param(t.clone())))
            .collect();
        Self { vars }
    }

    /// Binds already-recorded vars, paired with names in order.
    pub fn from_vars(names: &[String], vars: &[Var]) -> Self {
        Self {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Inverted dropout state for one forward pass.
pub struct BlockDropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

pub(crate) fn dropout(t: &mut Tape, x: Var, drop: &mut Option<BlockDropout>) -> Result<Var> {
    let Some(d) = drop.as_mut() else { return Ok(x) };
    if d.rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - d.rate);
    let n = t.value(x).numel();
    let mask = (0..n)
        .map(|_| if d.rng.random::<f64>() < d.rate { 0.0 } else { keep })
        .collect();
    t.dropout_with_mask(x, mask)
}

/// `x·W (+ b)` for the arrays `{prefix}.w` and, when bound, `{prefix}.b`.
pub(crate) fn linear(t: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = t.matmul(x, b.get(&format!("{prefix}.w"))?)?;
    let bias = format!("{prefix}.b");
    if b.has(&bias) {
        t.add_bias(y, b.get(&bias)?)
    } else {
        Ok(y)
    }
}

pub(crate) fn layer_norm(t: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let g = b.get(&format!("{prefix}.g"))?;
    let bias = b.get(&format!("{prefix}.b"))?;
    t.layer_norm(x, g, bias)
}

/// One attention block per `(start, len)` query group over itself.
pub(crate) fn per_item_blocks(groups: &[(usize, usize)], causal: bool) -> Vec<AttnBlock> {
    groups
        .iter()
        .map(|&(s, n)| AttnBlock {
            q_start: s,
            q_len: n,
            k_start: s,
            k_len: n,
            causal,
        })
        .collect()
}

fn attention(
    t: &mut Tape,
    b: &Bound,
    prefix: &str,
    x: Var,
    mem: Var,
    spec: &Rc<AttnSpec>,
) -> Result<Var> {
    let q = linear(t, b, &format!("{prefix}.q"), x)?;
    let k = linear(t, b, &format!("{prefix}.k"), mem)?;
    let v = linear(t, b, &format!("{prefix}.v"), mem)?;
    let a = t.attention(q, k, v, Rc::clone(spec))?;
    linear(t, b, &format!("{prefix}.o"), a)
}

/// Pre-norm decoder block: self-attention, cross-attention to `mem`, then
/// a GELU feed-forward layer, each with a residual connection.
///
/// With `queries`, only those rows of `x` are carried through the block
/// (all rows still serve as self-attention keys); `self_spec` then indexes
/// query rows in the order given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block(
    t: &mut Tape,
    b: &Bound,
    prefix: &str,
    x: Var,
    queries: Option<Vec<usize>>,
    self_spec: &Rc<AttnSpec>,
    mem: Var,
    cross_spec: &Rc<AttnSpec>,
    drop: &mut Option<BlockDropout>,
) -> Result<Var> {
    let h = layer_norm(t, b, &format!("{prefix}.ln1"), x)?;
    let (x, hq) = match queries {
        Some(idx) => (t.gather_rows(x, idx.clone())?, t.gather_rows(h, idx)?),
        None => (x, h),
    };
    let a = attention(t, b, &format!("{prefix}.self"), hq, h, self_spec)?;
    let a = dropout(t, a, drop)?;
    let x = t.add(x, a)?;

    let h = layer_norm(t, b, &format!("{prefix}.ln2"), x)?;
    let a = attention(t, b, &format!("{prefix}.cross"), h, mem, cross_spec)?;
    let a = dropout(t, a, drop)?;
    let x = t.add(x, a)?;

    let h = layer_norm(t, b, &format!("{prefix}.ln3"), x)?;
    let f = linear(t, b, &format!("{prefix}.ff1"), h)?;
    let f = t.gelu(f)?;
    let f = linear(t, b, &format!("{prefix}.ff2"), f)?;
    let f = dropout(t, f, drop)?;
    t.add(x, f)
}
