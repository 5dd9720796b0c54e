//! Question-type-guided answering model and its parameter store.

mod checkpoint;
mod layers;
mod qtg;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use layers::Bound;
pub use layers::BlockDropout;
pub(crate) use layers::{block, layer_norm, linear};
pub use qtg::{
    embed_qtype, forward_batch, fuse_decoder, pool_features, predict, project, score_answers,
    BatchInputs, BatchOutput, TypeEmbeddingTable,
};

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, substream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Frame, question and candidate feature width.
    pub feature_dim: usize,
    pub type_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub num_types: usize,
    /// Frames per clip seen by the temporal module.
    pub frames: usize,
    pub pos_len: usize,
    pub qtg_attention: bool,
    pub temporal_ar: bool,
    /// Multiply lifted frames by `√d_model` before adding positions.
    #[serde(default = "yes")]
    pub scale_frames: bool,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0 || self.type_dim == 0 || self.d_ff == 0 || self.layers == 0 {
            return bad("model widths and layer count must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.num_types == 0 {
            return bad("model needs at least one question type".into());
        }
        if self.temporal_ar && self.frames + 1 > self.pos_len {
            return bad(format!(
                "{} frames exceed the positional table of {}",
                self.frames, self.pos_len
            ));
        }
        Ok(())
    }
}

/// Named trainable arrays, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        Self { map }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.map.values().cloned().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}

enum Init {
    Ones,
    Zeros,
    /// Normal with the given standard deviation.
    Normal(f64),
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn push_linear(out: &mut Vec<Spec>, prefix: &str, fan_in: usize, fan_out: usize, bias: bool, gain: f64) {
    out.push(Spec {
        name: format!("{prefix}.w"),
        shape: vec![fan_in, fan_out],
        init: Init::Normal(gain / (fan_in as f64).sqrt()),
    });
    if bias {
        out.push(Spec {
            name: format!("{prefix}.b"),
            shape: vec![fan_out],
            init: Init::Zeros,
        });
    }
}

fn push_norm(out: &mut Vec<Spec>, prefix: &str, d: usize) {
    out.push(Spec {
        name: format!("{prefix}.g"),
        shape: vec![d],
        init: Init::Ones,
    });
    out.push(Spec {
        name: format!("{prefix}.b"),
        shape: vec![d],
        init: Init::Zeros,
    });
}

fn push_block(out: &mut Vec<Spec>, prefix: &str, d: usize, d_ff: usize) {
    push_norm(out, &format!("{prefix}.ln1"), d);
    push_norm(out, &format!("{prefix}.ln2"), d);
    push_norm(out, &format!("{prefix}.ln3"), d);
    for att in ["self", "cross"] {
        for m in ["q", "k", "v"] {
            push_linear(out, &format!("{prefix}.{att}.{m}"), d, d, false, 1.0);
        }
        push_linear(out, &format!("{prefix}.{att}.o"), d, d, false, 0.5);
    }
    push_linear(out, &format!("{prefix}.ff1"), d, d_ff, true, 1.0);
    push_linear(out, &format!("{prefix}.ff2"), d_ff, d, true, 0.5);
}

fn specs(cfg: &ModelConfig) -> Vec<Spec> {
    let (d, dv) = (cfg.d_model, cfg.feature_dim);
    let mut out = Vec::new();
    push_linear(&mut out, "visual", dv, d, true, 1.0);
    push_linear(&mut out, "text", dv, d, true, 1.0);
    if cfg.qtg_attention {
        out.push(Spec {
            name: "qtype.table".into(),
            shape: vec![cfg.num_types, cfg.type_dim],
            init: Init::Normal(1.0),
        });
        push_linear(&mut out, "qtype.lift", cfg.type_dim, d, true, 1.0);
    }
    for l in 0..cfg.layers {
        push_block(&mut out, &format!("decoder.{l}"), d, cfg.d_ff);
    }
    push_norm(&mut out, "decoder.ln", d);
    push_linear(&mut out, "proj", d, dv, true, 1.0);
    if cfg.temporal_ar {
        push_linear(&mut out, "ta.in", dv, d, true, 1.0);
        for tok in ["ta.start", "ta.mask"] {
            out.push(Spec {
                name: tok.into(),
                shape: vec![1, d],
                init: Init::Normal(0.5),
            });
        }
        push_block(&mut out, "ta.block", d, cfg.d_ff);
        push_norm(&mut out, "ta.ln", d);
        push_linear(&mut out, "ta.out", d, dv, true, 1.0);
    }
    out
}

impl Params {
    /// Fresh parameters. Each array is drawn from its own named substream
    /// so arms that differ only in toggles share every common array.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut map = BTreeMap::new();
        for s in specs(cfg) {
            let n: usize = s.shape.iter().product();
            let data = match s.init {
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
                Init::Normal(std) => {
                    let mut rng = rng_from(substream(seed, &s.name));
                    (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            std * z
                        })
                        .collect()
                }
            };
            map.insert(s.name, Tensor::new(s.shape, data)?.with_requires_grad(true));
        }
        Ok(Self { map })
    }

    /// Checks that the stored arrays are exactly the ones `cfg` needs.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let want = specs(cfg);
        if want.len() != self.map.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} arrays, configuration needs {}",
                self.map.len(),
                want.len()
            )));
        }
        for s in want {
            let t = self
                .map
                .get(&s.name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks `{}`", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Data(format!(
                    "`{}` has shape {:?}, configuration needs {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        Ok(())
    }
}
