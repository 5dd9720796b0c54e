//! Procedural typed video-question items.
//!
//! Frames are sums of token vectors living in the first `D - 4` feature
//! dimensions plus four reserved channels, with Gaussian noise on top.
//! By default every kind shares the same nuisance structure (marked frames
//! and one signal spike) so the clip alone does not reveal which rule applies.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureClip, Record, TypedQuestion};
use crate::error::{Error, Result};
use crate::rng::{child, rng_from, substream};

/// Channels reserved after the token dimensions.
pub const RESERVED_CHANNELS: usize = 4;

/// The six structural question kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Basic,
    Forecasting,
    Reverse,
    Counterfactual,
    Introspection,
    Attribution,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 6] = [
        QuestionKind::Basic,
        QuestionKind::Forecasting,
        QuestionKind::Reverse,
        QuestionKind::Counterfactual,
        QuestionKind::Introspection,
        QuestionKind::Attribution,
    ];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown question kind {i}")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            QuestionKind::Basic => "basic",
            QuestionKind::Forecasting => "forecasting",
            QuestionKind::Reverse => "reverse",
            QuestionKind::Counterfactual => "counterfactual",
            QuestionKind::Introspection => "introspection",
            QuestionKind::Attribution => "attribution",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Data(format!("unknown question type `{name}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub feature_dim: usize,
    pub frames: usize,
    pub vocab_size: usize,
    pub num_candidates: usize,
    pub motif_period: usize,
    pub noise_sigma: f64,
    pub spike_amplitude: f64,
    /// Marked frames and a spike on every kind; off leaves them only where
    /// the answer depends on them.
    #[serde(default = "default_nuisance")]
    pub nuisance: bool,
}

fn default_nuisance() -> bool {
    true
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            frames: 32,
            vocab_size: 16,
            num_candidates: 4,
            motif_period: 4,
            noise_sigma: 0.1,
            spike_amplitude: 1.0,
            nuisance: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.feature_dim < RESERVED_CHANNELS + 4 {
            return bad("feature_dim must be at least 8");
        }
        if self.frames < 8 {
            return bad("synthetic clips need at least 8 frames");
        }
        if self.num_candidates < 2 {
            return bad("num_candidates must be at least 2");
        }
        if self.vocab_size < self.num_candidates + 3 || self.vocab_size < self.motif_period + 1 {
            return bad("vocab_size too small for the candidate and motif counts");
        }
        if self.motif_period < 2 {
            return bad("motif_period must be at least 2");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        Ok(())
    }

    pub fn token_dims(&self) -> usize {
        self.feature_dim - RESERVED_CHANNELS
    }

    pub fn marker_channel(&self) -> usize {
        self.feature_dim - 1
    }

    pub fn signal_channel(&self) -> usize {
        self.feature_dim - 2
    }
}

/// Token vectors and fixed per-dataset vectors, drawn once per seed.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    pub tokens: Vec<Vec<f64>>,
    pub query: Vec<f64>,
    pub yes: Vec<f64>,
    pub no: Vec<f64>,
}

impl Vocabulary {
    /// Token used as the precursor in introspection items.
    pub const PRECURSOR: usize = 0;
    /// Token used as the event in introspection items.
    pub const EVENT: usize = 1;

    pub fn new(cfg: &SynthConfig, seed: u64) -> Self {
        let mut rng = rng_from(substream(seed, "vocab"));
        let d = cfg.feature_dim;
        let unit = |rng: &mut ChaCha8Rng| {
            let mut v = vec![0.0; d];
            for x in v.iter_mut().take(cfg.token_dims()) {
                *x = StandardNormal.sample(rng);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            v
        };
        let tokens = (0..cfg.vocab_size).map(|_| unit(&mut rng)).collect();
        let query = unit(&mut rng);
        let mut yes = vec![0.0; d];
        yes[d - 3] = 1.0;
        let mut no = vec![0.0; d];
        no[d - 4] = 1.0;
        Self {
            tokens,
            query,
            yes,
            no,
        }
    }

    /// Index of the token with the largest dot product with `v`.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, t) in self.tokens.iter().enumerate() {
            let s: f64 = t.iter().zip(v).map(|(a, b)| a * b).sum();
            if s > best.1 {
                best = (i, s);
            }
        }
        best.0
    }
}

pub struct Generator {
    pub config: SynthConfig,
    pub vocab: Vocabulary,
    seed: u64,
}

struct Layout {
    tokens: Vec<Option<usize>>,
    marked: Vec<bool>,
    spike: usize,
}

impl Generator {
    pub fn new(config: SynthConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::new(&config, seed);
        Ok(Self {
            config,
            vocab,
            seed,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Builds one item of the given kind; deterministic in `(kind, item_seed)`.
    pub fn generate_item(&self, kind: usize, item_seed: u64, id: String) -> Result<Record> {
        let kind = QuestionKind::from_index(kind)?;
        let cfg = &self.config;
        let t = cfg.frames;
        let nc = cfg.num_candidates;
        let mut rng = rng_from(child(item_seed, kind.index() as u64));

        let mut layout = Layout {
            tokens: vec![None; t],
            marked: vec![false; t],
            spike: rng.random_range(0..t),
        };
        let tok = |i: usize| self.vocab.tokens[i].clone();
        let (candidates, answer): (Vec<Vec<f64>>, usize) = match kind {
            QuestionKind::Basic => {
                let picks = sample(&mut rng, cfg.vocab_size, nc);
                let ans = rng.random_range(0..nc);
                layout.tokens.iter_mut().for_each(|x| *x = Some(picks[ans]));
                (picks.into_iter().map(tok).collect(), ans)
            }
            QuestionKind::Forecasting => {
                let p = cfg.motif_period;
                let motif = sample(&mut rng, cfg.vocab_size, p);
                let phase = rng.random_range(0..p);
                for (i, slot) in layout.tokens.iter_mut().enumerate() {
                    *slot = Some(motif[(i + phase) % p]);
                }
                let next = motif[(t + phase) % p];
                let mut pool: Vec<usize> = motif.iter().copied().filter(|&m| m != next).collect();
                pool.shuffle(&mut rng);
                let extra: Vec<usize> = (0..cfg.vocab_size).filter(|v| !motif.contains(v)).collect();
                let mut extra = sample_from(&mut rng, &extra, nc.saturating_sub(p)).into_iter();
                let mut cands = vec![next];
                while cands.len() < nc {
                    cands.push(pool.pop().or_else(|| extra.next()).expect("vocab size validated"));
                }
                shuffled_with_answer(&mut rng, cands, tok)
            }
            QuestionKind::Reverse => {
                let half = t / 2;
                let picks = sample(&mut rng, cfg.vocab_size, nc);
                let segs = nc.min(half);
                for (i, slot) in layout.tokens.iter_mut().take(half).enumerate() {
                    *slot = Some(picks[i * segs / half]);
                }
                let others: Vec<usize> = (0..cfg.vocab_size).filter(|v| !picks.contains(v)).collect();
                for slot in layout.tokens.iter_mut().skip(half) {
                    *slot = Some(others[rng.random_range(0..others.len())]);
                }
                shuffled_with_answer(&mut rng, picks, tok)
            }
            QuestionKind::Counterfactual => {
                let picks = sample(&mut rng, cfg.vocab_size, nc);
                let marked = nuisance_marks(t);
                let unmarked = t - marked;
                // strict majority token among the unmarked frames
                let majority = unmarked / 2 + 1;
                let mut order: Vec<usize> = (0..t).collect();
                order.shuffle(&mut rng);
                for &pos in &order[..marked] {
                    layout.tokens[pos] = Some(picks[0]);
                    layout.marked[pos] = true;
                }
                let others = &picks[2..];
                for (i, &pos) in order[marked..].iter().enumerate() {
                    let tok = if i < majority { picks[1] } else { others[(i - majority) % others.len()] };
                    layout.tokens[pos] = Some(tok);
                }
                shuffled_with_answer(&mut rng, rotate_first(picks, 1), tok)
            }
            QuestionKind::Introspection => {
                let (p, e) = (Vocabulary::PRECURSOR, Vocabulary::EVENT);
                for slot in layout.tokens.iter_mut() {
                    *slot = Some(rng.random_range(2..cfg.vocab_size));
                }
                let u: f64 = rng.random();
                let yes = if u < 0.5 {
                    let i = rng.random_range(0..t - 1);
                    layout.tokens[i] = Some(p);
                    layout.tokens[rng.random_range(i + 1..t)] = Some(e);
                    true
                } else if u < 0.75 {
                    layout.tokens[rng.random_range(0..t)] = Some(e);
                    false
                } else {
                    let i = rng.random_range(0..t - 1);
                    layout.tokens[i] = Some(e);
                    layout.tokens[rng.random_range(i + 1..t)] = Some(p);
                    false
                };
                let yes_first = rng.random_bool(0.5);
                let (first, second) = if yes_first {
                    (self.vocab.yes.clone(), self.vocab.no.clone())
                } else {
                    (self.vocab.no.clone(), self.vocab.yes.clone())
                };
                (vec![first, second], if yes == yes_first { 0 } else { 1 })
            }
            QuestionKind::Attribution => {
                let picks = sample(&mut rng, cfg.vocab_size, nc);
                let mut fill: Vec<usize> = (0..t).map(|i| picks[i % nc]).collect();
                fill.shuffle(&mut rng);
                for (slot, tok) in layout.tokens.iter_mut().zip(fill) {
                    *slot = Some(tok);
                }
                let target = layout.tokens[layout.spike].expect("every frame filled");
                let pos = picks.iter().position(|&x| x == target).expect("spike token is a pick");
                shuffled_with_answer(&mut rng, rotate_first(picks, pos), tok)
            }
        };

        if kind != QuestionKind::Counterfactual && cfg.nuisance {
            for pos in index::sample(&mut rng, t, nuisance_marks(t)) {
                layout.marked[pos] = true;
            }
        }
        self.render(&mut rng, kind, id, layout, candidates, answer)
    }

    fn render(
        &self,
        rng: &mut ChaCha8Rng,
        kind: QuestionKind,
        id: String,
        layout: Layout,
        candidates: Vec<Vec<f64>>,
        answer: usize,
    ) -> Result<Record> {
        let cfg = &self.config;
        let (t, d) = (cfg.frames, cfg.feature_dim);
        let mut frames = vec![0.0; t * d];
        for i in 0..t {
            let row = &mut frames[i * d..(i + 1) * d];
            if let Some(tok) = layout.tokens[i] {
                row.copy_from_slice(&self.vocab.tokens[tok]);
            }
            if layout.marked[i] {
                row[cfg.marker_channel()] = 1.0;
            }
            if i == layout.spike && (cfg.nuisance || kind == QuestionKind::Attribution) {
                row[cfg.signal_channel()] = cfg.spike_amplitude;
            }
        }
        if cfg.noise_sigma > 0.0 {
            for x in frames.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *x += cfg.noise_sigma * z;
            }
        }
        Ok(Record {
            clip: FeatureClip::new(frames, t, d)?,
            question: TypedQuestion {
                id,
                qtype: kind.index(),
                question_vec: self.vocab.query.clone(),
                candidates,
                answer_idx: answer,
            },
        })
    }
}

/// Frames carrying the marker channel in every clip.
fn nuisance_marks(t: usize) -> usize {
    (3 * t + 4) / 8
}

fn sample(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    index::sample(rng, n, k).into_vec()
}

fn sample_from(rng: &mut ChaCha8Rng, pool: &[usize], k: usize) -> Vec<usize> {
    sample(rng, pool.len(), k.min(pool.len())).into_iter().map(|i| pool[i]).collect()
}

/// Moves the entry at `pos` to the front.
fn rotate_first(mut picks: Vec<usize>, pos: usize) -> Vec<usize> {
    picks.swap(0, pos);
    picks
}

/// Shuffles token candidates whose first entry is the answer.
fn shuffled_with_answer(
    rng: &mut ChaCha8Rng,
    mut cands: Vec<usize>,
    tok: impl Fn(usize) -> Vec<f64>,
) -> (Vec<Vec<f64>>, usize) {
    let answer_tok = cands[0];
    cands.shuffle(rng);
    let ans = cands.iter().position(|&x| x == answer_tok).expect("answer present");
    (cands.into_iter().map(tok).collect(), ans)
}
