//! Typed video-question records, keyframe sampling, and dataset assembly.

mod io;
mod synth;

pub use io::{read_dataset, read_manifest, write_dataset, FORMAT_VERSION};
pub use synth::{Generator, QuestionKind, SynthConfig, Vocabulary, RESERVED_CHANNELS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{child, substream};

/// A `T×D` sequence of frame features, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureClip {
    frames: Vec<f64>,
    t: usize,
    d: usize,
}

impl FeatureClip {
    pub fn new(frames: Vec<f64>, t: usize, d: usize) -> Result<Self> {
        if t == 0 || d == 0 || frames.len() != t * d {
            return Err(Error::Data(format!(
                "clip of {} values is not {t}x{d}",
                frames.len()
            )));
        }
        if frames.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data("non-finite frame value".into()));
        }
        Ok(Self { frames, t, d })
    }

    pub fn frames(&self) -> &[f64] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.frames[i * self.d..(i + 1) * self.d]
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn width(&self) -> usize {
        self.d
    }

    /// Clip restricted to the given frame indices (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            if i >= self.t {
                return Err(Error::Data(format!("frame {i} outside clip of {}", self.t)));
            }
            out.extend_from_slice(self.frame(i));
        }
        Self::new(out, indices.len(), self.d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TypedQuestion {
    pub id: String,
    pub qtype: usize,
    pub question_vec: Vec<f64>,
    pub candidates: Vec<Vec<f64>>,
    pub answer_idx: usize,
}

/// One dataset item.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub clip: FeatureClip,
    pub question: TypedQuestion,
}

impl Record {
    pub fn qtype(&self) -> usize {
        self.question.qtype
    }

    pub fn validate(&self, num_types: usize, t: usize, d: usize) -> Result<()> {
        let q = &self.question;
        if q.qtype >= num_types {
            return Err(Error::Data(format!("qtype {} outside {num_types} types", q.qtype)));
        }
        if self.clip.len() != t || self.clip.width() != d {
            return Err(Error::Data(format!(
                "clip is {}x{}, manifest declares {t}x{d}",
                self.clip.len(),
                self.clip.width()
            )));
        }
        if q.question_vec.len() != d {
            return Err(Error::Data("question_vec width".into()));
        }
        if q.candidates.len() < 2 || q.candidates.iter().any(|c| c.len() != d) {
            return Err(Error::Data("need at least two candidates of feature width".into()));
        }
        if q.answer_idx >= q.candidates.len() {
            return Err(Error::Data(format!(
                "answer_idx {} outside {} candidates",
                q.answer_idx,
                q.candidates.len()
            )));
        }
        Ok(())
    }
}

/// Output of [`sample_frames`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameSelection {
    pub indices: Vec<usize>,
    /// True when the clip was shorter than one window and repeat-padded.
    pub padded: bool,
}

/// Uniform keyframes with a window of consecutive frames around each.
///
/// Keyframe `i` sits at `floor((i + 0.5) * total / num_keys)`; its window is
/// shifted (not truncated) to stay inside the clip. A clip shorter than
/// one window repeats its last frame.
pub fn sample_frames(total_frames: usize, num_keys: usize, window: usize) -> Result<FrameSelection> {
    if total_frames == 0 || num_keys == 0 || window == 0 {
        return Err(Error::Contract(
            "sample_frames needs positive frame, key and window counts".into(),
        ));
    }
    let padded = total_frames < window;
    let mut indices = Vec::with_capacity(num_keys * window);
    for i in 0..num_keys {
        if padded {
            indices.extend((0..window).map(|j| j.min(total_frames - 1)));
            continue;
        }
        let key = (2 * i + 1) * total_frames / (2 * num_keys);
        let start = key
            .saturating_sub(window / 2)
            .min(total_frames - window);
        indices.extend(start..start + window);
    }
    Ok(FrameSelection { indices, padded })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSampling {
    pub total_frames: usize,
    pub num_keys: usize,
    pub window: usize,
    pub padded: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub num_types: usize,
    pub type_names: Vec<String>,
    pub counts: SplitCounts,
    pub feature_dim: usize,
    pub frames: usize,
    pub seed: u64,
    pub sampling: FrameSampling,
    pub generator: SynthConfig,
}

impl DatasetManifest {
    pub fn counts(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.counts.train,
            Split::Val => &self.counts.val,
            Split::Test => &self.counts.test,
        }
    }

    /// Per-type frequency within `split`; zero for types absent from it.
    pub fn frequencies(&self, split: Split) -> Vec<f64> {
        let c = self.counts(split);
        let total: usize = c.iter().sum();
        c.iter().map(|&n| n as f64 / total.max(1) as f64).collect()
    }

    /// Type frequencies over all three splits together.
    pub fn overall_frequencies(&self) -> Vec<f64> {
        let c: Vec<usize> = (0..self.num_types)
            .map(|q| Split::ALL.iter().map(|&s| self.counts(s)[q]).sum())
            .collect();
        let total: usize = c.iter().sum();
        c.iter().map(|&n| n as f64 / total.max(1) as f64).collect()
    }

    /// Generator kind behind each dataset type index.
    pub fn kinds(&self) -> Result<Vec<QuestionKind>> {
        self.type_names.iter().map(|n| QuestionKind::from_name(n)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Record>,
    pub val: Vec<Record>,
    pub test: Vec<Record>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Record] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Checks every record against the manifest, including the counts.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.type_names.len() != m.num_types {
            return Err(Error::Data("type_names length differs from num_types".into()));
        }
        for split in Split::ALL {
            let declared = m.counts(split);
            if declared.len() != m.num_types {
                return Err(Error::Data(format!("{} counts cover the wrong number of types", split.name())));
            }
            let mut seen = vec![0usize; m.num_types];
            for r in self.split(split) {
                r.validate(m.num_types, m.frames, m.feature_dim)?;
                seen[r.qtype()] += 1;
            }
            if seen != declared {
                return Err(Error::Data(format!(
                    "{} split holds per-type counts {seen:?}, manifest declares {declared:?}",
                    split.name()
                )));
            }
        }
        Ok(())
    }
}

/// Per-split item counts for each generator kind.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationPlan {
    pub train: [usize; 6],
    pub val: [usize; 6],
    pub test: [usize; 6],
}

impl GenerationPlan {
    /// Validation and test counts as rounded fractions of the training counts.
    pub fn from_fractions(train: [usize; 6], val_fraction: f64, test_fraction: f64) -> Self {
        let scale = |f: f64| train.map(|c| (c as f64 * f).round() as usize);
        Self {
            train,
            val: scale(val_fraction),
            test: scale(test_fraction),
        }
    }
}

/// Generates a full dataset. Kinds with no training items are left out and
/// the remaining kinds are renumbered `0..N` in canonical order.
pub fn build_dataset(cfg: &SynthConfig, plan: &GenerationPlan, seed: u64) -> Result<Dataset> {
    let gen = Generator::new(cfg.clone(), seed)?;
    let present: Vec<QuestionKind> = QuestionKind::ALL
        .into_iter()
        .filter(|k| plan.train[k.index()] > 0)
        .collect();
    if present.is_empty() {
        return Err(Error::Config("every type count is zero".into()));
    }
    let data_seed = substream(seed, "data");
    let mut splits: Vec<Vec<Record>> = Vec::new();
    let mut counts: Vec<Vec<usize>> = Vec::new();
    for split in Split::ALL {
        let per_kind = match split {
            Split::Train => plan.train,
            Split::Val => plan.val,
            Split::Test => plan.test,
        };
        let split_seed = substream(data_seed, split.name());
        let mut records = Vec::new();
        let mut c = Vec::new();
        for (dense, kind) in present.iter().enumerate() {
            let kind_seed = child(split_seed, kind.index() as u64);
            let n = per_kind[kind.index()];
            for i in 0..n {
                let id = format!("{}-{}-{i:05}", split.name(), kind.name());
                let mut rec = gen.generate_item(kind.index(), child(kind_seed, i as u64), id)?;
                rec.question.qtype = dense;
                records.push(rec);
            }
            c.push(n);
        }
        splits.push(records);
        counts.push(c);
    }
    let sel = sample_frames(cfg.frames, 8.min(cfg.frames), cfg.frames / 8.min(cfg.frames))?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        num_types: present.len(),
        type_names: present.iter().map(|k| k.name().to_string()).collect(),
        counts: SplitCounts {
            train: counts[0].clone(),
            val: counts[1].clone(),
            test: counts[2].clone(),
        },
        feature_dim: cfg.feature_dim,
        frames: cfg.frames,
        seed,
        sampling: FrameSampling {
            total_frames: cfg.frames,
            num_keys: 8.min(cfg.frames),
            window: cfg.frames / 8.min(cfg.frames),
            padded: sel.padded,
        },
        generator: cfg.clone(),
    };
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    let ds = Dataset {
        manifest,
        train,
        val,
        test,
    };
    ds.validate()?;
    Ok(ds)
}
