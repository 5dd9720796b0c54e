//! Run configuration: defaults per profile, TOML overrides, validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::awmtl::AwmtlSign;
use crate::data::{GenerationPlan, SynthConfig};
use crate::error::{Error, Result};
use crate::losses::{FreqWeightMode, LossCoefficients};
use crate::metrics::FrequencySource;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Config(format!("unknown profile `{other}` (desk or paper)"))),
        }
    }
}

/// When the type weights and rates are recomputed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RefreshCadence {
    #[default]
    PerEpoch,
    PerSteps,
}

/// Every tunable of a run. All keys are optional in a config file; missing
/// ones take the profile default and unknown ones are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,

    // data
    pub type_counts: [usize; 6],
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub feature_dim: usize,
    pub frames: usize,
    pub vocab_size: usize,
    pub num_candidates: usize,
    pub motif_period: usize,
    pub noise_sigma: f64,
    pub spike_amplitude: f64,
    pub nuisance: bool,

    // model
    pub type_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub pos_len: usize,
    pub dropout: f64,
    pub qtg_attention: bool,
    pub awmtl: bool,
    pub temporal_ar: bool,
    pub scale_frames: bool,

    // losses
    pub delta: f64,
    pub freq_weight_mode: FreqWeightMode,
    pub coef_hinge: f64,
    pub coef_mse: f64,
    pub coef_avg_type: f64,
    pub coef_freq_weighted: f64,

    // adaptive weighting
    pub alpha: f64,
    pub beta: f64,
    pub awmtl_sign: AwmtlSign,
    pub normalize_by_n: bool,
    pub refresh: RefreshCadence,
    pub refresh_steps: usize,

    // temporal
    pub mask_ratio: f64,

    // optimisation
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_batch_size: usize,

    // evaluation and experiments
    pub eval_split: String,
    pub frequency_source: FrequencySource,
    pub ablation_seeds: Vec<u64>,
    pub generalize_val_fraction: f64,
    /// Optimizer steps per single-type training run; 0 uses
    /// `epochs · ⌈train items / batch⌉` of the full training split.
    pub generalize_steps: usize,

    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Desk)
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let mut c = Self {
            profile,
            seed: 7,
            type_counts: [1000, 200, 200, 100, 100, 400],
            val_fraction: 0.1,
            test_fraction: 0.5,
            feature_dim: 32,
            frames: 32,
            vocab_size: 16,
            num_candidates: 4,
            motif_period: 4,
            noise_sigma: 0.1,
            spike_amplitude: 1.0,
            nuisance: true,
            type_dim: 32,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            layers: 1,
            pos_len: 5000,
            dropout: 0.2,
            qtg_attention: true,
            awmtl: true,
            temporal_ar: true,
            scale_frames: true,
            delta: 1.0,
            freq_weight_mode: FreqWeightMode::Normalized,
            coef_hinge: 1.0,
            coef_mse: 1.0,
            coef_avg_type: 1.0,
            coef_freq_weighted: 1.0,
            alpha: 0.5,
            beta: 0.9,
            awmtl_sign: AwmtlSign::AsWritten,
            normalize_by_n: false,
            refresh: RefreshCadence::PerEpoch,
            refresh_steps: 0,
            mask_ratio: 0.15,
            lr: 1e-3,
            batch_size: 32,
            epochs: 20,
            eval_batch_size: 64,
            eval_split: "test".into(),
            frequency_source: FrequencySource::EvalSplit,
            ablation_seeds: vec![7, 8],
            generalize_val_fraction: 0.25,
            generalize_steps: 0,
            dataset: None,
            checkpoint: None,
            out_dir: None,
        };
        if profile == Profile::Paper {
            c.lr = 1e-4;
            c.batch_size = 128;
            c.epochs = 50;
            c.type_dim = 512;
            c.d_model = 512;
            c.heads = 16;
            c.d_ff = 2048;
        }
        c
    }

    /// Profile defaults overlaid with the keys present in `text`.
    pub fn from_toml(text: &str, profile: Profile) -> Result<Self> {
        let overrides: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(p) = overrides.get("profile").and_then(|v| v.as_str()) {
            if Profile::parse(p)? != profile {
                return Err(Error::Config(format!("config file asks for profile `{p}`")));
            }
        }
        let base = toml::Value::try_from(Self::for_profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = match base {
            toml::Value::Table(t) => t,
            _ => unreachable!("config serialises to a table"),
        };
        for (k, v) in overrides {
            merged.insert(k, v);
        }
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Profile) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, profile)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.delta > 0.0) {
            return bad(format!("delta {} must be positive", self.delta));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        for (k, v) in [("alpha", self.alpha), ("beta", self.beta), ("mask_ratio", self.mask_ratio)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{k} {v} must lie in [0, 1]"));
            }
        }
        for (k, v) in [("val_fraction", self.val_fraction), ("test_fraction", self.test_fraction)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} {v} must be finite and non-negative"));
            }
        }
        if !(self.generalize_val_fraction > 0.0 && self.generalize_val_fraction < 1.0) {
            return bad(format!("generalize_val_fraction {} must lie in (0, 1)", self.generalize_val_fraction));
        }
        let coefs = [self.coef_hinge, self.coef_mse, self.coef_avg_type, self.coef_freq_weighted];
        if coefs.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return bad("loss coefficients must be finite and non-negative".into());
        }
        if self.refresh == RefreshCadence::PerSteps && self.refresh_steps == 0 {
            return bad("refresh = per_steps needs refresh_steps > 0".into());
        }
        crate::data::Split::parse(&self.eval_split).map_err(|e| Error::Config(e.to_string()))?;
        self.synth().validate()?;
        self.model(1, self.feature_dim, self.frames).validate()?;
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            feature_dim: self.feature_dim,
            frames: self.frames,
            vocab_size: self.vocab_size,
            num_candidates: self.num_candidates,
            motif_period: self.motif_period,
            noise_sigma: self.noise_sigma,
            spike_amplitude: self.spike_amplitude,
            nuisance: self.nuisance,
        }
    }

    pub fn plan(&self) -> GenerationPlan {
        GenerationPlan::from_fractions(self.type_counts, self.val_fraction, self.test_fraction)
    }

    /// Model shape for a dataset with `num_types` types and clips of
    /// `frames × feature_dim`.
    pub fn model(&self, num_types: usize, feature_dim: usize, frames: usize) -> ModelConfig {
        ModelConfig {
            feature_dim,
            type_dim: self.type_dim,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            layers: self.layers,
            num_types,
            frames,
            pos_len: self.pos_len,
            qtg_attention: self.qtg_attention,
            temporal_ar: self.temporal_ar,
            scale_frames: self.scale_frames,
        }
    }

    pub fn coefficients(&self) -> LossCoefficients {
        LossCoefficients {
            hinge: self.coef_hinge,
            mse: self.coef_mse,
            avg_type: self.coef_avg_type,
            freq_weighted: self.coef_freq_weighted,
        }
    }

    /// Digest of the resolved configuration, for report provenance.
    pub fn digest(&self) -> Result<String> {
        Ok(crate::metrics::digest(self.to_toml()?.as_bytes()))
    }
}
