//! Per-type difficulty tracking, attention weights and adapted rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Direction of the weight softmax over difficulties.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AwmtlSign {
    /// `w = softmax(-P)`: harder types get smaller weights.
    #[default]
    AsWritten,
    /// `w = softmax(P)`: harder types get larger weights.
    Flipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeState {
    pub running_loss: Vec<f64>,
    pub running_acc: Vec<f64>,
    /// Whether a type has had at least one update.
    pub observed: Vec<bool>,
    pub difficulty: Vec<f64>,
    pub weights: Vec<f64>,
    pub eta: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub base_lr: f64,
    pub sign: AwmtlSign,
    pub normalize_by_n: bool,
}

impl TypeState {
    /// Fresh state with uniform weights.
    pub fn new(n: usize, alpha: f64, beta: f64, base_lr: f64, sign: AwmtlSign, normalize_by_n: bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::Contract("type state needs at least one type".into()));
        }
        if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) {
            return Err(Error::Config(format!("alpha {alpha} and beta {beta} must lie in [0, 1]")));
        }
        let mut s = Self {
            running_loss: vec![0.0; n],
            running_acc: vec![0.0; n],
            observed: vec![false; n],
            difficulty: vec![0.0; n],
            weights: vec![1.0 / n as f64; n],
            eta: vec![0.0; n],
            alpha,
            beta,
            base_lr,
            sign,
            normalize_by_n,
        };
        s.eta = s.adapt_lr();
        Ok(s)
    }

    pub fn num_types(&self) -> usize {
        self.weights.len()
    }

    /// EMA update of one type's loss and accuracy.
    pub fn update_stats(&mut self, q: usize, batch_loss: f64, batch_acc: f64) -> Result<()> {
        if q >= self.num_types() {
            return Err(Error::Contract(format!("question type {q} outside {} types", self.num_types())));
        }
        if !(0.0..=1.0).contains(&batch_acc) || !(batch_loss >= 0.0) {
            return Err(Error::Contract(format!(
                "batch statistics out of range: loss {batch_loss}, accuracy {batch_acc}"
            )));
        }
        let b = self.beta;
        self.running_loss[q] = b * self.running_loss[q] + (1.0 - b) * batch_loss;
        self.running_acc[q] = b * self.running_acc[q] + (1.0 - b) * batch_acc;
        self.observed[q] = true;
        Ok(())
    }

    /// `P_q = α·Loss_q + (1-α)·(1-Acc_q)`; types never observed take the
    /// mean difficulty of the observed ones.
    pub fn compute_difficulty(&self) -> Vec<f64> {
        let a = self.alpha;
        let mut p: Vec<f64> = (0..self.num_types())
            .map(|q| a * self.running_loss[q] + (1.0 - a) * (1.0 - self.running_acc[q]))
            .collect();
        let seen: Vec<f64> = p.iter().zip(&self.observed).filter(|(_, &o)| o).map(|(x, _)| *x).collect();
        let fill = if seen.is_empty() {
            0.0
        } else {
            seen.iter().sum::<f64>() / seen.len() as f64
        };
        for (x, &o) in p.iter_mut().zip(&self.observed) {
            if !o {
                *x = fill;
            }
        }
        p
    }

    pub fn compute_weights(&self, difficulty: &[f64]) -> Vec<f64> {
        let s = match self.sign {
            AwmtlSign::AsWritten => -1.0,
            AwmtlSign::Flipped => 1.0,
        };
        let z: Vec<f64> = difficulty.iter().map(|p| s * p).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
        let total: f64 = e.iter().sum();
        e.iter().map(|x| x / total).collect()
    }

    /// `η_q = η·w_q`, or `η·N·w_q` when normalising by the type count.
    pub fn adapt_lr(&self) -> Vec<f64> {
        let n = self.num_types() as f64;
        self.weights
            .iter()
            .map(|w| if self.normalize_by_n { self.base_lr * n * w } else { self.base_lr * w })
            .collect()
    }

    /// Recomputes difficulty, weights and rates from the current stats.
    pub fn refresh(&mut self) {
        self.difficulty = self.compute_difficulty();
        self.weights = self.compute_weights(&self.difficulty);
        self.eta = self.adapt_lr();
    }

    /// Per-sample loss multiplier `η_q / η` for type `q`.
    pub fn loss_scale(&self, q: usize) -> f64 {
        self.eta[q] / self.base_lr
    }
}
