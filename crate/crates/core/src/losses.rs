//! Answer hinge loss, frame reconstruction error, per-type aggregates and
//! their sum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BatchOutput;
use crate::tensor::{Tape, Var};

/// How type frequencies weight the per-type losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FreqWeightMode {
    /// `w_i = f_i / Σ f_j`.
    #[default]
    Normalized,
    /// `w_i ∝ 1 / f_i`, normalised to sum to one.
    Inverse,
}

/// `max(0, δ - (s_c - s_w))` with `s_w` the best incorrect score.
pub fn hinge_loss(scores: &[f64], answer: usize, delta: f64) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::Contract("hinge loss needs at least two candidates".into()));
    }
    if answer >= scores.len() {
        return Err(Error::Contract(format!("answer {answer} outside {} candidates", scores.len())));
    }
    if !(delta > 0.0) {
        return Err(Error::Contract(format!("margin {delta} must be positive")));
    }
    let w = (0..scores.len())
        .filter(|&i| i != answer)
        .fold(None, |b: Option<usize>, i| match b {
            Some(j) if scores[j] >= scores[i] => Some(j),
            _ => Some(i),
        })
        .unwrap_or(0);
    Ok((delta - (scores[answer] - scores[w])).max(0.0))
}

/// Mean over rows of the squared Euclidean distance.
pub fn recon_mse(predicted: &[Vec<f64>], actual: &[Vec<f64>]) -> Result<f64> {
    if predicted.len() != actual.len() || predicted.iter().zip(actual).any(|(p, a)| p.len() != a.len()) {
        return Err(Error::Contract("prediction and target shapes differ".into()));
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| p.iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        .sum();
    Ok(s / predicted.len() as f64)
}

/// Frequency weights over the given types, summing to one.
pub fn frequency_weights(freqs: &BTreeMap<usize, f64>, mode: FreqWeightMode) -> Result<BTreeMap<usize, f64>> {
    if let Some((q, f)) = freqs.iter().find(|(_, &f)| !(f > 0.0)) {
        return Err(Error::Contract(format!("type {q} has non-positive frequency {f}")));
    }
    let raw: BTreeMap<usize, f64> = freqs
        .iter()
        .map(|(&q, &f)| (q, if mode == FreqWeightMode::Inverse { 1.0 / f } else { f }))
        .collect();
    let total: f64 = raw.values().sum();
    Ok(raw.into_iter().map(|(q, x)| (q, x / total)).collect())
}

/// `(L_avg_type, L_freq_weighted)` over the types present in `per_type`.
pub fn type_losses(
    per_type: &BTreeMap<usize, f64>,
    freqs: &BTreeMap<usize, f64>,
    mode: FreqWeightMode,
) -> Result<(f64, f64)> {
    if per_type.is_empty() {
        return Err(Error::Contract("no per-type losses".into()));
    }
    let mut present = BTreeMap::new();
    for &q in per_type.keys() {
        let f = freqs
            .get(&q)
            .ok_or_else(|| Error::Contract(format!("no frequency for type {q}")))?;
        present.insert(q, *f);
    }
    let w = frequency_weights(&present, mode)?;
    let avg = per_type.values().sum::<f64>() / per_type.len() as f64;
    let fw = per_type.iter().map(|(q, l)| w[q] * l).sum();
    Ok((avg, fw))
}

/// Multipliers on the four loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCoefficients {
    pub hinge: f64,
    pub mse: f64,
    pub avg_type: f64,
    pub freq_weighted: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        Self {
            hinge: 1.0,
            mse: 1.0,
            avg_type: 1.0,
            freq_weighted: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub hinge: f64,
    pub mse: f64,
    pub avg_type: f64,
    pub freq_weighted: f64,
    pub total: f64,
    /// `L_qtype` for each type present in the batch.
    pub per_type: BTreeMap<usize, f64>,
}

/// Weighted sum of the four components.
pub fn total_loss(hinge: f64, mse: f64, avg_type: f64, freq_weighted: f64, c: &LossCoefficients) -> LossBreakdown {
    LossBreakdown {
        hinge,
        mse,
        avg_type,
        freq_weighted,
        total: c.hinge * hinge + c.mse * mse + c.avg_type * avg_type + c.freq_weighted * freq_weighted,
        per_type: BTreeMap::new(),
    }
}

/// Settings for assembling a batch objective on the tape.
#[derive(Clone, Debug)]
pub struct ObjectiveSpec<'a> {
    pub delta: f64,
    pub coefficients: LossCoefficients,
    /// Per-type training frequencies, when the type terms are active.
    pub type_terms: Option<(&'a [f64], FreqWeightMode)>,
    /// One loss multiplier per item.
    pub sample_scale: &'a [f64],
}

/// Per-item values kept for telemetry.
#[derive(Clone, Debug)]
pub struct ItemLosses {
    pub hinge: Vec<f64>,
    pub mse: Vec<f64>,
    pub correct: Vec<bool>,
}

/// Records the full objective for a batch and returns its scalar var.
pub fn batch_objective(
    t: &mut Tape,
    out: &BatchOutput,
    qtypes: &[usize],
    answers: &[usize],
    cand_groups: &[(usize, usize)],
    spec: &ObjectiveSpec,
) -> Result<(Var, LossBreakdown, ItemLosses)> {
    let n = qtypes.len();
    if spec.sample_scale.len() != n || answers.len() != n || cand_groups.len() != n {
        return Err(Error::Contract("objective inputs disagree on the batch size".into()));
    }
    let s = spec.sample_scale;
    let h = t.hinge(out.scores, cand_groups.to_vec(), answers.to_vec(), spec.delta)?;
    let hv = t.data(h).to_vec();
    let scores = t.data(out.scores).to_vec();
    let correct: Vec<bool> = cand_groups
        .iter()
        .zip(answers)
        .map(|(&(st, len), &a)| crate::model::predict(&scores[st..st + len]) == a)
        .collect();

    let hinge_w: Vec<f64> = s.iter().map(|x| x / n as f64).collect();
    let hinge = t.weighted_sum(h, hinge_w)?;
    let mut breakdown = LossBreakdown {
        hinge: t.data(hinge)[0],
        ..LossBreakdown::default()
    };
    let mut total = t.scale(hinge, spec.coefficients.hinge)?;

    // Per-type partial losses: mean scaled hinge over each type's items.
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &q) in qtypes.iter().enumerate() {
        members.entry(q).or_default().push(i);
    }
    for (&q, idx) in &members {
        let l = idx.iter().map(|&i| s[i] * hv[i]).sum::<f64>() / idx.len() as f64;
        breakdown.per_type.insert(q, l);
    }
    if let Some((freqs, mode)) = spec.type_terms {
        let present: BTreeMap<usize, f64> = members
            .keys()
            .map(|&q| freqs.get(q).copied().map(|f| (q, f)).ok_or_else(|| Error::Contract(format!("no frequency for type {q}"))))
            .collect::<Result<_>>()?;
        let fw = frequency_weights(&present, mode)?;
        let k = members.len() as f64;
        let mut avg_w = vec![0.0; n];
        let mut fw_w = vec![0.0; n];
        for (q, idx) in &members {
            for &i in idx {
                avg_w[i] = s[i] / (idx.len() as f64 * k);
                fw_w[i] = fw[q] * s[i] / idx.len() as f64;
            }
        }
        let avg = t.weighted_sum(h, avg_w)?;
        let fwl = t.weighted_sum(h, fw_w)?;
        breakdown.avg_type = t.data(avg)[0];
        breakdown.freq_weighted = t.data(fwl)[0];
        let a = t.scale(avg, spec.coefficients.avg_type)?;
        let f = t.scale(fwl, spec.coefficients.freq_weighted)?;
        total = t.add(total, a)?;
        total = t.add(total, f)?;
    }

    let mut item_mse = vec![0.0; n];
    if let Some(fut) = out.future {
        let rows = t.shape(fut)[0];
        let tlen = rows / n;
        let diff = t.sub(fut, out.frames)?;
        let sq = t.mul(diff, diff)?;
        let rs = t.row_sum(sq)?;
        let per_row = t.data(rs).to_vec();
        let w: Vec<f64> = (0..rows).map(|r| s[r / tlen] / (n * tlen) as f64).collect();
        for (r, v) in per_row.iter().enumerate() {
            item_mse[r / tlen] += v / tlen as f64;
        }
        let mut mse = t.weighted_sum(rs, w)?;
        if let Some((rec, targets)) = &out.recon {
            let actual = t.gather_rows(out.frames, targets.clone())?;
            let diff = t.sub(*rec, actual)?;
            let sq = t.mul(diff, diff)?;
            let rs = t.row_sum(sq)?;
            let per_row = t.data(rs).to_vec();
            let mut count = vec![0usize; n];
            for &r in targets {
                count[r / tlen] += 1;
            }
            let w: Vec<f64> = targets
                .iter()
                .map(|&r| s[r / tlen] / (n * count[r / tlen]) as f64)
                .collect();
            for (&r, v) in targets.iter().zip(&per_row) {
                item_mse[r / tlen] += v / count[r / tlen] as f64;
            }
            let m = t.weighted_sum(rs, w)?;
            mse = t.add(mse, m)?;
        }
        breakdown.mse = t.data(mse)[0];
        let m = t.scale(mse, spec.coefficients.mse)?;
        total = t.add(total, m)?;
    }
    breakdown.total = t.data(total)[0];
    Ok((
        total,
        breakdown,
        ItemLosses {
            hinge: hv,
            mse: item_mse,
            correct,
        },
    ))
}
