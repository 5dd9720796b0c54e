//! Training loop, batched prediction and telemetry.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{RefreshCadence, RunConfig};
use super::optim::Adam;
use crate::awmtl::TypeState;
use crate::data::{Dataset, Record};
use crate::error::{Error, Result};
use crate::losses::{batch_objective, LossBreakdown, ObjectiveSpec};
use crate::metrics::Prediction;
use crate::model::{forward_batch, predict, BatchInputs, BlockDropout, Bound, Checkpoint, ModelConfig, Params};
use crate::rng::{child, rng_from, substream};
use crate::temporal::{make_mask_plan, MaskPlan};
use crate::tensor::Tape;

pub const TELEMETRY_HEADER: &str = "epoch,step,qtype,loss_hinge,loss_mse,loss_avg_type,loss_freq_weighted,loss_total,running_loss,running_acc,P_q,w_q,eta_q";

/// One per-type telemetry row, written at each epoch end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub epoch: usize,
    pub step: usize,
    pub qtype: usize,
    pub loss_hinge: f64,
    pub loss_mse: f64,
    pub loss_avg_type: f64,
    pub loss_freq_weighted: f64,
    pub loss_total: f64,
    pub running_loss: f64,
    pub running_acc: f64,
    pub p_q: f64,
    pub w_q: f64,
    pub eta_q: f64,
}

impl TelemetryRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.qtype,
            self.loss_hinge,
            self.loss_mse,
            self.loss_avg_type,
            self.loss_freq_weighted,
            self.loss_total,
            self.running_loss,
            self.running_acc,
            self.p_q,
            self.w_q,
            self.eta_q
        )
    }
}

/// Parses telemetry text, header included.
pub fn parse_telemetry(text: &str) -> Result<Vec<TelemetryRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(TELEMETRY_HEADER) {
        return Err(Error::Data("telemetry header mismatch".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Data(format!("telemetry line {}", i + 2));
            if f.len() != 13 {
                return Err(bad());
            }
            let u = |k: usize| f[k].parse::<usize>().map_err(|_| bad());
            let x = |k: usize| f[k].parse::<f64>().map_err(|_| bad());
            Ok(TelemetryRow {
                epoch: u(0)?,
                step: u(1)?,
                qtype: u(2)?,
                loss_hinge: x(3)?,
                loss_mse: x(4)?,
                loss_avg_type: x(5)?,
                loss_freq_weighted: x(6)?,
                loss_total: x(7)?,
                running_loss: x(8)?,
                running_acc: x(9)?,
                p_q: x(10)?,
                w_q: x(11)?,
                eta_q: x(12)?,
            })
        })
        .collect()
}

/// What to train on and for how long.
#[derive(Clone, Debug, Default)]
pub struct TrainPlan<'a> {
    /// Indices into the training split; all items when absent.
    pub items: Option<&'a [usize]>,
    /// Total optimizer steps; `epochs` full passes when absent.
    pub steps: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

pub struct TrainOutcome {
    pub model: ModelConfig,
    pub params: Params,
    pub state: TypeState,
    /// Type weights the model was last run with.
    pub weights: Vec<f64>,
    pub telemetry: Vec<TelemetryRow>,
    pub steps: Vec<StepLog>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &RunConfig, type_names: &[String]) -> Result<Checkpoint> {
        let run = serde_json::json!({
            "config": serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?,
            "steps": self.steps.len(),
            "type_state": serde_json::to_value(&self.state).map_err(|e| Error::Config(e.to_string()))?,
        });
        Ok(Checkpoint {
            model: self.model.clone(),
            type_names: type_names.to_vec(),
            type_weights: self.weights.clone(),
            run,
            params: None,
        })
    }

    /// Epoch-end running loss of type `q`, one value per epoch.
    pub fn running_loss_curve(&self, q: usize) -> Vec<f64> {
        self.telemetry.iter().filter(|r| r.qtype == q).map(|r| r.running_loss).collect()
    }
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

#[derive(Default, Clone)]
struct TypeAcc {
    hinge: f64,
    mse: f64,
    n: usize,
}

/// Trains a fresh model. `telemetry`, when given, is rewritten with the
/// header and then appended to at every epoch end.
pub fn train(cfg: &RunConfig, ds: &Dataset, plan: &TrainPlan, telemetry: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let m = &ds.manifest;
    let model = cfg.model(m.num_types, m.feature_dim, m.frames);
    model.validate()?;
    let n_types = m.num_types;
    let items: Vec<usize> = match plan.items {
        Some(ix) => ix.to_vec(),
        None => (0..ds.train.len()).collect(),
    };
    if items.is_empty() {
        return Err(Error::Data("no training items".into()));
    }
    if let Some(&i) = items.iter().find(|&&i| i >= ds.train.len()) {
        return Err(Error::Contract(format!("training index {i} outside the split")));
    }
    let mut counts = vec![0usize; n_types];
    for &i in &items {
        counts[ds.train[i].qtype()] += 1;
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / items.len() as f64).collect();
    let present: Vec<usize> = (0..n_types).filter(|&q| counts[q] > 0).collect();

    let mut params = Params::init(&model, substream(cfg.seed, "init"))?;
    let mut adam = Adam::new(cfg.lr);
    let mut state = TypeState::new(n_types, cfg.alpha, cfg.beta, cfg.lr, cfg.awmtl_sign, cfg.normalize_by_n)?;
    let shuffle_seed = substream(cfg.seed, "shuffling");
    let mask_seed = substream(cfg.seed, "masking");
    let mut drop_rng = rng_from(substream(cfg.seed, "dropout"));
    let spec_coefs = cfg.coefficients();

    let mut file = match telemetry {
        Some(p) => {
            let mut f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "{TELEMETRY_HEADER}").map_err(|e| Error::io(p, e))?;
            f.flush().map_err(|e| Error::io(p, e))?;
            Some((p, f))
        }
        None => None,
    };

    let batches_per_epoch = items.len().div_ceil(cfg.batch_size);
    let total_steps = plan.steps.unwrap_or(cfg.epochs * batches_per_epoch);
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    let mut step = 0usize;
    let mut epoch = 0usize;
    let mut masked_items = 0u64;
    while step < total_steps {
        epoch += 1;
        let mut order = items.clone();
        order.shuffle(&mut rng_from(child(shuffle_seed, epoch as u64)));
        let mut per_type = vec![TypeAcc::default(); n_types];
        let (mut sum_avg, mut sum_fw, mut sum_total, mut nb) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total_steps {
                break;
            }
            step += 1;
            let records: Vec<&Record> = chunk.iter().map(|&i| &ds.train[i]).collect();
            let inp = BatchInputs::from_records(&records)?;
            let masks: Vec<MaskPlan> = if model.temporal_ar {
                records
                    .iter()
                    .map(|_| {
                        masked_items += 1;
                        make_mask_plan(inp.t, cfg.mask_ratio, child(mask_seed, masked_items))
                    })
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let weights = if cfg.awmtl { state.weights.clone() } else { uniform(n_types) };
            let scale: Vec<f64> = inp
                .qtypes
                .iter()
                .map(|&q| if cfg.awmtl { state.loss_scale(q) } else { 1.0 })
                .collect();

            let mut tape = Tape::new();
            let bound = Bound::new(&mut tape, &params);
            let mut dropout = (cfg.dropout > 0.0).then(|| BlockDropout {
                rate: cfg.dropout,
                rng: &mut drop_rng,
            });
            let numeric = |e: Error| match e {
                Error::NonFinite(what) => Error::Numeric {
                    epoch,
                    step,
                    msg: format!("non-finite {what}"),
                },
                other => other,
            };
            let out = forward_batch(&mut tape, &bound, &model, &inp, &weights, &masks, &mut dropout).map_err(numeric)?;
            let spec = ObjectiveSpec {
                delta: cfg.delta,
                coefficients: spec_coefs,
                type_terms: cfg.awmtl.then_some((freqs.as_slice(), cfg.freq_weight_mode)),
                sample_scale: &scale,
            };
            let (loss, breakdown, item) =
                batch_objective(&mut tape, &out, &inp.qtypes, &inp.answers, &inp.cand_groups, &spec).map_err(numeric)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Numeric {
                    epoch,
                    step,
                    msg: format!("loss is {}", breakdown.total),
                });
            }
            let mut grads = tape.backward(loss).map_err(numeric)?;
            let mut g = BTreeMap::new();
            for (name, &v) in bound.iter() {
                if let Some(x) = grads.take(v) {
                    g.insert(name.clone(), x);
                }
            }
            adam.step(&mut params, &g)?;
            if !params.is_finite() {
                return Err(Error::Numeric {
                    epoch,
                    step,
                    msg: "parameters became non-finite".into(),
                });
            }

            let mut batch_types: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
            for (i, &q) in inp.qtypes.iter().enumerate() {
                let e = batch_types.entry(q).or_default();
                e.0 += item.hinge[i];
                e.1 += f64::from(u8::from(item.correct[i]));
                e.2 += 1;
                per_type[q].hinge += item.hinge[i];
                per_type[q].mse += item.mse[i];
                per_type[q].n += 1;
            }
            for (q, (l, a, n)) in batch_types {
                state.update_stats(q, l / n as f64, a / n as f64)?;
            }
            if cfg.awmtl && cfg.refresh == RefreshCadence::PerSteps && step % cfg.refresh_steps == 0 {
                state.refresh();
            }
            sum_avg += breakdown.avg_type;
            sum_fw += breakdown.freq_weighted;
            sum_total += breakdown.total;
            nb += 1;
            logs.push(StepLog {
                epoch,
                step,
                loss: breakdown,
            });
        }
        if cfg.awmtl && cfg.refresh == RefreshCadence::PerEpoch {
            state.refresh();
        } else if !cfg.awmtl {
            state.difficulty = state.compute_difficulty();
        }
        let nbf = nb.max(1) as f64;
        let epoch_rows: Vec<TelemetryRow> = present
            .iter()
            .map(|&q| {
                let a = &per_type[q];
                let k = a.n.max(1) as f64;
                TelemetryRow {
                    epoch,
                    step,
                    qtype: q,
                    loss_hinge: a.hinge / k,
                    loss_mse: a.mse / k,
                    loss_avg_type: sum_avg / nbf,
                    loss_freq_weighted: sum_fw / nbf,
                    loss_total: sum_total / nbf,
                    running_loss: state.running_loss[q],
                    running_acc: state.running_acc[q],
                    p_q: state.difficulty[q],
                    w_q: if cfg.awmtl { state.weights[q] } else { 1.0 / n_types as f64 },
                    eta_q: if cfg.awmtl { state.eta[q] } else { cfg.lr },
                }
            })
            .collect();
        if let Some((p, f)) = file.as_mut() {
            let mut block = String::new();
            for r in &epoch_rows {
                let _ = writeln!(block, "{}", r.csv());
            }
            f.write_all(block.as_bytes()).map_err(|e| Error::io(*p, e))?;
            f.flush().map_err(|e| Error::io(*p, e))?;
        }
        rows.extend(epoch_rows);
    }
    let weights = if cfg.awmtl { state.weights.clone() } else { uniform(n_types) };
    Ok(TrainOutcome {
        model,
        params,
        state,
        weights,
        telemetry: rows,
        steps: logs,
    })
}

/// Scores `records` with frozen parameters; one prediction per record.
pub fn predict_records(
    model: &ModelConfig,
    params: &Params,
    weights: &[f64],
    records: &[Record],
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&Record> = chunk.iter().collect();
        let inp = BatchInputs::from_records(&refs)?;
        let masks = if model.temporal_ar {
            vec![MaskPlan::empty(); refs.len()]
        } else {
            Vec::new()
        };
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params);
        let o = forward_batch(&mut tape, &bound, model, &inp, weights, &masks, &mut None)?;
        let scores = tape.data(o.scores);
        for (i, r) in chunk.iter().enumerate() {
            let (s, len) = inp.cand_groups[i];
            out.push(Prediction {
                id: r.question.id.clone(),
                qtype: r.question.qtype,
                predicted: predict(&scores[s..s + len]),
                answer: r.question.answer_idx,
            });
        }
    }
    Ok(out)
}
