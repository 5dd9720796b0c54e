//! The five operator commands. Each writes into its own output directory
//! and echoes the resolved configuration there.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{predict_records, train, TrainOutcome, TrainPlan};
use crate::data::{build_dataset, read_dataset, write_dataset, Dataset, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::metrics::{build_report, canonical_json, percent, EvalReport, GeneralizationMatrix, Prediction};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, Params};
use crate::rng::{child, rng_from, substream};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TELEMETRY_FILE: &str = "telemetry.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

/// Creates `out`, refusing a nonempty existing directory unless `force`.
pub fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let nonempty = std::fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if nonempty && !force {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    write(&out.join(CONFIG_FILE), &cfg.to_toml()?)
}

fn dataset_path(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.dataset
        .clone()
        .ok_or_else(|| Error::Config("no dataset directory given".into()))
}

pub fn cmd_gendata(cfg: &RunConfig, out: &Path, force: bool) -> Result<DatasetManifest> {
    cfg.validate()?;
    prepare_out(out, force)?;
    let ds = build_dataset(&cfg.synth(), &cfg.plan(), cfg.seed)?;
    write_dataset(out, &ds)?;
    echo_config(cfg, out)?;
    Ok(ds.manifest)
}

/// Trains on `ds` and writes checkpoint, telemetry and config into `out`.
pub fn train_into(cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<TrainOutcome> {
    let outcome = train(cfg, ds, &TrainPlan::default(), Some(&out.join(TELEMETRY_FILE)))?;
    let ck = outcome.checkpoint(cfg, &ds.manifest.type_names)?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &ck, &outcome.params)?;
    echo_config(cfg, out)?;
    Ok(outcome)
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, force: bool) -> Result<TrainOutcome> {
    let ds = read_dataset(&dataset_path(cfg)?)?;
    prepare_out(out, force)?;
    train_into(cfg, &ds, out)
}

/// Refuses a checkpoint whose shapes or type list do not fit the dataset.
pub fn check_compatible(ck: &Checkpoint, m: &DatasetManifest) -> Result<()> {
    if ck.model.feature_dim != m.feature_dim {
        return Err(Error::Data(format!(
            "checkpoint expects feature width {} but the dataset has {}",
            ck.model.feature_dim, m.feature_dim
        )));
    }
    if ck.model.temporal_ar && ck.model.frames != m.frames {
        return Err(Error::Data(format!(
            "checkpoint expects {} frames per clip but the dataset has {}",
            ck.model.frames, m.frames
        )));
    }
    if ck.type_names != m.type_names {
        return Err(Error::Data(format!(
            "checkpoint types {:?} differ from dataset types {:?}",
            ck.type_names, m.type_names
        )));
    }
    Ok(())
}

/// Predictions and report for one split.
pub fn evaluate(
    cfg: &RunConfig,
    ck: &Checkpoint,
    params: &Params,
    ds: &Dataset,
    split: Split,
) -> Result<(Vec<Prediction>, EvalReport)> {
    check_compatible(ck, &ds.manifest)?;
    let preds = predict_records(&ck.model, params, &ck.type_weights, ds.split(split), cfg.eval_batch_size)?;
    let report = build_report(&preds, &ds.manifest, split, cfg.frequency_source, cfg.seed, &cfg.digest()?)?;
    Ok((preds, report))
}

pub fn write_report(out: &Path, preds: &[Prediction], report: &EvalReport) -> Result<()> {
    let mut dump = String::new();
    for p in preds {
        dump.push_str(&serde_json::to_string(p).map_err(|e| Error::Data(e.to_string()))?);
        dump.push('\n');
    }
    write(&out.join(PREDICTIONS_FILE), &dump)?;
    write(&out.join(REPORT_JSON), &report.to_json()?)?;
    write(&out.join(REPORT_TXT), &report.to_table())
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path, force: bool) -> Result<EvalReport> {
    let ck_path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("no checkpoint given".into()))?;
    let ds = read_dataset(&dataset_path(cfg)?)?;
    let ck = load_checkpoint(&ck_path)?;
    let params = ck.params.clone().ok_or_else(|| Error::Data("checkpoint has no parameters".into()))?;
    let split = Split::parse(&cfg.eval_split)?;
    let (preds, report) = evaluate(cfg, &ck, &params, &ds, split)?;
    prepare_out(out, force)?;
    write_report(out, &preds, &report)?;
    echo_config(cfg, out)?;
    Ok(report)
}

/// One corner of the toggle lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Full,
    NoQtg,
    NoTemporal,
    NoAwmtl,
}

impl Arm {
    pub const LATTICE: [Arm; 4] = [Arm::Full, Arm::NoQtg, Arm::NoTemporal, Arm::NoAwmtl];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoQtg => "no_qtg_attention",
            Arm::NoTemporal => "no_temporal_ar",
            Arm::NoAwmtl => "no_awmtl",
        }
    }

    /// `cfg` with every mechanism on except the one this arm removes.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        c.qtg_attention = self != Arm::NoQtg;
        c.temporal_ar = self != Arm::NoTemporal;
        c.awmtl = self != Arm::NoAwmtl;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub type_names: Vec<String>,
    pub results: Vec<ArmResult>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let w = self.type_names.iter().map(String::len).max().unwrap_or(0).max(7);
        let mut s = format!("{:<18} {:>6}", "arm", "seed");
        for n in &self.type_names {
            let _ = write!(s, " {n:>w$}");
        }
        let _ = writeln!(s, " {:>7} {:>7} {:>7}", "Avg", "IFWAA", "EWAA");
        for r in &self.results {
            let _ = write!(s, "{:<18} {:>6}", r.arm.name(), r.seed);
            for q in 0..self.type_names.len() {
                let acc = r.report.per_type.iter().find(|t| t.qtype == q).map(|t| percent(t.accuracy));
                let _ = write!(s, " {:>w$}", acc.unwrap_or_else(|| "-".into()));
            }
            let _ = writeln!(
                s,
                " {:>7} {:>7} {:>7}",
                percent(r.report.avg_acc),
                percent(r.report.ifwaa),
                percent(r.report.ewaa)
            );
        }
        s
    }
}

/// Trains `cfg` on `ds` and scores the configured evaluation split.
pub fn run_arm(cfg: &RunConfig, ds: &Dataset, out: Option<&Path>) -> Result<(TrainOutcome, EvalReport)> {
    let outcome = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            train_into(cfg, ds, dir)?
        }
        None => train(cfg, ds, &TrainPlan::default(), None)?,
    };
    let ck = outcome.checkpoint(cfg, &ds.manifest.type_names)?;
    let (preds, report) = evaluate(cfg, &ck, &outcome.params, ds, Split::parse(&cfg.eval_split)?)?;
    if let Some(dir) = out {
        write_report(dir, &preds, &report)?;
    }
    Ok((outcome, report))
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path, force: bool) -> Result<AblationReport> {
    let ds = read_dataset(&dataset_path(cfg)?)?;
    prepare_out(out, force)?;
    echo_config(cfg, out)?;
    let mut results = Vec::new();
    let mut curves = String::from("arm,seed,epoch,qtype,loss_hinge,running_loss\n");
    for &seed in &cfg.ablation_seeds {
        for arm in Arm::LATTICE {
            let mut c = arm.apply(cfg);
            c.seed = seed;
            let dir = out.join(format!("{}-seed{seed}", arm.name()));
            let (outcome, report) = run_arm(&c, &ds, Some(&dir))?;
            for r in &outcome.telemetry {
                let _ = writeln!(
                    curves,
                    "{},{seed},{},{},{},{}",
                    arm.name(),
                    r.epoch,
                    r.qtype,
                    r.loss_hinge,
                    r.running_loss
                );
            }
            results.push(ArmResult { arm, seed, report });
        }
    }
    let report = AblationReport {
        type_names: ds.manifest.type_names.clone(),
        results,
    };
    write(&out.join("loss_curves.csv"), &curves)?;
    write(&out.join("ablation.json"), &canonical_json(&report)?)?;
    write(&out.join("ablation.txt"), &report.to_table())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub matrix: GeneralizationMatrix,
    pub summaries: Vec<crate::metrics::ColumnSummary>,
    /// Accuracy of each column's model on its own held-out training items.
    pub validation_accuracy: Vec<f64>,
    pub steps_per_column: usize,
}

/// Trains one model per question type and scores each on every type's
/// test items.
pub fn generalize(cfg: &RunConfig, ds: &Dataset, out: Option<&Path>) -> Result<GeneralizationReport> {
    let m = &ds.manifest;
    let n = m.num_types;
    if n < 2 {
        return Err(Error::Data("generalization needs at least two question types".into()));
    }
    let mut by_type: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, r) in ds.train.iter().enumerate() {
        by_type[r.qtype()].push(i);
    }
    let split_seed = substream(cfg.seed, "generalize");
    let mut splits: Vec<Option<(Vec<usize>, Vec<usize>)>> = Vec::new();
    let mut skipped = Vec::new();
    for (q, items) in by_type.iter().enumerate() {
        if items.len() < 4 {
            skipped.push((q, format!("{} training items, at least 4 needed", items.len())));
            splits.push(None);
            continue;
        }
        let mut ix = items.clone();
        ix.shuffle(&mut rng_from(child(split_seed, q as u64)));
        let n_val = ((items.len() as f64 * cfg.generalize_val_fraction).round() as usize).clamp(1, items.len() - 1);
        let val = ix.split_off(items.len() - n_val);
        splits.push(Some((ix, val)));
    }
    let largest = splits.iter().flatten().map(|(t, _)| t.len()).max().unwrap_or(0);
    let steps = if cfg.generalize_steps > 0 {
        cfg.generalize_steps
    } else {
        cfg.epochs * largest.div_ceil(cfg.batch_size)
    };

    let split = Split::parse(&cfg.eval_split)?;
    let mut columns = Vec::new();
    let mut cells = vec![Vec::new(); n];
    let mut val_acc = Vec::new();
    for (q, s) in splits.iter().enumerate() {
        let Some((train_ix, val_ix)) = s else { continue };
        let telemetry = out.map(|dir| dir.join(format!("telemetry-{}.csv", m.type_names[q])));
        let outcome = train(
            cfg,
            ds,
            &TrainPlan {
                items: Some(train_ix),
                steps: Some(steps),
            },
            telemetry.as_deref(),
        )?;
        let preds = predict_records(&outcome.model, &outcome.params, &outcome.weights, ds.split(split), cfg.eval_batch_size)?;
        for (row, cell) in cells.iter_mut().enumerate() {
            let mine: Vec<&Prediction> = preds.iter().filter(|p| p.qtype == row).collect();
            cell.push((mine.iter().filter(|p| p.correct()).count(), mine.len()));
        }
        let val: Vec<_> = val_ix.iter().map(|&i| ds.train[i].clone()).collect();
        let vp = predict_records(&outcome.model, &outcome.params, &outcome.weights, &val, cfg.eval_batch_size)?;
        val_acc.push(vp.iter().filter(|p| p.correct()).count() as f64 / vp.len() as f64);
        columns.push(q);
    }
    if columns.is_empty() {
        return Err(Error::Data("no question type has enough training items".into()));
    }
    let matrix = GeneralizationMatrix {
        names: m.type_names.clone(),
        columns,
        cells,
        skipped,
    };
    Ok(GeneralizationReport {
        summaries: matrix.summaries()?,
        matrix,
        validation_accuracy: val_acc,
        steps_per_column: steps,
    })
}

pub fn cmd_generalize(cfg: &RunConfig, out: &Path, force: bool) -> Result<GeneralizationReport> {
    let ds = read_dataset(&dataset_path(cfg)?)?;
    prepare_out(out, force)?;
    echo_config(cfg, out)?;
    let report = generalize(cfg, &ds, Some(out))?;
    write(&out.join("matrix.csv"), &report.matrix.to_csv()?)?;
    write(&out.join("matrix.txt"), &report.matrix.to_table()?)?;
    write(&out.join("generalize.json"), &canonical_json(&report)?)?;
    Ok(report)
}
