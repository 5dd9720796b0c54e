//! Per-type accuracy, equal-weight and inverse-frequency averages, eval
//! reports and the cross-type generalization matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Split};
use crate::error::{Error, Result};

/// One scored item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub qtype: usize,
    pub predicted: usize,
    pub answer: usize,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        self.predicted == self.answer
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TypeAccuracy {
    pub acc: BTreeMap<usize, f64>,
    pub freq: BTreeMap<usize, f64>,
    pub counts: BTreeMap<usize, (usize, usize)>,
}

/// Accuracy and frequency of each type from `(qtype, predicted, answer)`.
pub fn per_type_accuracy(items: &[(usize, usize, usize)]) -> Result<TypeAccuracy> {
    if items.is_empty() {
        return Err(Error::Contract("no predictions to score".into()));
    }
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &(q, p, a) in items {
        let c = counts.entry(q).or_default();
        c.0 += usize::from(p == a);
        c.1 += 1;
    }
    let total = items.len() as f64;
    Ok(TypeAccuracy {
        acc: counts.iter().map(|(&q, &(c, n))| (q, c as f64 / n as f64)).collect(),
        freq: counts.iter().map(|(&q, &(_, n))| (q, n as f64 / total)).collect(),
        counts,
    })
}

/// Unweighted mean of the per-type accuracies.
pub fn ewaa(acc: &BTreeMap<usize, f64>) -> Result<f64> {
    if acc.is_empty() {
        return Err(Error::Contract("no accuracies to average".into()));
    }
    Ok(acc.values().sum::<f64>() / acc.len() as f64)
}

/// `Σ(acc_i / f_i) / Σ(1 / f_i)`.
///
/// Inverse frequencies are taken relative to the smallest frequency, which
/// leaves the ratio unchanged and makes equal frequencies give exactly the
/// plain mean.
pub fn ifwaa(acc: &BTreeMap<usize, f64>, freq: &BTreeMap<usize, f64>) -> Result<f64> {
    if acc.is_empty() {
        return Err(Error::Contract("no accuracies to average".into()));
    }
    let mut fs = Vec::with_capacity(acc.len());
    for q in acc.keys() {
        let f = *freq
            .get(q)
            .ok_or_else(|| Error::Contract(format!("no frequency for type {q}")))?;
        if !(f > 0.0) {
            return Err(Error::Contract(format!("type {q} has frequency {f}")));
        }
        fs.push(f);
    }
    let fmin = fs.iter().copied().fold(f64::INFINITY, f64::min);
    let (mut num, mut den) = (0.0, 0.0);
    for (a, f) in acc.values().zip(&fs) {
        let r = fmin / f;
        num += a * r;
        den += r;
    }
    Ok(num / den)
}

/// Percentage with one decimal, halves rounded away from zero.
pub fn percent(x: f64) -> String {
    format!("{:.1}", (x * 1000.0).round() / 10.0)
}

/// Where type frequencies for the inverse-frequency average come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FrequencySource {
    /// The split being scored.
    #[default]
    EvalSplit,
    /// All splits listed in the manifest.
    Manifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeRow {
    pub qtype: usize,
    pub name: String,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub frequency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub seed: u64,
    pub config_digest: String,
    pub items: usize,
    pub per_type: Vec<TypeRow>,
    pub avg_acc: f64,
    pub ifwaa: f64,
    pub ewaa: f64,
    pub frequency_source: FrequencySource,
}

/// FNV-1a digest of a byte string, as 16 hex digits.
pub fn digest(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn build_report(
    predictions: &[Prediction],
    manifest: &DatasetManifest,
    split: Split,
    source: FrequencySource,
    seed: u64,
    config_digest: &str,
) -> Result<EvalReport> {
    if let Some(p) = predictions.iter().find(|p| p.qtype >= manifest.num_types) {
        return Err(Error::Contract(format!(
            "item {} has type {} but the manifest lists {} types",
            p.id, p.qtype, manifest.num_types
        )));
    }
    let items: Vec<(usize, usize, usize)> = predictions.iter().map(|p| (p.qtype, p.predicted, p.answer)).collect();
    let ta = per_type_accuracy(&items)?;
    let freq = match source {
        FrequencySource::EvalSplit => ta.freq.clone(),
        FrequencySource::Manifest => {
            let all = manifest.overall_frequencies();
            ta.acc.keys().map(|&q| (q, all[q])).collect()
        }
    };
    let per_type = ta
        .counts
        .iter()
        .map(|(&q, &(c, n))| TypeRow {
            qtype: q,
            name: manifest.type_names[q].clone(),
            count: n,
            correct: c,
            accuracy: ta.acc[&q],
            frequency: freq[&q],
        })
        .collect();
    let correct = predictions.iter().filter(|p| p.correct()).count();
    Ok(EvalReport {
        split: split.name().to_string(),
        seed,
        config_digest: config_digest.to_string(),
        items: predictions.len(),
        per_type,
        avg_acc: correct as f64 / predictions.len() as f64,
        ifwaa: ifwaa(&ta.acc, &freq)?,
        ewaa: ewaa(&ta.acc)?,
        frequency_source: source,
    })
}

/// Pretty JSON with keys sorted at every level.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Contract(format!("serialise: {e}")))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Contract(format!("serialise: {e}")))?;
    s.push('\n');
    Ok(s)
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn to_table(&self) -> String {
        let w = self.per_type.iter().map(|r| r.name.len()).max().unwrap_or(4).max(8);
        let mut s = String::new();
        let _ = writeln!(s, "split {}  items {}  seed {}", self.split, self.items, self.seed);
        let _ = writeln!(s, "{:<w$}  {:>6}  {:>7}  {:>6}", "type", "count", "acc%", "freq%");
        for r in &self.per_type {
            let _ = writeln!(
                s,
                "{:<w$}  {:>6}  {:>7}  {:>6}",
                r.name,
                r.count,
                percent(r.accuracy),
                percent(r.frequency)
            );
        }
        for (k, v) in [("Avg", self.avg_acc), ("IFWAA", self.ifwaa), ("EWAA", self.ewaa)] {
            let _ = writeln!(s, "{:<w$}  {:>6}  {:>7}", k, "", percent(v));
        }
        s
    }
}

/// Accuracy of each model trained on one type, evaluated on every type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationMatrix {
    pub names: Vec<String>,
    /// Training types, one per column.
    pub columns: Vec<usize>,
    /// `cells[row][col] = (correct, count)`; rows are evaluated types.
    pub cells: Vec<Vec<(usize, usize)>>,
    /// Types left out as training columns, with the reason.
    pub skipped: Vec<(usize, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub avg: f64,
    pub ifwaa: f64,
    pub ewaa: f64,
}

impl GeneralizationMatrix {
    pub fn accuracy(&self, row: usize, col: usize) -> f64 {
        let (c, n) = self.cells[row][col];
        if n == 0 {
            0.0
        } else {
            c as f64 / n as f64
        }
    }

    pub fn summaries(&self) -> Result<Vec<ColumnSummary>> {
        let rows: Vec<usize> = (0..self.names.len()).filter(|&r| self.cells[r].iter().any(|c| c.1 > 0)).collect();
        (0..self.columns.len())
            .map(|col| {
                let total: usize = rows.iter().map(|&r| self.cells[r][col].1).sum();
                let correct: usize = rows.iter().map(|&r| self.cells[r][col].0).sum();
                let acc: BTreeMap<usize, f64> = rows.iter().map(|&r| (r, self.accuracy(r, col))).collect();
                let freq: BTreeMap<usize, f64> = rows
                    .iter()
                    .map(|&r| (r, self.cells[r][col].1 as f64 / total as f64))
                    .collect();
                Ok(ColumnSummary {
                    avg: correct as f64 / total as f64,
                    ifwaa: ifwaa(&acc, &freq)?,
                    ewaa: ewaa(&acc)?,
                })
            })
            .collect()
    }

    /// `1 + ` the number of entries in row `t` strictly above the entry of
    /// the model trained on `t`.
    pub fn diagonal_rank(&self, t: usize) -> Option<usize> {
        let col = self.columns.iter().position(|&c| c == t)?;
        let d = self.accuracy(t, col);
        Some(1 + (0..self.columns.len()).filter(|&c| self.accuracy(t, c) > d).count())
    }

    /// Rows are evaluated types, columns training types; summary rows
    /// follow the matrix.
    pub fn to_csv(&self) -> Result<String> {
        let mut s = String::from("eval_type");
        for &c in &self.columns {
            let _ = write!(s, ",{}", self.names[c]);
        }
        s.push('\n');
        for (r, name) in self.names.iter().enumerate() {
            s.push_str(name);
            for col in 0..self.columns.len() {
                let _ = write!(s, ",{}", self.accuracy(r, col));
            }
            s.push('\n');
        }
        let sums = self.summaries()?;
        for (label, f) in [
            ("Avg", (|c: &ColumnSummary| c.avg) as fn(&ColumnSummary) -> f64),
            ("IFWAA", |c| c.ifwaa),
            ("EWAA", |c| c.ewaa),
        ] {
            s.push_str(label);
            for c in &sums {
                let _ = write!(s, ",{}", f(c));
            }
            s.push('\n');
        }
        Ok(s)
    }

    pub fn to_table(&self) -> Result<String> {
        let rows: Vec<(String, Vec<f64>)> = parse_matrix_csv(&self.to_csv()?)?.1;
        let header: Vec<String> = self.columns.iter().map(|&c| self.names[c].clone()).collect();
        Ok(render_matrix(&header, &rows))
    }
}

/// Reads a matrix CSV back as (column names, labelled rows).
pub fn parse_matrix_csv(text: &str) -> Result<(Vec<String>, Vec<(String, Vec<f64>)>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Data("empty matrix file".into()))?;
    let cols: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut it = line.split(',');
        let label = it.next().unwrap_or_default().to_string();
        let vals = it
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Data(format!("matrix line {}: {e}", i + 2)))?;
        if vals.len() != cols.len() {
            return Err(Error::Data(format!("matrix line {} has {} values", i + 2, vals.len())));
        }
        rows.push((label, vals));
    }
    Ok((cols, rows))
}

/// Aligned text table of percentages for a parsed matrix.
pub fn render_matrix(cols: &[String], rows: &[(String, Vec<f64>)]) -> String {
    let lw = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(9);
    let cw = cols.iter().map(String::len).max().unwrap_or(0).max(6);
    let mut s = format!("{:<lw$}", "eval\\train");
    for c in cols {
        let _ = write!(s, "  {c:>cw$}");
    }
    s.push('\n');
    for (label, vals) in rows {
        let _ = write!(s, "{label:<lw$}");
        for v in vals {
            let _ = write!(s, "  {:>cw$}", percent(*v));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percent_rounds_half_away() {
        assert_eq!(percent(0.4745), "47.5");
        assert_eq!(percent(0.0), "0.0");
        assert_eq!(percent(1.0), "100.0");
    }

    #[test]
    fn rank_counts_strictly_greater() {
        let m = GeneralizationMatrix {
            names: vec!["a".into(), "b".into()],
            columns: vec![0, 1],
            cells: vec![vec![(5, 10), (5, 10)], vec![(9, 10), (2, 10)]],
            skipped: vec![],
        };
        assert_eq!(m.diagonal_rank(0), Some(1));
        assert_eq!(m.diagonal_rank(1), Some(2));
    }
}
