//! Dataset files: `manifest.json` plus one JSON Lines file per split.

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::ser::{CompactFormatter, Formatter};

use super::{Dataset, DatasetManifest, FeatureClip, Record, Split, TypedQuestion};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Row {
    id: String,
    qtype: usize,
    frames: Vec<Vec<f64>>,
    question_vec: Vec<f64>,
    candidates: Vec<Vec<f64>>,
    answer_idx: usize,
}

/// Compact JSON with every float as 17 significant digits.
struct SeventeenDigits;

impl Formatter for SeventeenDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        CompactFormatter.write_f32(w, value)
    }
}

pub(crate) fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.name()))
}

fn record_line(r: &Record) -> Result<Vec<u8>> {
    let clip = &r.clip;
    let row = Row {
        id: r.question.id.clone(),
        qtype: r.question.qtype,
        frames: (0..clip.len()).map(|i| clip.frame(i).to_vec()).collect(),
        question_vec: r.question.question_vec.clone(),
        candidates: r.question.candidates.clone(),
        answer_idx: r.question.answer_idx,
    };
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SeventeenDigits);
    row.serialize(&mut ser)
        .map_err(|e| Error::Data(format!("serialising {}: {e}", r.question.id)))?;
    buf.push(b'\n');
    Ok(buf)
}

fn parse_line(text: &str) -> std::result::Result<Record, String> {
    let row: Row = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let t = row.frames.len();
    let d = row.frames.first().map_or(0, Vec::len);
    if row.frames.iter().any(|f| f.len() != d) {
        return Err("ragged frames".into());
    }
    let clip = FeatureClip::new(row.frames.concat(), t, d).map_err(|e| e.to_string())?;
    Ok(Record {
        clip,
        question: TypedQuestion {
            id: row.id,
            qtype: row.qtype,
            question_vec: row.question_vec,
            candidates: row.candidates,
            answer_idx: row.answer_idx,
        },
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the dataset into `dir`, which must exist.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    let mut manifest = serde_json::to_vec_pretty(&ds.manifest)
        .map_err(|e| Error::Data(format!("serialising manifest: {e}")))?;
    manifest.push(b'\n');
    write_file(&dir.join(MANIFEST), &manifest)?;
    for split in Split::ALL {
        let path = split_path(dir, split);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for r in ds.split(split) {
            w.write_all(&record_line(r)?).map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Load {
        path: path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Load {
            path,
            line: 1,
            msg: format!(
                "format version {} is not the supported version {FORMAT_VERSION}",
                m.format_version
            ),
        });
    }
    if m.type_names.len() != m.num_types {
        return Err(Error::Load {
            path,
            line: 1,
            msg: "type_names length differs from num_types".into(),
        });
    }
    Ok(m)
}

fn read_split(path: &Path, m: &DatasetManifest, split: Split) -> Result<Vec<Record>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let load = |line: usize, msg: String| Error::Load {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    let mut seen = vec![0usize; m.num_types];
    let mut last = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let n = i + 1;
        last = n;
        let text = line.map_err(|e| load(n, e.to_string()))?;
        let rec = parse_line(&text).map_err(|msg| load(n, msg))?;
        rec.validate(m.num_types, m.frames, m.feature_dim)
            .map_err(|e| load(n, e.to_string()))?;
        seen[rec.qtype()] += 1;
        out.push(rec);
    }
    if seen != m.counts(split) {
        return Err(load(
            last,
            format!(
                "per-type counts {seen:?} disagree with the manifest's {:?}",
                m.counts(split)
            ),
        ));
    }
    Ok(out)
}

/// Reads and validates a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let train = read_split(&split_path(dir, Split::Train), &manifest, Split::Train)?;
    let val = read_split(&split_path(dir, Split::Val), &manifest, Split::Val)?;
    let test = read_split(&split_path(dir, Split::Test), &manifest, Split::Test)?;
    Ok(Dataset {
        manifest,
        train,
        val,
        test,
    })
}
