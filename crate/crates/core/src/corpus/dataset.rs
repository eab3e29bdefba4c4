use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use super::{DatasetSplit, Lang, Sample};
use crate::schema::{CsfFrame, SchemaError, SlotName};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: {source}")]
    Label {
        path: String,
        line: usize,
        #[source]
        source: SchemaError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    text: String,
    lang: String,
    labels: BTreeMap<String, String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes one JSON object per line, LF-terminated.
pub fn write_samples(path: impl AsRef<Path>, samples: &[Sample]) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s).expect("samples serialize");
        w.write_all(line.as_bytes()).map_err(io_err(path))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<Sample>, DatasetError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        out.push(parse_line(&line).map_err(|e| e.at(&shown, i + 1))?);
    }
    Ok(out)
}

enum LineError {
    Malformed(String),
    Label(SchemaError),
}

impl LineError {
    fn at(self, path: &str, line: usize) -> DatasetError {
        match self {
            LineError::Malformed(message) => DatasetError::Malformed {
                path: path.to_string(),
                line,
                message,
            },
            LineError::Label(source) => DatasetError::Label {
                path: path.to_string(),
                line,
                source,
            },
        }
    }
}

fn parse_line(line: &str) -> Result<Sample, LineError> {
    let record: Record = serde_json::from_str(line).map_err(|e| LineError::Malformed(e.to_string()))?;
    if record.text.is_empty() {
        return Err(LineError::Malformed("empty text".into()));
    }
    let lang: Lang = record.lang.parse().map_err(LineError::Malformed)?;
    for key in record.labels.keys() {
        key.parse::<SlotName>().map_err(LineError::Label)?;
    }
    let mut labels = CsfFrame::default();
    for slot in SlotName::ALL {
        let label = record
            .labels
            .get(slot.as_str())
            .ok_or_else(|| LineError::Malformed(format!("missing slot `{slot}`")))?;
        labels.set(slot, label).map_err(LineError::Label)?;
    }
    Ok(Sample {
        text: record.text,
        lang,
        labels,
    })
}

/// Writes `train.jsonl` and `val.jsonl` into `dir`, creating it if needed.
pub fn write_dataset(split: &DatasetSplit, dir: impl AsRef<Path>) -> Result<(), DatasetError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_samples(dir.join(TRAIN_FILE), &split.train)?;
    write_samples(dir.join(VAL_FILE), &split.val)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<DatasetSplit, DatasetError> {
    let dir = dir.as_ref();
    Ok(DatasetSplit {
        train: read_samples(dir.join(TRAIN_FILE))?,
        val: read_samples(dir.join(VAL_FILE))?,
    })
}
