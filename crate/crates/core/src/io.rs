//! Line-oriented JSON files and the delivery time series CSV.
//!
//! Every reader reports failures as `path:line: message`. Blank lines are skipped.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dual::{DualEntry, DualPlan};
use crate::hwm::{HwmEntry, HwmPlan};
use crate::metrics::TimeseriesRow;
use crate::model::{AllocationGraph, Contract, SupplyNode};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: io::Error },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}: {message}", path.display())]
    Csv { path: PathBuf, message: String },
    #[error("{}: {message}", path.display())]
    Encode { path: PathBuf, message: String },
}

fn file_error(path: &Path) -> impl FnOnce(io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

/// Streams records from a JSON-lines file.
pub struct JsonlReader<T> {
    path: PathBuf,
    lines: io::Lines<BufReader<File>>,
    line: usize,
    _record: PhantomData<T>,
}

impl<T: DeserializeOwned> JsonlReader<T> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, IoError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(file_error(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            lines: BufReader::new(file).lines(),
            line: 0,
            _record: PhantomData,
        })
    }
}

impl<T: DeserializeOwned> Iterator for JsonlReader<T> {
    type Item = Result<T, IoError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = match self.lines.next()? {
                Ok(text) => text,
                Err(e) => return Some(Err(file_error(&self.path)(e))),
            };
            self.line += 1;
            if text.trim().is_empty() {
                continue;
            }
            return Some(serde_json::from_str(&text).map_err(|e| IoError::Parse {
                path: self.path.clone(),
                line: self.line,
                message: e.to_string(),
            }));
        }
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, IoError> {
    JsonlReader::open(path)?.collect()
}

/// Buffered JSON-lines output; call [`JsonlWriter::finish`] to flush.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, IoError> {
        let path = path.as_ref();
        let file = File::create(path).map_err(file_error(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<(), IoError> {
        serde_json::to_writer(&mut self.out, record).map_err(|e| IoError::Encode {
            path: self.path.clone(),
            message: e.to_string(),
        })?;
        self.out.write_all(b"\n").map_err(file_error(&self.path))
    }

    pub fn finish(mut self) -> Result<(), IoError> {
        self.out.flush().map_err(file_error(&self.path))
    }
}

pub fn write_jsonl<'a, T, I>(path: impl AsRef<Path>, records: I) -> Result<(), IoError>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let mut w = JsonlWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

/// An explicit eligibility edge from `edges.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub node: String,
    pub contract: String,
}

pub fn read_supply(path: impl AsRef<Path>) -> Result<Vec<SupplyNode>, IoError> {
    read_jsonl(path)
}

pub fn read_contracts(path: impl AsRef<Path>) -> Result<Vec<Contract>, IoError> {
    read_jsonl(path)
}

/// Builds a graph from supply and contract files; edges come from targeting unless an edge
/// file is given. The graph is not validated here.
pub fn load_graph(
    supply: impl AsRef<Path>,
    contracts: impl AsRef<Path>,
    edges: Option<&Path>,
) -> Result<AllocationGraph, IoError> {
    let supply = read_supply(supply)?;
    let contracts = read_contracts(contracts)?;
    Ok(match edges {
        None => AllocationGraph::from_targeting(supply, contracts),
        Some(path) => {
            let edges: Vec<EdgeRecord> = read_jsonl(path)?;
            AllocationGraph::with_edges(
                supply,
                contracts,
                edges.into_iter().map(|e| (e.node, e.contract)),
            )
        }
    })
}

/// One line of a plan file of either kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlanLine {
    Dual(DualEntry),
    Hwm(HwmEntry),
}

#[derive(Clone, Debug, PartialEq)]
pub enum PlanFile {
    Hwm(HwmPlan),
    Dual(DualPlan),
}

/// Reads a plan file, telling HWM and DUAL plans apart by their fields.
pub fn read_plan(path: impl AsRef<Path>) -> Result<PlanFile, IoError> {
    let path = path.as_ref();
    let mut hwm = Vec::new();
    let mut dual = Vec::new();
    for (n, line) in JsonlReader::<PlanLine>::open(path)?.enumerate() {
        match line? {
            PlanLine::Hwm(e) => hwm.push(e),
            PlanLine::Dual(e) => dual.push(e),
        }
        if !hwm.is_empty() && !dual.is_empty() {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: "plan mixes HWM and DUAL entries".into(),
            });
        }
    }
    Ok(if dual.is_empty() {
        PlanFile::Hwm(HwmPlan {
            entries: hwm,
            diagnostics: Vec::new(),
        })
    } else {
        PlanFile::Dual(DualPlan {
            entries: dual,
            ..DualPlan::default()
        })
    })
}

/// Writes entries in allocation order.
pub fn write_hwm_plan(path: impl AsRef<Path>, plan: &HwmPlan) -> Result<(), IoError> {
    write_jsonl(path, &plan.entries)
}

pub fn write_dual_plan(path: impl AsRef<Path>, plan: &DualPlan) -> Result<(), IoError> {
    write_jsonl(path, &plan.entries)
}

pub fn write_timeseries(path: impl AsRef<Path>, rows: &[TimeseriesRow]) -> Result<(), IoError> {
    let path = path.as_ref();
    let csv_error = |e: csv::Error| IoError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush().map_err(file_error(path))
}

pub fn read_timeseries(path: impl AsRef<Path>) -> Result<Vec<TimeseriesRow>, IoError> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| IoError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    r.deserialize()
        .enumerate()
        .map(|(n, row)| {
            row.map_err(|e| IoError::Parse {
                path: path.to_path_buf(),
                // Header is line 1.
                line: n + 2,
                message: e.to_string(),
            })
        })
        .collect()
}
