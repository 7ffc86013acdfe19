//! JSON-lines datasets: a header line, then one example per line.

use std::fs;
use std::io::Write;
use std::path::Path;

use overfill_core::corpus::{ChatExample, TaskKind};
use serde::{Deserialize, Serialize};

use crate::config::parse_json;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub kind: Vec<TaskKind>,
    pub seed: u64,
    pub count: usize,
}

pub fn write(path: &Path, header: &DatasetHeader, examples: &[ChatExample]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = Vec::new();
    for line in std::iter::once(serde_json::to_string(header))
        .chain(examples.iter().map(serde_json::to_string))
    {
        writeln!(out, "{}", line.expect("serializable")).expect("in-memory write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(DatasetHeader, Vec<ChatExample>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: DatasetHeader = parse_json(lines.next().ok_or_else(|| Error::format(path, "empty dataset"))?, path)?;
    let examples = lines
        .enumerate()
        .map(|(i, line)| {
            parse_json::<ChatExample>(line, path).map_err(|e| Error::format(path, format!("line {}: {e}", i + 2)))
        })
        .collect::<Result<Vec<_>>>()?;
    if examples.len() != header.count {
        return Err(Error::format(
            path,
            format!("header says {} examples, found {}", header.count, examples.len()),
        ));
    }
    Ok((header, examples))
}
