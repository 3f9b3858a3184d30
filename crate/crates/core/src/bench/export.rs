//! Task embeddings as CSV and allocation histograms as JSON.
//!
//! CSV columns: `task_id,layer,site,e0,..,e{h-1}`, one row per task per MoRE
//! site, values written with 17 significant digits so they parse back to the
//! same `f64`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transformer::{Model, Site};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub task: usize,
    pub layer: usize,
    pub site: Site,
    pub values: Vec<f64>,
}

pub fn embeddings_csv(model: &Model) -> Result<String> {
    let mut out = String::new();
    let mut header_done = false;
    for (layer, site, proj) in model.sites() {
        let Some(m) = proj.as_more() else { continue };
        let table = model.params.get(m.embeddings.table);
        if !header_done {
            out.push_str("task_id,layer,site");
            for k in 0..table.cols() {
                write!(out, ",e{k}").unwrap();
            }
            out.push('\n');
            header_done = true;
        }
        for task in 0..m.num_tasks {
            let row = table.row_slice(if table.rows() == 1 { 0 } else { task });
            write!(out, "{task},{layer},{}", site.name()).unwrap();
            for v in row {
                write!(out, ",{v:.16e}").unwrap();
            }
            out.push('\n');
        }
    }
    if !header_done {
        return Err(Error::InvalidArgument("model has no MoRE sites to export".into()));
    }
    Ok(out)
}

pub fn export_embeddings(model: &Model, path: &Path) -> Result<usize> {
    let csv = embeddings_csv(model)?;
    std::fs::write(path, &csv)?;
    Ok(csv.lines().count() - 1)
}

pub fn parse_embeddings_csv(text: &str) -> Result<Vec<EmbeddingRow>> {
    let bad = |line: usize, what: &str| Error::InvalidArgument(format!("embeddings CSV line {line}: {what}"));
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Empty("embeddings CSV"))?;
    if !header.starts_with("task_id,layer,site") {
        return Err(bad(1, "unexpected header"));
    }
    let width = header.split(',').count() - 3;
    let mut rows = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width + 3 {
            return Err(bad(i + 1, "wrong number of fields"));
        }
        let task = fields[0].parse().map_err(|_| bad(i + 1, "task_id"))?;
        let layer = fields[1].parse().map_err(|_| bad(i + 1, "layer"))?;
        let site = Site::parse(fields[2]).ok_or_else(|| bad(i + 1, "site"))?;
        let values = fields[3..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad(i + 1, "value")))
            .collect::<Result<_>>()?;
        rows.push(EmbeddingRow {
            task,
            layer,
            site,
            values,
        });
    }
    Ok(rows)
}

pub fn import_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    parse_embeddings_csv(&std::fs::read_to_string(path)?)
}

/// Task × rank selection counts with labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub tasks: Vec<String>,
    pub ranks: Vec<usize>,
    pub counts: Vec<Vec<u64>>,
}

pub fn write_allocation(report: &AllocationReport, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}
