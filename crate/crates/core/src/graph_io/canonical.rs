//! Canonical on-disk dataset layout.
//!
//! ```text
//! <dir>/header.json   {"format":"gcma-dataset","version":1,"name":..,"n":..,"d_in":..,"true_k":..}\n
//! <dir>/features.csv  n lines of d_in comma-separated numbers, no header
//! <dir>/edges.csv     "source,target,weight" header, then one line per undirected
//!                     edge with source < target, sorted by (source, target)
//! <dir>/labels.csv    n lines with one class index each (only when labels exist)
//! ```
//!
//! Numbers are written in shortest round-trip decimal form, lines end in `\n`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph_io::graph::{symmetric_adjacency, Graph};
use crate::numeric::Tensor2;

pub const FORMAT: &str = "gcma-dataset";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub n: usize,
    pub d_in: usize,
    pub true_k: Option<usize>,
}

fn features_csv(features: &Tensor2) -> String {
    let mut out = String::with_capacity(features.len() * 2);
    for r in 0..features.rows() {
        for (c, v) in features.row(r).iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

fn edges_csv(graph: &Graph) -> String {
    let mut out = String::from("source,target,weight\n");
    for (a, b, w) in graph.undirected_edges() {
        out.push_str(&format!("{a},{b},{w}\n"));
    }
    out
}

fn labels_csv(labels: &[usize]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(body.as_bytes())?;
    Ok(())
}

pub fn write_dataset(graph: &Graph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = DatasetHeader {
        format: FORMAT.into(),
        version: VERSION,
        name: graph.name.clone(),
        n: graph.n(),
        d_in: graph.d_in(),
        true_k: graph.true_k(),
    };
    write_file(&dir.join("header.json"), &(serde_json::to_string(&header)? + "\n"))?;
    write_file(&dir.join("features.csv"), &features_csv(graph.features()))?;
    write_file(&dir.join("edges.csv"), &edges_csv(graph))?;
    let labels_path = dir.join("labels.csv");
    match graph.labels() {
        Some(labels) => write_file(&labels_path, &labels_csv(labels))?,
        None if labels_path.exists() => fs::remove_file(labels_path)?,
        None => {}
    }
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse { file: path.to_path_buf(), line, msg: e.to_string() }
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, field: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Parse { file: path.to_path_buf(), line, msg: format!("bad value `{field}`") })
}

/// Dense numeric CSV without header.
pub fn read_matrix_csv(path: &Path) -> Result<Tensor2> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(|e| csv_err(path, e))?;
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(rows + 1, |p| p.line() as usize);
        if cols.is_some_and(|c| c != rec.len()) {
            return Err(Error::Parse { file: path.into(), line, msg: "ragged row".into() });
        }
        cols = Some(rec.len());
        for field in rec.iter() {
            let v: f64 = parse_field(path, line, field)?;
            if !v.is_finite() {
                return Err(Error::Parse { file: path.into(), line, msg: format!("non-finite value `{field}`") });
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    Tensor2::from_vec(rows, cols.unwrap_or(0), data)
}

/// Edge list with a `source,target[,weight]` header.
pub fn read_edges_csv(path: &Path, n: usize) -> Result<Vec<(usize, usize, f64)>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| csv_err(path, e))?;
    let mut edges = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() < 2 || rec.len() > 3 {
            return Err(Error::Parse { file: path.into(), line, msg: "expected source,target[,weight]".into() });
        }
        let a: usize = parse_field(path, line, &rec[0])?;
        let b: usize = parse_field(path, line, &rec[1])?;
        let w: f64 = if rec.len() == 3 { parse_field(path, line, &rec[2])? } else { 1.0 };
        if a >= n || b >= n {
            return Err(Error::Parse { file: path.into(), line, msg: format!("node index out of range for n={n}") });
        }
        edges.push((a, b, w));
    }
    Ok(edges)
}

/// One label per line; arbitrary integers are remapped to `0..k` in sorted order.
pub fn read_labels_csv(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    let mut raw = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        raw.push(parse_field::<i64>(path, i + 1, line)?);
    }
    let mut uniq = raw.clone();
    uniq.sort_unstable();
    uniq.dedup();
    Ok(raw.iter().map(|v| uniq.binary_search(v).expect("present")).collect())
}

pub fn read_header(dir: &Path) -> Result<DatasetHeader> {
    let path = dir.join("header.json");
    let header: DatasetHeader = serde_json::from_str(&fs::read_to_string(&path)?)?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Parse {
            file: path,
            line: 1,
            msg: format!("unsupported dataset format {} v{}", header.format, header.version),
        });
    }
    Ok(header)
}

pub fn read_dataset(dir: &Path) -> Result<Graph> {
    let header = read_header(dir)?;
    let features_path = dir.join("features.csv");
    let features = if header.n == 0 {
        Tensor2::zeros(0, header.d_in)
    } else {
        read_matrix_csv(&features_path)?
    };
    if features.shape() != (header.n, header.d_in) {
        return Err(Error::Parse {
            file: features_path,
            line: 0,
            msg: format!("features {:?} disagree with header ({}, {})", features.shape(), header.n, header.d_in),
        });
    }
    let edges = read_edges_csv(&dir.join("edges.csv"), header.n)?;
    let adj = symmetric_adjacency(header.n, edges)?;
    let labels_path = dir.join("labels.csv");
    let labels = if labels_path.exists() { Some(read_labels_csv(&labels_path)?) } else { None };
    let graph = Graph::new(header.name.clone(), adj, features, labels)?;
    if graph.true_k() != header.true_k {
        return Err(Error::Parse {
            file: dir.join("header.json"),
            line: 1,
            msg: format!("true_k {:?} disagrees with labels {:?}", header.true_k, graph.true_k()),
        });
    }
    Ok(graph)
}

/// Files that make up a dataset directory, in hashing order.
pub fn dataset_files(dir: &Path) -> Vec<PathBuf> {
    ["header.json", "features.csv", "edges.csv", "labels.csv"]
        .iter()
        .map(|f| dir.join(f))
        .filter(|p| p.exists())
        .collect()
}

/// SHA-256 over each file's name and bytes, hex encoded.
pub fn content_hash(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for path in dataset_files(dir) {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update(fs::read(&path)?);
    }
    Ok(hex::encode(hasher.finalize()))
}
