//! Reader for the Planetoid citation text format.
//!
//! `.content`: one node per line, `<paper id> <feature>... <class label>`.
//! `.cites`: one citation per line, `<cited id> <citing id>`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph_io::graph::{symmetric_adjacency, Graph};
use crate::numeric::Tensor2;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Citations naming an id absent from the content file.
    pub dropped_unknown: usize,
    pub dropped_self: usize,
    /// Repeated citations between an already linked pair.
    pub merged_duplicates: usize,
    pub class_names: Vec<String>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { file: path.to_path_buf(), line, msg: msg.into() }
}

pub fn load_planetoid(content_path: &Path, cites_path: &Path) -> Result<(Graph, LoadReport)> {
    let content = fs::read_to_string(content_path)?;
    let cites = fs::read_to_string(cites_path)?;

    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    let mut width: Option<usize> = None;
    for (lineno, line) in content.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() < 3 {
            return Err(parse_err(content_path, lineno, "expected `id features... label`"));
        }
        let feats = &tokens[1..tokens.len() - 1];
        match width {
            None => width = Some(feats.len()),
            Some(w) if w != feats.len() => {
                return Err(parse_err(content_path, lineno, format!("{} features, expected {w}", feats.len())));
            }
            Some(_) => {}
        }
        for tok in feats {
            let v: f64 = tok.parse().map_err(|_| parse_err(content_path, lineno, format!("bad feature `{tok}`")))?;
            if !v.is_finite() {
                return Err(parse_err(content_path, lineno, format!("non-finite feature `{tok}`")));
            }
            rows.push(v);
        }
        let next = ids.len();
        if ids.insert(tokens[0].to_string(), next).is_some() {
            return Err(parse_err(content_path, lineno, format!("duplicate node id `{}`", tokens[0])));
        }
        raw_labels.push(tokens[tokens.len() - 1].to_string());
    }
    let n = ids.len();
    if n == 0 {
        return Err(Error::EmptyDataset(content_path.to_path_buf()));
    }
    let d = width.unwrap_or(0);

    let class_names: Vec<String> = raw_labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let class_of: HashMap<&str, usize> = class_names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|s| class_of[s.as_str()]).collect();

    let mut report = LoadReport { class_names, ..Default::default() };
    let mut edges = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in cites.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 2 {
            return Err(parse_err(cites_path, lineno, "expected `cited citing`"));
        }
        let (Some(&a), Some(&b)) = (ids.get(tokens[0]), ids.get(tokens[1])) else {
            report.dropped_unknown += 1;
            continue;
        };
        if a == b {
            report.dropped_self += 1;
            continue;
        }
        if !seen.insert((a.min(b), a.max(b))) {
            report.merged_duplicates += 1;
            continue;
        }
        edges.push((a, b, 1.0));
    }
    let adj = symmetric_adjacency(n, edges)?;
    let features = Tensor2::from_vec(n, d, rows)?;
    let name = content_path.file_stem().and_then(|s| s.to_str()).unwrap_or("planetoid").to_string();
    Ok((Graph::new(name, adj, features, Some(labels))?, report))
}
