//! Run directories, the run manifest and atomic artifact writes.

use std::fs;
use std::path::{Path, PathBuf};

use gcma_core::numeric::Tensor2;
use gcma_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const OUTPUT_ROOT_ENV: &str = "GCMA_OUTPUT_ROOT";
pub const MANIFEST: &str = "manifest.json";
pub const REPORT: &str = "report.json";
pub const EPOCHS: &str = "epochs.csv";
pub const CHECKPOINT: &str = "model.ckpt";
pub const EMBEDDING: &str = "embedding.csv";
pub const PREDICTIONS: &str = "predictions.csv";
pub const METRICS: &str = "metrics.csv";
pub const DECISION_GRAPH: &str = "decision_graph.csv";
pub const SWEEP: &str = "sweep.csv";

/// `explicit`, else `$GCMA_OUTPUT_ROOT/<default_name>`, else `runs/<default_name>`.
pub fn run_dir(explicit: Option<&Path>, default_name: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            root.join(default_name)
        }
    }
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs `write` against a temporary path and renames the result into place.
pub fn with_atomic<F>(path: &Path, write: F) -> Result<(), CliError>
where
    F: FnOnce(&Path) -> gcma_core::Result<()>,
{
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    write(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    /// Dataset directory as given on the command line.
    pub dir: PathBuf,
    pub name: String,
    pub content_hash: String,
}

/// Everything needed to repeat a run: written before training starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub code_version: String,
    pub command: String,
    pub dataset: DatasetRef,
    pub seed: u64,
    pub config: TrainConfig,
    /// Sweep parameter and grid, for sweep runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    pub outputs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub param: String,
    pub values: Vec<f64>,
}

impl RunManifest {
    pub const FORMAT: &'static str = "gcma-run-v1";

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        if m.format != Self::FORMAT {
            return Err(CliError::Usage(format!("{}: unsupported manifest format {}", path.display(), m.format)));
        }
        Ok(m)
    }
}

fn csv_bytes<F>(fill: F) -> Result<Vec<u8>, CliError>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>,
{
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        fill(&mut w)?;
        w.flush()?;
    }
    Ok(buf)
}

/// `node_id,z0,..,z{d-1}`.
pub fn write_embedding(path: &Path, z: &Tensor2) -> Result<(), CliError> {
    let bytes = csv_bytes(|w| {
        let mut header = vec!["node_id".to_string()];
        header.extend((0..z.cols()).map(|c| format!("z{c}")));
        w.write_record(&header)?;
        for i in 0..z.rows() {
            let mut rec = vec![i.to_string()];
            rec.extend(z.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        Ok(())
    })?;
    write_atomic(path, &bytes)
}

/// `node_id,cluster[,q_cluster]`.
pub fn write_predictions(path: &Path, labels: &[usize], q_labels: Option<&[usize]>) -> Result<(), CliError> {
    let bytes = csv_bytes(|w| {
        if q_labels.is_some() {
            w.write_record(["node_id", "cluster", "q_cluster"])?;
        } else {
            w.write_record(["node_id", "cluster"])?;
        }
        for (i, l) in labels.iter().enumerate() {
            match q_labels {
                Some(q) => w.write_record([i.to_string(), l.to_string(), q[i].to_string()])?,
                None => w.write_record([i.to_string(), l.to_string()])?,
            }
        }
        Ok(())
    })?;
    write_atomic(path, &bytes)
}

pub fn write_metrics(path: &Path, rows: &[(&str, &gcma_core::metrics::EvalResult)]) -> Result<(), CliError> {
    let bytes = csv_bytes(|w| {
        w.write_record(["labels", "acc", "nmi", "ari", "k_pred", "k_true"])?;
        for (name, e) in rows {
            w.write_record([
                name.to_string(),
                e.acc.to_string(),
                e.nmi.to_string(),
                e.ari.to_string(),
                e.k_pred.to_string(),
                e.k_true.to_string(),
            ])?;
        }
        Ok(())
    })?;
    write_atomic(path, &bytes)
}

/// Reads a label column: either a `node_id,cluster,..` file (taking `column`)
/// or one integer per line.
pub fn read_label_column(path: &Path, column: &str) -> Result<Vec<usize>, CliError> {
    let text = fs::read_to_string(path)?;
    let first = text.lines().next().unwrap_or_default();
    if !first.starts_with("node_id") {
        return Ok(gcma_core::graph_io::canonical::read_labels_csv(path)?);
    }
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let idx = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| CliError::Usage(format!("{}: no `{column}` column", path.display())))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let v = rec.get(idx).unwrap_or_default();
        out.push(v.trim().parse().map_err(|_| gcma_core::Error::Parse {
            file: path.to_path_buf(),
            line: i + 2,
            msg: format!("bad label `{v}`"),
        })?);
    }
    Ok(out)
}

/// Reads an embedding CSV, with or without a `node_id` leading column.
pub fn read_embedding(path: &Path) -> Result<Tensor2, CliError> {
    let text = fs::read_to_string(path)?;
    let has_header = text.lines().next().is_some_and(|l| l.starts_with("node_id"));
    if !has_header {
        return Ok(gcma_core::graph_io::canonical::read_matrix_csv(path)?);
    }
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row: Result<Vec<f64>, _> = rec.iter().skip(1).map(|v| v.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|_| gcma_core::Error::Parse {
            file: path.to_path_buf(),
            line: i + 2,
            msg: "bad number".into(),
        })?);
    }
    if rows.is_empty() {
        return Err(gcma_core::Error::EmptyDataset(path.to_path_buf()).into());
    }
    Ok(Tensor2::from_rows(&rows)?)
}
