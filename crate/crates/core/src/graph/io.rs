//! Directory format:
//!
//! ```text
//! graph.json     {"num_nodes", "num_features", "num_classes", "multilabel"}
//! edges.tsv      one undirected edge per line, two tab-separated 0-based ids
//! features.csv   N lines of d comma-separated reals
//! labels.csv     N lines: a class index, or C comma-separated 0/1 flags
//! masks.json     {"train": [...], "val": [...], "test": [...]}
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GraphDataset, Labels, Masks, NormalizeOptions};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

pub const GRAPH_FILE: &str = "graph.json";
pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const MASKS_FILE: &str = "masks.json";

#[derive(Debug, Serialize, Deserialize)]
struct GraphMeta {
    num_nodes: usize,
    num_features: usize,
    num_classes: usize,
    multilabel: bool,
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::parse(path, 0, "missing file")
        } else {
            Error::io(path, e)
        }
    })
}

/// Loads a dataset with the default normalization (symmetric, self-loops).
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<GraphDataset> {
    load_dataset_with(dir, NormalizeOptions::default())
}

pub fn load_dataset_with(dir: impl AsRef<Path>, norm: NormalizeOptions) -> Result<GraphDataset> {
    let dir = dir.as_ref();

    let meta_path = dir.join(GRAPH_FILE);
    let meta: GraphMeta = serde_json::from_str(&read_file(&meta_path)?)
        .map_err(|e| Error::parse(&meta_path, e.line(), e.to_string()))?;
    let n = meta.num_nodes;

    let edges_path = dir.join(EDGES_FILE);
    let mut edges = Vec::new();
    for (idx, line) in read_file(&edges_path)?.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let ids: Vec<&str> = line.split('\t').map(str::trim).collect();
        if ids.len() != 2 {
            return Err(Error::parse(
                &edges_path,
                line_no,
                "expected two tab-separated ids",
            ));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::parse(&edges_path, line_no, format!("bad node id {s:?}: {e}")))
        };
        let (u, v) = (parse(ids[0])?, parse(ids[1])?);
        if u >= n || v >= n {
            return Err(Error::parse(
                &edges_path,
                line_no,
                format!("edge ({u}, {v}) references a node >= {n}"),
            ));
        }
        if u == v {
            return Err(Error::parse(&edges_path, line_no, "self-edge"));
        }
        edges.push((u, v));
    }

    let features_path = dir.join(FEATURES_FILE);
    let rows = read_csv_reals(&features_path)?;
    check_rows(&features_path, rows.len(), n)?;
    for (i, row) in rows.iter().enumerate() {
        if row.len() != meta.num_features {
            return Err(Error::parse(
                &features_path,
                i + 1,
                format!("{} values, expected {}", row.len(), meta.num_features),
            ));
        }
    }
    let features = DenseMatrix::from_vec(n, meta.num_features, rows.concat())
        .map_err(|e| Error::parse(&features_path, 0, e.to_string()))?;

    let labels_path = dir.join(LABELS_FILE);
    let rows = read_csv_reals(&labels_path)?;
    check_rows(&labels_path, rows.len(), n)?;
    let labels = if meta.multilabel {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != meta.num_classes {
                return Err(Error::parse(
                    &labels_path,
                    i + 1,
                    format!("{} flags, expected {}", row.len(), meta.num_classes),
                ));
            }
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::parse(&labels_path, i + 1, "flags must be 0 or 1"));
            }
        }
        Labels::Multi(
            DenseMatrix::from_vec(n, meta.num_classes, rows.concat())
                .map_err(|e| Error::parse(&labels_path, 0, e.to_string()))?,
        )
    } else {
        let mut classes = Vec::with_capacity(n);
        for (i, row) in rows.iter().enumerate() {
            match row.as_slice() {
                [c] if c.fract() == 0.0 && *c >= 0.0 && (*c as usize) < meta.num_classes => {
                    classes.push(*c as usize)
                }
                _ => {
                    return Err(Error::parse(
                        &labels_path,
                        i + 1,
                        format!("expected one class index in [0, {})", meta.num_classes),
                    ))
                }
            }
        }
        Labels::Single(classes)
    };

    let masks_path = dir.join(MASKS_FILE);
    let masks: Masks = serde_json::from_str(&read_file(&masks_path)?)
        .map_err(|e| Error::parse(&masks_path, e.line(), e.to_string()))?;
    for (name, set) in [
        ("train", &masks.train),
        ("val", &masks.val),
        ("test", &masks.test),
    ] {
        if let Some(&bad) = set.iter().find(|&&i| i >= n) {
            return Err(Error::parse(
                &masks_path,
                0,
                format!("{name} mask index {bad} outside {n} nodes"),
            ));
        }
    }

    GraphDataset::new(&edges, features, labels, masks, meta.num_classes, norm)
}

fn check_rows(path: &Path, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::parse(
            path,
            got.min(want) + 1,
            format!("{got} rows, expected {want}"),
        ));
    }
    Ok(())
}

fn read_csv_reals(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = read_file(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let row = record
            .iter()
            .map(|s| {
                let v: f64 = s
                    .trim()
                    .parse()
                    .map_err(|e| Error::parse(path, line, format!("bad number {s:?}: {e}")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::parse(path, line, "non-finite value"))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Writes `dataset` in the directory format, creating `dir` if needed.
/// Reals are written in shortest round-trip form, so loading is exact.
pub fn save_dataset(dataset: &GraphDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let write = |name: &str, body: String| -> Result<PathBuf> {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(body.as_bytes())
            .map_err(|e| Error::io(&path, e))?;
        Ok(path)
    };

    let meta = GraphMeta {
        num_nodes: dataset.num_nodes(),
        num_features: dataset.num_features(),
        num_classes: dataset.num_classes(),
        multilabel: dataset.is_multilabel(),
    };
    write(
        GRAPH_FILE,
        serde_json::to_string_pretty(&meta).expect("serializable") + "\n",
    )?;

    let mut edges = String::new();
    for &(u, v) in dataset.edges() {
        edges.push_str(&format!("{u}\t{v}\n"));
    }
    write(EDGES_FILE, edges)?;

    write(FEATURES_FILE, dense_to_csv(dataset.features()))?;

    let labels = match dataset.labels() {
        Labels::Single(v) => v.iter().map(|c| format!("{c}\n")).collect(),
        Labels::Multi(m) => dense_to_csv(m),
    };
    write(LABELS_FILE, labels)?;

    write(
        MASKS_FILE,
        serde_json::to_string(dataset.masks()).expect("serializable") + "\n",
    )?;
    Ok(())
}

fn dense_to_csv(m: &DenseMatrix) -> String {
    let mut out = String::new();
    for r in 0..m.n_rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
