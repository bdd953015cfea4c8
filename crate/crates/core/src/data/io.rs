//! Dataset directory layout:
//!
//! ```text
//! graph.json     {"num_nodes": N, "edges": [[i, j, w], ...]}
//! features.csv   one row per node, d comma-separated floats, no header
//! labels.csv     header `node_id,label`; label is an integer or `-`
//! masks.json     {"train": [...], "val": [...], "test": [...]}
//! groups.json    optional, array of node-id arrays partitioning the test mask
//! meta.json      generator parameters, seed and `num_classes`
//! ```
//!
//! Floats are written in shortest round-trip form, so a save/load cycle
//! reproduces every value bit for bit.

use std::fs;
use std::path::Path;

use serde_json::Value;

use super::{DataError, Dataset};
use crate::graph::{GraphJson, NodeId, WeightedGraph};
use crate::model::{FeatureMatrix, LabelVector};
use crate::trainer::Masks;

pub const DATASET_FILES: [&str; 6] = [
    "graph.json",
    "features.csv",
    "labels.csv",
    "masks.json",
    "groups.json",
    "meta.json",
];

fn io_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

fn write(path: &Path, contents: String) -> Result<(), DataError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn read_required(dir: &Path, name: &str) -> Result<String, DataError> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(DataError::SchemaMismatch(format!("missing {name} in {}", dir.display())));
    }
    fs::read_to_string(&path).map_err(|e| io_err(&path, e))
}

fn json_err(file: &str, e: serde_json::Error) -> DataError {
    DataError::Parse {
        file: file.to_string(),
        line: e.line() as u64,
        column: e.column(),
        msg: e.to_string(),
    }
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let graph = serde_json::to_string(&ds.graph.to_json()).expect("graph serializes");
    write(&dir.join("graph.json"), graph + "\n")?;

    let mut features = String::new();
    for i in 0..ds.features.rows() {
        let row: Vec<String> = ds.features.row(i).iter().map(|v| v.to_string()).collect();
        features.push_str(&row.join(","));
        features.push('\n');
    }
    write(&dir.join("features.csv"), features)?;

    let mut labels = String::from("node_id,label\n");
    for (i, l) in ds.labels.as_slice().iter().enumerate() {
        match l {
            Some(c) => labels.push_str(&format!("{i},{c}\n")),
            None => labels.push_str(&format!("{i},-\n")),
        }
    }
    write(&dir.join("labels.csv"), labels)?;

    let masks = serde_json::to_string(&ds.masks).expect("masks serialize");
    write(&dir.join("masks.json"), masks + "\n")?;

    let groups_path = dir.join("groups.json");
    match &ds.groups {
        Some(groups) => {
            let s = serde_json::to_string(groups).expect("groups serialize");
            write(&groups_path, s + "\n")?;
        }
        None if groups_path.exists() => {
            fs::remove_file(&groups_path).map_err(|e| io_err(&groups_path, e))?;
        }
        None => {}
    }

    let mut meta = match &ds.meta {
        Value::Object(m) => m.clone(),
        Value::Null => serde_json::Map::new(),
        other => {
            let mut m = serde_json::Map::new();
            m.insert("meta".into(), other.clone());
            m
        }
    };
    meta.insert("num_classes".into(), Value::from(ds.num_classes()));
    let meta = serde_json::to_string_pretty(&Value::Object(meta)).expect("meta serializes");
    write(&dir.join("meta.json"), meta + "\n")?;
    Ok(())
}

fn parse_features(text: &str, num_nodes: usize) -> Result<FeatureMatrix, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    for rec in reader.records() {
        let rec = rec.map_err(|e| DataError::Parse {
            file: "features.csv".into(),
            line: e.position().map_or(0, |p| p.line()),
            column: 0,
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let width = *cols.get_or_insert(rec.len());
        if rec.len() != width {
            return Err(DataError::Parse {
                file: "features.csv".into(),
                line,
                column: rec.len().min(width) + 1,
                msg: format!("row {} has {} fields, expected {width}", rows, rec.len()),
            });
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| DataError::Parse {
                file: "features.csv".into(),
                line,
                column: c + 1,
                msg: format!("row {rows}: `{field}` is not a number"),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    if rows != num_nodes {
        return Err(DataError::SchemaMismatch(format!(
            "features.csv has {rows} rows, graph has {num_nodes} nodes"
        )));
    }
    Ok(FeatureMatrix::new(rows, cols.unwrap_or(0), data)?)
}

fn parse_labels(text: &str, num_nodes: usize) -> Result<Vec<Option<usize>>, DataError> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| DataError::Parse {
            file: "labels.csv".into(),
            line: 1,
            column: 0,
            msg: e.to_string(),
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["node_id", "label"] {
        return Err(DataError::SchemaMismatch(format!(
            "labels.csv header must be `node_id,label`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut labels = vec![None; num_nodes];
    let mut seen = vec![false; num_nodes];
    for rec in reader.records() {
        let rec = rec.map_err(|e| DataError::Parse {
            file: "labels.csv".into(),
            line: e.position().map_or(0, |p| p.line()),
            column: 0,
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let perr = |column: usize, msg: String| DataError::Parse {
            file: "labels.csv".into(),
            line,
            column,
            msg,
        };
        let node: usize = rec[0].trim().parse().map_err(|_| perr(1, format!("bad node id `{}`", &rec[0])))?;
        if node >= num_nodes {
            return Err(perr(1, format!("node id {node} out of range")));
        }
        if std::mem::replace(&mut seen[node], true) {
            return Err(perr(1, format!("node id {node} listed twice")));
        }
        let field = rec[1].trim();
        labels[node] = if field == "-" {
            None
        } else {
            Some(field.parse().map_err(|_| perr(2, format!("bad label `{field}`")))?)
        };
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(DataError::SchemaMismatch(format!("labels.csv has no row for node {missing}")));
    }
    Ok(labels)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let graph_text = read_required(dir, "graph.json")?;
    let graph_json: GraphJson = serde_json::from_str(&graph_text).map_err(|e| json_err("graph.json", e))?;
    let graph = WeightedGraph::from_json(&graph_json)?;
    let n = graph.num_nodes();

    let features = parse_features(&read_required(dir, "features.csv")?, n)?;
    let raw_labels = parse_labels(&read_required(dir, "labels.csv")?, n)?;
    let masks: Masks =
        serde_json::from_str(&read_required(dir, "masks.json")?).map_err(|e| json_err("masks.json", e))?;

    let groups_path = dir.join("groups.json");
    let groups: Option<Vec<Vec<NodeId>>> = if groups_path.exists() {
        let text = fs::read_to_string(&groups_path).map_err(|e| io_err(&groups_path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| json_err("groups.json", e))?)
    } else {
        None
    };

    let meta_path = dir.join("meta.json");
    let mut meta = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
        serde_json::from_str(&text).map_err(|e| json_err("meta.json", e))?
    } else {
        Value::Null
    };
    let inferred = raw_labels.iter().flatten().max().map_or(1, |m| m + 1);
    let num_classes = match meta.as_object_mut().and_then(|m| m.remove("num_classes")) {
        Some(v) => v
            .as_u64()
            .map(|c| c as usize)
            .ok_or_else(|| DataError::SchemaMismatch("meta.json num_classes must be an integer".into()))?,
        None => inferred,
    };
    if meta.as_object().is_some_and(|m| m.is_empty()) {
        meta = Value::Null;
    }
    let labels = LabelVector::new(raw_labels, num_classes)?;

    let ds = Dataset {
        graph,
        features,
        labels,
        masks,
        groups,
        meta,
    };
    ds.validate()?;
    Ok(ds)
}
