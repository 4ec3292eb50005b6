use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" | "test" => Ok(Split::Gallery),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub path: PathBuf,
    pub identity: u64,
    pub camera: u64,
    pub split: Split,
}

#[derive(Debug, Deserialize)]
struct Row {
    path: String,
    identity: String,
    camera: String,
    split: String,
}

/// All records of a dataset with the training identities relabelled to `0..N`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    records: Vec<Record>,
    /// Original identity of each contiguous training label.
    label_to_identity: Vec<u64>,
    /// Contiguous label per record (training split only).
    labels: Vec<Option<usize>>,
    /// Record indices per training label.
    by_label: Vec<Vec<usize>>,
}

impl DatasetIndex {
    pub fn from_records(records: Vec<Record>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("no records".into()));
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(&r.path) {
                return Err(Error::Data(format!("duplicate path {}", r.path.display())));
            }
        }
        let ids: BTreeMap<u64, usize> = records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.identity)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(label, id)| (id, label))
            .collect();
        let mut label_to_identity = vec![0; ids.len()];
        for (&id, &label) in &ids {
            label_to_identity[label] = id;
        }
        let mut by_label = vec![Vec::new(); ids.len()];
        let labels = records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                (r.split == Split::Train).then(|| {
                    let l = ids[&r.identity];
                    by_label[l].push(i);
                    l
                })
            })
            .collect();
        Ok(DatasetIndex {
            records,
            label_to_identity,
            labels,
            by_label,
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of training identities `N`.
    pub fn num_classes(&self) -> usize {
        self.label_to_identity.len()
    }

    pub fn label(&self, record: usize) -> Option<usize> {
        self.labels[record]
    }

    pub fn label_to_identity(&self) -> &[u64] {
        &self.label_to_identity
    }

    pub fn samples_of_label(&self, label: usize) -> &[usize] {
        &self.by_label[label]
    }

    /// Record indices of one split, in manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.split).or_insert(0) += 1;
        }
        counts
    }

    /// Writes the `label,identity` relabelling table.
    pub fn write_label_map(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["label", "identity"])?;
        for (label, id) in self.label_to_identity.iter().enumerate() {
            w.write_record([label.to_string(), id.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads a `label,identity` table written by [`DatasetIndex::write_label_map`].
pub fn read_label_map(path: &Path) -> Result<Vec<u64>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let label: usize = row.get(0).and_then(|v| v.trim().parse().ok()).ok_or_else(|| Error::Manifest {
            path: path.into(),
            line: i + 2,
            message: "bad label".into(),
        })?;
        let id: u64 = row.get(1).and_then(|v| v.trim().parse().ok()).ok_or_else(|| Error::Manifest {
            path: path.into(),
            line: i + 2,
            message: "bad identity".into(),
        })?;
        if label != out.len() {
            return Err(Error::Manifest {
                path: path.into(),
                line: i + 2,
                message: "labels must be contiguous and ordered".into(),
            });
        }
        out.push(id);
    }
    Ok(out)
}

/// Parses a `path,identity,camera,split` CSV; relative paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<DatasetIndex> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    let expected = ["path", "identity", "camera", "split"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Manifest {
            path: path.into(),
            line: 1,
            message: format!("header must be `{}`", expected.join(",")),
        });
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let bad = |message: String| Error::Manifest {
            path: path.into(),
            line,
            message,
        };
        let row = row.map_err(|e| bad(e.to_string()))?;
        let identity = row
            .identity
            .parse::<u64>()
            .map_err(|_| bad(format!("identity `{}` is not a non-negative integer", row.identity)))?;
        let camera = row
            .camera
            .parse::<u64>()
            .map_err(|_| bad(format!("camera `{}` is not a non-negative integer", row.camera)))?;
        let split = row.split.parse::<Split>().map_err(|e| bad(e.to_string()))?;
        if row.path.is_empty() {
            return Err(bad("empty path".into()));
        }
        let p = PathBuf::from(&row.path);
        let p = if p.is_absolute() { p } else { base.join(p) };
        if !seen.insert(p.clone()) {
            return Err(bad(format!("duplicate path {}", row.path)));
        }
        records.push(Record {
            path: p,
            identity,
            camera,
            split,
        });
    }
    if records.is_empty() {
        return Err(Error::Manifest {
            path: path.into(),
            line: 1,
            message: "no records".into(),
        });
    }
    let index = DatasetIndex::from_records(records)?;
    log::info!(
        "loaded {}: {:?}, {} training identities",
        path.display(),
        index.split_counts(),
        index.num_classes()
    );
    Ok(index)
}

/// Writes records as a manifest, making paths relative to the manifest directory where possible.
pub fn write_manifest(path: &Path, records: &[Record]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["path", "identity", "camera", "split"])?;
    for r in records {
        let p = r.path.strip_prefix(base).unwrap_or(&r.path);
        w.write_record([
            p.to_string_lossy().into_owned(),
            r.identity.to_string(),
            r.camera.to_string(),
            r.split.name().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
