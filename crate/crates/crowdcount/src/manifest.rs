//! Dataset manifests: CSV files with header `image_path,annotation_path`.
//! Relative paths resolve against the manifest's directory. An entry's id is
//! the image file stem.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    All,
}

impl Split {
    /// From a manifest file name: `*train*`, `*test*`, else all.
    pub fn from_path(path: &Path) -> Self {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        if stem.contains("train") {
            Split::Train
        } else if stem.contains("test") {
            Split::Test
        } else {
            Split::All
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub annotation: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    image_path: String,
    annotation_path: String,
}

fn entry_id(image: &Path) -> Option<String> {
    image.file_stem().and_then(|s| s.to_str()).map(str::to_string)
}

impl Manifest {
    /// Builds a manifest from `(image, annotation)` paths relative to `root`,
    /// rejecting duplicate ids.
    pub fn new(root: &Path, split: Split, rows: &[(PathBuf, PathBuf)]) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(rows.len());
        for (image, annotation) in rows {
            let id = entry_id(image)
                .ok_or_else(|| Error::Usage(format!("image path {} has no file name", image.display())))?;
            if !seen.insert(id.clone()) {
                return Err(Error::Usage(format!("duplicate image id `{id}` in manifest")));
            }
            entries.push(ManifestEntry {
                id,
                image: root.join(image),
                annotation: root.join(annotation),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            split,
            entries,
        })
    }

    /// Fails with [`Error::MissingFile`] for the first referenced file that does not exist.
    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            for p in [&e.image, &e.annotation] {
                if !p.is_file() {
                    return Err(Error::MissingFile(p.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    /// Entries whose ids are in `ids`, in `ids` order.
    pub fn subset(&self, ids: &[String], split: Split) -> Manifest {
        let entries = ids
            .iter()
            .filter_map(|id| self.entries.iter().find(|e| &e.id == id).cloned())
            .collect();
        Manifest {
            root: self.root.clone(),
            split,
            entries,
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["image_path", "annotation_path"] {
        return Err(Error::format(path, "header must be `image_path,annotation_path`"));
    }
    let mut rows = Vec::new();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        rows.push((PathBuf::from(row.image_path), PathBuf::from(row.annotation_path)));
    }
    let root = path.parent().unwrap_or(Path::new("")).to_path_buf();
    Manifest::new(&root, Split::from_path(path), &rows)
}

/// Writes `manifest` to `path` with paths relative to the directory of `path`
/// where possible.
pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    for e in &manifest.entries {
        writer
            .serialize(Row {
                image_path: relative_to(&e.image, dir),
                annotation_path: relative_to(&e.annotation, dir),
            })
            .map_err(|err| Error::format(path, err.to_string()))?;
    }
    if manifest.entries.is_empty() {
        writer
            .write_record(["image_path", "annotation_path"])
            .map_err(|err| Error::format(path, err.to_string()))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|err| Error::format(path, err.to_string()))?;
    fs::write(path, bytes).map_err(|err| Error::io(path, err))
}

fn relative_to(target: &Path, dir: &Path) -> String {
    let t: Vec<_> = target.components().collect();
    let d: Vec<_> = dir.components().collect();
    let common = t.iter().zip(&d).take_while(|(a, b)| a == b).count();
    if common == 0 && target.is_absolute() {
        return target.display().to_string();
    }
    let mut out = PathBuf::new();
    for _ in common..d.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c);
    }
    out.to_string_lossy().replace('\\', "/")
}
