use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DataError;

/// Split directories expected under a dataset root, in canonical order.
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "NORMAL")]
    Normal = 0,
    #[serde(rename = "PNEUMONIA")]
    Pneumonia = 1,
}

impl Label {
    pub fn from_dir_name(name: &str) -> Option<Self> {
        match name {
            "NORMAL" => Some(Label::Normal),
            "PNEUMONIA" => Some(Label::Pneumonia),
            _ => None,
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Normal => "NORMAL",
            Label::Pneumonia => "PNEUMONIA",
        }
    }

    pub fn as_f32(self) -> f32 {
        self as u8 as f32
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub path: PathBuf,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub splits: BTreeMap<String, Vec<Sample>>,
}

/// Per-split, per-class image counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub root: PathBuf,
    pub total: usize,
    pub splits: BTreeMap<String, BTreeMap<Label, usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub files: Option<BTreeMap<String, Vec<Sample>>>,
}

fn is_hidden(name: &str) -> bool {
    name.starts_with('.') || name.starts_with("__")
}

fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf)>, DataError> {
    let read = fs::read_dir(dir).map_err(|e| DataError::Io { path: dir.to_path_buf(), detail: e.to_string() })?;
    let mut out = Vec::new();
    for entry in read {
        let entry = entry.map_err(|e| DataError::Io { path: dir.to_path_buf(), detail: e.to_string() })?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !is_hidden(&name) {
            out.push((name, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Walks `root/{train,val,test}/{NORMAL,PNEUMONIA}/*.{png,jpg,jpeg}`.
///
/// Files are listed in lexicographic order within each class, NORMAL before
/// PNEUMONIA, so repeated scans of an unchanged tree are identical.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest, DataError> {
    if !root.is_dir() {
        return Err(DataError::MissingRoot(root.to_path_buf()));
    }
    let present: BTreeSet<String> =
        sorted_entries(root)?.into_iter().filter(|(_, p)| p.is_dir()).map(|(n, _)| n).collect();
    if present.is_empty() {
        return Err(DataError::NoSplits(root.to_path_buf()));
    }
    if let Some(missing) = SPLITS.iter().find(|s| !present.contains(**s)) {
        return Err(DataError::MissingSplit { root: root.to_path_buf(), split: missing.to_string() });
    }

    let mut splits = BTreeMap::new();
    let mut seen = BTreeSet::new();
    let mut total = 0;
    for split in SPLITS {
        let split_dir = root.join(split);
        let mut samples = Vec::new();
        for (name, path) in sorted_entries(&split_dir)? {
            if !path.is_dir() {
                continue;
            }
            let label = Label::from_dir_name(&name)
                .ok_or_else(|| DataError::UnknownClass { split: split.to_string(), name: name.clone() })?;
            for (file, fpath) in sorted_entries(&path)? {
                let ext =
                    Path::new(&file).extension().map(|e| e.to_string_lossy().to_ascii_lowercase()).unwrap_or_default();
                if !fpath.is_file() || !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                    continue;
                }
                let canonical = fs::canonicalize(&fpath).unwrap_or_else(|_| fpath.clone());
                if !seen.insert(canonical) {
                    return Err(DataError::DuplicatePath(fpath));
                }
                samples.push(Sample { path: fpath, label });
            }
        }
        total += samples.len();
        splits.insert(split.to_string(), samples);
    }
    if total == 0 {
        return Err(DataError::NoImages(root.to_path_buf()));
    }
    Ok(DatasetManifest { root: root.to_path_buf(), splits })
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Result<&[Sample], DataError> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| DataError::MissingSplit { root: self.root.clone(), split: name.to_string() })
    }

    pub fn total(&self) -> usize {
        self.splits.values().map(Vec::len).sum()
    }

    pub fn summary(&self, include_files: bool) -> ManifestSummary {
        let splits = self
            .splits
            .iter()
            .map(|(name, samples)| {
                let mut counts = BTreeMap::from([(Label::Normal, 0), (Label::Pneumonia, 0)]);
                for s in samples {
                    *counts.entry(s.label).or_default() += 1;
                }
                (name.clone(), counts)
            })
            .collect();
        ManifestSummary {
            root: self.root.clone(),
            total: self.total(),
            splits,
            files: include_files.then(|| self.splits.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(p: &Path) {
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, b"x").unwrap();
    }

    fn tree(root: &Path, counts: &[(&str, &str, usize)]) {
        for &(split, class, n) in counts {
            fs::create_dir_all(root.join(split).join(class)).unwrap();
            for i in 0..n {
                touch(&root.join(split).join(class).join(format!("img{i:03}.png")));
            }
        }
    }

    #[test]
    fn scans_counts_and_order() {
        let dir = tempfile::tempdir().unwrap();
        tree(
            dir.path(),
            &[
                ("train", "NORMAL", 3),
                ("train", "PNEUMONIA", 4),
                ("val", "NORMAL", 1),
                ("val", "PNEUMONIA", 1),
                ("test", "PNEUMONIA", 2),
            ],
        );
        touch(&dir.path().join("train/NORMAL/.DS_Store"));
        touch(&dir.path().join("train/NORMAL/notes.txt"));
        let m = scan_dataset(dir.path()).unwrap();
        assert_eq!(m.total(), 11);
        let train = m.split("train").unwrap();
        assert_eq!(train[0].label, Label::Normal);
        assert!(train[0].path.ends_with("img000.png"));
        assert_eq!(train[3].label, Label::Pneumonia);
        let s = m.summary(false);
        assert_eq!(s.splits["test"][&Label::Normal], 0);
        assert_eq!(s.splits["test"][&Label::Pneumonia], 2);
        assert_eq!(scan_dataset(dir.path()).unwrap(), m);
        let json = serde_json::to_value(&s).unwrap();
        assert_eq!(json["splits"]["train"]["PNEUMONIA"], 4);
    }

    #[test]
    fn error_cases() {
        let dir = tempfile::tempdir().unwrap();
        let e = scan_dataset(dir.path()).unwrap_err();
        assert!(e.to_string().contains("no splits found"), "{e}");

        tree(dir.path(), &[("train", "NORMAL", 1), ("test", "NORMAL", 1)]);
        let e = scan_dataset(dir.path()).unwrap_err();
        assert!(matches!(&e, DataError::MissingSplit { split, .. } if split == "val"), "{e}");

        tree(dir.path(), &[("val", "COVID", 1)]);
        assert!(matches!(scan_dataset(dir.path()), Err(DataError::UnknownClass { .. })));

        let empty = tempfile::tempdir().unwrap();
        tree(empty.path(), &[("train", "NORMAL", 0), ("val", "NORMAL", 0), ("test", "PNEUMONIA", 0)]);
        assert!(matches!(scan_dataset(empty.path()), Err(DataError::NoImages(_))));
    }
}
