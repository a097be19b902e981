//! Dataset manifests, directory scanning, splitting, batching and a synthetic
//! corpus generator.

mod batches;
mod convert;
mod scan;
mod split;
mod synth;

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bin2img::NUM_CLASSES;
use crate::error::{io_err, Error, Result};

pub use batches::{batch_schedule, iterate_batches, load_image, load_split, Batch, BatchIter, LoadedSplit};
pub use convert::{convert_path, ConvertOutcome};
pub use scan::scan_dir;
pub use split::{apply_split_file, split, write_split_file};
pub use synth::{synth_generate, SynthSpec};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const BENIGN_NAMES: [&str; 3] = ["benign", "normal", "goodware"];

/// The 26 class names in label order.
///
/// Built from discovered class names sorted lexicographically. A missing benign
/// class is added and the table is padded to 26 with `unused_XX` entries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassIndex {
    names: Vec<String>,
    benign_index: usize,
    discovered: usize,
}

impl ClassIndex {
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut sorted: Vec<String> = names.iter().map(|s| s.as_ref().to_string()).collect();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::Config("duplicate class names".into()));
        }
        let discovered = sorted.len();
        let is_benign = |n: &String| BENIGN_NAMES.contains(&n.to_ascii_lowercase().as_str());
        let benign: Vec<usize> = (0..sorted.len()).filter(|&i| is_benign(&sorted[i])).collect();
        if benign.len() > 1 {
            return Err(Error::Config(format!(
                "several classes look benign: {:?}",
                benign.iter().map(|&i| &sorted[i]).collect::<Vec<_>>()
            )));
        }
        if benign.is_empty() {
            sorted.push("benign".into());
            sorted.sort();
        }
        if sorted.len() > NUM_CLASSES {
            return Err(Error::Config(format!(
                "{} classes found, at most {NUM_CLASSES} are supported",
                sorted.len()
            )));
        }
        let benign_index = sorted.iter().position(is_benign).expect("benign present");
        let mut pad = 0;
        while sorted.len() < NUM_CLASSES {
            let name = format!("unused_{pad:02}");
            pad += 1;
            if !sorted.contains(&name) {
                sorted.push(name);
            }
        }
        Ok(Self {
            names: sorted,
            benign_index,
            discovered,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, label: usize) -> Option<&str> {
        self.names.get(label).map(String::as_str)
    }

    pub fn label_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn benign_index(&self) -> usize {
        self.benign_index
    }

    /// Number of class names found in the data, before padding.
    pub fn discovered(&self) -> usize {
        self.discovered
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.discovered != NUM_CLASSES {
            w.push(format!(
                "found {} classes, expected {NUM_CLASSES}; the class table is padded",
                self.discovered
            ));
        }
        w
    }

    /// Family index (0..25) of a malign label.
    pub fn family_of(&self, label: usize) -> Option<usize> {
        match label {
            l if l == self.benign_index || l >= NUM_CLASSES => None,
            l if l < self.benign_index => Some(l),
            l => Some(l - 1),
        }
    }

    pub fn label_of_family(&self, family: usize) -> Option<usize> {
        match family {
            f if f >= NUM_CLASSES - 1 => None,
            f if f < self.benign_index => Some(f),
            f => Some(f + 1),
        }
    }

    pub fn family_name(&self, family: usize) -> Option<&str> {
        self.label_of_family(family).and_then(|l| self.name(l))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    /// Relative to the manifest root unless absolute.
    pub path: PathBuf,
    pub label: Option<usize>,
    pub pad_bytes: usize,
    pub orig_len: usize,
    pub split: Option<Split>,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    path: String,
    label: Option<String>,
    pad_bytes: usize,
    orig_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
    pub class_index: ClassIndex,
}

impl Manifest {
    /// Builds a manifest from records whose labels are class names.
    pub fn from_named(root: impl Into<PathBuf>, named: Vec<(Record, Option<String>)>) -> Result<Self> {
        let mut names: Vec<&str> = named.iter().filter_map(|(_, n)| n.as_deref()).collect();
        names.sort();
        names.dedup();
        let class_index = ClassIndex::from_names(&names)?;
        let mut records = Vec::with_capacity(named.len());
        for (mut r, name) in named {
            r.label = name.map(|n| class_index.label_of(&n).expect("name is indexed"));
            records.push(r);
        }
        let m = Self {
            root: root.into(),
            records,
            class_index,
        };
        m.check_unique_ids()?;
        Ok(m)
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate record id {}", r.id)));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let file = fs::File::open(&path).map_err(io_err(&path))?;
        let mut named = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: RecordLine = serde_json::from_str(&line)
                .map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), n + 1)))?;
            named.push((
                Record {
                    id: l.id,
                    path: PathBuf::from(l.path),
                    label: None,
                    pad_bytes: l.pad_bytes,
                    orig_len: l.orig_len,
                    split: l.split,
                },
                l.label,
            ));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_named(root, named)
    }

    /// Writes JSON-lines; relative record paths are rebased onto the
    /// destination directory when possible.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dest_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            let line = RecordLine {
                id: r.id.clone(),
                path: rebase(&self.root, &dest_dir, &r.path),
                label: r.label.and_then(|l| self.class_index.name(l)).map(str::to_string),
                pad_bytes: r.pad_bytes,
                orig_len: r.orig_len,
                split: r.split,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Records in `split`, or every record when `split` is `None`.
    pub fn select(&self, split: Option<Split>) -> Vec<&Record> {
        self.records
            .iter()
            .filter(|r| split.is_none() || r.split == split)
            .collect()
    }

    /// Copy keeping only records accepted by `keep`.
    pub fn filtered(&self, keep: impl Fn(&Record) -> bool) -> Self {
        Self {
            root: self.root.clone(),
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            class_index: self.class_index.clone(),
        }
    }

    pub fn class_counts(&self, split: Option<Split>) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for r in self.select(split) {
            if let Some(l) = r.label {
                counts[l] += 1;
            }
        }
        counts
    }
}

fn rebase(root: &Path, dest: &Path, rel: &Path) -> String {
    let abs = root.join(rel);
    let out = if root == dest {
        rel.to_path_buf()
    } else if let Ok(stripped) = abs.strip_prefix(dest) {
        stripped.to_path_buf()
    } else {
        fs::canonicalize(&abs).unwrap_or(abs)
    };
    out.to_string_lossy().replace('\\', "/")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_index_pads_and_finds_benign() {
        let idx = ClassIndex::from_names(&["Zbot", "Adposhel", "Other"]).unwrap();
        assert_eq!(idx.names().len(), 26);
        assert_eq!(&idx.names()[..4], &["Adposhel", "Other", "Zbot", "benign"]);
        assert_eq!(idx.benign_index(), 3);
        assert_eq!(idx.discovered(), 3);
        assert_eq!(idx.warnings().len(), 1);
        assert_eq!(idx.name(4), Some("unused_00"));
    }

    #[test]
    fn family_mapping_skips_benign() {
        let idx = ClassIndex::from_names(&["a", "Normal", "c"]).unwrap();
        // sorted: Normal, a, c
        assert_eq!(idx.benign_index(), 0);
        assert_eq!(idx.family_of(0), None);
        assert_eq!(idx.family_of(1), Some(0));
        for f in 0..25 {
            let l = idx.label_of_family(f).unwrap();
            assert_eq!(idx.family_of(l), Some(f));
        }
        assert_eq!(idx.label_of_family(25), None);
        assert_eq!(idx.family_name(1), Some("c"));
    }

    #[test]
    fn class_index_errors() {
        assert!(ClassIndex::from_names(&["benign", "Normal"]).is_err());
        let many: Vec<String> = (0..26).map(|i| format!("f{i:02}")).collect();
        assert!(ClassIndex::from_names(&many).is_err());
        assert!(ClassIndex::from_names(&["x", "x"]).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = |id: &str, split| Record {
            id: id.into(),
            path: PathBuf::from(format!("{id}.png")),
            label: None,
            pad_bytes: 1,
            orig_len: 8,
            split,
        };
        let m = Manifest::from_named(
            dir.path(),
            vec![
                (rec("a", Some(Split::Train)), Some("fam".into())),
                (rec("b", Some(Split::Val)), Some("benign".into())),
                (rec("c", None), None),
            ],
        )
        .unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        m.save(&path).unwrap();
        let back = Manifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.select(Some(Split::Val)).len(), 1);
        assert_eq!(back.records[0].label, back.class_index.label_of("fam"));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = Record {
            id: "x".into(),
            path: "x.png".into(),
            label: None,
            pad_bytes: 0,
            orig_len: 3,
            split: None,
        };
        let err = Manifest::from_named("/tmp", vec![(r.clone(), None), (r, None)]);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }
}
