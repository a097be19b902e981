use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Manifest, Split};
use crate::bin2img::NUM_CLASSES;
use crate::error::{io_err, Error, Result};

/// Stratified train/val assignment: per class, `floor(fraction·n)` records
/// chosen by a seeded shuffle go to train and the rest to val.
pub fn split(manifest: &Manifest, train_fraction: f64, seed: u64) -> Result<Manifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "train fraction {train_fraction} is outside (0, 1)"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, r) in manifest.records.iter().enumerate() {
        let label = r
            .label
            .ok_or_else(|| Error::InvalidInput(format!("record {} has no label", r.id)))?;
        by_class[label].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = manifest.clone();
    for (label, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Stratify(format!(
                "class {} has {} sample(s), need at least 2",
                manifest.class_index.name(label).unwrap_or("?"),
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        // the epsilon keeps exact products such as 0.7·500 from rounding down
        let n_train = (members.len() as f64 * train_fraction + 1e-9).floor() as usize;
        for (k, &i) in members.iter().enumerate() {
            out.records[i].split = Some(if k < n_train { Split::Train } else { Split::Val });
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct SplitLine {
    id: String,
    split: Split,
}

pub fn write_split_file(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in &manifest.records {
        if let Some(split) = r.split {
            serde_json::to_writer(
                &mut w,
                &SplitLine {
                    id: r.id.clone(),
                    split,
                },
            )?;
            w.write_all(b"\n").map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// Applies `{"id", "split"}` lines; records not listed keep no split tag.
pub fn apply_split_file(manifest: &Manifest, path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut tags = HashMap::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: SplitLine = serde_json::from_str(&line)?;
        tags.insert(l.id, l.split);
    }
    let mut out = manifest.clone();
    for r in &mut out.records {
        r.split = tags.remove(&r.id);
    }
    if let Some(id) = tags.keys().next() {
        return Err(Error::InvalidInput(format!("split file names unknown record {id}")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Record;
    use std::path::PathBuf;

    fn manifest(counts: &[(&str, usize)]) -> Manifest {
        let mut named = Vec::new();
        for (class, n) in counts {
            for i in 0..*n {
                named.push((
                    Record {
                        id: format!("{class}/{i}"),
                        path: PathBuf::from(format!("{class}/{i}.png")),
                        label: None,
                        pad_bytes: 0,
                        orig_len: 3,
                        split: None,
                    },
                    Some(class.to_string()),
                ));
            }
        }
        Manifest::from_named("/data", named).unwrap()
    }

    #[test]
    fn floor_counts() {
        let m = split(&manifest(&[("benign", 1832), ("fam", 500)]), 0.7, 1).unwrap();
        assert_eq!(m.class_counts(Some(Split::Train))[0], 1282);
        assert_eq!(m.class_counts(Some(Split::Val))[0], 550);
        assert_eq!(m.class_counts(Some(Split::Train))[1], 350);
        assert_eq!(m.class_counts(Some(Split::Val))[1], 150);
        assert!(m.records.iter().all(|r| r.split.is_some()));
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let base = manifest(&[("benign", 30), ("fam", 20)]);
        let a = split(&base, 0.7, 4).unwrap();
        assert_eq!(a, split(&base, 0.7, 4).unwrap());
        assert_ne!(a, split(&base, 0.7, 5).unwrap());
    }

    #[test]
    fn singleton_class_cannot_stratify() {
        let err = split(&manifest(&[("benign", 4), ("fam", 1)]), 0.7, 0);
        assert!(matches!(err, Err(Error::Stratify(_))));
        let err = split(&manifest(&[("benign", 4)]), 1.0, 0);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn split_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = split(&manifest(&[("benign", 5), ("fam", 5)]), 0.7, 2).unwrap();
        let path = dir.path().join("split.jsonl");
        write_split_file(&m, &path).unwrap();
        let base = manifest(&[("benign", 5), ("fam", 5)]);
        assert_eq!(apply_split_file(&base, &path).unwrap(), m);
    }
}
