use std::fs;
use std::path::{Path, PathBuf};

use super::{Manifest, Record, MANIFEST_FILE};
use crate::bin2img::{encode_png, ByteSample};
use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug)]
pub struct ConvertOutcome {
    pub manifest: Manifest,
    pub written: Vec<PathBuf>,
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::InvalidInput(format!("unusable file name {}", path.display())))
}

fn sorted_children(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(io_err(dir))? {
        out.push(e.map_err(io_err(dir))?.path());
    }
    out.sort();
    Ok(out)
}

/// Renders a file, or every file of a directory, to PNG under `out_dir` and
/// writes `out_dir/manifest.jsonl`.
///
/// Files inside first-level subdirectories of an input directory are labelled
/// with the subdirectory name and written to `out_dir/<name>/`.
pub fn convert_path(input: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<ConvertOutcome> {
    let (input, out_dir) = (input.as_ref(), out_dir.as_ref());
    let mut jobs: Vec<(PathBuf, Option<String>)> = Vec::new();
    if input.is_dir() {
        for child in sorted_children(input)? {
            if child.is_file() {
                jobs.push((child, None));
            } else if child.is_dir() {
                let class = stem(&child)?;
                for f in sorted_children(&child)? {
                    if f.is_file() {
                        jobs.push((f, Some(class.clone())));
                    }
                }
            }
        }
    } else {
        jobs.push((input.to_path_buf(), None));
    }
    if jobs.is_empty() {
        return Err(Error::EmptyDataset(format!("no files under {}", input.display())));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut named = Vec::with_capacity(jobs.len());
    let mut written = Vec::with_capacity(jobs.len());
    for (src, class) in jobs {
        let name = stem(&src)?;
        let bytes = fs::read(&src).map_err(io_err(&src))?;
        let sample = ByteSample::new(bytes, name.clone(), None)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", src.display())))?;
        let grid = sample.to_grid()?;
        let rel = match &class {
            Some(c) => PathBuf::from(c).join(format!("{name}.png")),
            None => PathBuf::from(format!("{name}.png")),
        };
        let dest = out_dir.join(&rel);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&dest, encode_png(&grid)?).map_err(io_err(&dest))?;
        let id = match &class {
            Some(c) => format!("{c}/{name}"),
            None => name,
        };
        named.push((
            Record {
                id,
                path: rel,
                label: None,
                pad_bytes: grid.pad_bytes,
                orig_len: sample.bytes().len(),
                split: None,
            },
            class,
        ));
        written.push(dest);
    }
    let manifest = Manifest::from_named(out_dir, named)?;
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(ConvertOutcome { manifest, written })
}
