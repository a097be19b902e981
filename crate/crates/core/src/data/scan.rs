use std::fs;
use std::path::{Path, PathBuf};

use super::{Manifest, Record};
use crate::error::{io_err, Error, Result};

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        out.push(entry.map_err(io_err(dir))?.path());
    }
    out.sort();
    Ok(out)
}

/// Reads width and height from a PNG header without decoding pixels.
fn png_dims(path: &Path) -> Result<(usize, usize)> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let reader = decoder
        .read_info()
        .map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
    let info = reader.info();
    Ok((info.width as usize, info.height as usize))
}

/// Indexes a `root/<class>/*.png` tree. Labels follow the lexicographic order
/// of the class directory names.
pub fn scan_dir(root: impl AsRef<Path>) -> Result<Manifest> {
    let root = root.as_ref();
    let mut named = Vec::new();
    for class_dir in sorted_entries(root)? {
        if !class_dir.is_dir() {
            continue;
        }
        let class = class_dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::InvalidInput(format!("non-UTF-8 directory {}", class_dir.display())))?
            .to_string();
        for file in sorted_entries(&class_dir)? {
            if !file.is_file() || !is_png(&file) {
                continue;
            }
            let (w, h) = png_dims(&file)?;
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let rel = file.strip_prefix(root).expect("under root").to_path_buf();
            named.push((
                Record {
                    id: format!("{class}/{stem}"),
                    path: rel,
                    label: None,
                    pad_bytes: 0,
                    orig_len: w * h * 3,
                    split: None,
                },
                Some(class.clone()),
            ));
        }
    }
    if named.is_empty() {
        return Err(Error::EmptyDataset(format!("no PNG images under {}", root.display())));
    }
    let m = Manifest::from_named(root, named)?;
    for w in m.class_index.warnings() {
        log::warn!("{}: {w}", root.display());
    }
    Ok(m)
}
