//! Runs a saved cascade over files and prints one verdict line per file.
//!
//! ```text
//! cargo run --release --example train_cascade
//! cargo run --release --example classify -- target/synth-demo/cascade target/synth-demo/family_02
//! ```
//! Inputs may be PNGs rendered by `convert_binary` or raw binaries.

use std::path::PathBuf;

use levitmc::bin2img::{bytes_to_grid, decode_png, grid_to_tensor};
use levitmc::cascade::{load_cascade, DEFAULT_THRESHOLD};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "target/synth-demo/cascade".into());
    let input = PathBuf::from(args.next().unwrap_or_else(|| "target/synth-demo/family_00".into()));
    let cascade = load_cascade(&dir, DEFAULT_THRESHOLD)
        .map_err(|e| format!("{e}; run the train_cascade example first"))?;

    let mut files: Vec<PathBuf> = if input.is_dir() {
        std::fs::read_dir(&input)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?
    } else {
        vec![input]
    };
    files.retain(|p| p.is_file() && p.extension().map_or(true, |e| e != "jsonl"));
    files.sort();

    for path in files.iter().take(12) {
        let bytes = std::fs::read(path)?;
        let grid = if path.extension().is_some_and(|e| e == "png") {
            decode_png(&bytes, 0)?
        } else {
            bytes_to_grid(&bytes)?
        };
        let verdict = cascade.classify(&grid_to_tensor(&grid)?)?;
        let id = path.file_name().unwrap_or_default().to_string_lossy();
        println!("{}", verdict.to_json(&id, cascade.class_index()));
    }
    println!("family model ran on {} of {} inputs", cascade.stage2_invocations(), files.len().min(12));
    Ok(())
}
