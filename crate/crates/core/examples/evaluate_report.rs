//! Scores a saved cascade on the validation split and prints the accuracy
//! table next to the reference rows, plus the per-class breakdown.
//!
//! ```text
//! cargo run --release --example evaluate_report -- [cascade_dir] [data_dir]
//! ```

use levitmc::cascade::{load_cascade, DEFAULT_THRESHOLD};
use levitmc::data::{Manifest, Split};
use levitmc::eval::{bench_throughput, emit_report, evaluate, ReportFormat};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "target/synth-demo/cascade".into());
    let data = args.next().unwrap_or_else(|| "target/synth-demo".into());
    let cascade = load_cascade(&dir, DEFAULT_THRESHOLD)
        .map_err(|e| format!("{e}; run the train_cascade example first"))?;
    let manifest = Manifest::load(&data)?;

    let mut report = evaluate(&cascade, &manifest, Some(Split::Val), 1)?;
    let images = levitmc::data::load_split(&manifest, Some(Split::Val))?.images;
    let bs = (images.len() / 4).clamp(1, 32);
    report.throughput = Some(bench_throughput(&cascade, &images, bs, 1, 3, 1)?);

    print!("{}", emit_report(&[("synthetic val", &report)], ReportFormat::Markdown)?);
    println!();
    for c in report.per_class.iter().filter(|c| c.support > 0) {
        println!("{:<10} precision {:.3} recall {:.3} support {}", c.name, c.precision, c.recall, c.support);
    }
    Ok(())
}
