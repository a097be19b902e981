//! Builds the seeded synthetic corpus, splits it and walks one epoch of
//! shuffled batches.
//!
//! ```text
//! cargo run --release --example synth_dataset -- [out_dir]
//! ```

use levitmc::data::{iterate_batches, split, synth_generate, Manifest, Split, SynthSpec, MANIFEST_FILE};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/synth-corpus".into());
    let spec = SynthSpec::default();
    let manifest = synth_generate(&spec, &out)?;
    for f in 0..spec.families {
        println!("{} colour {:?}", SynthSpec::family_name(f), spec.family_colour(f));
    }

    let manifest = split(&manifest, 0.7, spec.seed)?;
    manifest.save(std::path::Path::new(&out).join(MANIFEST_FILE))?;
    let reloaded = Manifest::load(&out)?;
    let train = reloaded.class_counts(Some(Split::Train));
    let val = reloaded.class_counts(Some(Split::Val));
    for (label, name) in reloaded.class_index.names().iter().enumerate() {
        if train[label] + val[label] > 0 {
            println!("{name:<10} train {:>3} val {:>3}", train[label], val[label]);
        }
    }

    let mut seen = 0;
    for batch in iterate_batches(&reloaded, Some(Split::Train), 16, spec.seed, 0)? {
        let batch = batch?;
        seen += batch.ids.len();
        println!("batch of {} starting with {}", batch.ids.len(), batch.ids[0]);
    }
    println!("{seen} training images in one epoch");
    Ok(())
}
