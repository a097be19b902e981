//! Compares cascade throughput on all-benign and all-malign inputs. Benign
//! inputs stop after the binary model, so that run should be faster.
//!
//! ```text
//! cargo run --release --example bench_throughput -- [cascade_dir]
//! ```

use levitmc::bin2img::{bytes_to_grid, grid_to_tensor, ImageTensor};
use levitmc::cascade::{load_cascade, DEFAULT_THRESHOLD};
use levitmc::data::SynthSpec;
use levitmc::eval::bench_throughput;

fn images(spec: &SynthSpec, family: Option<usize>, n: usize) -> levitmc::Result<Vec<ImageTensor>> {
    (0..n)
        .map(|i| grid_to_tensor(&bytes_to_grid(&spec.sample_bytes(family, 1000 + i))?))
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "target/synth-demo/cascade".into());
    let cascade = load_cascade(&dir, DEFAULT_THRESHOLD)
        .map_err(|e| format!("{e}; run the train_cascade example first"))?;
    let spec = SynthSpec::default();
    let (bs, warmup, reps) = (16, 1, 5);
    let n = bs * (warmup + reps);
    let benign = images(&spec, None, n)?;
    let malign: Vec<_> = (0..spec.families)
        .map(|f| images(&spec, Some(f), n / spec.families + 1))
        .collect::<levitmc::Result<Vec<_>>>()?
        .concat();

    for (name, set) in [("benign", &benign), ("malign", &malign)] {
        let r = bench_throughput(&cascade, set, bs, warmup, reps, 1)?;
        println!(
            "{name}: {:.1} ± {:.1} images/s, stage-2 skip rate {:.2}",
            r.images_per_second_mean, r.images_per_second_std, r.stage2_skip_rate
        );
    }
    Ok(())
}
