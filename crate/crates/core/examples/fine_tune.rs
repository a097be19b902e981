//! Transfer between two synthetic corpora: train the family model on one,
//! then re-head it and fine-tune on another with the stem frozen.
//!
//! ```text
//! cargo run --release --example fine_tune -- [epochs]
//! ```

use levitmc::data::{synth_generate, SynthSpec};
use levitmc::levit::{build_levit, LeViTConfig, ARCH_TAG, NUM_FAMILIES};
use levitmc::train::{fine_tune, train_model, Stage, TrainConfig, TrainData};

fn corpus(seed: u64, dir: &std::path::Path) -> levitmc::Result<TrainData> {
    let spec = SynthSpec {
        seed,
        benign_samples: 4,
        ..SynthSpec::default()
    };
    let m = synth_generate(&spec, dir)?;
    TrainData::load(&m)?.for_stage(&m.class_index, Stage::Family)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs: usize = std::env::args().nth(1).map(|e| e.parse()).transpose()?.unwrap_or(8);
    let root = std::env::temp_dir().join("levitmc-fine-tune");
    let source = corpus(1, &root.join("source"))?;
    let target = corpus(2, &root.join("target"))?;
    let config = TrainConfig {
        lr0: 1e-3,
        max_epochs: epochs,
        ..TrainConfig::default()
    };

    let base = train_model(build_levit(&LeViTConfig::toy(), 0)?, &source, &config, None)?;
    println!("source accuracy {:.3}", base.last.history.last().map_or(0.0, |m| m.train_accuracy));

    let frozen = vec!["stem".to_string()];
    let tuned = fine_tune(base.last, ARCH_TAG, NUM_FAMILIES, &frozen, &target, &config)?;
    for m in &tuned.log {
        println!("epoch {:>2} loss {:.4} accuracy {:.3}", m.epoch, m.train_loss, m.train_accuracy);
    }
    Ok(())
}
