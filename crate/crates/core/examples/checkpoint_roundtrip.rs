//! Saves a model to the checkpoint format, loads it back and shows that a
//! flipped byte is refused.
//!
//! ```text
//! cargo run --example checkpoint_roundtrip
//! ```

use levitmc::densenet::{build_densenet, DenseNetConfig};
use levitmc::train::Checkpoint;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = build_densenet(&DenseNetConfig::toy(), 3)?;
    let ckpt = Checkpoint::initial(model);
    let bytes = ckpt.to_bytes()?;
    println!("{} parameters -> {} bytes", ckpt.model.params.num_scalars(), bytes.len());

    let path = std::env::temp_dir().join("levitmc-example.lmck");
    ckpt.save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    assert_eq!(loaded, ckpt);
    println!("reloaded {} identically", path.display());

    let mut broken = bytes.clone();
    let at = broken.len() / 2;
    broken[at] ^= 0x01;
    match Checkpoint::from_bytes(&broken) {
        Ok(_) => println!("corruption at byte {at} went unnoticed"),
        Err(e) => println!("byte {at} flipped: {e}"),
    }
    Ok(())
}
