//! Plugs hand-written stage models into the cascade to show the routing:
//! only inputs the binary stage calls malign reach the family stage.
//!
//! ```text
//! cargo run --example cascade_gating
//! ```

use levitmc::bin2img::{bytes_to_grid, grid_to_tensor};
use levitmc::cascade::{CascadeModel, StageModel};
use levitmc::data::ClassIndex;
use levitmc::levit::NUM_FAMILIES;
use levitmc::tensor::Tensor;

/// Calls an input malign when its mean intensity is above one half.
struct Brightness;

impl StageModel for Brightness {
    fn logits(&self, batch: &Tensor<f32>) -> levitmc::Result<Tensor<f32>> {
        let n = batch.shape()[0];
        let per = batch.numel() / n;
        let mut out = Vec::with_capacity(2 * n);
        for row in batch.data().chunks(per) {
            let mean = row.iter().sum::<f32>() / per as f32;
            out.extend([0.0, 20.0 * (mean - 0.5)]);
        }
        Ok(Tensor::new(&[n, 2], out)?)
    }

    fn num_classes(&self) -> usize {
        2
    }
}

/// Picks one of the first three families from the red level of the first pixel.
struct RedLevel;

impl StageModel for RedLevel {
    fn logits(&self, batch: &Tensor<f32>) -> levitmc::Result<Tensor<f32>> {
        let n = batch.shape()[0];
        let per = batch.numel() / n;
        let mut out = vec![0.0; n * NUM_FAMILIES];
        for (i, row) in batch.data().chunks(per).enumerate() {
            let f = ((row[0] * 3.0) as usize).min(2);
            out[i * NUM_FAMILIES + f] = 5.0;
        }
        Ok(Tensor::new(&[n, NUM_FAMILIES], out)?)
    }

    fn num_classes(&self) -> usize {
        NUM_FAMILIES
    }
}

fn main() -> levitmc::Result<()> {
    let classes = ClassIndex::from_names(&["benign", "adware", "worm", "trojan"])?;
    let cascade = CascadeModel::new(Box::new(Brightness), Box::new(RedLevel), classes, 0.5)?;
    let images = [8u8, 40, 121, 200, 250]
        .iter()
        .map(|&v| grid_to_tensor(&bytes_to_grid(&vec![v; 3 * 64])?))
        .collect::<levitmc::Result<Vec<_>>>()?;
    for (i, v) in cascade.classify_batch(&images, 2)?.iter().enumerate() {
        println!("{}", v.to_json(&format!("sample-{i}"), cascade.class_index()));
    }
    println!("family stage ran on {} of {} inputs", cascade.stage2_invocations(), images.len());
    Ok(())
}
