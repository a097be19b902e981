//! Stub stage models and small corpora shared by the integration tests.
#![allow(dead_code)]

use levitmc::bin2img::{ImageTensor, IMAGE_SIDE};
use levitmc::cascade::StageModel;
use levitmc::levit::NUM_FAMILIES;
use levitmc::tensor::Tensor;
use rand::Rng;

pub const PIXELS: usize = 3 * IMAGE_SIDE * IMAGE_SIDE;

/// Binary stage whose malign probability is the image's first value.
pub struct FirstValue;

impl StageModel for FirstValue {
    fn logits(&self, batch: &Tensor<f32>) -> levitmc::Result<Tensor<f32>> {
        let mut out = Vec::new();
        for row in batch.data().chunks(PIXELS) {
            let p = (row[0] as f64).clamp(1e-6, 1.0 - 1e-6);
            out.extend([0.0, (p / (1.0 - p)).ln() as f32]);
        }
        Ok(Tensor::new(&[batch.shape()[0], 2], out)?)
    }

    fn num_classes(&self) -> usize {
        2
    }
}

/// Family stage whose logits are values `1..=25` of the image times `scale`.
pub struct NextValues {
    pub scale: f32,
}

impl StageModel for NextValues {
    fn logits(&self, batch: &Tensor<f32>) -> levitmc::Result<Tensor<f32>> {
        let mut out = Vec::new();
        for row in batch.data().chunks(PIXELS) {
            out.extend(row[1..=NUM_FAMILIES].iter().map(|v| v * self.scale));
        }
        Ok(Tensor::new(&[batch.shape()[0], NUM_FAMILIES], out)?)
    }

    fn num_classes(&self) -> usize {
        NUM_FAMILIES
    }
}

/// An image whose first value is `p` and whose next 25 values are random.
pub fn keyed_image(rng: &mut impl Rng, p: f32) -> ImageTensor {
    let mut t = Tensor::zeros(&[3, IMAGE_SIDE, IMAGE_SIDE]);
    t.data_mut()[0] = p;
    for v in &mut t.data_mut()[1..=NUM_FAMILIES] {
        *v = rng.gen_range(0.0..1.0);
    }
    ImageTensor::new(t).unwrap()
}

/// A malign probability at least `margin` away from `threshold`.
pub fn away_from(rng: &mut impl Rng, threshold: f64, margin: f64) -> f32 {
    loop {
        let p: f64 = rng.gen_range(0.0..1.0);
        if (p - threshold).abs() > margin {
            return p as f32;
        }
    }
}
