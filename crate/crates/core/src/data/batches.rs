use std::fs;

use levitmc_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Manifest, Record, Split};
use crate::bin2img::{decode_png, grid_to_tensor, stack_images, ImageTensor};
use crate::error::{io_err, Error, Result};

/// Shuffled index batches for one epoch, keyed by `(seed, epoch)`. The last
/// batch may be short.
pub fn batch_schedule(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Reads, decodes and resamples one record to the model input size.
pub fn load_image(manifest: &Manifest, record: &Record) -> Result<ImageTensor> {
    let path = manifest.resolve(record);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let grid = decode_png(&bytes, record.pad_bytes)?;
    grid_to_tensor(&grid)
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `(N, 3, 224, 224)`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// A split decoded into memory.
#[derive(Clone, Debug)]
pub struct LoadedSplit {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub images: Vec<ImageTensor>,
}

impl LoadedSplit {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let imgs: Vec<&ImageTensor> = indices.iter().map(|&i| &self.images[i]).collect();
        Ok(Batch {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            images: stack_images(&imgs)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Keeps entries accepted by `keep` and rewrites their labels with `relabel`.
    pub fn remap(&self, keep: impl Fn(usize) -> bool, relabel: impl Fn(usize) -> usize) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: idx.iter().map(|&i| relabel(self.labels[i])).collect(),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }
}

fn labelled<'a>(manifest: &'a Manifest, split: Option<Split>) -> Result<Vec<(&'a Record, usize)>> {
    let records = manifest.select(split);
    if records.is_empty() {
        return Err(Error::EmptyDataset(format!("no records in split {split:?}")));
    }
    records
        .into_iter()
        .map(|r| {
            r.label
                .map(|l| (r, l))
                .ok_or_else(|| Error::InvalidInput(format!("record {} has no label", r.id)))
        })
        .collect()
}

/// Decodes every labelled record of `split` (all records for `None`).
pub fn load_split(manifest: &Manifest, split: Option<Split>) -> Result<LoadedSplit> {
    let records = labelled(manifest, split)?;
    let images = records
        .par_iter()
        .map(|(r, _)| load_image(manifest, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedSplit {
        ids: records.iter().map(|(r, _)| r.id.clone()).collect(),
        labels: records.iter().map(|&(_, l)| l).collect(),
        images,
    })
}

/// Lazily decoded batches in the deterministic order of [`batch_schedule`].
pub struct BatchIter<'a> {
    manifest: &'a Manifest,
    records: Vec<(&'a Record, usize)>,
    schedule: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.schedule.next()?;
        let build = || {
            let imgs = idx
                .iter()
                .map(|&i| load_image(self.manifest, self.records[i].0))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ImageTensor> = imgs.iter().collect();
            Ok(Batch {
                ids: idx.iter().map(|&i| self.records[i].0.id.clone()).collect(),
                images: stack_images(&refs)?,
                labels: idx.iter().map(|&i| self.records[i].1).collect(),
            })
        };
        Some(build())
    }
}

pub fn iterate_batches(
    manifest: &Manifest,
    split: Option<Split>,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let records = labelled(manifest, split)?;
    let schedule = batch_schedule(records.len(), batch_size, shuffle_seed, epoch);
    Ok(BatchIter {
        manifest,
        records,
        schedule: schedule.into_iter(),
    })
}
