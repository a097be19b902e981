//! Seeded synthetic corpus of byte streams rendered to PNG.
//!
//! Each family owns a fixed byte motif whose pixels stay near a family colour.
//! Family samples repeat the motif with runs of uniform noise in between.
//! Benign samples are low-entropy: zero runs, short ramps and small values.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Manifest, Record, MANIFEST_FILE};
use crate::bin2img::{bytes_to_grid, encode_png, NUM_CLASSES};
use crate::error::{io_err, Error, Result};

const LEVELS: [i32; 3] = [64, 144, 224];
const MOTIF_SPREAD: i32 = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub families: usize,
    pub samples_per_family: usize,
    pub benign_samples: usize,
    pub seed: u64,
    /// Bytes per motif; a multiple of 3 so motifs stay pixel-aligned.
    pub motif_len: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            families: 4,
            samples_per_family: 16,
            benign_samples: 16,
            seed: 7,
            motif_len: 48,
            min_len: 3 * 1024,
            max_len: 64 * 1024,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.families == 0 || self.families >= NUM_CLASSES {
            return bad(format!("families must be in 1..={}, got {}", NUM_CLASSES - 1, self.families));
        }
        if self.samples_per_family == 0 || self.benign_samples == 0 {
            return bad("sample counts must be positive".into());
        }
        if self.motif_len == 0 || self.motif_len % 3 != 0 {
            return bad(format!("motif_len {} must be a positive multiple of 3", self.motif_len));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("length range {}..={} is empty", self.min_len, self.max_len));
        }
        Ok(())
    }

    pub fn family_name(family: usize) -> String {
        format!("family_{family:02}")
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// Mean colour of a family's motif pixels.
    pub fn family_colour(&self, family: usize) -> [u8; 3] {
        let mut rng = self.rng(u64::MAX - family as u64);
        let digits = [family % 3, family / 3 % 3, family / 9 % 3];
        digits.map(|d| (LEVELS[d] + rng.gen_range(-8..=8)) as u8)
    }

    pub fn motif(&self, family: usize) -> Vec<u8> {
        let colour = self.family_colour(family);
        let mut rng = self.rng((1 << 48) + family as u64);
        (0..self.motif_len)
            .map(|i| (colour[i % 3] as i32 + rng.gen_range(-MOTIF_SPREAD..=MOTIF_SPREAD)) as u8)
            .collect()
    }

    /// Bytes of sample `index` of a family, or of the benign class for `None`.
    pub fn sample_bytes(&self, family: Option<usize>, index: usize) -> Vec<u8> {
        let class = family.map_or(0, |f| f as u64 + 1);
        let mut rng = self.rng((class << 32) | index as u64);
        let len = rng.gen_range(self.min_len..=self.max_len);
        let mut out = Vec::with_capacity(len + 3 * 256);
        match family {
            Some(f) => {
                let motif = self.motif(f);
                while out.len() < len {
                    if rng.gen_bool(0.8) {
                        out.extend_from_slice(&motif);
                    } else {
                        let run = 3 * rng.gen_range(4..=32);
                        out.extend((0..run).map(|_| rng.gen::<u8>()));
                    }
                }
            }
            None => {
                while out.len() < len {
                    let run = 3 * rng.gen_range(16..=256);
                    match rng.gen_range(0..3) {
                        0 => out.extend(std::iter::repeat(0u8).take(run)),
                        1 => out.extend((0..run).map(|i| (i % 64) as u8)),
                        _ => out.extend((0..run).map(|_| rng.gen_range(0u8..16))),
                    }
                }
            }
        }
        out.truncate(len);
        out
    }

    /// `(class name, family)` for every class, benign first.
    fn classes(&self) -> Vec<(String, Option<usize>, usize)> {
        let mut c = vec![("benign".to_string(), None, self.benign_samples)];
        c.extend((0..self.families).map(|f| (Self::family_name(f), Some(f), self.samples_per_family)));
        c
    }
}

/// Writes `out_dir/<class>/<index>.png` for every sample plus
/// `out_dir/manifest.jsonl`.
pub fn synth_generate(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let mut jobs = Vec::new();
    for (name, family, count) in spec.classes() {
        let dir = out_dir.join(&name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        jobs.extend((0..count).map(|i| (name.clone(), family, i)));
    }
    let named = jobs
        .par_iter()
        .map(|(name, family, i)| {
            let bytes = spec.sample_bytes(*family, *i);
            let grid = bytes_to_grid(&bytes)?;
            let rel = PathBuf::from(format!("{name}/{i:04}.png"));
            let path = out_dir.join(&rel);
            fs::write(&path, encode_png(&grid)?).map_err(io_err(&path))?;
            Ok((
                Record {
                    id: format!("{name}/{i:04}"),
                    path: rel,
                    label: None,
                    pad_bytes: grid.pad_bytes,
                    orig_len: bytes.len(),
                    split: None,
                },
                Some(name.clone()),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::from_named(out_dir, named)?;
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
