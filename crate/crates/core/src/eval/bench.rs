use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bin2img::{stack_images, ImageTensor};
use crate::cascade::CascadeModel;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub images_per_second_mean: f64,
    /// Sample standard deviation over repetitions.
    pub images_per_second_std: f64,
    pub batch_size: usize,
    pub warmup_batches: usize,
    pub repetitions: usize,
    /// Fraction of timed images that never reached the family model.
    pub stage2_skip_rate: f64,
    /// Seconds per timed batch.
    pub timings: Vec<f64>,
}

pub const MIN_REPETITIONS: usize = 3;

/// Times `reps` batches after `warmup` untimed ones. Each repetition uses its
/// own slice of `images`; only model forward passes are timed.
pub fn bench_throughput(
    cascade: &CascadeModel,
    images: &[ImageTensor],
    batch_size: usize,
    warmup: usize,
    reps: usize,
    workers: usize,
) -> Result<ThroughputReport> {
    if reps < MIN_REPETITIONS {
        return Err(Error::InvalidInput(format!("need at least {MIN_REPETITIONS} repetitions, got {reps}")));
    }
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let needed = (warmup + reps) * batch_size;
    if images.len() < needed {
        return Err(Error::InvalidInput(format!(
            "{} images cannot fill {warmup} warmup and {reps} timed batches of {batch_size}",
            images.len()
        )));
    }
    let batches: Vec<&[ImageTensor]> = images.chunks_exact(batch_size).take(warmup + reps).collect();
    let stacked = if workers <= 1 {
        batches
            .iter()
            .map(|b| stack_images(&b.iter().collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let run = |i: usize| -> Result<()> {
        if workers <= 1 {
            cascade.classify_tensor(&stacked[i])?;
        } else {
            cascade.classify_batch(batches[i], workers)?;
        }
        Ok(())
    };
    for i in 0..warmup {
        run(i)?;
    }
    let before = cascade.stage2_invocations();
    let mut timings = Vec::with_capacity(reps);
    for i in warmup..warmup + reps {
        let start = Instant::now();
        run(i)?;
        timings.push(start.elapsed().as_secs_f64());
    }
    let routed = cascade.stage2_invocations() - before;
    let rates: Vec<f64> = timings.iter().map(|t| batch_size as f64 / t.max(1e-12)).collect();
    let mean = rates.iter().sum::<f64>() / reps as f64;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    Ok(ThroughputReport {
        images_per_second_mean: mean,
        images_per_second_std: var.sqrt(),
        batch_size,
        warmup_batches: warmup,
        repetitions: reps,
        stage2_skip_rate: 1.0 - routed as f64 / (reps * batch_size) as f64,
        timings,
    })
}
