//! Throughput reporting on stub cascades.

mod common;

use common::{keyed_image, FirstValue, NextValues};
use levitmc::cascade::CascadeModel;
use levitmc::data::ClassIndex;
use levitmc::eval::bench_throughput;
use levitmc::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cascade() -> CascadeModel {
    let classes = ClassIndex::from_names(&["benign", "a"]).unwrap();
    CascadeModel::new(Box::new(FirstValue), Box::new(NextValues { scale: 1.0 }), classes, 0.5).unwrap()
}

#[test]
fn three_repetitions_give_three_timings() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let images: Vec<_> = (0..16).map(|i| keyed_image(&mut rng, if i % 2 == 0 { 0.9 } else { 0.1 })).collect();
    let c = cascade();
    let r = bench_throughput(&c, &images, 4, 1, 3, 1).unwrap();
    assert_eq!(r.timings.len(), 3);
    assert_eq!(r.repetitions, 3);
    assert!(r.images_per_second_mean > 0.0 && r.images_per_second_std >= 0.0);
    let rates: Vec<f64> = r.timings.iter().map(|t| 4.0 / t).collect();
    let mean = rates.iter().sum::<f64>() / 3.0;
    let std = (rates.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!((mean - r.images_per_second_mean).abs() <= 1e-9 * mean);
    assert!((std - r.images_per_second_std).abs() <= 1e-9 * mean.max(1.0));
    assert!((r.stage2_skip_rate - 0.5).abs() < 1e-12);
}

#[test]
fn skip_rate_follows_the_gate() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = cascade();
    let benign: Vec<_> = (0..12).map(|_| keyed_image(&mut rng, 0.05)).collect();
    let malign: Vec<_> = (0..12).map(|_| keyed_image(&mut rng, 0.95)).collect();
    assert_eq!(bench_throughput(&c, &benign, 3, 1, 3, 1).unwrap().stage2_skip_rate, 1.0);
    assert_eq!(bench_throughput(&c, &malign, 3, 1, 3, 2).unwrap().stage2_skip_rate, 0.0);
}

#[test]
fn insufficient_data_and_too_few_reps() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let images: Vec<_> = (0..7).map(|_| keyed_image(&mut rng, 0.3)).collect();
    let c = cascade();
    assert!(matches!(bench_throughput(&c, &images, 2, 1, 3, 1), Err(Error::InvalidInput(_))));
    assert!(matches!(bench_throughput(&c, &images, 2, 0, 2, 1), Err(Error::InvalidInput(_))));
    assert!(bench_throughput(&c, &images, 2, 0, 3, 1).is_ok());
}
