//! Resampling against a scalar oracle and round-trip properties.

use levitmc::bin2img::{bytes_to_grid, decode_png, encode_png, grid_to_bytes, grid_to_tensor, RgbImageGrid, IMAGE_SIDE};
use proptest::prelude::*;

/// Bilinear sample of a 2×2 single-channel image at output pixel `(y, x)`
/// of a `side × side` rendering, half-pixel centres, edges clamped.
fn oracle(cells: [[f64; 2]; 2], y: usize, x: usize, side: usize) -> f64 {
    let coord = |i: usize| {
        let c = (i as f64 + 0.5) * 2.0 / side as f64 - 0.5;
        c.clamp(0.0, 1.0)
    };
    let (v, u) = (coord(y), coord(x));
    cells[0][0] * (1.0 - v) * (1.0 - u) + cells[0][1] * (1.0 - v) * u + cells[1][0] * v * (1.0 - u) + cells[1][1] * v * u
}

#[test]
fn checkerboard_matches_bilinear_oracle() {
    let px = |on: bool| if on { [255u8, 0, 0] } else { [0, 0, 0] };
    let grid = RgbImageGrid::new(2, 2, vec![px(true), px(false), px(false), px(true)], 0).unwrap();
    let t = grid_to_tensor(&grid).unwrap();
    let cells = [[1.0, 0.0], [0.0, 1.0]];
    let probes = [100, 108, 115, 123];
    for &y in &probes {
        for &x in &probes {
            let got = t.tensor().data()[y * IMAGE_SIDE + x] as f64;
            let want = oracle(cells, y, x, IMAGE_SIDE);
            assert!((got - want).abs() < 1e-6, "({y}, {x}): {got} vs {want}");
            // the other channels stay dark
            assert_eq!(t.tensor().data()[(IMAGE_SIDE + y) * IMAGE_SIDE + x], 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn bytes_survive_the_grid(bytes in proptest::collection::vec(any::<u8>(), 1..5000)) {
        let grid = bytes_to_grid(&bytes).unwrap();
        prop_assert!(grid.pad_bytes < 3 * grid.width + 3);
        prop_assert_eq!(grid.orig_len(), bytes.len());
        prop_assert_eq!(grid_to_bytes(&grid).unwrap(), bytes);
    }

    #[test]
    fn bytes_survive_png(bytes in proptest::collection::vec(any::<u8>(), 1..3000)) {
        let grid = bytes_to_grid(&bytes).unwrap();
        let back = decode_png(&encode_png(&grid).unwrap(), grid.pad_bytes).unwrap();
        prop_assert_eq!(&back, &grid);
        prop_assert_eq!(grid_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn tensors_stay_in_unit_range(bytes in proptest::collection::vec(any::<u8>(), 1..2000)) {
        let t = grid_to_tensor(&bytes_to_grid(&bytes).unwrap()).unwrap();
        prop_assert!(t.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
