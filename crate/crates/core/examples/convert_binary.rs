//! Renders a file to its RGB image, writes the PNG and checks that the
//! original bytes come back out.
//!
//! ```text
//! cargo run --example convert_binary -- [file] [out.png]
//! ```
//! Without arguments the example converts its own executable.

use levitmc::bin2img::{bytes_to_grid, decode_png, encode_png, grid_to_bytes, grid_to_tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args_os().skip(1);
    let input = args.next().map_or_else(std::env::current_exe, |p| Ok(p.into()))?;
    let out = args.next().map_or_else(|| std::env::temp_dir().join("levitmc-convert.png"), Into::into);

    let bytes = std::fs::read(&input)?;
    let grid = bytes_to_grid(&bytes)?;
    println!(
        "{}: {} bytes -> {}x{} pixels, {} padding bytes",
        input.display(),
        bytes.len(),
        grid.width,
        grid.height,
        grid.pad_bytes
    );

    let png = encode_png(&grid)?;
    std::fs::write(&out, &png)?;
    println!("wrote {} ({} bytes)", out.display(), png.len());

    // the PNG carries pixels only; padding travels separately
    let back = grid_to_bytes(&decode_png(&png, grid.pad_bytes)?)?;
    assert_eq!(back, bytes, "round trip changed the stream");
    println!("round trip exact");

    let t = grid_to_tensor(&grid)?;
    let mean = t.tensor().data().iter().map(|&v| v as f64).sum::<f64>() / t.tensor().numel() as f64;
    println!("model input {:?}, mean intensity {mean:.3}", t.tensor().shape());
    Ok(())
}
