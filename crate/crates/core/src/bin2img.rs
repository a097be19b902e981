//! Executable bytes → RGB pixel grid → normalized `3×224×224` tensor.
//!
//! Bytes are consumed three at a time as `(r, g, b)` and laid out row-major on
//! a near-square grid of width `ceil(sqrt(pixels))`. The short trailing triple
//! and the unused tail of the last row are zero-filled; their count is kept in
//! [`RgbImageGrid::pad_bytes`] so the original stream can be recovered exactly.

use levitmc_tensor::Tensor;

use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 224;
pub const NUM_CLASSES: usize = 26;

/// Raw file contents plus an optional class label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByteSample {
    bytes: Vec<u8>,
    source_id: String,
    label: Option<usize>,
}

impl ByteSample {
    pub fn new(bytes: Vec<u8>, source_id: impl Into<String>, label: Option<usize>) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::InvalidInput("empty byte sequence".into()));
        }
        if let Some(l) = label {
            if l >= NUM_CLASSES {
                return Err(Error::InvalidInput(format!("label {l} >= {NUM_CLASSES}")));
            }
        }
        Ok(Self {
            bytes,
            source_id: source_id.into(),
            label,
        })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn to_grid(&self) -> Result<RgbImageGrid> {
        bytes_to_grid(&self.bytes)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImageGrid {
    pub height: usize,
    pub width: usize,
    /// Row-major, `height · width` entries.
    pub pixels: Vec<[u8; 3]>,
    /// Zero bytes appended during packing.
    pub pad_bytes: usize,
}

impl RgbImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<[u8; 3]>, pad_bytes: usize) -> Result<Self> {
        let grid = Self {
            height,
            width,
            pixels,
            pad_bytes,
        };
        grid.validate()?;
        Ok(grid)
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::CorruptGrid(format!("{}x{} grid", self.height, self.width)));
        }
        if self.pixels.len() != self.height * self.width {
            return Err(Error::CorruptGrid(format!(
                "{} pixels for a {}x{} grid",
                self.pixels.len(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }

    pub fn byte_len(&self) -> usize {
        self.pixels.len() * 3
    }

    /// Length of the byte stream the grid was packed from.
    pub fn orig_len(&self) -> usize {
        self.byte_len().saturating_sub(self.pad_bytes)
    }
}

fn ceil_sqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r > n {
        r -= 1;
    }
    while r * r < n {
        r += 1;
    }
    r
}

/// Packs bytes into a near-square RGB grid.
pub fn bytes_to_grid(bytes: &[u8]) -> Result<RgbImageGrid> {
    if bytes.is_empty() {
        return Err(Error::InvalidInput("empty byte sequence".into()));
    }
    let pixel_count = bytes.len().div_ceil(3);
    let width = ceil_sqrt(pixel_count);
    let height = pixel_count.div_ceil(width);
    let mut pixels = vec![[0u8; 3]; width * height];
    for (px, chunk) in pixels.iter_mut().zip(bytes.chunks(3)) {
        px[..chunk.len()].copy_from_slice(chunk);
    }
    let pad_bytes = width * height * 3 - bytes.len();
    Ok(RgbImageGrid {
        height,
        width,
        pixels,
        pad_bytes,
    })
}

/// Inverse of [`bytes_to_grid`].
pub fn grid_to_bytes(grid: &RgbImageGrid) -> Result<Vec<u8>> {
    grid.validate()?;
    let total = grid.byte_len();
    if grid.pad_bytes >= total {
        return Err(Error::CorruptGrid(format!(
            "pad_bytes {} >= {total} stored bytes",
            grid.pad_bytes
        )));
    }
    let mut flat: Vec<u8> = grid.pixels.iter().flatten().copied().collect();
    let keep = total - grid.pad_bytes;
    if flat[keep..].iter().any(|&b| b != 0) {
        return Err(Error::CorruptGrid("non-zero byte inside padding".into()));
    }
    flat.truncate(keep);
    Ok(flat)
}

/// A `(3, 224, 224)` tensor with every element in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor<f32>);

impl ImageTensor {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        if t.shape() != [3, IMAGE_SIDE, IMAGE_SIDE] {
            return Err(Error::Shape(format!(
                "image tensor must be (3, {IMAGE_SIDE}, {IMAGE_SIDE}), got {:?}",
                t.shape()
            )));
        }
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("image tensor value outside [0, 1]".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }
}

/// Stacks images into an `(N, 3, 224, 224)` batch.
pub fn stack_images(images: &[&ImageTensor]) -> Result<Tensor<f32>> {
    let ts: Vec<&Tensor<f32>> = images.iter().map(|i| i.tensor()).collect();
    Ok(Tensor::stack(&ts)?)
}

/// Source coordinate for output index `i` under the half-pixel convention,
/// split into the two neighbouring source indices and the blend weight.
fn sample_axis(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let x = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let lo = x.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, x - lo as f64)
}

/// Bilinear resize of each channel to `224×224`, scaled by `1/255`.
pub fn grid_to_tensor(grid: &RgbImageGrid) -> Result<ImageTensor> {
    grid.validate()?;
    let (h, w) = (grid.height, grid.width);
    let side = IMAGE_SIDE;
    let cols: Vec<_> = (0..side).map(|x| sample_axis(x, w, side)).collect();
    let mut data = vec![0f32; 3 * side * side];
    for y in 0..side {
        let (y0, y1, fy) = sample_axis(y, h, side);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            let (p00, p01) = (grid.pixels[y0 * w + x0], grid.pixels[y0 * w + x1]);
            let (p10, p11) = (grid.pixels[y1 * w + x0], grid.pixels[y1 * w + x1]);
            for c in 0..3 {
                let lerp = |a: u8, b: u8, t: f64| a as f64 + (b as f64 - a as f64) * t;
                let top = lerp(p00[c], p01[c], fx);
                let bottom = lerp(p10[c], p11[c], fx);
                let v = top + (bottom - top) * fy;
                data[(c * side + y) * side + x] = (v / 255.0) as f32;
            }
        }
    }
    ImageTensor::new(Tensor::new(&[3, side, side], data)?)
}

/// Encodes the grid's pixels as an 8-bit RGB PNG. Padding metadata is not
/// stored in the image.
pub fn encode_png(grid: &RgbImageGrid) -> Result<Vec<u8>> {
    grid.validate()?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, grid.width as u32, grid.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::InvalidInput(format!("png encode: {e}")))?;
        let flat: Vec<u8> = grid.pixels.iter().flatten().copied().collect();
        writer
            .write_image_data(&flat)
            .map_err(|e| Error::InvalidInput(format!("png encode: {e}")))?;
    }
    Ok(out)
}

/// Decodes an 8-bit RGB PNG; `pad_bytes` comes from the sidecar manifest.
pub fn decode_png(bytes: &[u8], pad_bytes: usize) -> Result<RgbImageGrid> {
    let mut dec = png::Decoder::new(bytes);
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| Error::Decode(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!(
            "{:?} at {:?} bits; only 8-bit RGB is accepted",
            info.color_type, info.bit_depth
        )));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Decode(e.to_string()))?;
    let data = &buf[..frame.buffer_size()];
    if data.len() != width * height * 3 {
        return Err(Error::Decode(format!(
            "{} bytes of pixel data for {width}x{height}",
            data.len()
        )));
    }
    let pixels = data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    RgbImageGrid::new(height, width, pixels, pad_bytes)
}
