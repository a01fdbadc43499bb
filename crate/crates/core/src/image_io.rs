//! PNG output for single images and contact-sheet grids.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const GUTTER: usize = 2;

/// `[-1, 1] → [0, 255]` via `round((x + 1)·127.5)`, halves rounded up.
pub fn to_u8<T: Scalar>(x: T) -> u8 {
    let v = ((x.to_f64_lossy() + 1.0) * 127.5 + 0.5).floor();
    v.clamp(0.0, 255.0) as u8
}

/// Interleaved RGB8 rows of an image stored as `[.., 3, H, W]` planes.
pub fn to_rgb8<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize, Vec<u8>)> {
    let s = image.shape();
    if s.len() < 3 || s[s.len() - 3] != 3 || image.len() != 3 * s[s.len() - 2] * s[s.len() - 1] {
        return Err(Error::param(format!("expected a single 3-channel image, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let plane = h * w;
    let d = image.data();
    let mut out = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(to_u8(d[c * plane + i]));
        }
    }
    Ok((w, h, out))
}

/// Row-major grid with black gutters between cells; empty cells stay black.
pub fn grid_rgb8<T: Scalar>(images: &[Tensor<T>], columns: usize) -> Result<(usize, usize, Vec<u8>)> {
    if images.is_empty() || columns == 0 {
        return Err(Error::param("grid needs at least one image and one column"));
    }
    let cells: Vec<(usize, usize, Vec<u8>)> = images.iter().map(to_rgb8).collect::<Result<_>>()?;
    let (cw, ch) = (cells[0].0, cells[0].1);
    if cells.iter().any(|c| c.0 != cw || c.1 != ch) {
        return Err(Error::param("grid images differ in size"));
    }
    let cols = columns.min(images.len());
    let rows = images.len().div_ceil(cols);
    let width = cols * cw + (cols - 1) * GUTTER;
    let height = rows * ch + (rows - 1) * GUTTER;
    let mut out = vec![0u8; width * height * 3];
    for (k, (_, _, px)) in cells.iter().enumerate() {
        let (gx, gy) = ((k % cols) * (cw + GUTTER), (k / cols) * (ch + GUTTER));
        for y in 0..ch {
            let dst = ((gy + y) * width + gx) * 3;
            out[dst..dst + cw * 3].copy_from_slice(&px[y * cw * 3..(y + 1) * cw * 3]);
        }
    }
    Ok((width, height, out))
}

pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(rgb).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Splits a `[N, 3, H, W]` batch into single images.
pub fn unbatch<T: Scalar>(batch: &Tensor<T>) -> Vec<Tensor<T>> {
    (0..batch.shape()[0]).map(|i| batch.item(i)).collect()
}

pub fn write_image_grid<T: Scalar>(images: &[Tensor<T>], path: &Path, columns: usize) -> Result<()> {
    let (w, h, px) = grid_rgb8(images, columns)?;
    write_png(path, w, h, &px)
}
