//! 8-bit PNG reading and writing for images in `[-1, 1]` and binary masks.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Result, UstError};
use crate::tensor::Tensor;

fn img_err(path: &Path, e: impl std::fmt::Display) -> UstError {
    UstError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_u8(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            UstError::MissingFile(path.to_path_buf())
        } else {
            UstError::io(path, e)
        }
    })
}

/// Decoded 8-bit pixels: `(width, height, channels, bytes)`.
fn decode(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut dec = png::Decoder::new(BufReader::new(open(path)?));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| img_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| img_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(path, e))?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(img_err(path, "unexpanded palette image")),
    };
    Ok((info.width as usize, info.height as usize, channels, buf))
}

/// RGB image as a `[1, 3, h, w]` tensor in `[-1, 1]`. Grayscale is
/// replicated; alpha is dropped.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let (w, h, ch, buf) = decode(path)?;
    let mut data = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            let src = if ch >= 3 { c } else { 0 };
            data[c * h * w + p] = from_u8(buf[p * ch + src]);
        }
    }
    Tensor::new(&[1, 3, h, w], data)
}

/// Single-channel mask as `[1, 1, h, w]`, thresholded at half intensity.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let (w, h, ch, buf) = decode(path)?;
    if ch != 1 {
        return Err(img_err(path, format!("mask must be single-channel, found {ch} channels")));
    }
    let data = buf.iter().map(|&b| if b >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[1, 1, h, w], data)
}

fn encode(path: &Path, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| UstError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| img_err(path, e))?;
    writer.write_image_data(bytes).map_err(|e| img_err(path, e))?;
    writer.finish().map_err(|e| img_err(path, e))?;
    Ok(())
}

/// Interleave planar `[3, h, w]` values in `[-1, 1]` into RGB bytes.
pub fn rgb_bytes(planar: &[f64], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            out[p * 3 + c] = to_u8(planar[c * h * w + p]);
        }
    }
    out
}

/// Write sample `i` of an `[n, 3, h, w]` tensor.
pub fn write_rgb(path: &Path, t: &Tensor, i: usize) -> Result<()> {
    let (_, c, h, w) = t.dims4();
    if c != 3 {
        return Err(UstError::Contract(format!("write_rgb needs 3 channels, got {c}")));
    }
    encode(path, w, h, png::ColorType::Rgb, &rgb_bytes(t.sample_data(i), h, w))
}

pub fn write_rgb_bytes(path: &Path, w: usize, h: usize, bytes: &[u8]) -> Result<()> {
    encode(path, w, h, png::ColorType::Rgb, bytes)
}

/// Write sample `i` of an `[n, 1, h, w]` mask as {0, 255}.
pub fn write_mask(path: &Path, t: &Tensor, i: usize) -> Result<()> {
    let (_, _, h, w) = t.dims4();
    let bytes: Vec<u8> = t.sample_data(i).iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    encode(path, w, h, png::ColorType::Grayscale, &bytes)
}

pub fn write_mask_bytes(path: &Path, w: usize, h: usize, bytes: &[u8]) -> Result<()> {
    encode(path, w, h, png::ColorType::Grayscale, bytes)
}

/// Tile equally sized `[3, h, w]` images into rows, with a 2-pixel gap.
pub fn write_grid(path: &Path, rows: &[Vec<&[f64]>], h: usize, w: usize) -> Result<()> {
    const GAP: usize = 2;
    let ncols = rows.iter().map(Vec::len).max().unwrap_or(0);
    if ncols == 0 {
        return Err(UstError::Contract("empty image grid".into()));
    }
    let gw = ncols * w + (ncols - 1) * GAP;
    let gh = rows.len() * h + (rows.len() - 1) * GAP;
    let mut bytes = vec![255; gw * gh * 3];
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let tile = rgb_bytes(img, h, w);
            for y in 0..h {
                let dst = ((r * (h + GAP) + y) * gw + c * (w + GAP)) * 3;
                bytes[dst..dst + w * 3].copy_from_slice(&tile[y * w * 3..(y + 1) * w * 3]);
            }
        }
    }
    encode(path, gw, gh, png::ColorType::Rgb, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_and_mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let vals: Vec<f64> = (0..48).map(|i| from_u8((i * 5) as u8)).collect();
        let t = Tensor::new(&[1, 3, 4, 4], vals).unwrap();
        let p = dir.path().join("x.png");
        write_rgb(&p, &t, 0).unwrap();
        assert_eq!(read_rgb(&p).unwrap(), t);
        let m = Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let pm = dir.path().join("m.png");
        write_mask(&pm, &m, 0).unwrap();
        assert_eq!(read_mask(&pm).unwrap(), m);
        assert!(read_mask(&p).is_err());
    }
}
