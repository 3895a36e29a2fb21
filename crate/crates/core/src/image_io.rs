//! 8-bit PNG encoding of `[0, 1]` images.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(path: &Path, width: usize, height: usize, color: png::ColorType, pixels: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let corrupt = |e: png::EncodingError| Error::CorruptImage { path: path.to_path_buf(), msg: e.to_string() };
    let mut writer = enc.write_header().map_err(corrupt)?;
    writer.write_image_data(pixels).map_err(corrupt)?;
    writer.finish().map_err(corrupt)
}

/// Write a row-major grayscale image with values in `[0, 1]`.
pub fn write_gray(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    assert_eq!(values.len(), width * height);
    let bytes: Vec<u8> = values.iter().map(|&v| to_u8(v)).collect();
    encode(path, width, height, png::ColorType::Grayscale, &bytes)
}

/// Write interleaved 8-bit RGB pixels.
pub fn write_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), 3 * width * height);
    encode(path, width, height, png::ColorType::Rgb, rgb)
}

/// Read an 8-bit grayscale PNG as `(width, height, values in [0, 1])`.
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |msg: String| Error::CorruptImage { path: path.to_path_buf(), msg };
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| corrupt(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| corrupt("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| corrupt(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(corrupt(format!("expected 8-bit grayscale, found {:?} {:?}", info.color_type, info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let values = buf[..w * h].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((w, h, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.png");
        let values: Vec<f32> = (0..12).map(|i| i as f32 / 11.0).collect();
        write_gray(&path, 4, 3, &values).unwrap();
        let (w, h, back) = read_gray(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        for (a, b) in values.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7);
        }
    }

    #[test]
    fn garbage_is_reported_as_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        std::fs::write(&path, b"not a png").unwrap();
        assert!(matches!(read_gray(&path), Err(Error::CorruptImage { .. })));
        let rgb = dir.path().join("rgb.png");
        write_rgb(&rgb, 1, 1, &[1, 2, 3]).unwrap();
        assert!(matches!(read_gray(&rgb), Err(Error::CorruptImage { .. })));
    }
}
