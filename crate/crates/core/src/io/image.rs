//! Images as 8-bit PNG for viewing, or 32-bit floats behind a one-line JSON
//! header when exact values matter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::types::Image;

/// Writes a 1- or 3-channel image, clamped to `[0, 1]`, as 8-bit PNG.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::InvalidConfig(format!("cannot write a {c}-channel PNG"))),
    };
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, img.width as u32, img.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| png_error(path, e))?;
        let data: Vec<u8> = img.data.iter().map(|&v| to_byte(v)).collect();
        w.write_image_data(&data).map_err(|e| png_error(path, e))?;
    }
    write_atomic(path, &bytes)
}

fn to_byte(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn png_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::MalformedFile {
        kind: "png",
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads an 8-bit gray, RGB or RGBA PNG into `[0, 1]`; alpha is dropped.
pub fn read_png(path: &Path) -> Result<Image> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| png_error(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_error(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| png_error(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src_channels = info.color_type.samples();
    let bytes = &buf[..info.buffer_size()];
    let (channels, pick): (usize, &[usize]) = match src_channels {
        1 => (1, &[0]),
        2 => (1, &[0]),
        3 => (3, &[0, 1, 2]),
        4 => (3, &[0, 1, 2]),
        _ => return Err(png_error(path, "unsupported channel layout")),
    };
    let mut data = Vec::with_capacity(w * h * channels);
    for px in bytes.chunks_exact(src_channels) {
        for &c in pick {
            data.push(px[c] as f64 / 255.0);
        }
    }
    Image::from_data(w, h, channels, data)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FloatHeader {
    width: usize,
    height: usize,
    channels: usize,
    dtype: String,
}

const FLOAT_DTYPE: &str = "f32le";

/// Float image: a JSON header line, then row-major little-endian `f32`s.
pub fn write_float_image(path: &Path, img: &Image) -> Result<()> {
    let header = FloatHeader {
        width: img.width,
        height: img.height,
        channels: img.channels,
        dtype: FLOAT_DTYPE.into(),
    };
    let mut bytes = serde_json::to_vec(&header).expect("header serializes");
    bytes.push(b'\n');
    for &v in &img.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn read_float_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::MalformedFile {
        kind: "float image",
        path: path.to_path_buf(),
        message,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: FloatHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(e.to_string()))?;
    if header.dtype != FLOAT_DTYPE {
        return Err(bad(format!("unsupported dtype '{}'", header.dtype)));
    }
    let body = &bytes[nl + 1..];
    let n = header.width * header.height * header.channels;
    if body.len() != 4 * n {
        return Err(bad(format!("expected {} bytes of pixel data, found {}", 4 * n, body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Image::from_data(header.width, header.height, header.channels, data)
}

/// Reads either format, chosen by extension (`.png` or anything else as
/// float).
pub fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => read_png(path),
        _ => read_float_image(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize, c: usize) -> Image {
        let data = (0..w * h * c).map(|i| i as f64 / (w * h * c) as f64).collect();
        Image::from_data(w, h, c, data).unwrap()
    }

    #[test]
    fn float_images_round_trip_to_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.f32");
        let img = ramp(5, 3, 3);
        write_float_image(&p, &img).unwrap();
        let back = read_float_image(&p).unwrap();
        assert_eq!(back.dims(), img.dims());
        for (a, b) in img.data.iter().zip(&back.data) {
            assert_eq!(*b, *a as f32 as f64);
        }
    }

    #[test]
    fn png_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        for c in [1, 3] {
            let p = dir.path().join(format!("a{c}.png"));
            let img = ramp(7, 4, c);
            write_png(&p, &img).unwrap();
            let back = read_png(&p).unwrap();
            assert_eq!(back.dims(), img.dims());
            for (a, b) in img.data.iter().zip(&back.data) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn truncated_float_image_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.f32");
        write_float_image(&p, &ramp(4, 4, 3)).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_float_image(&p), Err(Error::MalformedFile { .. })));
    }
}
