//! 8-bit PNG reading and writing for `[0, 1]` tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Shape};

/// Scale to 0..=255 with round-half-up, clamping out-of-range values.
pub fn quantize(v: f32) -> u8 {
    let scaled = (v.clamp(0.0, 1.0) as f64) * 255.0;
    (scaled + 0.5).floor().min(255.0) as u8
}

/// Interleave a CHW tensor into 8-bit samples. 1, 3 and 4 channels map to
/// gray, RGB and RGBA.
pub fn encode_png(img: &ImageTensor<f32>) -> Result<Vec<u8>> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => {
            return Err(Error::InvalidShape(format!(
                "cannot store {c} channels in a PNG"
            )))
        }
    };
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut samples = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                samples.push(quantize(img.get(k, y, x)));
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(e.to_string()))?;
        writer
            .write_image_data(&samples)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, img: &ImageTensor<f32>) -> Result<()> {
    let bytes = encode_png(img)?;
    let mut f = BufWriter::new(File::create(path)?);
    std::io::Write::write_all(&mut f, &bytes)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<ImageTensor<f32>> {
    let dec = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "{}: only 8-bit PNGs are supported",
            path.display()
        )));
    }
    let c = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported color type {other:?}",
                path.display()
            )))
        }
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let stride = info.line_size;
    Ok(ImageTensor::from_fn(Shape::new(c, h, w), |k, y, x| {
        buf[y * stride + x * c + k] as f32 / 255.0
    }))
}
