use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use super::Raster;
use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Imports an 8- or 16-bit greyscale or RGB PNG, normalising to `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Raster> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let dec = png::Decoder::new(BufReader::new(f));
    let mut reader = dec.read_info().map_err(|e| Error::format(0, format!("{}: {e}", path.display())))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::format(0, "png too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(0, format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (bands, names): (usize, Vec<String>) = match info.color_type {
        png::ColorType::Grayscale => (1, vec!["PAN".into()]),
        png::ColorType::Rgb => (3, vec!["R".into(), "G".into(), "B".into()]),
        other => return Err(Error::format(0, format!("unsupported png colour type {other:?}"))),
    };
    let (bytes_per, max) = match info.bit_depth {
        png::BitDepth::Eight => (1, 255.0f32),
        png::BitDepth::Sixteen => (2, 65535.0f32),
        other => return Err(Error::format(0, format!("unsupported png bit depth {other:?}"))),
    };
    let mut data = vec![0.0f32; w * h * bands];
    for y in 0..h {
        let line = &buf[y * info.line_size..(y + 1) * info.line_size];
        for x in 0..w {
            for b in 0..bands {
                let s = (x * bands + b) * bytes_per;
                let raw = if bytes_per == 1 { line[s] as f32 } else { u16::from_be_bytes([line[s], line[s + 1]]) as f32 };
                data[(b * h + y) * w + x] = raw / max;
            }
        }
    }
    Raster::new(w, h, names, data).map(|r| r.with_scale(max as f64))
}

/// Writes an 8-bit preview. `bands` picks one band (grey) or three (RGB).
pub fn write_png_preview(path: &Path, r: &Raster, bands: &[usize]) -> Result<()> {
    let color = match bands.len() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        n => return Err(Error::config(format!("preview needs 1 or 3 bands, got {n}"))),
    };
    if let Some(&b) = bands.iter().find(|&&b| b >= r.bands()) {
        return Err(Error::config(format!("preview band {b} out of range for {} bands", r.bands())));
    }
    let (w, h) = (r.width(), r.height());
    let mut px = Vec::with_capacity(w * h * bands.len());
    for y in 0..h {
        for x in 0..w {
            for &b in bands {
                px.push((r.get(b, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut wr = enc.write_header().map_err(|e| Error::format(0, e.to_string()))?;
        wr.write_image_data(&px).map_err(|e| Error::format(0, e.to_string()))?;
    }
    write_atomic(path, &out)
}
