//! PNG reading and writing for images and paletted label maps.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ddnet_core::LabelMap;

use crate::error::{DataError, Result};
use crate::palette::Palette;

/// Decoded 8-bit RGB pixels, row-major and interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

pub fn write_rgb(path: &Path, img: &Rgb8) -> Result<()> {
    let enc_err = |e: png::EncodingError| DataError::Encode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let file = File::create(path).map_err(DataError::io(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(enc_err)?;
    w.write_image_data(&img.data).map_err(enc_err)?;
    w.finish().map_err(enc_err)
}

/// Writes label ids as palette indices, with the palette colors in PLTE.
pub fn write_label(path: &Path, label: &LabelMap, palette: &Palette) -> Result<()> {
    let enc_err = |e: png::EncodingError| DataError::Encode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let used = label.data().iter().copied().max().unwrap_or(0);
    let mut plte = vec![0u8; 3 * (usize::from(used) + 1)];
    for id in 0..=used {
        match palette.color_of(id) {
            Some(rgb) => plte[3 * usize::from(id)..3 * usize::from(id) + 3].copy_from_slice(&rgb),
            None if label.data().contains(&id) => {
                return Err(DataError::Encode {
                    path: path.to_path_buf(),
                    reason: format!("palette has no color for label {id}"),
                })
            }
            None => {}
        }
    }
    let file = File::create(path).map_err(DataError::io(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), label.width() as u32, label.height() as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(plte);
    let mut w = enc.write_header().map_err(enc_err)?;
    w.write_image_data(label.data()).map_err(enc_err)?;
    w.finish().map_err(enc_err)
}

/// Reads any 8- or 16-bit PNG as RGB; gray is replicated and alpha dropped.
pub fn read_rgb(path: &Path) -> Result<Rgb8> {
    let dec_err = |reason: String| DataError::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(DataError::io(path))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| dec_err(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| dec_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| dec_err(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(dec_err("palette was not expanded".into())),
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for row in buf.chunks(info.line_size).take(h) {
        for px in row[..w * channels].chunks_exact(channels) {
            match channels {
                1 | 2 => data.extend_from_slice(&[px[0]; 3]),
                _ => data.extend_from_slice(&px[..3]),
            }
        }
    }
    Ok(Rgb8 {
        height: h,
        width: w,
        data,
    })
}

/// Reads a label PNG, mapping each color through `palette`. Colors absent
/// from the palette become void; the second value counts those pixels.
pub fn read_label(path: &Path, palette: &Palette) -> Result<(LabelMap, u64)> {
    let rgb = read_rgb(path)?;
    let mut unknown = 0u64;
    let data = rgb
        .data
        .chunks_exact(3)
        .map(|px| {
            palette.class_of([px[0], px[1], px[2]]).unwrap_or_else(|| {
                unknown += 1;
                ddnet_core::VOID
            })
        })
        .collect();
    Ok((LabelMap::new(rgb.height, rgb.width, data)?, unknown))
}
