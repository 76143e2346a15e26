//! 8-bit grayscale PNG / PGM output and sample montages.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::dataio::ImageU8;
use crate::{Error, Result};

/// Writes a grayscale PNG; `meta` pairs become `tEXt` chunks.
pub fn write_png(path: &Path, img: &ImageU8, meta: &[(&str, &str)]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), img.side as u32, img.side as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in meta {
        enc.add_text_chunk(k.to_string(), v.to_string())
            .map_err(|e| Error::Format(format!("png text: {e}")))?;
    }
    let mut w = enc.write_header().map_err(|e| Error::Format(format!("png: {e}")))?;
    w.write_image_data(&img.pixels)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    w.finish().map_err(|e| Error::Format(format!("png: {e}")))
}

pub fn read_png(path: &Path) -> Result<ImageU8> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(f));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut r = dec.read_info().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; r.output_buffer_size().unwrap_or(0)];
    let info = r
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if info.width != info.height {
        return Err(Error::Shape(format!("{} is not square", path.display())));
    }
    let ch = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Format("indexed png after expansion".into())),
    };
    let n = info.width as usize;
    let px = (0..n * n)
        .map(|i| {
            let p = &buf[i * ch..];
            if ch >= 3 {
                ((p[0] as u32 * 299 + p[1] as u32 * 587 + p[2] as u32 * 114 + 500) / 1000) as u8
            } else {
                p[0]
            }
        })
        .collect();
    ImageU8::new(n, px)
}

/// Binary PGM (P5); each `comment` line becomes a `#` header line.
pub fn write_pgm(path: &Path, img: &ImageU8, comments: &[&str]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut head = String::from("P5\n");
    for c in comments {
        for line in c.lines() {
            head.push_str("# ");
            head.push_str(line);
            head.push('\n');
        }
    }
    head.push_str(&format!("{0} {0}\n255\n", img.side));
    w.write_all(head.as_bytes())
        .and_then(|_| w.write_all(&img.pixels))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Tiles images into a near-square grid separated by 2-pixel white lines.
/// Returns `(width, height, pixels)`; empty cells stay white.
pub fn montage(images: &[ImageU8]) -> Result<(usize, usize, Vec<u8>)> {
    const SEP: usize = 2;
    let Some(first) = images.first() else {
        return Err(Error::EmptyDataset);
    };
    let s = first.side;
    if images.iter().any(|i| i.side != s) {
        return Err(Error::Shape("montage images differ in size".into()));
    }
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let w = cols * s + (cols - 1) * SEP;
    let h = rows * s + (rows - 1) * SEP;
    let mut px = vec![255u8; w * h];
    for (k, img) in images.iter().enumerate() {
        let (y0, x0) = ((k / cols) * (s + SEP), (k % cols) * (s + SEP));
        for r in 0..s {
            px[(y0 + r) * w + x0..(y0 + r) * w + x0 + s].copy_from_slice(&img.pixels[r * s..(r + 1) * s]);
        }
    }
    Ok((w, h, px))
}

pub fn write_montage_png(path: &Path, images: &[ImageU8], meta: &[(&str, &str)]) -> Result<()> {
    let (w, h, px) = montage(images)?;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in meta {
        enc.add_text_chunk(k.to_string(), v.to_string())
            .map_err(|e| Error::Format(format!("png text: {e}")))?;
    }
    let mut wr = enc.write_header().map_err(|e| Error::Format(format!("png: {e}")))?;
    wr.write_image_data(&px).map_err(|e| Error::Format(format!("png: {e}")))?;
    wr.finish().map_err(|e| Error::Format(format!("png: {e}")))
}
