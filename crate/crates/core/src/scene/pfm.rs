//! Portable float map (PFM) reader/writer.
//!
//! Header: `PF` (3 channel) or `Pf` (1 channel), then `width height`, then a
//! scale whose sign encodes endianness (negative = little endian). Scanlines
//! are stored bottom-up per the PFM convention; in memory row 0 is the top
//! image row, so IO flips vertically. We always write little-endian
//! (scale -1.0).

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::image::ImageF32;

pub fn write_pfm(path: &Path, img: &ImageF32) -> Result<()> {
    if img.channels != 1 && img.channels != 3 {
        return Err(Error::invalid(format!(
            "PFM supports 1 or 3 channels, got {}",
            img.channels
        )));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = if img.channels == 3 { "PF" } else { "Pf" };
    write!(w, "{header}\n{} {}\n-1.0\n", img.width, img.height).map_err(|e| Error::io(path, e))?;
    let row_len = (img.width * img.channels) as usize;
    for y in (0..img.height).rev() {
        let start = (y * img.width * img.channels) as usize;
        let row = &img.data[start..start + row_len];
        let mut bytes = Vec::with_capacity(row_len * 4);
        for v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<ImageF32> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut header = Vec::new();
    // Three whitespace-delimited tokens: type, width height, scale.
    let mut tokens = Vec::with_capacity(4);
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    while tokens.len() < 4 {
        r.read_exact(&mut byte).map_err(|e| Error::io(path, e))?;
        header.push(byte[0]);
        if byte[0].is_ascii_whitespace() {
            if !token.is_empty() {
                tokens.push(String::from_utf8_lossy(&token).into_owned());
                token.clear();
            }
        } else {
            token.push(byte[0]);
        }
    }
    let channels = match tokens[0].as_str() {
        "PF" => 3u32,
        "Pf" => 1u32,
        other => return Err(Error::format(path, format!("bad PFM type '{other}'"))),
    };
    let width: u32 = tokens[1]
        .parse()
        .map_err(|_| Error::format(path, format!("bad width '{}'", tokens[1])))?;
    let height: u32 = tokens[2]
        .parse()
        .map_err(|_| Error::format(path, format!("bad height '{}'", tokens[2])))?;
    let scale: f32 = tokens[3]
        .parse()
        .map_err(|_| Error::format(path, format!("bad scale '{}'", tokens[3])))?;
    let little_endian = scale < 0.0;

    let count = (width * height * channels) as usize;
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut flat = Vec::with_capacity(count);
    for c in bytes.chunks_exact(4) {
        let b = [c[0], c[1], c[2], c[3]];
        flat.push(if little_endian {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        });
    }
    // File rows are bottom-up; flip into top-down memory order.
    let mut img = ImageF32::new(width, height, channels);
    let row_len = (width * channels) as usize;
    for y in 0..height as usize {
        let src = (height as usize - 1 - y) * row_len;
        img.data[y * row_len..(y + 1) * row_len].copy_from_slice(&flat[src..src + row_len]);
    }
    Ok(img)
}
