//! PNG (8-bit) and PFM (32-bit float) image files as [`Grid`]s in [0, 1].
//!
//! The format is chosen by file extension.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::coremath::Grid;
use crate::error::{Error, Result};

fn is_pfm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pfm"))
}

/// Reads an image as an RGB (3) or mask (1) grid, converting as needed.
pub fn read_channels(path: impl AsRef<Path>, channels: usize) -> Result<Grid> {
    let path = path.as_ref();
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidArgument(format!("{channels} channels requested")));
    }
    let g = if is_pfm(path) { read_pfm(path)? } else { read_png(path, channels)? };
    Ok(convert(g, channels))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Grid> {
    read_channels(path, 3)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Grid> {
    read_channels(path, 1)
}

fn convert(g: Grid, channels: usize) -> Grid {
    match (g.channels, channels) {
        (a, b) if a == b => g,
        (1, 3) => Grid::from_fn(g.width, g.height, 3, |x, y, _| g.at(x, y)[0]),
        (3, 1) => Grid::from_fn(g.width, g.height, 1, |x, y, _| {
            let p = g.at(x, y);
            0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
        }),
        _ => unreachable!("only 1 and 3 channel grids are produced"),
    }
}

fn read_png(path: &Path, channels: usize) -> Result<Grid> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(if channels == 1 {
        let buf = img.to_luma8();
        Grid {
            width: w,
            height: h,
            channels: 1,
            data: buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        }
    } else {
        let buf = img.to_rgb8();
        Grid {
            width: w,
            height: h,
            channels: 3,
            data: buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        }
    })
}

/// Writes a 1 or 3 channel grid; PNG values are clamped and rounded.
pub fn write_image(path: impl AsRef<Path>, g: &Grid) -> Result<()> {
    let path = path.as_ref();
    if g.channels != 1 && g.channels != 3 {
        return Err(Error::Shape(format!("cannot write {} channel image", g.channels)));
    }
    if is_pfm(path) {
        return write_pfm(path, g);
    }
    let bytes: Vec<u8> = g
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let (w, h) = (g.width as u32, g.height as u32);
    let res = if g.channels == 1 {
        image::GrayImage::from_raw(w, h, bytes).map(|b| b.save(path))
    } else {
        image::RgbImage::from_raw(w, h, bytes).map(|b| b.save(path))
    };
    match res {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(Error::Image(format!("{}: {e}", path.display()))),
        None => Err(Error::Shape("grid size does not match data".into())),
    }
}

fn read_pfm(path: &Path) -> Result<Grid> {
    let bad = |why: &str| Error::Image(format!("{}: {why}", path.display()));
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut tokens = Vec::new();
    // Header: kind, width, height, scale, separated by whitespace; exactly
    // one whitespace byte follows the scale.
    while tokens.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("truncated header"));
        }
        tokens.extend(line.split_whitespace().map(str::to_string));
    }
    let channels = match tokens[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(bad("bad magic")),
    };
    let w: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    let little = scale < 0.0;
    let mut raw = vec![0u8; w * h * channels * 4];
    r.read_exact(&mut raw).map_err(|_| bad("truncated data"))?;
    let vals: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| {
            let b = [c[0], c[1], c[2], c[3]];
            (if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
        })
        .collect();
    let row = w * channels;
    // Rows are stored bottom to top.
    Ok(Grid::from_fn(w, h, channels, |x, y, c| vals[(h - 1 - y) * row + x * channels + c]))
}

fn write_pfm(path: &Path, g: &Grid) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let kind = if g.channels == 3 { "PF" } else { "Pf" };
    write!(f, "{kind}\n{} {}\n-1.0\n", g.width, g.height)?;
    let row = g.width * g.channels;
    for y in (0..g.height).rev() {
        for v in &g.data[y * row..(y + 1) * row] {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}
