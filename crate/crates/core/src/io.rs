//! File helpers: atomic writes and PNG encode/decode.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, ImageFormat, Luma, RgbImage as Rgb8Image};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Writes via a sibling temp file and rename so readers never see partial files.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidInput(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedMetadata {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn read_to_string(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn encode_png(path: &Path, img: DynamicImage) -> Result<()> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    atomic_write(path, buf.get_ref())
}

fn open_png(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_png_u16(path: &Path, grid: &Grid<u16>) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(grid.width as u32, grid.height as u32, grid.data.clone())
            .expect("buffer length matches dimensions");
    encode_png(path, DynamicImage::ImageLuma16(img))
}

pub fn read_png_u16(path: &Path) -> Result<Grid<u16>> {
    match open_png(path)? {
        DynamicImage::ImageLuma16(img) => {
            let (w, h) = img.dimensions();
            Grid::from_vec(h as usize, w as usize, img.into_raw())
        }
        other => Err(Error::InvalidInput(format!(
            "{}: expected 16-bit single-channel PNG, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn write_png_gray8(path: &Path, grid: &Grid<u8>) -> Result<()> {
    let img = GrayImage::from_raw(grid.width as u32, grid.height as u32, grid.data.clone())
        .expect("buffer length matches dimensions");
    encode_png(path, DynamicImage::ImageLuma8(img))
}

pub fn read_png_gray8(path: &Path) -> Result<Grid<u8>> {
    match open_png(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            Grid::from_vec(h as usize, w as usize, img.into_raw())
        }
        other => Err(Error::InvalidInput(format!(
            "{}: expected 8-bit single-channel PNG, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn write_png_rgb8(path: &Path, grid: &Grid<[u8; 3]>) -> Result<()> {
    let raw: Vec<u8> = grid.data.iter().flatten().copied().collect();
    let img =
        Rgb8Image::from_raw(grid.width as u32, grid.height as u32, raw).expect("buffer length matches dimensions");
    encode_png(path, DynamicImage::ImageRgb8(img))
}

pub fn read_png_rgb8(path: &Path) -> Result<Grid<[u8; 3]>> {
    let img = open_png(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0).collect();
    Grid::from_vec(h as usize, w as usize, data)
}

/// Meters to 0.1 mm units.
pub const DEPTH_UNITS_PER_METER: f64 = 10_000.0;

pub fn quantize_depth(path: &Path, depth: &Grid<f64>) -> Result<Grid<u16>> {
    let mut out = Vec::with_capacity(depth.len());
    for &d in &depth.data {
        if !d.is_finite() || d < 0.0 {
            return Err(Error::InvalidInput(format!(
                "{}: depth {d} cannot be stored",
                path.display()
            )));
        }
        let q = (d * DEPTH_UNITS_PER_METER).round();
        if q > u16::MAX as f64 {
            return Err(Error::InvalidInput(format!(
                "{}: depth {d} m exceeds the 16-bit range",
                path.display()
            )));
        }
        out.push(q as u16);
    }
    Grid::from_vec(depth.height, depth.width, out)
}

pub fn write_depth_png(path: &Path, depth: &Grid<f64>) -> Result<()> {
    write_png_u16(path, &quantize_depth(path, depth)?)
}

pub fn read_depth_png(path: &Path) -> Result<Grid<f64>> {
    Ok(read_png_u16(path)?.map(|&q| q as f64 / DEPTH_UNITS_PER_METER))
}
