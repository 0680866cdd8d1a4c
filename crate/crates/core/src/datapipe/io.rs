//! Image files and CSV manifests.
//!
//! Decoding goes through the `image` crate (PGM/PPM/PNG, plus TIFF and GIF
//! for the public dataset layouts). PGM and PPM are written directly as
//! binary P5/P6 with maxval 255.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage as Rgb8Image};

use super::{Plane, RgbImage, SamplePair};
use crate::error::{Error, Result};

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let reader =
        image::ImageReader::new(std::io::Cursor::new(bytes)).with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() })
}

/// Reads any supported image as RGB in `[0,1]`.
pub fn read_image(path: &Path) -> Result<RgbImage> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    RgbImage::new(h as usize, w as usize, data)
}

/// Reads any supported image as a single luma channel in `[0,1]`.
pub fn read_plane(path: &Path) -> Result<Plane> {
    let img = decode(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Plane::new(h as usize, w as usize, data)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_bytes(path: &Path, header: String, body: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(header.as_bytes())
        .and_then(|_| w.write_all(body))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Binary PGM (P5), value `round(255·v)`.
pub fn write_plane_pgm(path: &Path, plane: &Plane) -> Result<()> {
    let body: Vec<u8> = plane.data.iter().map(|&v| to_byte(v)).collect();
    write_bytes(path, format!("P5\n{} {}\n255\n", plane.width, plane.height), &body)
}

pub fn write_plane_png(path: &Path, plane: &Plane) -> Result<()> {
    let body: Vec<u8> = plane.data.iter().map(|&v| to_byte(v)).collect();
    let img = GrayImage::from_raw(plane.width as u32, plane.height as u32, body).expect("plane dims are consistent");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() })
}

/// Writes an RGB image as PPM (P6) or PNG, chosen by extension.
pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let body: Vec<u8> = img.data.iter().map(|&v| to_byte(v)).collect();
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => Rgb8Image::from_raw(img.width as u32, img.height as u32, body)
            .expect("image dims are consistent")
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() }),
        _ => write_bytes(path, format!("P6\n{} {}\n255\n", img.width, img.height), &body),
    }
}

/// One manifest row; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub image: String,
    pub label: String,
    pub mask: Option<String>,
}

fn read_rows(path: &Path) -> Result<Vec<ManifestRow>> {
    let merr = |message: String| Error::Manifest { path: path.to_path_buf(), message };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = rdr.headers().map_err(|e| merr(e.to_string()))?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    let has_mask = match cols[..] {
        ["id", "image", "label"] => false,
        ["id", "image", "label", "mask"] => true,
        _ => return Err(merr(format!("header must be id,image,label[,mask], got {}", cols.join(",")))),
    };
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| merr(format!("row {}: {e}", i + 1)))?;
        let field = |k: usize| rec.get(k).unwrap_or("").to_string();
        let mask = if has_mask { Some(field(3)).filter(|m| !m.is_empty()) } else { None };
        rows.push(ManifestRow { id: field(0), image: field(1), label: field(2), mask });
    }
    Ok(rows)
}

fn resolve(base: &Path, rel: &str, row: usize, id: &str) -> Result<PathBuf> {
    let p = base.join(rel);
    if !p.is_file() {
        return Err(Error::MissingFile { row, id: id.to_string(), path: p });
    }
    Ok(p)
}

fn binarize_half(plane: Plane) -> Plane {
    let data = plane.data.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    Plane { data, ..plane }
}

/// Loads every (image, label, mask) triple in manifest order. Rows are
/// numbered from 1, excluding the header.
pub fn load_manifest(path: &Path) -> Result<Vec<SamplePair>> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let rows = read_rows(path)?;
    let mut pairs = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let row = i + 1;
        let bad = |e: Error| match e {
            Error::Decode { message, .. } => Error::BadImage { row, id: r.id.clone(), message },
            other => other,
        };
        let image = read_image(&resolve(&base, &r.image, row, &r.id)?).map_err(bad)?;
        let label = binarize_half(read_plane(&resolve(&base, &r.label, row, &r.id)?).map_err(bad)?);
        let mask = match &r.mask {
            Some(m) => Some(binarize_half(read_plane(&resolve(&base, m, row, &r.id)?).map_err(bad)?)),
            None => None,
        };
        let dims = image.dims();
        if label.dims() != dims {
            return Err(Error::SizeMismatch {
                row,
                id: r.id.clone(),
                detail: format!("image is {}x{}, label is {}x{}", dims.0, dims.1, label.height, label.width),
            });
        }
        if let Some(m) = &mask {
            if m.dims() != dims {
                return Err(Error::SizeMismatch {
                    row,
                    id: r.id.clone(),
                    detail: format!("image is {}x{}, mask is {}x{}", dims.0, dims.1, m.height, m.width),
                });
            }
        }
        pairs.push(SamplePair { id: r.id.clone(), image, label, mask });
    }
    Ok(pairs)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let with_mask = rows.iter().any(|r| r.mask.is_some());
    let io = |e: csv::Error| Error::Manifest { path: path.to_path_buf(), message: e.to_string() };
    if with_mask {
        w.write_record(["id", "image", "label", "mask"]).map_err(io)?;
    } else {
        w.write_record(["id", "image", "label"]).map_err(io)?;
    }
    for r in rows {
        if with_mask {
            w.write_record([&r.id, &r.image, &r.label, r.mask.as_deref().unwrap_or("")]).map_err(io)?;
        } else {
            w.write_record([&r.id, &r.image, &r.label]).map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Raw little-endian `f32` values in row-major order, no header.
pub fn write_plane_f32(path: &Path, plane: &Plane) -> Result<()> {
    let body: Vec<u8> = plane.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Reads a sidecar written by [`write_plane_f32`]; the caller supplies the
/// dimensions since the file carries none.
pub fn read_plane_f32(path: &Path, height: usize, width: usize) -> Result<Plane> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 4 * height * width {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            message: format!("{} bytes is not {height}x{width} f32 values", bytes.len()),
        });
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Plane::new(height, width, data)
}
