//! On-disk containers for stacks and images.
//!
//! Stacks are multi-page 32-bit float TIFF files, or raw little-endian
//! `f32` data in row-major order. Either way a JSON sidecar with the same
//! stem records the [`StackHeader`]. For TIFF it is optional, for raw data
//! it is required.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};

use crate::covariance::{ImageStack, StackHeader};
use crate::error::{Error, Result};

/// Pixel size and frame rate assumed for TIFF stacks without a sidecar.
const DEFAULT_PIXEL_NM: f64 = 100.0;
const DEFAULT_RATE_HZ: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Container {
    Tiff,
    Raw,
}

fn container(path: &Path) -> Result<Container> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("tif") | Some("tiff") => Ok(Container::Tiff),
        Some("raw") => Ok(Container::Raw),
        _ => Err(format_error(path, "expected a .tif, .tiff or .raw extension")),
    }
}

fn format_error(path: &Path, reason: impl ToString) -> Error {
    Error::Format { path: path.display().to_string(), reason: reason.to_string() }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| format_error(path, e))
}

fn tiff_pages(path: &Path, pages: impl Iterator<Item = Vec<f32>>, rows: usize, cols: usize) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = TiffEncoder::new(file).map_err(|e| format_error(path, e))?;
    for page in pages {
        enc.write_image::<colortype::Gray32Float>(cols as u32, rows as u32, &page)
            .map_err(|e| format_error(path, e))?;
    }
    Ok(())
}

fn frame_f32(frame: ndarray::ArrayView2<f64>) -> Vec<f32> {
    frame.iter().map(|&v| v as f32).collect()
}

fn decoded_f64(path: &Path, data: DecodingResult) -> Result<Vec<f64>> {
    Ok(match data {
        DecodingResult::F32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::F64(v) => v,
        DecodingResult::U8(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::I32(v) => v.into_iter().map(f64::from).collect(),
        _ => return Err(format_error(path, "unsupported TIFF sample type")),
    })
}

fn read_tiff_pages(path: &Path, max_pages: usize) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let file = BufReader::new(File::open(path)?);
    let mut dec = Decoder::new(file)
        .map_err(|e| format_error(path, e))?
        .with_limits(Limits::unlimited());
    let (w, h) = dec.dimensions().map_err(|e| format_error(path, e))?;
    let mut pages = Vec::new();
    loop {
        let dims = dec.dimensions().map_err(|e| format_error(path, e))?;
        if dims != (w, h) {
            return Err(format_error(path, "pages differ in size"));
        }
        let data = dec.read_image().map_err(|e| format_error(path, e))?;
        let values = decoded_f64(path, data)?;
        if values.len() != (w * h) as usize {
            return Err(format_error(path, "only single-channel images are supported"));
        }
        pages.push(values);
        if pages.len() == max_pages || !dec.more_images() {
            break;
        }
        dec.next_image().map_err(|e| format_error(path, e))?;
    }
    Ok((h as usize, w as usize, pages))
}

pub fn write_stack(path: &Path, stack: &ImageStack) -> Result<()> {
    let m = stack.size();
    match container(path)? {
        Container::Tiff => tiff_pages(
            path,
            stack.frames().axis_iter(Axis(0)).map(frame_f32),
            m,
            m,
        )?,
        Container::Raw => {
            let mut out = BufWriter::new(File::create(path)?);
            for v in stack.frames().iter() {
                out.write_all(&(*v as f32).to_le_bytes())?;
            }
            out.flush()?;
        }
    }
    write_json(&sidecar_path(path), &stack.header())
}

pub fn read_stack(path: &Path) -> Result<ImageStack> {
    let side = sidecar_path(path);
    let header: Option<StackHeader> = if side.exists() { Some(read_json(&side)?) } else { None };
    match container(path)? {
        Container::Tiff => {
            let (h, w, pages) = read_tiff_pages(path, usize::MAX)?;
            if h != w {
                return Err(format_error(path, format!("frames must be square, got {h}x{w}")));
            }
            let t = pages.len();
            let flat: Vec<f64> = pages.into_iter().flatten().collect();
            let frames = Array3::from_shape_vec((t, h, w), flat).map_err(|e| format_error(path, e))?;
            if let Some(hd) = header {
                if hd.m != h || hd.t != t {
                    return Err(format_error(&side, format!("header says {}x{} frames, file has {t} of {h}", hd.t, hd.m)));
                }
            }
            let (px, rate) = header.map_or((DEFAULT_PIXEL_NM, DEFAULT_RATE_HZ), |h| (h.pixel_size_nm, h.frame_rate_hz));
            ImageStack::new(frames, px, rate)
        }
        Container::Raw => {
            let hd = header.ok_or_else(|| format_error(path, "raw stack requires a JSON sidecar"))?;
            let mut bytes = Vec::new();
            BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
            let expected = hd.t * hd.m * hd.m * 4;
            if bytes.len() != expected {
                return Err(format_error(path, format!("expected {expected} bytes, found {}", bytes.len())));
            }
            let flat: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect();
            let frames = Array3::from_shape_vec((hd.t, hd.m, hd.m), flat).map_err(|e| format_error(path, e))?;
            ImageStack::new(frames, hd.pixel_size_nm, hd.frame_rate_hz)
        }
    }
}

/// Header of a single raw image.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct ImageHeader {
    rows: usize,
    cols: usize,
}

/// Single image as 32-bit float TIFF, or raw `f32` plus sidecar.
pub fn write_image(path: &Path, img: &Array2<f64>) -> Result<()> {
    let (rows, cols) = img.dim();
    match container(path)? {
        Container::Tiff => tiff_pages(path, std::iter::once(frame_f32(img.view())), rows, cols),
        Container::Raw => {
            let mut out = BufWriter::new(File::create(path)?);
            for v in img.iter() {
                out.write_all(&(*v as f32).to_le_bytes())?;
            }
            out.flush()?;
            write_json(&sidecar_path(path), &ImageHeader { rows, cols })
        }
    }
}

/// First page of a TIFF, or a raw image with its sidecar.
pub fn read_image(path: &Path) -> Result<Array2<f64>> {
    match container(path)? {
        Container::Tiff => {
            let (h, w, mut pages) = read_tiff_pages(path, 1)?;
            Array2::from_shape_vec((h, w), pages.remove(0)).map_err(|e| format_error(path, e))
        }
        Container::Raw => {
            let hd: ImageHeader = read_json(&sidecar_path(path))?;
            let bytes = std::fs::read(path)?;
            if bytes.len() != hd.rows * hd.cols * 4 {
                return Err(format_error(path, "size does not match header"));
            }
            let flat = bytes
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect();
            Array2::from_shape_vec((hd.rows, hd.cols), flat).map_err(|e| format_error(path, e))
        }
    }
}

/// Linear mapping used for an 8-bit preview: `min` renders black and
/// `max` renders white.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreviewScaling {
    pub min: f64,
    pub max: f64,
}

/// Writes an 8-bit grayscale PNG scaled to the image's own range.
pub fn write_preview(path: &Path, img: &Array2<f64>) -> Result<PreviewScaling> {
    let (rows, cols) = img.dim();
    let min = img.iter().copied().fold(f64::INFINITY, f64::min);
    let max = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let pixels: Vec<u8> = img
        .iter()
        .map(|&v| if span > 0.0 { ((v - min) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, cols as u32, rows as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| format_error(path, e))?;
    writer.write_image_data(&pixels).map_err(|e| format_error(path, e))?;
    writer.finish().map_err(|e| format_error(path, e))?;
    Ok(PreviewScaling { min, max })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack() -> ImageStack {
        let frames = Array3::from_shape_fn((3, 4, 4), |(t, r, c)| (t * 100 + r * 10 + c) as f64 + 0.5);
        ImageStack::new(frames, 80.0, 50.0).unwrap()
    }

    #[test]
    fn tiff_stack_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.tif");
        write_stack(&path, &stack()).unwrap();
        assert_eq!(read_stack(&path).unwrap(), stack());
    }

    #[test]
    fn raw_stack_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.raw");
        write_stack(&path, &stack()).unwrap();
        assert_eq!(read_stack(&path).unwrap(), stack());
        std::fs::remove_file(sidecar_path(&path)).unwrap();
        assert!(read_stack(&path).is_err());
    }

    #[test]
    fn image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array2::from_shape_fn((3, 5), |(r, c)| (r * 5 + c) as f64 * 0.25);
        for name in ["i.tiff", "i.raw"] {
            let path = dir.path().join(name);
            write_image(&path, &img).unwrap();
            assert_eq!(read_image(&path).unwrap(), img);
        }
    }

    #[test]
    fn unknown_extension_is_rejected() {
        let img = Array2::zeros((2, 2));
        assert!(matches!(write_image(Path::new("x.bmp"), &img), Err(Error::Format { .. })));
    }

    #[test]
    fn preview_records_range() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array2::from_shape_fn((4, 4), |(r, c)| (r + c) as f64 - 2.0);
        let s = write_preview(&dir.path().join("p.png"), &img).unwrap();
        assert_eq!(s, PreviewScaling { min: -2.0, max: 4.0 });
    }
}
