//! On-disk formats: the tensor container, saliency-target files, named-tensor
//! checkpoints, and 8-bit PNM images.
//!
//! All multi-byte integers and floats are little-endian. Payloads are `f32`;
//! values are widened to `f64` on read.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::model::ImageTensor;
use crate::numerics::{Distribution, Grid2D};
use crate::saliency::SaliencyTarget;

pub const TENSOR_MAGIC: &[u8] = b"SSAME-TNSR";
pub const CHECKPOINT_MAGIC: &[u8] = b"SSAME-CKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A named, shaped block of values.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("tensor '{name}': dims {dims:?} do not hold {} values", data.len())));
        }
        Ok(Self { name, dims, data })
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn push_shaped(out: &mut Vec<u8>, dims: &[usize], data: &[f64]) -> Result<()> {
    push_u32(out, dims.len())?;
    for &d in dims {
        push_u32(out, d)?;
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "unexpected end of file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn shaped(&mut self) -> Result<(Vec<usize>, Vec<f64>)> {
        let rank = self.u32()?;
        let dims = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(self.path, "tensor too large"))?;
        let raw = self.take(count.checked_mul(4).ok_or_else(|| Error::format(self.path, "tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok((dims, data))
    }

    fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        if self.take(magic.len()).ok() != Some(magic) {
            return Err(Error::format(self.path, "bad magic"));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_tensor(dims: &[usize], data: &[f64]) -> Result<Vec<u8>> {
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::shape(format!("dims {dims:?} do not hold {} values", data.len())));
    }
    let mut out = TENSOR_MAGIC.to_vec();
    push_shaped(&mut out, dims, data)?;
    Ok(out)
}

pub fn write_tensor(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    write_file(path, &encode_tensor(dims, data)?)
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = read_file(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    r.expect_magic(TENSOR_MAGIC)?;
    let out = r.shaped()?;
    r.finish()?;
    Ok(out)
}

/// Saliency target file: a `grid_rows x grid_cols` tensor followed by one validity byte.
/// Invalid targets store zeros.
pub fn encode_target(target: &SaliencyTarget) -> Result<Vec<u8>> {
    let (gh, gw) = target.grid();
    let mut out = encode_tensor(&[gh, gw], target.as_grid().values())?;
    out.push(target.is_valid() as u8);
    Ok(out)
}

pub fn write_target(path: &Path, target: &SaliencyTarget) -> Result<()> {
    write_file(path, &encode_target(target)?)
}

/// Reads a target file. The pixel-level merged mask is not stored; the result
/// carries the patch grid in its place.
pub fn read_target(path: &Path) -> Result<SaliencyTarget> {
    let bytes = read_file(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    r.expect_magic(TENSOR_MAGIC)?;
    let (dims, data) = r.shaped()?;
    let flag = r.take(1)?[0];
    r.finish()?;
    if dims.len() != 2 {
        return Err(Error::format(path, format!("target must be rank 2, got rank {}", dims.len())));
    }
    let grid = (dims[0], dims[1]);
    match flag {
        1 => {
            // the f32 payload sums to 1 only up to rounding
            let d = Distribution::from_weights(data).map_err(|e| Error::format(path, e.to_string()))?;
            Ok(SaliencyTarget::from_distribution(d, grid))
        }
        0 => Ok(SaliencyTarget::invalid(Grid2D::zeros(grid.0, grid.1), grid)),
        other => Err(Error::format(path, format!("validity flag must be 0 or 1, got {other}"))),
    }
}

pub fn encode_checkpoint(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for t in tensors {
        if t.dims.iter().product::<usize>() != t.data.len() {
            return Err(Error::shape(format!("tensor '{}' has inconsistent dims", t.name)));
        }
        push_u32(&mut out, t.name.len())?;
        out.extend_from_slice(t.name.as_bytes());
        push_shaped(&mut out, &t.dims, &t.data)?;
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    write_file(path, &encode_checkpoint(tensors)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = read_file(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format(path, "name is not UTF-8"))?;
        let (dims, data) = r.shaped()?;
        out.push(NamedTensor { name, dims, data });
    }
    Ok(out)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_pnm(bytes: &[u8], width: usize, height: usize, color: ExtendedColorType) -> Result<Vec<u8>> {
    let subtype = match color {
        ExtendedColorType::Rgb8 => PnmSubtype::Pixmap(SampleEncoding::Binary),
        _ => PnmSubtype::Graymap(SampleEncoding::Binary),
    };
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(bytes, width as u32, height as u32, color)
        .map_err(|e| Error::invalid(format!("pnm encode: {e}")))?;
    Ok(out)
}

/// 8-bit binary PPM (P6) for RGB images, PGM (P5) for single-channel ones.
pub fn encode_image(image: &ImageTensor) -> Result<Vec<u8>> {
    let color = match image.channels() {
        3 => ExtendedColorType::Rgb8,
        1 => ExtendedColorType::L8,
        c => return Err(Error::invalid(format!("cannot store a {c}-channel image as PNM"))),
    };
    let bytes: Vec<u8> = image.pixels().iter().map(|&v| to_byte(v)).collect();
    encode_pnm(&bytes, image.width(), image.height(), color)
}

pub fn write_image(path: &Path, image: &ImageTensor) -> Result<()> {
    write_file(path, &encode_image(image)?)
}

fn decode_pnm(path: &Path) -> Result<image::DynamicImage> {
    let bytes = read_file(path)?;
    let mut reader = ImageReader::new(Cursor::new(bytes));
    reader.set_format(ImageFormat::Pnm);
    reader.decode().map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a P6 or P5 file; values are scaled to `[0, 1]`.
pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let img = decode_pnm(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, bytes) = match img.color().channel_count() {
        1 => (1, img.into_luma8().into_raw()),
        _ => (3, img.into_rgb8().into_raw()),
    };
    ImageTensor::new(h, w, channels, bytes.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Grayscale P5; values in `[0, 1]` map linearly onto 0..=255.
pub fn encode_gray(grid: &Grid2D) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = grid.values().iter().map(|&v| to_byte(v)).collect();
    encode_pnm(&bytes, grid.width(), grid.height(), ExtendedColorType::L8)
}

pub fn write_gray(path: &Path, grid: &Grid2D) -> Result<()> {
    write_file(path, &encode_gray(grid)?)
}

pub fn read_gray(path: &Path) -> Result<Grid2D> {
    let img = decode_pnm(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Grid2D::new(h, w, img.into_raw().iter().map(|&b| b as f64 / 255.0).collect())
}
