//! Dataset directories: a text manifest plus, per sample, `<id>.png` (RGB),
//! `<id>.edge.png` (gray, 255 = edge) and `<id>.ori.f32` (row-major LE f32).
//!
//! Manifest:
//! ```text
//! ofnet-dataset 1
//! count 2
//! sample s0000 96 96
//! sample s0001 96 96
//! ```

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synth::OcclusionSample;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
const MANIFEST_MAGIC: &str = "ofnet-dataset 1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing dataset file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("manifest field `{field}`: {message}")]
    Manifest { field: String, message: String },
    #[error("{}: expected {expected}, found {found}", path.display())]
    SizeMismatch { path: PathBuf, expected: String, found: String },
    #[error("{}: {message}", path.display())]
    Decode { path: PathBuf, message: String },
}

fn manifest_err(field: &str, message: impl Into<String>) -> Error {
    DatasetError::Manifest { field: field.into(), message: message.into() }.into()
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DatasetError::MissingFile(path.to_path_buf()).into()
        } else {
            Error::io(path, e)
        }
    })
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| Error::from(DatasetError::Decode { path: path.to_path_buf(), message: e.to_string() });
    let mut writer = enc.write_header().map_err(encode_err)?;
    writer.write_image_data(data).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

/// Reads an 8-bit PNG, checking its size and channel count.
fn read_png(path: &Path, width: usize, height: usize, channels: usize) -> Result<Vec<u8>> {
    let decode_err = |e: png::DecodingError| Error::from(DatasetError::Decode { path: path.to_path_buf(), message: e.to_string() });
    let mut reader = png::Decoder::new(BufReader::new(open(path)?)).read_info().map_err(decode_err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(decode_err)?;
    if (info.width as usize, info.height as usize) != (width, height) {
        return Err(DatasetError::SizeMismatch {
            path: path.to_path_buf(),
            expected: format!("{width}x{height}"),
            found: format!("{}x{}", info.width, info.height),
        }
        .into());
    }
    let found = info.color_type.samples();
    if info.bit_depth != png::BitDepth::Eight || found != channels {
        return Err(DatasetError::Decode {
            path: path.to_path_buf(),
            message: format!("expected 8-bit with {channels} channels, found {:?} {:?}", info.bit_depth, info.color_type),
        }
        .into());
    }
    buf.truncate(info.buffer_size());
    Ok(buf)
}

pub fn write_sample(sample: &OcclusionSample, dir: &Path) -> Result<()> {
    let (h, w) = (sample.height(), sample.width());
    let rgb: Vec<u8> = sample.image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_png(&dir.join(format!("{}.png", sample.id)), w, h, png::ColorType::Rgb, &rgb)?;
    write_mask_png(&dir.join(format!("{}.edge.png", sample.id)), &sample.edge)?;
    write_f32_map(&dir.join(format!("{}.ori.f32", sample.id)), &sample.orientation)
}

/// Boolean map as an 8-bit greyscale PNG (255 = set).
pub fn write_mask_png(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let data: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_png(path, w, h, png::ColorType::Grayscale, &data)
}

/// Raw little-endian f32 map, row-major, no header.
pub fn write_f32_map(path: &Path, map: &Array2<f32>) -> Result<()> {
    let bytes: Vec<u8> = map.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32_map(path: &Path, height: usize, width: usize) -> Result<Array2<f32>> {
    let raw = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DatasetError::MissingFile(path.to_path_buf()).into(),
        _ => Error::io(path, e),
    })?;
    if raw.len() != height * width * 4 {
        return Err(DatasetError::SizeMismatch {
            path: path.to_path_buf(),
            expected: format!("{} bytes", height * width * 4),
            found: format!("{} bytes", raw.len()),
        }
        .into());
    }
    let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(Array2::from_shape_vec((height, width), values).expect("size checked"))
}

/// Any 8-bit grey, grey+alpha, RGB or RGBA PNG as an `H x W x 3` image in
/// `[0, 1]`. Alpha is dropped and grey is replicated.
pub fn read_image(path: &Path) -> Result<Array3<f32>> {
    let decode_err = |e: png::DecodingError| Error::from(DatasetError::Decode { path: path.to_path_buf(), message: e.to_string() });
    let mut reader = png::Decoder::new(BufReader::new(open(path)?)).read_info().map_err(decode_err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(decode_err)?;
    if info.bit_depth != png::BitDepth::Eight || info.color_type == png::ColorType::Indexed {
        return Err(DatasetError::Decode {
            path: path.to_path_buf(),
            message: format!("unsupported pixel format {:?} {:?}", info.bit_depth, info.color_type),
        }
        .into());
    }
    let (h, w, c) = (info.height as usize, info.width as usize, info.color_type.samples());
    let rgb = |p: usize, ch: usize| {
        let px = &buf[p * c..(p + 1) * c];
        let v = if c < 3 { px[0] } else { px[ch] };
        v as f32 / 255.0
    };
    Ok(Array3::from_shape_fn((h, w, 3), |(y, x, ch)| rgb(y * w + x, ch)))
}

pub fn read_sample(dir: &Path, id: &str, height: usize, width: usize) -> Result<OcclusionSample> {
    let rgb = read_png(&dir.join(format!("{id}.png")), width, height, 3)?;
    let image = Array3::from_shape_vec((height, width, 3), rgb.iter().map(|&b| b as f32 / 255.0).collect()).expect("size checked");
    let edge_path = dir.join(format!("{id}.edge.png"));
    let gray = read_png(&edge_path, width, height, 1)?;
    if let Some(v) = gray.iter().find(|&&v| v != 0 && v != 255) {
        return Err(DatasetError::Decode { path: edge_path, message: format!("edge map value {v} is neither 0 nor 255") }.into());
    }
    let edge = Array2::from_shape_vec((height, width), gray.iter().map(|&v| v == 255).collect()).expect("size checked");
    let orientation = read_f32_map(&dir.join(format!("{id}.ori.f32")), height, width)?;
    Ok(OcclusionSample { id: id.to_string(), image, edge, orientation })
}

/// Writes all samples and the manifest into `dir` (created if missing).
pub fn write_dataset(samples: &[OcclusionSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("{MANIFEST_MAGIC}\ncount {}\n", samples.len());
    for s in samples {
        if s.id.is_empty() || s.id.chars().any(char::is_whitespace) {
            return Err(Error::config(format!("sample id {:?} must be non-empty without whitespace", s.id)));
        }
        write_sample(s, dir)?;
        writeln!(manifest, "sample {} {} {}", s.id, s.height(), s.width()).expect("writing to a String");
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Manifest entries `(id, height, width)`.
pub fn read_manifest(dir: &Path) -> Result<Vec<(String, usize, usize)>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DatasetError::MissingFile(path.clone()).into(),
        _ => Error::io(&path, e),
    })?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(MANIFEST_MAGIC) {
        return Err(manifest_err("header", format!("first line must be {MANIFEST_MAGIC:?}")));
    }
    let mut count = None;
    let mut entries = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["count", n] => count = Some(n.parse::<usize>().map_err(|_| manifest_err("count", format!("{n:?} is not a number")))?),
            ["sample", id, h, w] => {
                let h = h.parse().map_err(|_| manifest_err("sample", format!("bad height {h:?} for {id}")))?;
                let w = w.parse().map_err(|_| manifest_err("sample", format!("bad width {w:?} for {id}")))?;
                entries.push((id.to_string(), h, w));
            }
            _ => return Err(manifest_err("sample", format!("unrecognised line {line:?}"))),
        }
    }
    let count = count.ok_or_else(|| manifest_err("count", "missing"))?;
    if count != entries.len() {
        return Err(manifest_err("count", format!("declares {count} samples but lists {}", entries.len())));
    }
    Ok(entries)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<OcclusionSample>> {
    read_manifest(dir)?.into_iter().map(|(id, h, w)| read_sample(dir, &id, h, w)).collect()
}

/// Batched tensors of equally sized samples: images `N x 3 x H x W`,
/// edges and orientations `N x 1 x H x W`.
pub struct Batch<T> {
    pub image: Tensor<T>,
    pub edge: Tensor<T>,
    pub orientation: Tensor<T>,
}

pub fn image_tensor<T: Scalar>(samples: &[&OcclusionSample]) -> Result<Tensor<T>> {
    Ok(batch(samples)?.image)
}

pub fn batch<T: Scalar>(samples: &[&OcclusionSample]) -> Result<Batch<T>> {
    let first = samples.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    if let Some(s) = samples.iter().find(|s| (s.height(), s.width()) != (h, w)) {
        return Err(Error::config(format!("sample {} is {}x{}, batch is {h}x{w}", s.id, s.height(), s.width())));
    }
    let n = samples.len();
    let plane = h * w;
    let mut image = Vec::with_capacity(n * 3 * plane);
    let mut edge = Vec::with_capacity(n * plane);
    let mut orientation = Vec::with_capacity(n * plane);
    for s in samples {
        for c in 0..3 {
            image.extend(s.image.index_axis(ndarray::Axis(2), c).iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        edge.extend(s.edge.iter().map(|&e| if e { T::one() } else { T::zero() }));
        orientation.extend(s.orientation.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Ok(Batch {
        image: Tensor::new(vec![n, 3, h, w], image)?,
        edge: Tensor::new(vec![n, 1, h, w], edge)?,
        orientation: Tensor::new(vec![n, 1, h, w], orientation)?,
    })
}
