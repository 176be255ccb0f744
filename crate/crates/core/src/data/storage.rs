//! On-disk layout: `<dir>/manifest` (TOML) + one array file per view + a label file.
//!
//! Array files: magic `MVAR`, u32 version, u32 ndim, `ndim` u64 dims, then f32 data,
//! all little-endian. Label files: magic `MVLB`, u32 version, u64 count, u32 labels.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DatasetManifest, ImageArray, MultiViewDataset, SourceImages};
use crate::error::{Error, Result};

const ARRAY_MAGIC: &[u8; 4] = b"MVAR";
const LABEL_MAGIC: &[u8; 4] = b"MVLB";
const VERSION: u32 = 1;
pub(crate) const MANIFEST_FILE: &str = "manifest";
pub const SOURCE_IMAGES_FILE: &str = "images.bin";
pub const SOURCE_LABELS_FILE: &str = "labels.bin";

pub fn write_f32_array(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::shape(format!(
            "dims {dims:?} do not match {} values",
            data.len()
        )));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(ARRAY_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_f32_array(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    read_header(&mut r, ARRAY_MAGIC, path)?;
    let ndim = read_u32(&mut r)? as usize;
    if ndim > 8 {
        return Err(Error::format(path, format!("implausible rank {ndim}")));
    }
    let dims = (0..ndim)
        .map(|_| read_u64(&mut r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = dims.iter().product();
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 4 {
        return Err(Error::format(
            path,
            format!("expected {} data bytes, found {}", count * 4, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((dims, data))
}

pub fn write_labels(path: &Path, labels: &[u32]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(LABEL_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(labels.len() as u64).to_le_bytes())?;
    for l in labels {
        w.write_all(&l.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<u32>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    read_header(&mut r, LABEL_MAGIC, path)?;
    let n = read_u64(&mut r)? as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n * 4 {
        return Err(Error::format(path, "label count does not match payload"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn read_header(r: &mut impl Read, magic: &[u8; 4], path: &Path) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::format(path, "bad magic"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn save_dataset(dir: &Path, dataset: &MultiViewDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let m = &dataset.manifest;
    for (spec, arr) in m.views.iter().zip(&dataset.views) {
        let (n, c, h, w) = arr.dims();
        write_f32_array(&dir.join(&spec.file), &[n, c, h, w], arr.data())?;
    }
    write_labels(&dir.join(&m.label_file), &dataset.labels)?;
    fs::write(dir.join(MANIFEST_FILE), toml::to_string(m)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<MultiViewDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    manifest.validate()?;
    let mut views = Vec::with_capacity(manifest.views.len());
    for spec in &manifest.views {
        let path = dir.join(&spec.file);
        let (dims, data) = read_f32_array(&path)?;
        if dims != [manifest.n_samples, spec.channels, spec.height, spec.width] {
            return Err(Error::format(
                &path,
                format!("dims {dims:?} disagree with the manifest"),
            ));
        }
        views.push(ImageArray::new(dims[0], dims[1], dims[2], dims[3], data)?);
    }
    let labels = read_labels(&dir.join(&manifest.label_file))?;
    if labels.len() != manifest.n_samples {
        return Err(Error::format(dir, "label count disagrees with the manifest"));
    }
    Ok(MultiViewDataset {
        manifest,
        views,
        labels,
    })
}

/// Source directory: `images.bin` (N, C, H, W) plus `labels.bin`.
pub fn save_source(dir: &Path, source: &SourceImages) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (n, c, h, w) = source.images.dims();
    write_f32_array(&dir.join(SOURCE_IMAGES_FILE), &[n, c, h, w], source.images.data())?;
    write_labels(&dir.join(SOURCE_LABELS_FILE), &source.labels)
}

pub fn load_source(dir: &Path) -> Result<SourceImages> {
    let path = dir.join(SOURCE_IMAGES_FILE);
    let (dims, data) = read_f32_array(&path)?;
    let &[n, c, h, w] = dims.as_slice() else {
        return Err(Error::format(&path, format!("expected 4 dims, found {dims:?}")));
    };
    let images = ImageArray::new(n, c, h, w, data)?;
    SourceImages::new(images, read_labels(&dir.join(SOURCE_LABELS_FILE))?)
}
