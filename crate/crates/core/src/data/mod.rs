//! Image datasets, the synthetic hierarchy, augmentation and multi-crop.
//!
//! On disk a dataset is a directory holding `images.bin` and `labels.csv`.
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `MGDS` |
//! | 4 | 4 | version (u32 LE, currently 1) |
//! | 8 | 4 | image count `n` |
//! | 12 | 4 | height `H` |
//! | 16 | 4 | width `W` |
//! | 20 | 4 | channels (always 3) |
//! | 24 | `n·H·W·3` | pixels, u8, HWC, image-major |
//!
//! `labels.csv` has the header `index,label` and one row per image.

pub mod augment;
pub mod multicrop;
pub mod synth;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{strong_augment, weak_augment, AugmentKind, AugmentPolicy};
pub use multicrop::{multi_crop, CropBatch, CropTag, MultiCropConfig};
pub use synth::{synth_hierarchical_dataset, SynthSpec};

const MAGIC: &[u8; 4] = b"MGDS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Borrowed HWC u8 image.
#[derive(Clone, Copy, Debug)]
pub struct ImageRef<'a> {
    pub height: usize,
    pub width: usize,
    pub pixels: &'a [u8],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub images: Vec<u8>,
    pub labels: Vec<u32>,
    pub class_count: usize,
}

/// Per-channel statistics on the `[0, 1]` pixel scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };
}

impl Dataset {
    pub fn new(height: usize, width: usize, images: Vec<u8>, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Contract("image dimensions must be positive".into()));
        }
        let per = height * width * 3;
        if images.len() != labels.len() * per {
            return Err(Error::Contract(format!(
                "{} pixel bytes for {} images of {height}x{width}",
                images.len(),
                labels.len()
            )));
        }
        let class_count = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        Ok(Dataset { height, width, images, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> ImageRef<'_> {
        let per = self.height * self.width * 3;
        ImageRef { height: self.height, width: self.width, pixels: &self.images[i * per..(i + 1) * per] }
    }

    /// Per-channel mean and standard deviation over every pixel.
    pub fn normalization(&self) -> Normalization {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        for px in self.images.chunks(3) {
            for c in 0..3 {
                let v = px[c] as f64 / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        let n = (self.images.len() / 3).max(1) as f64;
        let mut out = Normalization { mean: [0.0; 3], std: [1.0; 3] };
        for c in 0..3 {
            let m = sum[c] / n;
            out.mean[c] = m as f32;
            out.std[c] = ((sq[c] / n - m * m).max(0.0).sqrt()).max(1e-3) as f32;
        }
        out
    }

    /// Writes `images.bin` and `labels.csv` into `dir`, creating it.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("images.bin");
        let mut bytes = Vec::with_capacity(HEADER_LEN + self.images.len());
        bytes.extend_from_slice(MAGIC);
        for v in [VERSION, self.len() as u32, self.height as u32, self.width as u32, 3] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&self.images);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;

        let path = dir.join("labels.csv");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let csv_err = |e: csv::Error| Error::io(&path, std::io::Error::other(e));
        w.write_record(["index", "label"]).map_err(csv_err)?;
        for (i, l) in self.labels.iter().enumerate() {
            w.write_record([i.to_string(), l.to_string()]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    /// Reads a dataset directory written by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("images.bin");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (n, h, w, pixels) = parse_images(&bytes)?;

        let path = dir.join("labels.csv");
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let labels = parse_labels(&text, n)?;
        let mut ds = Dataset::new(h, w, pixels, labels)?;
        ds.class_count = ds.class_count.max(1);
        Ok(ds)
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Format { offset: offset as u64, msg: "header truncated".into() })
}

fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic, expected MGDS".into() });
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let n = read_u32(bytes, 8)? as usize;
    let h = read_u32(bytes, 12)? as usize;
    let w = read_u32(bytes, 16)? as usize;
    let c = read_u32(bytes, 20)?;
    if c != 3 {
        return Err(Error::Format { offset: 20, msg: format!("expected 3 channels, got {c}") });
    }
    if h == 0 || w == 0 {
        return Err(Error::Format { offset: 12, msg: "zero image dimension".into() });
    }
    let per = h * w * 3;
    let expected = HEADER_LEN + n * per;
    if bytes.len() < expected {
        let complete = (bytes.len() - HEADER_LEN) / per;
        return Err(Error::Format {
            offset: (HEADER_LEN + complete * per) as u64,
            msg: format!("payload truncated: image {complete} of {n} incomplete"),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format { offset: expected as u64, msg: "trailing bytes after payload".into() });
    }
    Ok((n, h, w, bytes[HEADER_LEN..].to_vec()))
}

fn parse_labels(text: &[u8], n: usize) -> Result<Vec<u32>> {
    let mut rdr = csv::Reader::from_reader(text);
    let fmt = |offset: u64, msg: String| Error::Format { offset, msg };
    let header = rdr.headers().map_err(|e| fmt(0, e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != ["index", "label"] {
        return Err(fmt(0, "labels.csv header must be `index,label`".into()));
    }
    let mut labels = Vec::with_capacity(n);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| fmt(e.position().map_or(0, |p| p.byte()), e.to_string()))?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let idx: usize = rec.get(0).unwrap_or("").parse().map_err(|_| fmt(offset, "bad index".into()))?;
        let label: u32 = rec.get(1).unwrap_or("").parse().map_err(|_| fmt(offset, "bad label".into()))?;
        if idx != labels.len() {
            return Err(fmt(offset, format!("expected index {}, got {idx}", labels.len())));
        }
        labels.push(label);
    }
    if labels.len() != n {
        return Err(fmt(text.len() as u64, format!("{} labels for {n} images", labels.len())));
    }
    Ok(labels)
}

/// Fine label → ancestor label when each parent has `fan_out` children.
pub fn parent_labels(labels: &[u32], fan_out: u32) -> Vec<u32> {
    labels.iter().map(|l| l / fan_out).collect()
}

/// Flushes `bytes` to `path` atomically enough for tests: write then rename.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let pixels: Vec<u8> = (0..2 * 2 * 2 * 3).map(|v| v as u8 * 7).collect();
        Dataset::new(2, 2, pixels, vec![0, 1]).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }

    #[test]
    fn truncation_and_magic_errors() {
        let dir = tempfile::tempdir().unwrap();
        tiny().save(dir.path()).unwrap();
        let path = dir.path().join("images.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        fs::write(&path, &bytes).unwrap();
        match Dataset::load(dir.path()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 24 + 12),
            other => panic!("{other:?}"),
        }
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn label_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        tiny().save(dir.path()).unwrap();
        fs::write(dir.path().join("labels.csv"), "index,label\n0,0\n").unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn normalization_of_constant_image() {
        let ds = Dataset::new(1, 1, vec![51, 102, 255], vec![0]).unwrap();
        let n = ds.normalization();
        assert!((n.mean[0] - 0.2).abs() < 1e-6 && (n.mean[2] - 1.0).abs() < 1e-6);
        assert!(n.std.iter().all(|&s| s == 1e-3));
    }
}
