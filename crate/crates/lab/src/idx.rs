//! Big-endian IDX image/label files.

use std::fs;
use std::path::Path;

use igdm_core::data::Dataset;
use igdm_core::Tensor;

use crate::error::{LabError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(LabError::io(
                self.path,
                std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "truncated IDX file"),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| LabError::io(path, e))
}

fn expect_magic(r: &mut Reader, want: u32) -> Result<()> {
    let got = r.u32()?;
    if got != want {
        return Err(LabError::format(
            r.path,
            format!("IDX magic {got:#010x}, expected {want:#010x}"),
        ));
    }
    Ok(())
}

/// Images `(n, rows, cols)` scaled to `[0, 1]` plus labels. Without an
/// explicit class count, `K` is one more than the largest label.
pub fn load_idx(images: &Path, labels: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let img_bytes = read(images)?;
    let mut r = Reader {
        path: images,
        bytes: &img_bytes,
        pos: 0,
    };
    expect_magic(&mut r, IMAGES_MAGIC)?;
    let n = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let d = rows * cols;
    let pixels = r.take(n * d)?;

    let lab_bytes = read(labels)?;
    let mut l = Reader {
        path: labels,
        bytes: &lab_bytes,
        pos: 0,
    };
    expect_magic(&mut l, LABELS_MAGIC)?;
    let m = l.u32()? as usize;
    if m != n {
        return Err(LabError::Input(format!(
            "{} holds {n} images but {} holds {m} labels",
            images.display(),
            labels.display()
        )));
    }
    let ys: Vec<usize> = l.take(m)?.iter().map(|&b| b as usize).collect();
    if n == 0 || d == 0 {
        return Err(LabError::Input(format!("{} holds no pixels", images.display())));
    }
    let inputs = Tensor::matrix(n, d, pixels.iter().map(|&p| p as f64 / 255.0).collect());
    let k = num_classes.unwrap_or_else(|| (ys.iter().copied().max().unwrap_or(0) + 1).max(2));
    Ok(Dataset::new(inputs, ys, k, (0.0, 1.0))?)
}

fn to_byte(v: f64) -> Option<u8> {
    let b = (v * 255.0).round();
    if !(0.0..=255.0).contains(&b) || b / 255.0 != v {
        return None;
    }
    Some(b as u8)
}

/// Writes a dataset whose entries are exact multiples of `1/255` as
/// `rows x cols` images and byte labels.
pub fn write_idx(data: &Dataset, rows: usize, cols: usize, images: &Path, labels: &Path) -> Result<()> {
    if rows * cols != data.dim() {
        return Err(LabError::Input(format!(
            "{rows}x{cols} images do not hold {} features",
            data.dim()
        )));
    }
    let mut img = Vec::with_capacity(16 + data.inputs.len());
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for v in [data.len(), rows, cols] {
        img.extend_from_slice(&(v as u32).to_be_bytes());
    }
    for &v in data.inputs.data() {
        img.push(to_byte(v).ok_or_else(|| LabError::format(images, format!("value {v} is not a pixel byte")))?);
    }
    let mut lab = Vec::with_capacity(8 + data.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(data.len() as u32).to_be_bytes());
    for &y in &data.labels {
        lab.push(u8::try_from(y).map_err(|_| LabError::format(labels, format!("label {y} exceeds 255")))?);
    }
    fs::write(images, img).map_err(|e| LabError::io(images, e))?;
    fs::write(labels, lab).map_err(|e| LabError::io(labels, e))
}
