use std::path::Path;

use super::io::{to_u32, LeReader, LeWriter};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"BCDS";
pub const DATASET_VERSION: u32 = 1;
/// Magic, version, four dimensions and the label flag.
pub const DATASET_HEADER_LEN: usize = 4 + 4 + 4 * 4 + 1;

/// Images `[n, H, W, C]` with pixel values in `[0, 1]`, optionally labelled.
///
/// Pixels always hold values exactly representable as `f32`, which is how
/// they are stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        ensure!(images.rank() == 4, "dataset images must be [n, H, W, C], got {:?}", images.shape());
        if let Some(l) = &labels {
            ensure!(
                l.len() == images.shape()[0],
                "{} labels for {} images",
                l.len(),
                images.shape()[0]
            );
        }
        ensure!(
            images.data().iter().all(|&p| (0.0..=1.0).contains(&p)),
            "pixel values must lie in [0, 1]"
        );
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(H, W, C)`.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Images at `indices`, stacked in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        self.images.select_outer(indices)
    }

    pub fn labels_at(&self, indices: &[usize]) -> Option<Vec<usize>> {
        self.labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect())
    }

    /// Number of samples per class (labels required).
    pub fn class_histogram(&self, n_classes: usize) -> Option<Vec<usize>> {
        let labels = self.labels.as_ref()?;
        let mut h = vec![0; n_classes.max(labels.iter().max().map_or(0, |m| m + 1))];
        for &l in labels {
            h[l] += 1;
        }
        Some(h)
    }
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let (h, w, c) = d.image_dims();
    let mut out = LeWriter::create(path)?;
    out.bytes(&DATASET_MAGIC)?;
    out.u32(DATASET_VERSION)?;
    for v in [d.len(), h, w, c] {
        out.u32(to_u32(v, "dataset dimension")?)?;
    }
    out.u8(u8::from(d.labels.is_some()))?;
    let mut buf = Vec::with_capacity(d.images.numel() * 4);
    for &p in d.images.data() {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out.bytes(&buf)?;
    if let Some(labels) = &d.labels {
        for &l in labels {
            out.u32(to_u32(l, "label")?)?;
        }
    }
    out.finish()
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut r = LeReader::open(path)?;
    r.magic(DATASET_MAGIC)?;
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let mut dims = [0usize; 4];
    for (d, name) in dims.iter_mut().zip(["n", "H", "W", "C"]) {
        *d = r.u32(name)? as usize;
    }
    if dims.contains(&0) {
        return Err(r.malformed(format!("zero dimension in {dims:?}")));
    }
    let has_labels = match r.u8("label flag")? {
        0 => false,
        1 => true,
        other => return Err(r.malformed(format!("label flag {other}"))),
    };
    let numel = dims.iter().product::<usize>();
    let pixels = r.f32s(numel, "pixels")?;
    let labels = if has_labels {
        let mut l = Vec::with_capacity(dims[0]);
        for _ in 0..dims[0] {
            l.push(r.u32("labels")? as usize);
        }
        Some(l)
    } else {
        None
    };
    if r.remaining() != 0 {
        return Err(r.malformed(format!("{} trailing bytes", r.remaining())));
    }
    let images = Tensor::new(dims.to_vec(), pixels.into_iter().map(f64::from).collect())?;
    Dataset::new(images, labels).map_err(|e| r.malformed(e.to_string()))
}
