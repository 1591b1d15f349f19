//! IDX files: 4-byte big-endian magic, big-endian `u32` dimensions, raw bytes.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{FusionError, Result};
use crate::tensor::Tensor;

const LABELS_MAGIC: u32 = 0x0000_0801;
const IMAGES_MAGIC: u32 = 0x0000_0803;
const IMAGES_CHW_MAGIC: u32 = 0x0000_0804;

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

fn header(path: &Path, bytes: &[u8], expected: &[u32]) -> Result<(u32, Vec<usize>)> {
    if bytes.len() < 4 {
        return Err(FusionError::Length {
            path: path.into(),
            expected: 4,
            found: bytes.len(),
        });
    }
    let magic = read_u32(bytes, 0);
    if !expected.contains(&magic) {
        return Err(FusionError::Format {
            path: path.into(),
            reason: format!("magic {magic:#010x}, expected one of {expected:#010x?}"),
        });
    }
    let ndim = (magic & 0xff) as usize;
    let head = 4 + 4 * ndim;
    if bytes.len() < head {
        return Err(FusionError::Length {
            path: path.into(),
            expected: head,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndim).map(|d| read_u32(bytes, 4 + 4 * d) as usize).collect();
    let total = head + dims.iter().product::<usize>();
    if bytes.len() != total {
        return Err(FusionError::Length {
            path: path.into(),
            expected: total,
            found: bytes.len(),
        });
    }
    Ok((magic, dims))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| FusionError::io(path, e))
}

/// Loads an image/label file pair. Pixels are scaled by `1/255`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = read(ip)?;
    let lb = read(lp)?;
    let (magic, dims) = header(ip, &ib, &[IMAGES_MAGIC, IMAGES_CHW_MAGIC])?;
    let shape = if magic == IMAGES_MAGIC {
        vec![dims[0], 1, dims[1], dims[2]]
    } else {
        dims.clone()
    };
    let (_, ldims) = header(lp, &lb, &[LABELS_MAGIC])?;
    if ldims[0] != shape[0] {
        return Err(FusionError::Consistency(format!(
            "{} holds {} images but {} holds {} labels",
            ip.display(),
            shape[0],
            lp.display(),
            ldims[0]
        )));
    }
    let head = 4 + 4 * dims.len();
    let pixels = ib[head..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = lb[8..].iter().map(|&b| usize::from(b)).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    let name = ip
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(Tensor::new(shape, pixels)?, labels, class_count, name)
}

/// Writes a dataset as an IDX pair; pixels are rounded to the nearest `k/255`.
pub fn write_idx(
    dataset: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let [c, h, w] = dataset.image_shape();
    let n = dataset.len();
    let dims: Vec<usize> = if c == 1 { vec![n, h, w] } else { vec![n, c, h, w] };
    let magic = if c == 1 { IMAGES_MAGIC } else { IMAGES_CHW_MAGIC };
    let mut ib = Vec::with_capacity(4 + 4 * dims.len() + dataset.images().numel());
    ib.extend_from_slice(&magic.to_be_bytes());
    for &d in &dims {
        ib.extend_from_slice(&u32::try_from(d).expect("dimension fits u32").to_be_bytes());
    }
    ib.extend(
        dataset
            .images()
            .data()
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut lb = Vec::with_capacity(8 + n);
    lb.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lb.extend_from_slice(&u32::try_from(n).expect("count fits u32").to_be_bytes());
    for &l in dataset.labels() {
        lb.push(u8::try_from(l).map_err(|_| {
            FusionError::Contract(format!("label {l} does not fit in one IDX byte"))
        })?);
    }
    let ip = images_path.as_ref();
    let lp = labels_path.as_ref();
    fs::write(ip, ib).map_err(|e| FusionError::io(ip, e))?;
    fs::write(lp, lb).map_err(|e| FusionError::io(lp, e))?;
    Ok(())
}

/// Loads the four standard MNIST files from `dir` as `(train, test)`.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_idx(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}
