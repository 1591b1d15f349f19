use std::path::Path;

use super::model::{Architecture, Model};
use crate::cluster::Reader;
use crate::error::{FusionError, Result};
use crate::tensor::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"FUSCKPT\0";
const VERSION: u32 = 1;

fn put_u64(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u64).to_le_bytes());
}

fn put_partition(buf: &mut Vec<u8>, p: &ParamSet) {
    put_u64(buf, p.len());
    for (name, t) in p.names().iter().zip(p.tensors()) {
        put_u64(buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u64(buf, t.ndim());
        for &d in t.shape() {
            put_u64(buf, d);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn get_partition(r: &mut Reader) -> Result<ParamSet> {
    let n = r.usize()?;
    let mut p = ParamSet::new();
    for _ in 0..n {
        let len = r.usize()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.format("parameter name is not utf-8"))?;
        let ndim = r.usize()?;
        let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.format("shape overflow"))?;
        let bytes = r.take(numel.checked_mul(8).ok_or_else(|| r.format("shape overflow"))?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        p.push(name, Tensor::new(shape, data)?);
    }
    Ok(p)
}

/// Architecture as JSON, then theta, rho and w as named float64 blobs.
pub fn write_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let arch = serde_json::to_vec(&model.arch)?;
    put_u64(&mut buf, arch.len());
    buf.extend_from_slice(&arch);
    for p in [&model.theta, &model.rho, &model.w] {
        put_partition(&mut buf, p);
    }
    std::fs::write(path, buf).map_err(|e| FusionError::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| FusionError::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(r.format("not a checkpoint"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(r.format(&format!("unsupported version {version}")));
    }
    let len = r.usize()?;
    let arch: Architecture = serde_json::from_slice(r.take(len)?)?;
    let theta = get_partition(&mut r)?;
    let rho = get_partition(&mut r)?;
    let w = get_partition(&mut r)?;
    if r.pos != bytes.len() {
        return Err(FusionError::Length { path: path.to_path_buf(), expected: r.pos, found: bytes.len() });
    }
    let model = Model { arch, theta, rho, w };
    // Shapes must match what the architecture would build.
    let template = Model::new(model.arch.clone(), 0)?;
    for (a, b) in [(&template.theta, &model.theta), (&template.rho, &model.rho), (&template.w, &model.w)] {
        if a.len() != b.len() || a.tensors().iter().zip(b.tensors()).any(|(x, y)| x.shape() != y.shape()) {
            return Err(r.format("parameter shapes do not match the stored architecture"));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = Model::new(Architecture::conv_default([1, 16, 16], 4), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        write_checkpoint(&m, &p).unwrap();
        assert_eq!(read_checkpoint(&p).unwrap(), m);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(FusionError::Length { .. })));
    }
}
