//! Binary checkpoints: parameters plus normalization running statistics.
//!
//! Layout (little-endian): magic, `u32` version, length-prefixed config
//! text, `u64` tensor count, then per tensor a length-prefixed name,
//! `u32` rank, `u64` dims, `u64` byte length and raw `f32` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::ops::RunningStats;
use crate::tensor::Tensor;

use super::network::{DenseNetModel, Layout, Param};
use super::{DenseNetConfig, ModelError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CTDNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u64(buf, s.len() as u64);
    buf.extend_from_slice(s.as_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_str(buf, name);
    put_u32(buf, t.shape().len() as u32);
    for &d in t.shape() {
        put_u64(buf, d as u64);
    }
    put_u64(buf, (t.numel() * 4) as u64);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(model: &DenseNetModel<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    put_str(&mut buf, &model.config().to_text());
    let norms = model.layout().norm_layers();
    put_u64(&mut buf, (model.params().len() + 2 * norms.len()) as u64);
    for p in model.params() {
        put_tensor(&mut buf, &p.name, &p.value);
    }
    for ((name, _), stats) in norms.iter().zip(model.running_stats()) {
        put_tensor(&mut buf, &format!("{name}.running_mean"), &stats.mean);
        put_tensor(&mut buf, &format!("{name}.running_var"), &stats.var);
    }
    buf
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn save_checkpoint(model: &DenseNetModel<f32>, path: &Path) -> Result<(), ModelError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode(model))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DenseNetModel<f32>, ModelError> {
    decode(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Truncated(format!("ran out of bytes reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize, ModelError> {
        let n = self.u64(what)?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len() - self.pos)
            .ok_or_else(|| ModelError::Truncated(format!("{what} length {n} exceeds the file")))
    }

    fn string(&mut self, what: &str) -> Result<String, ModelError> {
        let n = self.len(what)?;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| ModelError::Mismatch(format!("{what} is not valid UTF-8")))
    }

    fn tensor(&mut self, expect_name: &str, expect_shape: &[usize]) -> Result<Tensor<f32>, ModelError> {
        let name = self.string("tensor name")?;
        if name != expect_name {
            return Err(ModelError::Mismatch(format!("expected tensor {expect_name:?}, found {name:?}")));
        }
        let rank = self.u32("rank")? as usize;
        if rank != expect_shape.len() {
            return Err(ModelError::Mismatch(format!("{name}: rank {rank}, expected {}", expect_shape.len())));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("dimension")? as usize);
        }
        if shape != expect_shape {
            return Err(ModelError::Mismatch(format!("{name}: shape {shape:?}, expected {expect_shape:?}")));
        }
        let bytes = self.len("tensor data")?;
        let numel: usize = shape.iter().product();
        if bytes != numel * 4 {
            return Err(ModelError::Mismatch(format!("{name}: {bytes} data bytes for {numel} values")));
        }
        let raw = self.take(bytes, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Tensor::new(shape, data)?)
    }
}

pub fn decode(bytes: &[u8]) -> Result<DenseNetModel<f32>, ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < CHECKPOINT_MAGIC.len() || r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config = DenseNetConfig::from_text(&r.string("config")?)?;
    let layout = Layout::new(&config)?;
    let count = r.u64("tensor count")?;
    let expected = (layout.params().len() + 2 * layout.norm_layers().len()) as u64;
    if count != expected {
        return Err(ModelError::Mismatch(format!("{count} tensors, layout has {expected}")));
    }
    let mut params = Vec::with_capacity(layout.params().len());
    for spec in layout.params() {
        params.push(Param {
            name: spec.name.clone(),
            value: r.tensor(&spec.name, &spec.shape)?,
            grad: None,
        });
    }
    let mut stats = Vec::with_capacity(layout.norm_layers().len());
    for (name, c) in layout.norm_layers() {
        let mean = r.tensor(&format!("{name}.running_mean"), &[*c])?;
        let var = r.tensor(&format!("{name}.running_var"), &[*c])?;
        stats.push(RunningStats { mean, var });
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Truncated(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(DenseNetModel::from_parts(config, layout, params, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trained_like() -> DenseNetModel<f32> {
        let mut m = DenseNetModel::<f32>::build(&DenseNetConfig::reduced(), 5).unwrap();
        // Non-default running statistics so they are actually exercised.
        let mut tape = crate::autograd::Tape::new();
        let x = Tensor::from_fn([2, 1, 32, 32], |i| (i % 17) as f32 * 0.1);
        m.forward_train(&mut tape, x).unwrap();
        m
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = trained_like();
        let back = decode(&encode(&m)).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.bit_eq(&b.value));
        }
        for (a, b) in m.running_stats().iter().zip(back.running_stats()) {
            assert!(a.mean.bit_eq(&b.mean) && a.var.bit_eq(&b.var));
        }
        let x = Tensor::from_fn([1, 1, 32, 32], |i| (i % 5) as f32);
        assert!(m.forward_eval(x.clone()).unwrap().bit_eq(&back.forward_eval(x).unwrap()));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode(&trained_like());
        assert!(matches!(decode(b"NOTACKPT...."), Err(ModelError::BadMagic)));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(decode(&v), Err(ModelError::Version { found: 9, .. })));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(ModelError::Truncated(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(ModelError::Truncated(_))));
    }
}
