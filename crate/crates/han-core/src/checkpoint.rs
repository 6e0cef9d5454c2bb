//! Binary checkpoint container: named parameters with shapes and raw
//! little-endian f64 values, optimizer moment buffers, a format version, the
//! run configuration echo and the corpus manifest hash.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::nn::ParameterSet;

const MAGIC: &[u8; 8] = b"HANCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint/config mismatch: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct OptimizerEntry {
    pub name: String,
    pub step: u64,
    pub moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Default)]
pub struct Checkpoint {
    pub config_echo: String,
    pub manifest_hash: u64,
    pub step: u64,
    pub epoch: u64,
    pub params: Vec<ParamEntry>,
    pub optimizers: Vec<OptimizerEntry>,
}

impl Checkpoint {
    pub fn from_parameters(params: &ParameterSet) -> Self {
        let mut ck = Checkpoint::default();
        ck.capture(params);
        ck
    }

    pub fn capture(&mut self, params: &ParameterSet) {
        self.params = params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                trainable: t.requires_grad(),
                shape: t.shape().to_vec(),
                data: t.to_vec(),
            })
            .collect();
    }

    /// Copy stored values into a freshly built parameter set, matched by name.
    pub fn apply(&self, params: &ParameterSet) -> Result<(), CheckpointError> {
        if params.len() != self.params.len() {
            return Err(CheckpointError::Mismatch(format!(
                "model has {} parameters, checkpoint stores {}",
                params.len(),
                self.params.len()
            )));
        }
        for entry in &self.params {
            let target = params.get(&entry.name).ok_or_else(|| {
                CheckpointError::Mismatch(format!("model has no parameter named {}", entry.name))
            })?;
            if target.shape() != entry.shape.as_slice() {
                return Err(CheckpointError::Mismatch(format!(
                    "{}: shape {:?} vs stored {:?}",
                    entry.name,
                    target.shape(),
                    entry.shape
                )));
            }
            target.data_mut().copy_from_slice(&entry.data);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, FORMAT_VERSION);
        put_bytes(&mut buf, self.config_echo.as_bytes());
        put_u64(&mut buf, self.manifest_hash);
        put_u64(&mut buf, self.step);
        put_u64(&mut buf, self.epoch);
        put_u32(&mut buf, self.params.len() as u32);
        for p in &self.params {
            put_bytes(&mut buf, p.name.as_bytes());
            buf.push(p.trainable as u8);
            buf.push(p.shape.len() as u8);
            for &d in &p.shape {
                put_u64(&mut buf, d as u64);
            }
            for &v in &p.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u32(&mut buf, self.optimizers.len() as u32);
        for opt in &self.optimizers {
            put_bytes(&mut buf, opt.name.as_bytes());
            put_u64(&mut buf, opt.step);
            put_u32(&mut buf, opt.moments.len() as u32);
            for (name, m, v) in &opt.moments {
                put_bytes(&mut buf, name.as_bytes());
                put_u64(&mut buf, m.len() as u64);
                for &x in m {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                for &x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let config_echo = String::from_utf8(r.bytes_field()?)
            .map_err(|_| CheckpointError::Corrupt("config echo is not utf-8".into()))?;
        let manifest_hash = r.u64()?;
        let step = r.u64()?;
        let epoch = r.u64()?;
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = String::from_utf8(r.bytes_field()?)
                .map_err(|_| CheckpointError::Corrupt("parameter name is not utf-8".into()))?;
            let trainable = r.u8()? != 0;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.f64s(numel)?;
            params.push(ParamEntry { name, trainable, shape, data });
        }
        let n_opt = r.u32()? as usize;
        let mut optimizers = Vec::with_capacity(n_opt);
        for _ in 0..n_opt {
            let name = String::from_utf8(r.bytes_field()?)
                .map_err(|_| CheckpointError::Corrupt("optimizer name is not utf-8".into()))?;
            let step = r.u64()?;
            let count = r.u32()? as usize;
            let mut moments = Vec::with_capacity(count);
            for _ in 0..count {
                let pname = String::from_utf8(r.bytes_field()?)
                    .map_err(|_| CheckpointError::Corrupt("moment name is not utf-8".into()))?;
                let len = r.u64()? as usize;
                let m = r.f64s(len)?;
                let v = r.f64s(len)?;
                moments.push((pname, m, v));
            }
            optimizers.push(OptimizerEntry { name, step, moments });
        }
        Ok(Checkpoint { config_echo, manifest_hash, step, epoch, params, optimizers })
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(buf, bytes.len() as u32);
    buf.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes_field(&mut self) -> Result<Vec<u8>, CheckpointError> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// FNV-1a over raw bytes; used for manifest fingerprints and id-stable splits.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stable mix of a seed with a stream label (epoch, pair id hash, ...).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ConvBlock, ConvSpec, ParameterSet};
    use crate::tensor::{BatchNormMode, Tensor};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_set(seed: u64) -> (ConvBlock, ParameterSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = ConvBlock::new(
            "blk",
            ConvSpec {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
                transpose: false,
                norm: true,
                activation: Activation::Relu,
            },
            &mut rng,
        );
        let mut set = ParameterSet::new();
        block.register(&mut set);
        (block, set)
    }

    #[test]
    fn save_load_forward_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let (block, set) = sample_set(3);
        let x = Tensor::constant(&[1, 1, 6, 6], (0..36).map(|i| i as f64 * 0.1).collect()).unwrap();
        let before = block.forward(&x, BatchNormMode::Eval).unwrap().to_vec();

        let mut ck = Checkpoint::from_parameters(&set);
        ck.config_echo = "mode=strong_paired".into();
        ck.manifest_hash = 42;
        ck.step = 7;
        ck.save(&path).unwrap();

        let (block2, set2) = sample_set(999); // different init, then overwritten
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.config_echo, "mode=strong_paired");
        assert_eq!(loaded.manifest_hash, 42);
        assert_eq!(loaded.step, 7);
        loaded.apply(&set2).unwrap();
        let after = block2.forward(&x, BatchNormMode::Eval).unwrap().to_vec();
        assert_eq!(before.len(), after.len());
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let (_, set) = sample_set(3);
        Checkpoint::from_parameters(&set).save(&path).unwrap();
        let mut other = ParameterSet::new();
        other.push("alien".into(), Tensor::zeros(&[2, 2]));
        let mut loaded = Checkpoint::load(&path).unwrap();
        assert!(matches!(loaded.apply(&other), Err(CheckpointError::Mismatch(_))));
        loaded.params.truncate(1);
        assert!(matches!(loaded.apply(&other), Err(CheckpointError::Mismatch(_))));
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::BadMagic)));
    }
}
