//! Binary checkpoint container.
//!
//! Layout (little endian): magic, format version, 32-byte config digest,
//! epoch, step, generator state, metadata pairs, parameter table, optimizer
//! moments and step counts, then a SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DMDNCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Serialized position of a ChaCha8 generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub epoch: u64,
    pub step: u64,
    pub rng_state: RngState,
    pub meta: BTreeMap<String, String>,
    pub model_params: ParamStore,
    pub optim_state: AdamState,
}

/// SHA-256 of the TOML rendering of a configuration value.
pub fn config_hash<T: Serialize>(cfg: &T) -> [u8; 32] {
    let text = toml::to_string(cfg).expect("configs serialize to TOML");
    Sha256::digest(text.as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn table(&mut self, store: &ParamStore) {
        self.u32(store.len() as u32);
        for (name, t) in store.iter() {
            self.str(name);
            self.u32(t.shape().len() as u32);
            for &d in t.shape() {
                self.u64(d as u64);
            }
            for &v in t.data() {
                self.0.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(what: &str) -> Error {
    Error::CorruptCheckpoint(what.to_string())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("non-UTF-8 string"))
    }
    fn table(&mut self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for _ in 0..self.u32()? {
            let name = self.str()?;
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = self.take(n.checked_mul(8).ok_or_else(|| corrupt("tensor size overflow"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            store.insert(name, Tensor::new(&shape, data).map_err(|_| corrupt("tensor shape"))?);
        }
        Ok(store)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.0.extend_from_slice(&self.config_hash);
        w.u64(self.epoch);
        w.u64(self.step);
        w.0.extend_from_slice(&self.rng_state.seed);
        w.u64(self.rng_state.stream);
        w.0.extend_from_slice(&self.rng_state.word_pos.to_le_bytes());
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        w.table(&self.model_params);
        w.table(&self.optim_state.m);
        w.table(&self.optim_state.v);
        w.u32(self.optim_state.steps.len() as u32);
        for (k, &n) in &self.optim_state.steps {
            w.str(k);
            w.u64(n);
        }
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 4 + 32 {
            return Err(corrupt("file too short"));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("content digest mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(corrupt(&format!("unsupported format version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let epoch = r.u64()?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            meta.insert(k, r.str()?);
        }
        let model_params = r.table()?;
        let m = r.table()?;
        let v = r.table()?;
        let mut steps = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            steps.insert(k, r.u64()?);
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint {
            config_hash,
            epoch,
            step,
            rng_state: RngState { seed, stream, word_pos },
            meta,
            model_params,
            optim_state: AdamState { m, v, steps },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::write(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Loads and checks the stored config digest against `expected`.
    pub fn load_expecting(path: &Path, expected: &[u8; 32]) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.check_config(expected)?;
        Ok(ck)
    }

    pub fn check_config(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.config_hash != expected {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint config {} does not match {}",
                hex(&self.config_hash[..8]),
                hex(&expected[..8])
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.weight", crate::gradcheck::probe_tensor(&[2, 3], 1));
        params.insert("b", Tensor::scalar(f64::MIN_POSITIVE));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.next_u32();
        let mut optim = AdamState::default();
        optim.m.insert("a.weight", Tensor::full(&[2, 3], 0.25));
        optim.v.insert("a.weight", Tensor::full(&[2, 3], 0.5));
        optim.steps.insert("a.weight".into(), 7);
        Checkpoint {
            config_hash: [9; 32],
            epoch: 2,
            step: 31,
            rng_state: RngState::capture(&rng),
            meta: BTreeMap::from([("stage1_end".into(), "10".into())]),
            model_params: params,
            optim_state: optim,
        }
    }

    #[test]
    fn byte_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn tampering_is_detected() {
        let mut bytes = sample().to_bytes();
        bytes[60] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        let state = RngState::capture(&rng);
        let mut resumed = state.restore();
        assert_eq!(rng.next_u64(), resumed.next_u64());
    }

    #[test]
    fn config_mismatch() {
        assert!(matches!(sample().check_config(&[0; 32]), Err(Error::ConfigMismatch(_))));
        assert!(sample().check_config(&[9; 32]).is_ok());
    }
}
