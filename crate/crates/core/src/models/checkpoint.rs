//! Binary checkpoint container, all integers little-endian:
//!
//! ```text
//! magic "DIDACKPT" | u32 version
//! u32 len | model config JSON
//! u32 len | run config echo (opaque text)
//! u8 has_rng | [32-byte seed | u128 word_pos | u64 stream]
//! u32 blob count | per blob: u32 len | name | u32 ndims | u32 dims... | f32 values
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Component, ModelBundle, ModelConfig, ModelError};
use crate::substrate::Tensor;

const MAGIC: &[u8; 8] = b"DIDACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub config_echo: String,
    pub rng: Option<RngState>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Checkpoint("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn text(&mut self) -> Result<String, ModelError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ModelError::Checkpoint("invalid utf-8".into()))
    }
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_text(&mut out, &serde_json::to_string(self.bundle.config()).expect("config serializes"));
        put_text(&mut out, &self.config_echo);
        match &self.rng {
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.seed);
                out.extend_from_slice(&r.word_pos.to_le_bytes());
                out.extend_from_slice(&r.stream.to_le_bytes());
            }
            None => out.push(0),
        }
        let params: Vec<_> = Component::ALL
            .iter()
            .flat_map(|&c| self.bundle.net(c).params())
            .collect();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            put_text(&mut out, &p.name);
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let config: ModelConfig =
            serde_json::from_str(&r.text()?).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let config_echo = r.text()?;
        let rng = match r.take(1)?[0] {
            0 => None,
            _ => {
                let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
                let stream = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                Some(RngState { seed, word_pos, stream })
            }
        };
        let mut bundle = ModelBundle::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let count = r.u32()? as usize;
        let mut blobs = std::collections::HashMap::with_capacity(count);
        for _ in 0..count {
            let name = r.text()?;
            let nd = r.u32()? as usize;
            let dims = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = dims.iter().product();
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            blobs.insert(name, Tensor::new(dims, data)?);
        }
        for c in Component::ALL {
            for p in bundle.params_mut(c) {
                let blob = blobs
                    .remove(&p.name)
                    .ok_or_else(|| ModelError::Checkpoint(format!("missing blob {}", p.name)))?;
                if blob.shape() != p.value.shape() {
                    return Err(ModelError::Checkpoint(format!(
                        "blob {} has shape {:?}, expected {:?}",
                        p.name,
                        blob.shape(),
                        p.value.shape()
                    )));
                }
                p.value = blob;
            }
        }
        if let Some(extra) = blobs.keys().next() {
            return Err(ModelError::Checkpoint(format!("unexpected blob {extra}")));
        }
        Ok(Self { bundle, config_echo, rng })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes()).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let buf = fs::read(path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_bytes(&buf)
    }

    /// Loads and rejects a checkpoint whose model config or config echo differ.
    pub fn load_matching(path: &Path, model: &ModelConfig, config_echo: &str) -> Result<Self, ModelError> {
        let ck = Self::load(path)?;
        if ck.bundle.config() != model || ck.config_echo != config_echo {
            return Err(ModelError::ConfigMismatch);
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use rand::RngCore;

    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            channels: [2, 4],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bundle = ModelBundle::new(small(), &mut rng).unwrap();
        rng.next_u64();
        let ck = Checkpoint {
            bundle: bundle.clone(),
            config_echo: "seed = 4\n".into(),
            rng: Some(RngState::capture(&rng)),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.bundle.digests(), bundle.digests());
        assert_eq!(back.config_echo, ck.config_echo);
        let mut restored = back.rng.unwrap().restore();
        assert_eq!(restored.next_u64(), rng.next_u64());
    }

    #[test]
    fn mismatch_and_corruption_rejected() {
        let bundle = ModelBundle::new(small(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ck = Checkpoint { bundle, config_echo: "a".into(), rng: None };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        ck.save(&p).unwrap();
        assert!(Checkpoint::load_matching(&p, &small(), "a").is_ok());
        assert!(matches!(Checkpoint::load_matching(&p, &small(), "b"), Err(ModelError::ConfigMismatch)));
        let other = ModelConfig { d_s: 8, ..small() };
        assert!(matches!(Checkpoint::load_matching(&p, &other, "a"), Err(ModelError::ConfigMismatch)));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
    }
}
