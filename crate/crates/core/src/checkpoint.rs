//! Named-section checkpoint container.
//!
//! Layout (little endian): magic `WSRC`, u32 version, u64 config hash,
//! u64 epoch, u64 optimizer step, u32 config-text length + UTF-8 bytes,
//! u32 section count, then per section a u32 name length, the name, a u64
//! blob length and a tensor blob.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"WSRC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// 64-bit FNV-1a, used to tag checkpoints with the config that produced them.
pub fn config_hash(text: &str) -> u64 {
    text.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub config_text: String,
    pub epoch: u64,
    pub adam_step: u64,
    pub sections: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(config_text: &str) -> Self {
        Self {
            config_hash: config_hash(config_text),
            config_text: config_text.to_owned(),
            epoch: 0,
            adam_step: 0,
            sections: Vec::new(),
        }
    }

    /// Appends every tensor of `params` under `prefix`.
    pub fn push_params(&mut self, prefix: &str, params: &impl Parameters<f32>) {
        params.visit(prefix, &mut |name, t| self.sections.push((name, t.clone())));
    }

    pub fn section(&self, name: &str) -> Option<&Tensor<f32>> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every tensor of `params` from the section with its name.
    pub fn restore_params(&self, prefix: &str, params: &mut impl Parameters<f32>) -> Result<()> {
        let mut failure = None;
        params.visit_mut(prefix, &mut |name, t| {
            if failure.is_some() {
                return;
            }
            match self.section(&name) {
                Some(s) if s.shape() == t.shape() => t.data_mut().copy_from_slice(s.data()),
                Some(s) => {
                    failure = Some(format!("section {name} has shape {:?}, expected {:?}", s.shape(), t.shape()))
                }
                None => failure = Some(format!("missing section {name}")),
            }
        });
        match failure {
            Some(msg) => Err(Error::CorruptCheckpoint(msg)),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.adam_step.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, t) in &self.sections {
            let blob = t.to_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let magic: [u8; 4] = take(&mut r)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::CorruptCheckpoint(format!("bad magic {magic:?}")));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let config_hash = u64::from_le_bytes(take(&mut r)?);
        let epoch = u64::from_le_bytes(take(&mut r)?);
        let adam_step = u64::from_le_bytes(take(&mut r)?);
        let config_text = string(&mut r)?;
        let count = u32::from_le_bytes(take(&mut r)?);
        let mut sections = Vec::new();
        for _ in 0..count {
            let name = string(&mut r)?;
            let len = u64::from_le_bytes(take(&mut r)?) as usize;
            let blob = bytes_of(&mut r, len)?;
            let t = Tensor::from_bytes(blob).map_err(|e| Error::CorruptCheckpoint(format!("section {name}: {e}")))?;
            sections.push((name, t));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::CorruptCheckpoint("trailing bytes after last section".into()));
        }
        Ok(Self {
            config_hash,
            config_text,
            epoch,
            adam_step,
            sections,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn take<const N: usize>(r: &mut Cursor<&[u8]>) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::CorruptCheckpoint("file is truncated".into()))?;
    Ok(buf)
}

fn bytes_of<'b>(r: &mut Cursor<&'b [u8]>, len: usize) -> Result<&'b [u8]> {
    let start = r.position() as usize;
    let all: &'b [u8] = r.get_ref();
    let end = start
        .checked_add(len)
        .filter(|&e| e <= all.len())
        .ok_or_else(|| Error::CorruptCheckpoint("file is truncated".into()))?;
    r.set_position(end as u64);
    Ok(&all[start..end])
}

fn string(r: &mut Cursor<&[u8]>) -> Result<String> {
    let len = u32::from_le_bytes(take(r)?) as usize;
    let raw = bytes_of(r, len)?;
    String::from_utf8(raw.to_vec()).map_err(|_| Error::CorruptCheckpoint("text is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Linear;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("variant=f5\nseed=3\n");
        c.epoch = 7;
        c.adam_step = 91;
        c.push_params("fc", &Linear::<f32>::init(3, 2, 5).unwrap());
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(c.sections.len(), 2);
        assert_eq!(c.sections[0].0, "fc.weight");
    }

    #[test]
    fn every_truncation_is_reported_as_corrupt() {
        let bytes = sample().to_bytes();
        for cut in 0..bytes.len() {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::CorruptCheckpoint(_)) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_mismatch_is_its_own_error() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointVersion { found: 9, .. })
        ));
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let c = sample();
        let mut same = Linear::<f32>::init(3, 2, 99).unwrap();
        c.restore_params("fc", &mut same).unwrap();
        assert_eq!(same.weight, *c.section("fc.weight").unwrap());
        let mut wrong = Linear::<f32>::init(4, 2, 0).unwrap();
        assert!(c.restore_params("fc", &mut wrong).is_err());
        assert!(c.restore_params("other", &mut same).is_err());
    }

    #[test]
    fn hash_is_fnv1a() {
        assert_eq!(config_hash(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(config_hash("a"), 0xaf63_dc4c_8601_ec8c);
    }
}
