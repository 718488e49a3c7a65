//! On-disk embedding cache: one file per (model hash, prompt id). Binary
//! blocks of {observation hash (16 bytes), T, D, mask bytes, f32 payload},
//! followed by the decoded token ids so cached packets reproduce direct
//! extraction exactly. Writes are atomic (temp file + rename).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::vlm::vocab::TokenId;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt cache block at byte {0}")]
    Corrupt(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachedPacket {
    pub t: usize,
    pub d: usize,
    pub mask: Vec<bool>,
    pub embedding: Vec<f32>,
    pub decoded: Vec<TokenId>,
}

#[derive(Debug)]
pub struct ReprCache {
    path: PathBuf,
    entries: HashMap<u64, CachedPacket>,
    dirty: bool,
}

fn mix(h: u64) -> u64 {
    // splitmix64 finalizer; second half of the 16-byte key.
    let mut z = h.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl ReprCache {
    pub fn file_name(model_hash: u64, prompt_id: &str) -> String {
        format!("repr_{model_hash:016x}_{prompt_id}.bin")
    }

    /// Open (and load, if present) the cache file for one (model, prompt).
    pub fn open(dir: &Path, model_hash: u64, prompt_id: &str) -> Result<Self, CacheError> {
        let path = dir.join(Self::file_name(model_hash, prompt_id));
        let mut cache = ReprCache {
            path,
            entries: HashMap::new(),
            dirty: false,
        };
        if cache.path.exists() {
            cache.load()?;
        }
        Ok(cache)
    }

    fn load(&mut self) -> Result<(), CacheError> {
        let mut buf = Vec::new();
        std::fs::File::open(&self.path)?.read_to_end(&mut buf)?;
        let mut at = 0usize;
        let need = |at: usize, n: usize, len: usize| -> Result<(), CacheError> {
            if at + n > len {
                Err(CacheError::Corrupt(at as u64))
            } else {
                Ok(())
            }
        };
        while at < buf.len() {
            need(at, 16 + 8, buf.len())?;
            let hash = u64::from_le_bytes(buf[at..at + 8].try_into().unwrap());
            let check = u64::from_le_bytes(buf[at + 8..at + 16].try_into().unwrap());
            if check != mix(hash) {
                return Err(CacheError::Corrupt(at as u64));
            }
            at += 16;
            let t = u32::from_le_bytes(buf[at..at + 4].try_into().unwrap()) as usize;
            let d = u32::from_le_bytes(buf[at + 4..at + 8].try_into().unwrap()) as usize;
            at += 8;
            need(at, t + t * d * 4 + 2, buf.len())?;
            let mask: Vec<bool> = buf[at..at + t].iter().map(|&b| b != 0).collect();
            at += t;
            let mut embedding = Vec::with_capacity(t * d);
            for i in 0..t * d {
                embedding.push(f32::from_le_bytes(
                    buf[at + i * 4..at + i * 4 + 4].try_into().unwrap(),
                ));
            }
            at += t * d * 4;
            let n_dec = u16::from_le_bytes(buf[at..at + 2].try_into().unwrap()) as usize;
            at += 2;
            need(at, n_dec * 2, buf.len())?;
            let decoded: Vec<TokenId> = (0..n_dec)
                .map(|i| u16::from_le_bytes(buf[at + i * 2..at + i * 2 + 2].try_into().unwrap()))
                .collect();
            at += n_dec * 2;
            self.entries.insert(
                hash,
                CachedPacket {
                    t,
                    d,
                    mask,
                    embedding,
                    decoded,
                },
            );
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, obs_hash: u64) -> Option<&CachedPacket> {
        self.entries.get(&obs_hash)
    }

    pub fn put(&mut self, obs_hash: u64, packet: CachedPacket) {
        self.entries.insert(obs_hash, packet);
        self.dirty = true;
    }

    /// Write all entries atomically: serialize to a temp file in the same
    /// directory, then rename over the target.
    pub fn flush(&mut self) -> Result<(), CacheError> {
        if !self.dirty {
            return Ok(());
        }
        let mut buf = Vec::new();
        let mut keys: Vec<u64> = self.entries.keys().copied().collect();
        keys.sort_unstable();
        for hash in keys {
            let p = &self.entries[&hash];
            buf.extend_from_slice(&hash.to_le_bytes());
            buf.extend_from_slice(&mix(hash).to_le_bytes());
            buf.extend_from_slice(&(p.t as u32).to_le_bytes());
            buf.extend_from_slice(&(p.d as u32).to_le_bytes());
            buf.extend(p.mask.iter().map(|&m| m as u8));
            for &x in &p.embedding {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            buf.extend_from_slice(&(p.decoded.len() as u16).to_le_bytes());
            for &id in &p.decoded {
                buf.extend_from_slice(&id.to_le_bytes());
            }
        }
        let tmp = self.path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, &self.path)?;
        self.dirty = false;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_packet(t: usize, d: usize, salt: f32) -> CachedPacket {
        CachedPacket {
            t,
            d,
            mask: (0..t).map(|i| i % 3 != 0).collect(),
            embedding: (0..t * d).map(|i| i as f32 * 0.5 + salt).collect(),
            decoded: vec![7, 8, 9],
        }
    }

    #[test]
    fn round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ReprCache::open(dir.path(), 0xabcd, "presence").unwrap();
        c.put(11, sample_packet(5, 4, 0.25));
        c.put(22, sample_packet(3, 4, -1.75));
        c.flush().unwrap();

        let c2 = ReprCache::open(dir.path(), 0xabcd, "presence").unwrap();
        assert_eq!(c2.len(), 2);
        assert_eq!(c2.get(11), c.get(11));
        assert_eq!(c2.get(22), c.get(22));
        assert!(c2.get(33).is_none());
    }

    #[test]
    fn files_are_keyed_by_model_and_prompt() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ReprCache::open(dir.path(), 1, "p1").unwrap();
        a.put(1, sample_packet(2, 2, 0.0));
        a.flush().unwrap();
        let b = ReprCache::open(dir.path(), 2, "p1").unwrap();
        assert!(b.is_empty());
        let c = ReprCache::open(dir.path(), 1, "p2").unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn corrupt_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ReprCache::open(dir.path(), 9, "p").unwrap();
        a.put(5, sample_packet(2, 2, 0.0));
        a.flush().unwrap();
        let path = dir.path().join(ReprCache::file_name(9, "p"));
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[9] ^= 0xff; // damage the hash check word
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            ReprCache::open(dir.path(), 9, "p"),
            Err(CacheError::Corrupt(_))
        ));
    }
}
