//! `CFCK` parameter checkpoints.
//!
//! Layout, little-endian: magic `CFCK`, version byte, `u32` entry count, then
//! per entry a `u16` name length, the UTF-8 name, a rank byte, `u32` dims and
//! `f32` payload; finally a CRC-32 of every preceding byte.
//!
//! Two reserved entries carry what the plain format cannot: `#seed` holds the
//! store's init seed and `#fingerprint` the config fingerprint, both as raw
//! bit patterns.

use std::fs;
use std::path::Path;

use corrflow::tensor::{Array, ParamStore};

pub const MAGIC: &[u8; 4] = b"CFCK";
pub const VERSION: u8 = 1;

const SEED_ENTRY: &str = "#seed";
const FINGERPRINT_ENTRY: &str = "#fingerprint";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("entry name is not UTF-8")]
    BadName,
    #[error("duplicate entry `{0}`")]
    Duplicate(String),
    #[error("entry `{name}` cannot be stored: {reason}")]
    Unencodable { name: String, reason: &'static str },
    #[error("malformed reserved entry `{0}`")]
    BadMeta(&'static str),
}

/// A parameter store plus the fingerprint it was written with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub fingerprint: Option<[u8; 32]>,
}

fn seed_bits(seed: u64) -> Array {
    let halves = [seed as u32, (seed >> 32) as u32].map(f32::from_bits);
    Array::from_vec(&[2], halves.to_vec()).expect("two halves")
}

fn push_entry(out: &mut Vec<u8>, name: &str, a: &Array) -> Result<(), CheckpointError> {
    let bad = |reason| CheckpointError::Unencodable { name: name.to_string(), reason };
    let len = u16::try_from(name.len()).map_err(|_| bad("name longer than 65535 bytes"))?;
    let rank = u8::try_from(a.rank()).map_err(|_| bad("rank above 255"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(rank);
    for &d in a.shape() {
        out.extend_from_slice(&u32::try_from(d).map_err(|_| bad("dimension above u32"))?.to_le_bytes());
    }
    for bits in a.to_bits() {
        out.extend_from_slice(&bits.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(store: &ParamStore, fingerprint: Option<&[u8; 32]>) -> Result<Vec<u8>, CheckpointError> {
    if let Some(name) = store.names().find(|n| *n == SEED_ENTRY || *n == FINGERPRINT_ENTRY) {
        return Err(CheckpointError::Unencodable { name: name.to_string(), reason: "reserved name" });
    }
    let count = store.len() + 1 + fingerprint.is_some() as usize;
    let mut out = Vec::with_capacity(16 + store.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(count as u32).to_le_bytes());
    push_entry(&mut out, SEED_ENTRY, &seed_bits(store.seed()))?;
    if let Some(fp) = fingerprint {
        let words: Vec<f32> = fp.chunks(4).map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap()))).collect();
        push_entry(&mut out, FINGERPRINT_ENTRY, &Array::from_vec(&[8], words).expect("eight words"))?;
    }
    for (name, a) in store.iter() {
        push_entry(&mut out, name, a)?;
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated("header"));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    if bytes.len() < 5 + 4 + 4 {
        return Err(CheckpointError::Truncated("header"));
    }
    if bytes[4] != VERSION {
        return Err(CheckpointError::BadVersion(bytes[4]));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }

    let mut r = Reader { buf: body, pos: 5 };
    let count = r.u32("entry count")?;
    let mut store = ParamStore::new(0);
    let (mut seed, mut fingerprint) = (None, None);
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| CheckpointError::BadName)?.to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or(CheckpointError::Truncated("payload"))?;
        let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated("payload"))?, "payload")?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap()))).collect();
        let a = Array::from_vec(&shape, data).expect("payload matches dims");
        match name.as_str() {
            SEED_ENTRY => {
                let [lo, hi] = a.data()[..] else { return Err(CheckpointError::BadMeta(SEED_ENTRY)) };
                seed = Some(lo.to_bits() as u64 | (hi.to_bits() as u64) << 32);
            }
            FINGERPRINT_ENTRY => {
                if a.len() != 8 {
                    return Err(CheckpointError::BadMeta(FINGERPRINT_ENTRY));
                }
                let mut fp = [0u8; 32];
                for (chunk, v) in fp.chunks_mut(4).zip(a.data()) {
                    chunk.copy_from_slice(&v.to_bits().to_le_bytes());
                }
                fingerprint = Some(fp);
            }
            _ => {
                if store.contains(&name) {
                    return Err(CheckpointError::Duplicate(name));
                }
                store.insert(name, a);
            }
        }
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Truncated("entry table (trailing bytes)"));
    }
    store.set_seed(seed.unwrap_or(0));
    Ok(Checkpoint { store, fingerprint })
}

pub fn save_checkpoint(store: &ParamStore, fingerprint: Option<&[u8; 32]>, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(store, fingerprint)?;
    let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("cfck.tmp");
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    decode_checkpoint(&bytes)
}
