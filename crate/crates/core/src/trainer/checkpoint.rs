//! Binary checkpoint files.
//!
//! Layout (all integers little-endian): magic `RGBDINPT`, `u32` format
//! version, `u32` record count, then per record `u32` name length, name
//! bytes, `u8` dtype code, `u32` rank, `u64` extents and raw values; finally
//! a `u64` checksum (first eight bytes of the SHA-256 of everything before it).

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Adam, LossRecord, TrainConfig, UpdateCounters};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RGBDINPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum RecordData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl RecordData {
    fn code(&self) -> u8 {
        match self {
            RecordData::U8(_) => 0,
            RecordData::F32(_) => 1,
            RecordData::F64(_) => 2,
            RecordData::U64(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            RecordData::U8(v) => v.len(),
            RecordData::F32(v) => v.len(),
            RecordData::F64(v) => v.len(),
            RecordData::U64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: RecordData,
}

/// An ordered list of named, typed arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub records: Vec<Record>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

pub fn checksum(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("sha256 output has 32 bytes"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| corrupt("unexpected end of data"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn array<const N: usize, V>(&mut self, n: usize, f: impl Fn([u8; N]) -> V) -> Result<Vec<V>> {
        let raw = self.take(n.checked_mul(N).ok_or_else(|| corrupt("record too large"))?)?;
        Ok(raw.chunks_exact(N).map(|c| f(c.try_into().unwrap())).collect())
    }
}

impl Archive {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: RecordData) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.records.push(Record {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.data.code());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for e in &r.shape {
                out.extend_from_slice(&(*e as u64).to_le_bytes());
            }
            match &r.data {
                RecordData::U8(v) => out.extend_from_slice(v),
                RecordData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                RecordData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                RecordData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 + 8 {
            return Err(corrupt(format!("file of {} bytes is too short", bytes.len())));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        if checksum(body) != u64::from_le_bytes(trailer.try_into().unwrap()) {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| corrupt("record name is not UTF-8"))?;
            let code = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| corrupt("extent overflow"))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, e| a.checked_mul(*e))
                .ok_or_else(|| corrupt("record size overflow"))?;
            let data = match code {
                0 => RecordData::U8(r.take(n)?.to_vec()),
                1 => RecordData::F32(r.array(n, f32::from_le_bytes)?),
                2 => RecordData::F64(r.array(n, f64::from_le_bytes)?),
                3 => RecordData::U64(r.array(n, u64::from_le_bytes)?),
                other => return Err(corrupt(format!("unknown dtype code {other} in record {name}"))),
            };
            records.push(Record { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after the last record"));
        }
        Ok(Archive { records })
    }

    fn index(&self) -> BTreeMap<&str, &Record> {
        self.records.iter().map(|r| (r.name.as_str(), r)).collect()
    }
}

/// Full trainer state at an iteration boundary.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iter: u64,
    pub counters: UpdateCounters,
    pub generator: ParamStore<f64>,
    pub global_critic: ParamStore<f64>,
    pub local_critic: ParamStore<f64>,
    pub opt_generator: Adam,
    pub opt_global: Adam,
    pub opt_local: Adam,
    pub rng: ChaCha8Rng,
    pub data_digest: [u8; 32],
    pub log: Vec<LossRecord>,
}

const NETS: [&str; 3] = ["generator", "global_critic", "local_critic"];

impl Checkpoint {
    fn nets(&self) -> [(&ParamStore<f64>, &Adam); 3] {
        [
            (&self.generator, &self.opt_generator),
            (&self.global_critic, &self.opt_global),
            (&self.local_critic, &self.opt_local),
        ]
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::default();
        let config = serde_json::to_vec(&self.config)?;
        a.push("meta/config", &[config.len()], RecordData::U8(config));
        a.push("meta/iter", &[], RecordData::U64(vec![self.iter]));
        a.push(
            "meta/counters",
            &[2],
            RecordData::U64(vec![self.counters.critic_updates, self.counters.generator_updates]),
        );
        let pos = self.rng.get_word_pos();
        a.push("meta/rng_seed", &[32], RecordData::U8(self.rng.get_seed().to_vec()));
        a.push(
            "meta/rng_state",
            &[3],
            RecordData::U64(vec![self.rng.get_stream(), pos as u64, (pos >> 64) as u64]),
        );
        a.push("meta/data_digest", &[32], RecordData::U8(self.data_digest.to_vec()));
        let log: Vec<f64> = self.log.iter().flat_map(LossRecord::values).collect();
        a.push("meta/loss_log", &[self.log.len(), LossRecord::COLUMNS.len()], RecordData::F64(log));
        for (net, (params, opt)) in NETS.iter().zip(self.nets()) {
            for (name, t) in params.iter() {
                a.push(format!("{net}/{name}"), t.shape(), RecordData::F64(t.to_vec()));
            }
            a.push(format!("adam/{net}/t"), &[], RecordData::U64(vec![opt.t]));
            for (name, t) in params.iter() {
                a.push(format!("adam/{net}/m/{name}"), t.shape(), RecordData::F64(opt.m[name].clone()));
                a.push(format!("adam/{net}/v/{name}"), t.shape(), RecordData::F64(opt.v[name].clone()));
            }
        }
        Ok(a)
    }

    /// Rebuilds a checkpoint; `templates` supply the parameter names and
    /// shapes expected for the generator and both critics.
    pub fn from_archive(a: &Archive, build: impl Fn(&TrainConfig) -> Result<[ParamStore<f64>; 3]>) -> Result<Self> {
        let idx = a.index();
        let get = |name: &str| idx.get(name).copied().ok_or_else(|| corrupt(format!("missing record {name}")));
        let u8s = |name: &str| match &get(name)?.data {
            RecordData::U8(v) => Ok(v.clone()),
            _ => Err(corrupt(format!("record {name} must be u8"))),
        };
        let u64s = |name: &str| match &get(name)?.data {
            RecordData::U64(v) => Ok(v.clone()),
            _ => Err(corrupt(format!("record {name} must be u64"))),
        };
        let f64s = |name: &str, shape: &[usize]| {
            let r = get(name)?;
            if r.shape != shape {
                return Err(corrupt(format!("record {name} has shape {:?}, expected {shape:?}", r.shape)));
            }
            match &r.data {
                RecordData::F64(v) => Ok(v.clone()),
                _ => Err(corrupt(format!("record {name} must be f64"))),
            }
        };

        let config: TrainConfig = serde_json::from_slice(&u8s("meta/config")?).map_err(|e| corrupt(format!("config: {e}")))?;
        let iter = *u64s("meta/iter")?.first().ok_or_else(|| corrupt("empty iteration record"))?;
        let counters = match u64s("meta/counters")?.as_slice() {
            [c, g] => UpdateCounters { critic_updates: *c, generator_updates: *g },
            _ => return Err(corrupt("bad counters record")),
        };
        let seed: [u8; 32] = u8s("meta/rng_seed")?.try_into().map_err(|_| corrupt("bad rng seed"))?;
        let (stream, pos) = match u64s("meta/rng_state")?.as_slice() {
            [s, lo, hi] => (*s, (*hi as u128) << 64 | *lo as u128),
            _ => return Err(corrupt("bad rng state")),
        };
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(pos);
        let data_digest: [u8; 32] = u8s("meta/data_digest")?.try_into().map_err(|_| corrupt("bad data digest"))?;
        let cols = LossRecord::COLUMNS.len();
        let log_rec = get("meta/loss_log")?;
        let rows = log_rec.shape.first().copied().unwrap_or(0);
        let log = f64s("meta/loss_log", &[rows, cols])?.chunks_exact(cols).map(LossRecord::from_values).collect();

        let templates = build(&config)?;
        let mut stores = Vec::with_capacity(3);
        let mut opts = Vec::with_capacity(3);
        for (net, template) in NETS.iter().zip(templates) {
            let mut store = ParamStore::new();
            let mut opt = Adam::new(config.adam(), &template);
            opt.t = *u64s(&format!("adam/{net}/t"))?.first().ok_or_else(|| corrupt("empty adam step"))?;
            for (name, t) in template.iter() {
                let values = f64s(&format!("{net}/{name}"), t.shape())?;
                store.insert(name, Tensor::parameter(values, t.shape())?)?;
                opt.m.insert(name.to_string(), f64s(&format!("adam/{net}/m/{name}"), t.shape())?);
                opt.v.insert(name.to_string(), f64s(&format!("adam/{net}/v/{name}"), t.shape())?);
            }
            stores.push(store);
            opts.push(opt);
        }
        let expected = 7 + stores.iter().map(|s| 1 + 3 * s.len()).sum::<usize>();
        if a.records.len() != expected {
            return Err(corrupt(format!("{} records, expected {expected}", a.records.len())));
        }
        let [generator, global_critic, local_critic]: [ParamStore<f64>; 3] = stores.try_into().unwrap();
        let [opt_generator, opt_global, opt_local]: [Adam; 3] = opts.try_into().unwrap();
        Ok(Checkpoint {
            config,
            iter,
            counters,
            generator,
            global_critic,
            local_critic,
            opt_generator,
            opt_global,
            opt_local,
            rng,
            data_digest,
            log,
        })
    }
}

pub fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, archive.to_bytes())?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    Archive::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::default();
        a.push("bytes", &[3], RecordData::U8(vec![1, 2, 3]));
        a.push("f32", &[2, 1], RecordData::F32(vec![1.5, -0.25]));
        a.push("f64", &[2], RecordData::F64(vec![std::f64::consts::PI, -0.0]));
        a.push("scalar", &[], RecordData::U64(vec![u64::MAX]));
        a
    }

    #[test]
    fn round_trip_is_exact() {
        let a = sample();
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_bytes(), bytes);
    }

    #[test]
    fn truncation_and_bit_flips_are_detected() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 20, bytes.len() - 1] {
            assert!(matches!(Archive::from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))));
        }
        let mut flipped = bytes.clone();
        flipped[30] ^= 0x10;
        assert!(matches!(Archive::from_bytes(&flipped), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample().to_bytes();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let n = bytes.len() - 8;
        let sum = checksum(&bytes[..n]);
        bytes[n..].copy_from_slice(&sum.to_le_bytes());
        assert!(matches!(
            Archive::from_bytes(&bytes),
            Err(Error::CheckpointVersion { found: 7, expected: FORMAT_VERSION })
        ));
    }

    #[test]
    fn record_layout_is_little_endian() {
        let mut a = Archive::default();
        a.push("x", &[1], RecordData::U64(vec![0x0102]));
        let b = a.to_bytes();
        // magic, version, count, name len, name, code, rank, extent, value
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &1u32.to_le_bytes());
        assert_eq!(b[20], b'x');
        assert_eq!(b[21], 3);
        assert_eq!(&b[22..26], &1u32.to_le_bytes());
        assert_eq!(&b[26..34], &1u64.to_le_bytes());
        assert_eq!(&b[34..42], &0x0102u64.to_le_bytes());
        assert_eq!(b.len(), 50);
    }
}
