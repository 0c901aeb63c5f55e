//! Binary checkpoint format and the JSON metadata sidecar.
//!
//! Layout, all integers little-endian:
//! `"SMLP"`, version `u32`, record count `u32`, then per record the name
//! length `u32`, UTF-8 name, rank `u32`, one `u64` per extent and the `f64`
//! payload; finally a CRC32 (IEEE) of every byte from the first record to
//! the end of the last payload.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{Adam, TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"SMLP";
pub const VERSION: u32 = 1;
const HEADER: usize = 12;

pub type Record = (String, Tensor);

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[HEADER..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes, not a checkpoint".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("version mismatch: file has {version}, expected {VERSION}")));
    }
    let count = r.u32()?;
    if bytes.len() < HEADER + 4 {
        return Err(Error::Checkpoint("truncated file: no checksum".into()));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let mut r = Reader {
        bytes: &bytes[..body_end],
        pos: HEADER,
    };
    let mut records = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("extent overflows".into()))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("record {name} is too large")))?;
        let payload = r.take(numel)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != body_end {
        return Err(Error::Checkpoint(format!("{} trailing bytes after the last record", body_end - r.pos)));
    }
    if crc32fast::hash(&bytes[HEADER..body_end]) != stored {
        return Err(Error::Checkpoint("checksum failure".into()));
    }
    Ok(records)
}

/// Configuration and vocabulary stored next to the binary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Corpus code points in id order, when trained on text.
    pub vocab: Option<String>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn bits(x: u64) -> f64 {
    f64::from_bits(x)
}

fn rng_record(rng: &ChaCha8Rng) -> Tensor {
    let seed = rng.get_seed();
    let mut words: Vec<f64> = seed
        .chunks_exact(8)
        .map(|c| bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    words.push(bits(rng.get_stream()));
    let pos = rng.get_word_pos();
    words.push(bits(pos as u64));
    words.push(bits((pos >> 64) as u64));
    Tensor::new(vec![7], words).expect("seven words")
}

fn rng_from_record(t: &Tensor) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    let w: Vec<u64> = t.data().iter().map(|x| x.to_bits()).collect();
    if w.len() != 7 {
        return Err(Error::Checkpoint("rng record must hold seven words".into()));
    }
    let mut seed = [0u8; 32];
    for (chunk, word) in seed.chunks_exact_mut(8).zip(&w[..4]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(w[4]);
    rng.set_word_pos(u128::from(w[5]) | (u128::from(w[6]) << 64));
    Ok(rng)
}

/// Parameters, Adam moments, step and rng as named records.
pub fn to_records(model: &Model, state: &TrainState) -> Vec<Record> {
    let mut out = Vec::new();
    for (name, t) in model.store.iter() {
        out.push((format!("param/{name}"), t.clone()));
    }
    for (prefix, moments) in [("adam_m", &state.adam.m), ("adam_v", &state.adam.v)] {
        for ((name, _), t) in model.store.iter().zip(moments) {
            out.push((format!("{prefix}/{name}"), t.clone()));
        }
    }
    out.push(("state/step".into(), Tensor::new(vec![1], vec![bits(state.step)]).expect("scalar")));
    out.push(("state/rng".into(), rng_record(&state.rng)));
    out
}

/// Rebuilds a model from `cfg` and fills it and the train state from `records`.
pub fn from_records(cfg: &ModelConfig, records: &[Record]) -> Result<(Model, TrainState)> {
    let mut model = Model::build(cfg)?;
    let section = |prefix: &str| -> Vec<(&str, &Tensor)> {
        records
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
            .collect()
    };
    model.store.load_from(section("param/"))?;
    let mut moments = Vec::new();
    for prefix in ["adam_m/", "adam_v/"] {
        let mut store = model.store.clone();
        store.load_from(section(prefix))?;
        moments.push(store.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>());
    }
    let v = moments.pop().expect("two moment sets");
    let m = moments.pop().expect("two moment sets");
    let get = |name: &str| {
        records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))
    };
    let step = get("state/step")?.data().first().copied().map(f64::to_bits);
    let step = step.ok_or_else(|| Error::Checkpoint("empty step record".into()))?;
    let rng = rng_from_record(get("state/rng")?)?;
    let known = model.store.len() * 3 + 2;
    if records.len() != known {
        return Err(Error::Checkpoint(format!(
            "expected {known} records for this model, found {}",
            records.len()
        )));
    }
    Ok((model, TrainState {
        step,
        adam: Adam { m, v },
        rng,
    }))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: &Path, model: &Model, state: &TrainState, meta: &CheckpointMeta) -> Result<()> {
    write(path, &encode(&to_records(model, state)))?;
    let json = serde_json::to_string_pretty(meta).map_err(|e| Error::Parse(e.to_string()))?;
    write(&meta_path(path), json.as_bytes())
}

pub struct Loaded {
    pub model: Model,
    pub state: TrainState,
    pub meta: CheckpointMeta,
}

pub fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let meta_file = meta_path(path);
    let meta: CheckpointMeta = serde_json::from_slice(&read(&meta_file)?)
        .map_err(|e| Error::Parse(format!("{}: {e}", meta_file.display())))?;
    let records = decode(&read(path)?)?;
    let (model, state) = from_records(&meta.model, &records)?;
    Ok(Loaded { model, state, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use rand::RngCore;

    fn sample() -> Vec<Record> {
        vec![
            ("a".into(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, f64::MIN_POSITIVE, 1e300, -0.0]).unwrap()),
            ("scalar".into(), Tensor::new(vec![], vec![7.0]).unwrap()),
        ]
    }

    #[test]
    fn layout_matches_the_documented_format() {
        let bytes = encode(&[("w".into(), Tensor::new(vec![1], vec![1.0]).unwrap())]);
        assert_eq!(&bytes[..4], b"SMLP");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes[16], b'w');
        assert_eq!(&bytes[17..21], &1u32.to_le_bytes());
        assert_eq!(&bytes[21..29], &1u64.to_le_bytes());
        assert_eq!(&bytes[29..37], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[37..], &crc32fast::hash(&bytes[12..37]).to_le_bytes());
        assert_eq!(bytes.len(), 41);
    }

    #[test]
    fn records_round_trip_bitwise() {
        let bytes = encode(&sample());
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in sample().iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|x| x.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&sample());
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x10;
        assert!(decode(&flipped).unwrap_err().to_string().contains("checksum"));

        let mut version = bytes.clone();
        version[4] = 9;
        assert!(decode(&version).unwrap_err().to_string().contains("version mismatch"));

        for cut in [3, 11, 20, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        assert!(decode(b"NOPE").unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn model_state_round_trips_and_files_are_stable() {
        let mut cfg = ModelConfig::new(Arch::Smlp, 9, 8, 8, 8, 1);
        cfg.n_sparse = 1;
        cfg.n_experts = 2;
        let model = Model::build(&cfg).unwrap();
        let mut state = TrainState::new(&model, 4);
        state.step = 17;
        state.rng.next_u64();
        state.adam.m[0].data_mut()[0] = 0.25;
        let meta = CheckpointMeta {
            model: cfg.clone(),
            train: TrainConfig::default(),
            vocab: Some("abc".into()),
        };
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("one.ckpt");
        let p2 = dir.path().join("two.ckpt");
        save_checkpoint(&p1, &model, &state, &meta).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.model.store, model.store);
        assert_eq!(loaded.state, state);
        assert_eq!(loaded.meta, meta);
        save_checkpoint(&p2, &loaded.model, &loaded.state, &loaded.meta).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(fs::read(meta_path(&p1)).unwrap(), fs::read(meta_path(&p2)).unwrap());
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let cfg = ModelConfig::new(Arch::Gmlp, 9, 8, 8, 8, 1);
        let model = Model::build(&cfg).unwrap();
        let records = to_records(&model, &TrainState::new(&model, 0));
        let mut bigger = cfg.clone();
        bigger.n_dense = 2;
        assert!(from_records(&bigger, &records).is_err());
        assert!(matches!(load_checkpoint(Path::new("/nonexistent/x.ckpt")), Err(Error::Io { .. })));
    }
}
