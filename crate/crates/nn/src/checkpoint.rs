//! The `XCKP` checkpoint format.
//!
//! Layout, all little-endian:
//! magic "XCKP", version u16, stage name (u16 len + utf8), model config JSON
//! (u32 len + utf8), iteration u64, adam step u64, RNG block (present u8,
//! seed 32 bytes, word position u128, stream u64), tensor table (u32 count;
//! per tensor: name u16+utf8, trainable u8, ndim u8, dims u32 each, dtype u8
//! = 1 for f64, then value/adam-m/adam-v payloads), optional codebook block
//! (n u32, n_z u32, entries f64, usage u64).
//!
//! Payloads are f64 so save/resume reproduces a run bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::NnError;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"XCKP";
const VERSION: u16 = 1;
const DTYPE_F64: u8 = 1;

/// Portable ChaCha8 state snapshot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
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

/// Codebook payload carried by compressor checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookBlock {
    pub n: usize,
    pub n_z: usize,
    pub entries: Vec<f64>,
    pub usage: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: String,
    pub config_json: String,
    pub iteration: u64,
    pub rng: Option<RngState>,
    pub store: ParamStore,
    pub codebook: Option<CodebookBlock>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let file = File::create(path).map_err(|e| NnError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| NnError::io(path, e);

        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        write_str16(&mut w, &self.stage).map_err(io)?;
        let cfg = self.config_json.as_bytes();
        w.write_all(&(cfg.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(cfg).map_err(io)?;
        w.write_all(&self.iteration.to_le_bytes()).map_err(io)?;
        w.write_all(&self.store.adam_t.to_le_bytes()).map_err(io)?;

        match &self.rng {
            Some(state) => {
                w.write_all(&[1u8]).map_err(io)?;
                w.write_all(&state.seed).map_err(io)?;
                w.write_all(&state.word_pos.to_le_bytes()).map_err(io)?;
                w.write_all(&state.stream.to_le_bytes()).map_err(io)?;
            }
            None => w.write_all(&[0u8]).map_err(io)?,
        }

        w.write_all(&(self.store.len() as u32).to_le_bytes()).map_err(io)?;
        for p in self.store.iter() {
            write_str16(&mut w, &p.name).map_err(io)?;
            w.write_all(&[p.trainable as u8]).map_err(io)?;
            let shape = p.value.shape();
            w.write_all(&[shape.len() as u8]).map_err(io)?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
            }
            w.write_all(&[DTYPE_F64]).map_err(io)?;
            for t in [&p.value, &p.m, &p.v] {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
            }
        }

        match &self.codebook {
            Some(cb) => {
                w.write_all(&[1u8]).map_err(io)?;
                w.write_all(&(cb.n as u32).to_le_bytes()).map_err(io)?;
                w.write_all(&(cb.n_z as u32).to_le_bytes()).map_err(io)?;
                for v in &cb.entries {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
                for u in &cb.usage {
                    w.write_all(&u.to_le_bytes()).map_err(io)?;
                }
            }
            None => w.write_all(&[0u8]).map_err(io)?,
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let file = File::open(path).map_err(|e| NnError::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |reason: &str| NnError::format(path, reason);

        let magic = read_array::<4>(&mut r).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic, not an XCKP file"));
        }
        let version = u16::from_le_bytes(read_array(&mut r).map_err(|_| bad("truncated"))?);
        if version != VERSION {
            return Err(bad("unsupported version"));
        }
        let stage = read_str16(&mut r).map_err(|_| bad("bad stage name"))?;
        let cfg_len =
            u32::from_le_bytes(read_array(&mut r).map_err(|_| bad("truncated"))?) as usize;
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg).map_err(|_| bad("truncated config"))?;
        let config_json = String::from_utf8(cfg).map_err(|_| bad("config not utf8"))?;
        let iteration = u64::from_le_bytes(read_array(&mut r).map_err(|_| bad("truncated"))?);
        let adam_t = u64::from_le_bytes(read_array(&mut r).map_err(|_| bad("truncated"))?);

        let has_rng = read_array::<1>(&mut r).map_err(|_| bad("truncated"))?[0];
        let rng = if has_rng == 1 {
            let seed = read_array::<32>(&mut r).map_err(|_| bad("truncated rng"))?;
            let word_pos =
                u128::from_le_bytes(read_array(&mut r).map_err(|_| bad("truncated rng"))?);
            let stream =
                u64::from_le_bytes(read_array(&mut r).map_err(|_| bad("truncated rng"))?);
            Some(RngState { seed, word_pos, stream })
        } else {
            None
        };

        let count = u32::from_le_bytes(read_array(&mut r).map_err(|_| bad("truncated"))?);
        let mut store = ParamStore::new();
        store.adam_t = adam_t;
        for _ in 0..count {
            let name = read_str16(&mut r).map_err(|_| bad("bad tensor name"))?;
            let trainable = read_array::<1>(&mut r).map_err(|_| bad("truncated"))?[0] == 1;
            let ndim = read_array::<1>(&mut r).map_err(|_| bad("truncated"))?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(
                    u32::from_le_bytes(read_array(&mut r).map_err(|_| bad("truncated"))?) as usize,
                );
            }
            let dtype = read_array::<1>(&mut r).map_err(|_| bad("truncated"))?[0];
            if dtype != DTYPE_F64 {
                return Err(bad("unsupported tensor dtype"));
            }
            let n: usize = shape.iter().product();
            let mut tensors = Vec::with_capacity(3);
            for _ in 0..3 {
                let mut data = vec![0.0f64; n];
                for v in data.iter_mut() {
                    *v = f64::from_le_bytes(
                        read_array(&mut r).map_err(|_| bad("truncated payload"))?,
                    );
                }
                tensors.push(Tensor::new(shape.clone(), data).map_err(|_| bad("bad shape"))?);
            }
            let v = tensors.pop().unwrap();
            let m = tensors.pop().unwrap();
            let value = tensors.pop().unwrap();
            let slot = if trainable {
                store.add(name, value)?
            } else {
                store.add_frozen(name, value)?
            };
            store.get_mut(slot).m = m;
            store.get_mut(slot).v = v;
        }

        let has_cb = read_array::<1>(&mut r).map_err(|_| bad("truncated"))?[0];
        let codebook = if has_cb == 1 {
            let n = u32::from_le_bytes(read_array(&mut r).map_err(|_| bad("truncated"))?) as usize;
            let n_z =
                u32::from_le_bytes(read_array(&mut r).map_err(|_| bad("truncated"))?) as usize;
            let mut entries = vec![0.0f64; n * n_z];
            for v in entries.iter_mut() {
                *v = f64::from_le_bytes(
                    read_array(&mut r).map_err(|_| bad("truncated codebook"))?,
                );
            }
            let mut usage = vec![0u64; n];
            for u in usage.iter_mut() {
                *u = u64::from_le_bytes(
                    read_array(&mut r).map_err(|_| bad("truncated usage"))?,
                );
            }
            Some(CodebookBlock { n, n_z, entries, usage })
        } else {
            None
        };

        Ok(Checkpoint {
            stage,
            config_json,
            iteration,
            rng,
            store,
            codebook,
        })
    }
}

fn write_str16<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    let bytes = s.as_bytes();
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_str16<R: Read>(r: &mut R) -> std::io::Result<String> {
    let len = u16::from_le_bytes(read_array(r)?) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| std::io::Error::other("not utf8"))
}

fn read_array<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn roundtrip_preserves_everything() {
        let mut store = ParamStore::new();
        store
            .add("a.w", Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1.5, -2.5, 0.0]).unwrap())
            .unwrap();
        store.add_frozen("scale", Tensor::scalar(0.731)).unwrap();
        store.adam_t = 17;

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        rng.next_u64();
        rng.next_u64();

        let ckpt = Checkpoint {
            stage: "vq".into(),
            config_json: r#"{"channels":[8,16]}"#.into(),
            iteration: 123,
            rng: Some(RngState::capture(&rng)),
            store,
            codebook: Some(CodebookBlock {
                n: 4,
                n_z: 2,
                entries: vec![0.0, 1.0, -1.0, 0.5, 0.25, -0.25, 2.0, -2.0],
                usage: vec![3, 0, 1, 0],
            }),
        };

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.xckp");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();

        assert_eq!(back.stage, "vq");
        assert_eq!(back.config_json, ckpt.config_json);
        assert_eq!(back.iteration, 123);
        assert_eq!(back.store.adam_t, 17);
        assert_eq!(back.store.len(), 2);
        assert_eq!(
            back.store.value(back.store.index_of("a.w").unwrap()),
            ckpt.store.value(0)
        );
        assert!(!back.store.get(back.store.index_of("scale").unwrap()).trainable);
        assert_eq!(back.codebook, ckpt.codebook);

        // The restored RNG continues the original stream.
        let mut restored = back.rng.unwrap().restore();
        let mut reference = rng.clone();
        assert_eq!(restored.next_u64(), reference.next_u64());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.xckp");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
