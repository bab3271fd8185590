//! Little-endian binary checkpoint: magic "HPMCKPT1", a run-config echo,
//! counters, rng state, then length-prefixed named f64 tensors. Loading is
//! all-or-nothing; a truncated or foreign file leaves no partial state.

use crate::error::{HpmError, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HPMCKPT1";
pub const TENSOR_FILE_MAGIC: &[u8; 8] = b"HPMTENS1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    /// Completed epochs; training resumes here.
    pub epoch: u64,
    pub opt_step: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn capture_rng(rng: &ChaCha8Rng) -> ([u8; 32], u64, u128) {
    (rng.get_seed(), rng.get_stream(), rng.get_word_pos())
}

pub fn restore_rng(seed: [u8; 32], stream: u64, word_pos: u128) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    rng
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_tensor(out: &mut Vec<u8>, t: &NamedTensor) {
    push_u64(out, t.name.len() as u64);
    out.extend_from_slice(t.name.as_bytes());
    push_u64(out, t.shape.len() as u64);
    for &d in &t.shape {
        push_u64(out, d as u64);
    }
    let numel: usize = t.shape.iter().product();
    debug_assert_eq!(numel, t.data.len());
    for &v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    push_u64(&mut out, ckpt.config_text.len() as u64);
    out.extend_from_slice(ckpt.config_text.as_bytes());
    push_u64(&mut out, ckpt.epoch);
    push_u64(&mut out, ckpt.opt_step);
    out.extend_from_slice(&ckpt.rng_seed);
    push_u64(&mut out, ckpt.rng_stream);
    out.extend_from_slice(&ckpt.rng_word_pos.to_le_bytes());
    push_u64(&mut out, ckpt.tensors.len() as u64);
    for t in &ckpt.tensors {
        push_tensor(&mut out, t);
    }
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(HpmError::Checkpoint(format!(
                "truncated while reading {what} at byte {} (need {n} bytes, {} left)",
                self.pos,
                self.data.len() - self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u64(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| HpmError::Checkpoint(format!("{what} is not UTF-8")))
    }

    fn tensor(&mut self) -> Result<NamedTensor> {
        let name = self.string("tensor name")?;
        let rank = self.u64("tensor rank")? as usize;
        if rank > 8 {
            return Err(HpmError::Checkpoint(format!("tensor {name} has absurd rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("tensor extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * 8, "tensor payload")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(NamedTensor { name, shape, data })
    }
}

fn read_tensor_list(r: &mut Reader) -> Result<Vec<NamedTensor>> {
    let count = r.u64("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(r.tensor()?);
    }
    if r.pos != r.data.len() {
        return Err(HpmError::Checkpoint(format!(
            "{} trailing bytes after tensor list",
            r.data.len() - r.pos
        )));
    }
    Ok(tensors)
}

fn check_magic(data: &[u8], want: &[u8; 8]) -> Result<()> {
    if data.len() < 8 {
        return Err(HpmError::Checkpoint("file shorter than magic".into()));
    }
    if &data[..8] == want {
        return Ok(());
    }
    if data[..7] == want[..7] {
        return Err(HpmError::Checkpoint(format!(
            "unsupported format version {}, expected {}",
            data[7] as char, want[7] as char
        )));
    }
    Err(HpmError::Checkpoint("bad magic".into()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = fs::read(path)?;
    check_magic(&data, CHECKPOINT_MAGIC)?;
    let mut r = Reader { data: &data, pos: 8 };
    let config_text = r.string("config echo")?;
    let epoch = r.u64("epoch")?;
    let opt_step = r.u64("optimizer step")?;
    let rng_seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
    let rng_stream = r.u64("rng stream")?;
    let rng_word_pos = r.u128("rng word position")?;
    let tensors = read_tensor_list(&mut r)?;
    Ok(Checkpoint { config_text, epoch, opt_step, rng_seed, rng_stream, rng_word_pos, tensors })
}

/// Bare tensor container: the checkpoint's tensor section with its own
/// magic. Dataset packs are directories of these plus a manifest.
pub fn save_tensor_file(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_FILE_MAGIC);
    push_u64(&mut out, tensors.len() as u64);
    for t in tensors {
        push_tensor(&mut out, t);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_tensor_file(path: &Path) -> Result<Vec<NamedTensor>> {
    let data = fs::read(path)?;
    check_magic(&data, TENSOR_FILE_MAGIC)?;
    let mut r = Reader { data: &data, pos: 8 };
    read_tensor_list(&mut r)
}
