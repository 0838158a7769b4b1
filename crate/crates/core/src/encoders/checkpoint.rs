//! Checkpoint file: magic `UAPM`, `u16` version, architecture tag, embedding
//! width, input shape, seed, vocabulary size, pretraining hash, then
//! length-prefixed little-endian `f32` parameter blocks (image encoder layers
//! in declared order, then the text encoder).

use std::fs;
use std::path::Path;

use super::{Architecture, ImageEncoder, ModelPair, TextEncoder, EMBED_DIM};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UAPM";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn encode_checkpoint(pair: &ModelPair) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, pair.arch().tag());
    out.extend_from_slice(&(EMBED_DIM as u32).to_le_bytes());
    let s = pair.input_shape();
    for v in [s.h, s.w, s.c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&pair.image.seed.to_le_bytes());
    out.extend_from_slice(&(pair.text.vocab_size as u32).to_le_bytes());
    put_str(&mut out, &pair.config_hash);
    let blocks: Vec<&[f32]> = pair.image.network.params().into_iter().chain(pair.text.params()).collect();
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.len() as u32).to_le_bytes());
        for v in b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(pair: &ModelPair, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(pair))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

pub(crate) fn decode_checkpoint(buf: &[u8]) -> Result<ModelPair> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = c.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let tag = c.string()?;
    let arch: Architecture = tag.parse().map_err(|_| Error::Format(format!("unknown architecture tag {tag:?}")))?;
    let dim = c.u32()? as usize;
    let shape = [c.u32()? as usize, c.u32()? as usize, c.u32()? as usize];
    let s = arch.input_shape();
    if dim != EMBED_DIM || shape != [s.h, s.w, s.c] {
        return Err(Error::Format(format!("checkpoint dims {dim}/{shape:?} do not match architecture {arch}")));
    }
    let seed = c.u64()?;
    let vocab_size = c.u32()? as usize;
    let config_hash = c.string()?;
    let n_blocks = c.u32()? as usize;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let n = c.u32()? as usize;
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::Format("block length overflow".into()))?)?;
        blocks.push(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect::<Vec<f32>>());
    }
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after parameter blocks".into()));
    }

    let mut image = ImageEncoder { arch, seed, network: arch.build(0) };
    let mut text = TextEncoder::sized(vocab_size, 0);
    {
        let mut targets: Vec<&mut Vec<f32>> = image.network.params_mut();
        targets.extend(text.params_mut());
        if targets.len() != blocks.len() {
            return Err(Error::Format(format!("{arch} expects {} parameter blocks, file has {}", targets.len(), blocks.len())));
        }
        for (i, (t, b)) in targets.into_iter().zip(blocks).enumerate() {
            if t.len() != b.len() {
                return Err(Error::Format(format!("{arch} block {i}: expected {} values, file has {}", t.len(), b.len())));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("block {i} holds non-finite parameters")));
            }
            *t = b;
        }
    }
    Ok(ModelPair { image, text, config_hash })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelPair> {
    decode_checkpoint(&fs::read(path)?)
}
