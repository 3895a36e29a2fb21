//! Binary parameter checkpoints.
//!
//! Layout (little-endian): `b"LPHOM1"`, `u32` config length, UTF-8 config
//! snapshot, `f32` latent scale, `u32` blob count, then per blob `u32` name
//! length, name, `u32` rank, `u32` dims, `f32` data; a trailing CRC-32 of
//! everything before it.

use std::path::Path;

use lphom_tensor::{ParamStore, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"LPHOM1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub latent_scale: f32,
    pub blobs: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>, config: impl Into<String>, latent_scale: f32) -> Self {
        let blobs = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        Self { config: config.into(), latent_scale, blobs }
    }

    /// Overwrite every parameter of `store` by name; names and shapes must
    /// match exactly.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let blob = self
                .blobs
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::CheckpointShape { name: name.clone(), expected: store.get(id).shape().to_vec(), found: vec![] })?;
            if blob.1.shape() != store.get(id).shape() {
                return Err(Error::CheckpointShape { name, expected: store.get(id).shape().to_vec(), found: blob.1.shape().to_vec() });
            }
            store.set(id, blob.1.clone())?;
        }
        if let Some((name, t)) = self.blobs.iter().find(|(n, _)| store.find(n).is_none()) {
            return Err(Error::CheckpointShape { name: name.clone(), expected: vec![], found: t.shape().to_vec() });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.config.len());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.latent_scale.to_le_bytes());
        put_u32(&mut out, self.blobs.len());
        for (name, t) in &self.blobs {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.ndim());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic { path: path.to_path_buf() });
        }
        let checksum = || Error::Checksum { path: path.to_path_buf() };
        let body_len = bytes.len().checked_sub(4).filter(|&n| n >= MAGIC.len()).ok_or_else(checksum)?;
        let (body, tail) = bytes.split_at(body_len);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(checksum());
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let config = r.string()?;
        let latent_scale = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        let count = r.u32()?;
        let mut blobs = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().product::<usize>();
            let data = r.take(len * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            blobs.push((name, Tensor::from_vec(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Parse(format!("{}: {} trailing bytes in checkpoint", path.display(), body.len() - r.pos)));
        }
        Ok(Self { config, latent_scale, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field exceeds u32").to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Parse(format!("checkpoint field of {n} bytes overruns the file")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Parse(format!("checkpoint string: {e}")))
    }
}
