//! Versioned binary checkpoint container.
//!
//! ```text
//! magic "BTSDSNCK" | u32 version | u32 len, graph config JSON
//! | u32 len, graph hash | u64 seed | u32 n, n × f64 alpha
//! | u32 count, count × { u32 len, name | u8 learnable | u32 ndim, ndim × u64 | f64 data }
//! | 32-byte SHA-256 of everything above
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::graph::{GraphConfig, ModelGraph};
use super::params::{ParamTensor, Params};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BTSDSNCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: GraphConfig,
    pub params: Params,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint(config: &GraphConfig, params: &Params) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_str(&mut buf, &serde_json::to_string(config).expect("config serializes"));
    put_str(&mut buf, &params.graph_hash);
    buf.extend_from_slice(&params.seed.to_le_bytes());
    put_u32(&mut buf, params.alpha.len() as u32);
    for a in &params.alpha {
        buf.extend_from_slice(&a.to_le_bytes());
    }
    put_u32(&mut buf, params.tensors.len() as u32);
    for (name, t) in &params.tensors {
        put_str(&mut buf, name);
        buf.push(t.learnable as u8);
        put_u32(&mut buf, t.shape.len() as u32);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch, file is corrupted".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let json = r.string("graph config")?;
    let config: GraphConfig =
        serde_json::from_str(&json).map_err(|e| Error::Checkpoint(format!("graph config: {e}")))?;
    let graph_hash = r.string("graph hash")?;
    if graph_hash != config.hash() {
        return Err(Error::Checkpoint("embedded hash does not match embedded config".into()));
    }
    let seed = r.u64("seed")?;
    let n_alpha = r.u32("alpha count")? as usize;
    let alpha = (0..n_alpha).map(|_| r.f64("alpha")).collect::<Result<Vec<_>>>()?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let learnable = r.take(1, "learnable flag")?[0] != 0;
        let ndim = r.u32("rank")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n > body.len() / 8 {
            return Err(Error::Checkpoint(format!("{name}: implausible shape {shape:?}")));
        }
        let data = (0..n).map(|_| r.f64(&name)).collect::<Result<Vec<_>>>()?;
        tensors.insert(name, ParamTensor { shape, data, learnable });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Checkpoint {
        config,
        params: Params {
            tensors,
            alpha,
            seed,
            graph_hash,
        },
    })
}

pub fn save_checkpoint(config: &GraphConfig, params: &Params, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(config, params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads parameters for `graph`, refusing checkpoints of another topology.
pub fn load_checkpoint_for(path: &Path, graph: &ModelGraph) -> Result<Params> {
    let ck = load_checkpoint(path)?;
    if ck.params.graph_hash != graph.config.hash() {
        return Err(Error::Checkpoint(format!(
            "checkpoint was saved for graph {} ({}), cannot load into {} ({})",
            ck.params.graph_hash,
            ck.config.variant().map(|v| v.name()).unwrap_or("custom"),
            graph.config.hash(),
            graph.config.variant().map(|v| v.name()).unwrap_or("custom"),
        )));
    }
    ck.params.check_against(graph)?;
    Ok(ck.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_graph, init_params, Backbone, Variant};

    fn setup(v: Variant) -> (ModelGraph, Params) {
        let g = build_graph(&GraphConfig::for_variant(v, Backbone::Vgg).with_widths([2, 4, 8, 16])).unwrap();
        let p = init_params(&g, 11, None).unwrap();
        (g, p)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (g, p) = setup(Variant::BtsDsn);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&g.config, &p, &path).unwrap();
        assert_eq!(load_checkpoint_for(&path, &g).unwrap(), p);
        assert_eq!(load_checkpoint(&path).unwrap().config, g.config);
    }

    #[test]
    fn mismatched_variant_refused() {
        let (g, p) = setup(Variant::BtsDsn);
        let (other, _) = setup(Variant::Dsn);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&g.config, &p, &path).unwrap();
        let err = load_checkpoint_for(&path, &other).unwrap_err();
        assert!(err.to_string().contains("cannot load"), "{err}");
    }

    #[test]
    fn corruption_detected() {
        let (g, p) = setup(Variant::Dsn);
        let mut bytes = encode_checkpoint(&g.config, &p);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Checkpoint(_))));
        assert!(matches!(decode_checkpoint(&bytes[..100]), Err(Error::Checkpoint(_))));
        assert!(matches!(decode_checkpoint(b"not a checkpoint at all, definitely not"), Err(Error::Checkpoint(_))));
    }
}
