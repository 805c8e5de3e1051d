//! Binary checkpoint format.
//!
//! ```text
//! b"UDRP" | u32 version | u32 len, config text | u32 tensor count
//! per tensor: u32 len, name | u32 rank | u64 dims | f64 payload
//! ```
//! All integers and floats are little-endian. The config block is one
//! `key=value` per line.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"UDRP";
const VERSION: u32 = 1;

fn config_text(c: &ModelConfig) -> String {
    format!(
        "enc_layers={}\ndec_layers={}\nd_model={}\nd_ff={}\nheads={}\nsrc_vocab={}\ntgt_vocab={}\n\
         max_len={}\nresidual_dropout={:?}\nshare_embeddings={}\nln_eps={:?}\nnum_classes={}\n",
        c.enc_layers,
        c.dec_layers,
        c.d_model,
        c.d_ff,
        c.heads,
        c.src_vocab,
        c.tgt_vocab,
        c.max_len,
        c.residual_dropout,
        c.share_embeddings,
        c.ln_eps,
        c.num_classes
    )
}

fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut c = ModelConfig::default();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad config line `{line}`")))?;
        let bad = |_| Error::Checkpoint(format!("bad value for `{k}`: `{v}`"));
        match k {
            "enc_layers" => c.enc_layers = v.parse().map_err(bad)?,
            "dec_layers" => c.dec_layers = v.parse().map_err(bad)?,
            "d_model" => c.d_model = v.parse().map_err(bad)?,
            "d_ff" => c.d_ff = v.parse().map_err(bad)?,
            "heads" => c.heads = v.parse().map_err(bad)?,
            "src_vocab" => c.src_vocab = v.parse().map_err(bad)?,
            "tgt_vocab" => c.tgt_vocab = v.parse().map_err(bad)?,
            "max_len" => c.max_len = v.parse().map_err(bad)?,
            "num_classes" => c.num_classes = v.parse().map_err(bad)?,
            "residual_dropout" => {
                c.residual_dropout = v
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad value for `{k}`: `{v}`")))?
            }
            "ln_eps" => {
                c.ln_eps = v
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad value for `{k}`: `{v}`")))?
            }
            "share_embeddings" => {
                c.share_embeddings = v
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad value for `{k}`: `{v}`")))?
            }
            other => return Err(Error::Checkpoint(format!("unknown config key `{other}`"))),
        }
    }
    Ok(c)
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + model.params.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = config_text(model.config());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.names.iter().zip(&model.params.tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
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

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config = parse_config(&r.string("config")?)?;
    let count = r.u32("tensor count")? as usize;
    let mut named = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dim")? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(n.saturating_mul(8), "payload")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Model::from_params(config, named)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    f.sync_all()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}
