//! Parameter checkpoint file.
//!
//! ```text
//! VDPCR-CKPT-1
//! meta <one line of JSON>
//! params <count>
//! <name>\t<dim,dim,...>\t<byte offset into data section>
//! ...
//! end
//! <little-endian f64 values, parameters in manifest order>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &str = "VDPCR-CKPT-1";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode_checkpoint<S: Scalar>(params: &ParamStore<S>, meta: &str) -> Result<Vec<u8>> {
    if meta.contains('\n') {
        return Err(bad("metadata must be a single line"));
    }
    let mut header = format!("{CHECKPOINT_MAGIC}\nmeta {meta}\nparams {}\n", params.len());
    let mut offset = 0usize;
    for p in params.iter() {
        if p.name.contains(['\t', '\n']) {
            return Err(bad(format!("parameter name {:?} is not writable", p.name)));
        }
        let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("{}\t{}\t{}\n", p.name, dims.join(","), offset));
        offset += p.value.len() * 8;
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.reserve(offset);
    for p in params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a checkpoint into `(metadata line, parameters)`.
pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<(String, ParamStore<S>)> {
    let mut pos = 0usize;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        pos += nl + 1;
        std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8"))
    };
    if next_line()? != CHECKPOINT_MAGIC {
        return Err(bad("missing VDPCR-CKPT-1 header"));
    }
    let meta = next_line()?
        .strip_prefix("meta ")
        .ok_or_else(|| bad("missing meta line"))?
        .to_string();
    let count: usize = next_line()?
        .strip_prefix("params ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| bad("missing params line"))?;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line()?;
        let mut fields = line.split('\t');
        let (Some(name), Some(dims), Some(off), None) =
            (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(bad(format!("malformed manifest line {line:?}")));
        };
        let shape = dims
            .split(',')
            .filter(|d| !d.is_empty())
            .map(|d| {
                d.parse::<usize>()
                    .map_err(|_| bad(format!("bad dimension in {line:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let offset: usize = off
            .parse()
            .map_err(|_| bad(format!("bad offset in {line:?}")))?;
        manifest.push((name.to_string(), shape, offset));
    }
    if next_line()? != "end" {
        return Err(bad("manifest not terminated by 'end'"));
    }
    let data = &bytes[pos..];
    let mut store = ParamStore::new();
    for (name, shape, offset) in manifest {
        let n: usize = shape.iter().product();
        let end = offset + n * 8;
        let raw = data
            .get(offset..end)
            .ok_or_else(|| bad(format!("data for {name} out of bounds")))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        store.insert(name, Tensor::new(shape, values)?)?;
    }
    Ok((meta, store))
}

/// Writes via a temporary sibling file and rename.
pub fn save_checkpoint<S: Scalar>(path: &Path, params: &ParamStore<S>, meta: &str) -> Result<()> {
    let bytes = encode_checkpoint(params, meta)?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(String, ParamStore<S>)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
