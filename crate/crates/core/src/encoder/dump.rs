//! Attention dumps for offline probing.
//!
//! Binary file: the line `VDPCR-ATT-1`, then per record a JSON header line
//! `{"dialog_id":..,"layers":L,"heads":K,"len":T}` followed by `L*K*T*T`
//! little-endian `f64` values, one row-major `[T x T]` matrix per (layer,
//! head) in layer-major order.
//!
//! Mention sidecar: one tab-separated line per mention,
//! `dialog_id round start end abs_start abs_end`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::Span;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const DUMP_MAGIC: &str = "VDPCR-ATT-1";

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub dialog_id: String,
    pub layers: usize,
    pub heads: usize,
    pub len: usize,
    /// `maps[layer * heads + head]`, each `[len x len]`.
    pub maps: Vec<Tensor<f64>>,
    /// Absolute inclusive positions of each mention in the encoded sequence.
    pub mentions: BTreeMap<Span, (usize, usize)>,
}

impl AttentionRecord {
    pub fn map(&self, layer: usize, head: usize) -> &Tensor<f64> {
        &self.maps[layer * self.heads + head]
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    dialog_id: String,
    layers: usize,
    heads: usize,
    len: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Dump(msg.into())
}

pub fn write_attention_dump<W: Write>(mut w: W, records: &[AttentionRecord]) -> Result<()> {
    writeln!(w, "{DUMP_MAGIC}")?;
    for r in records {
        if r.maps.len() != r.layers * r.heads || r.maps.iter().any(|m| m.shape() != [r.len, r.len])
        {
            return Err(bad(format!("record {} has inconsistent maps", r.dialog_id)));
        }
        let header = Header {
            dialog_id: r.dialog_id.clone(),
            layers: r.layers,
            heads: r.heads,
            len: r.len,
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for m in &r.maps {
            for v in m.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dump; mention maps are left empty (see [`read_mention_sidecar`]).
pub fn read_attention_dump<R: BufRead>(mut r: R) -> Result<Vec<AttentionRecord>> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != DUMP_MAGIC {
        return Err(bad("missing header"));
    }
    let mut out = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            break;
        }
        let h: Header = serde_json::from_str(line.trim_end())
            .map_err(|e| bad(format!("record header: {e}")))?;
        let n = h.len * h.len;
        let mut maps = Vec::with_capacity(h.layers * h.heads);
        let mut buf = vec![0u8; n * 8];
        for _ in 0..h.layers * h.heads {
            r.read_exact(&mut buf)
                .map_err(|_| bad(format!("record {} is truncated", h.dialog_id)))?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            maps.push(Tensor::new(vec![h.len, h.len], data)?);
        }
        out.push(AttentionRecord {
            dialog_id: h.dialog_id,
            layers: h.layers,
            heads: h.heads,
            len: h.len,
            maps,
            mentions: BTreeMap::new(),
        });
    }
    Ok(out)
}

pub fn write_mention_sidecar<W: Write>(mut w: W, records: &[AttentionRecord]) -> Result<()> {
    for r in records {
        if r.dialog_id.contains(['\t', '\n']) {
            return Err(bad(format!(
                "dialog id {:?} cannot be written to the sidecar",
                r.dialog_id
            )));
        }
        for (s, (a, b)) in &r.mentions {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.dialog_id, s.round, s.start, s.end, a, b
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Attaches the sidecar's mention positions to the matching records.
pub fn read_mention_sidecar<R: BufRead>(r: R, records: &mut [AttentionRecord]) -> Result<()> {
    let index: BTreeMap<String, usize> = records
        .iter()
        .enumerate()
        .map(|(i, rec)| (rec.dialog_id.clone(), i))
        .collect();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse = |i: usize| -> Result<i64> {
            fields
                .get(i)
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| bad(format!("sidecar line {}: bad field {i}", lineno + 1)))
        };
        if fields.len() != 6 {
            return Err(bad(format!(
                "sidecar line {}: expected 6 fields",
                lineno + 1
            )));
        }
        let rec = index.get(fields[0]).ok_or_else(|| {
            bad(format!(
                "sidecar line {}: unknown dialog {}",
                lineno + 1,
                fields[0]
            ))
        })?;
        let span = Span::new(parse(1)? as i32, parse(2)? as usize, parse(3)? as usize);
        let (a, b) = (parse(4)? as usize, parse(5)? as usize);
        let rec = &mut records[*rec];
        if a > b || b >= rec.len {
            return Err(bad(format!(
                "sidecar line {}: position out of range",
                lineno + 1
            )));
        }
        rec.mentions.insert(span, (a, b));
    }
    Ok(())
}
