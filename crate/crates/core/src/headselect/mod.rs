//! Measures how strongly each attention head links mentions of the same
//! entity and picks the heads whose within-cluster attention exceeds their
//! across-cluster attention by more than a threshold.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{assemble_dialog, AssembledInput, AssemblyConfig, Dialog, Span, Vocabulary};
use crate::encoder::{AttentionRecord, Encoder};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::scalar::Scalar;

/// Inclusive absolute position range of a mention.
pub type Positions = (usize, usize);

/// Mean attention from the tokens of `mi` to the tokens of `mj`.
pub fn mention_attention<S: Scalar>(att: &Tensor<S>, mi: Positions, mj: Positions) -> Result<f64> {
    let t = att.rows();
    for &(a, b) in [&mi, &mj] {
        if a > b {
            return Err(Error::Invalid(format!("empty mention span {a}..={b}")));
        }
        if b >= t || att.cols() != t {
            return Err(Error::Invalid(format!(
                "mention span {a}..={b} outside a {t}-token map"
            )));
        }
    }
    let mut total = 0.0;
    for i in mi.0..=mi.1 {
        let row = att.row(i);
        for &v in &row[mj.0..=mj.1] {
            total += v.to_f64_lossy();
        }
    }
    Ok(total / ((mi.1 - mi.0 + 1) * (mj.1 - mj.0 + 1)) as f64)
}

/// Within-cluster (`a_w`) and across-cluster (`a_a`) mention attention of
/// one map. Within-cluster pairs are ordered; each unordered pair of
/// clusters contributes attention in both directions. `None` with fewer than
/// two clusters.
pub fn cluster_stats<S: Scalar>(
    att: &Tensor<S>,
    clusters: &[Vec<Positions>],
) -> Result<Option<(f64, f64)>> {
    let nc = clusters.len();
    if nc < 2 {
        return Ok(None);
    }
    let mut within = 0.0;
    for c in clusters {
        for (i, &mi) in c.iter().enumerate() {
            for (j, &mj) in c.iter().enumerate() {
                if i != j {
                    within += mention_attention(att, mi, mj)?;
                }
            }
        }
    }
    let mut across = 0.0;
    for l in 0..nc {
        for l2 in l + 1..nc {
            for &mi in &clusters[l] {
                for &mj in &clusters[l2] {
                    across += mention_attention(att, mi, mj)? + mention_attention(att, mj, mi)?;
                }
            }
        }
    }
    let a_w = within / nc as f64;
    let a_a = 2.0 * across / (nc * (nc - 1)) as f64;
    Ok(Some((a_w, a_a)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadMargin {
    pub layer: usize,
    pub head: usize,
    pub a_w: f64,
    pub a_a: f64,
    pub margin: f64,
    pub n_dialogs: usize,
}

/// Positions of each cluster's mentions that are present in `mentions`.
pub fn cluster_positions(
    clusters: &[Vec<Span>],
    mentions: &HashMap<Span, Positions>,
) -> Vec<Vec<Positions>> {
    clusters
        .iter()
        .map(|c| {
            c.iter()
                .filter_map(|s| mentions.get(s).copied())
                .collect::<Vec<_>>()
        })
        .filter(|c| !c.is_empty())
        .collect()
}

/// `(a_w, a_a)` per layer and head.
pub type HeadStats = Vec<Vec<(f64, f64)>>;

/// Per-head `(a_w, a_a)` of one dialog, or `None` when it has fewer than two
/// clusters. `maps[layer][head]`.
pub fn dialog_stats<S: Scalar>(
    maps: &[Vec<Tensor<S>>],
    clusters: &[Vec<Positions>],
) -> Result<Option<HeadStats>> {
    if clusters.len() < 2 {
        return Ok(None);
    }
    maps.iter()
        .map(|layer| {
            layer
                .iter()
                .map(|m| cluster_stats(m, clusters).map(|s| s.expect("two or more clusters")))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Averages per-dialog statistics in the given order.
pub fn average_margins(per_dialog: &[Vec<Vec<(f64, f64)>>]) -> Result<Vec<HeadMargin>> {
    let first = per_dialog
        .first()
        .ok_or_else(|| Error::Invalid("no dialog with more than one coreference cluster".into()))?;
    let n = per_dialog.len();
    let mut out = Vec::new();
    for (l, layer) in first.iter().enumerate() {
        for k in 0..layer.len() {
            let (mut w, mut a) = (0.0, 0.0);
            for d in per_dialog {
                w += d[l][k].0;
                a += d[l][k].1;
            }
            let (a_w, a_a) = (w / n as f64, a / n as f64);
            out.push(HeadMargin {
                layer: l,
                head: k,
                a_w,
                a_a,
                margin: a_w - a_a,
                n_dialogs: n,
            });
        }
    }
    Ok(out)
}

fn encode_maps<S: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<S>,
    input: &AssembledInput,
) -> Result<Vec<Vec<Tensor<S>>>> {
    let mut g = Graph::new();
    let out = encoder.encode_assembled(&mut g, store, input)?;
    Ok(out.attention_maps(&g))
}

/// Head margins averaged over every dialog with more than one cluster, each
/// encoded as a whole (caption and all rounds, no candidate appended).
pub fn head_margins<S: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<S>,
    dialogs: &[Dialog],
    vocab: &Vocabulary,
    cfg: &AssemblyConfig,
) -> Result<Vec<HeadMargin>> {
    let per_dialog: Vec<Option<HeadStats>> = dialogs
        .par_iter()
        .map(|d| {
            if d.clusters.len() < 2 {
                return Ok(None);
            }
            let input = assemble_dialog(d, vocab, cfg)?;
            let maps = encode_maps(encoder, store, &input)?;
            dialog_stats(&maps, &cluster_positions(&d.clusters, &input.mentions))
        })
        .collect::<Result<Vec<_>>>()?;
    let kept: Vec<_> = per_dialog.into_iter().flatten().collect();
    average_margins(&kept)
}

/// Margins recomputed from attention dumps. Each record's mention sidecar
/// supplies positions; clusters come from the dialog with the same id.
pub fn margins_from_records(
    records: &[AttentionRecord],
    dialogs: &[Dialog],
) -> Result<Vec<HeadMargin>> {
    let by_id: HashMap<&str, &Dialog> = dialogs.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut per_dialog = Vec::new();
    for r in records {
        let d = by_id.get(r.dialog_id.as_str()).ok_or_else(|| {
            Error::Dump(format!("no dialog {} for attention record", r.dialog_id))
        })?;
        let mentions: HashMap<Span, Positions> = r.mentions.iter().map(|(s, p)| (*s, *p)).collect();
        let maps: Vec<Vec<Tensor<f64>>> = (0..r.layers)
            .map(|l| (0..r.heads).map(|k| r.map(l, k).clone()).collect())
            .collect();
        if let Some(s) = dialog_stats(&maps, &cluster_positions(&d.clusters, &mentions))? {
            per_dialog.push(s);
        }
    }
    average_margins(&per_dialog)
}

/// Attention records (with mention positions) for dialogs with more than
/// one cluster, as consumed by [`margins_from_records`].
pub fn attention_records<S: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<S>,
    dialogs: &[Dialog],
    vocab: &Vocabulary,
    cfg: &AssemblyConfig,
) -> Result<Vec<AttentionRecord>> {
    dialogs
        .par_iter()
        .filter(|d| d.clusters.len() >= 2)
        .map(|d| {
            let input = assemble_dialog(d, vocab, cfg)?;
            let maps = encode_maps(encoder, store, &input)?;
            Ok(AttentionRecord {
                dialog_id: d.id.clone(),
                layers: maps.len(),
                heads: maps.first().map_or(0, Vec::len),
                len: input.len(),
                maps: maps.into_iter().flatten().map(|m| m.cast()).collect(),
                mentions: input.mentions.iter().map(|(s, p)| (*s, *p)).collect(),
            })
        })
        .collect()
}

/// Heads with margin above `a_thres`, best first (ties by layer, then head).
/// Falls back to the single best head when none clears the threshold.
pub fn select_heads(margins: &[HeadMargin], a_thres: f64) -> Vec<(usize, usize)> {
    let mut sorted: Vec<&HeadMargin> = margins.iter().collect();
    sorted.sort_by(|a, b| {
        b.margin
            .partial_cmp(&a.margin)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((a.layer, a.head).cmp(&(b.layer, b.head)))
    });
    let picked: Vec<(usize, usize)> = sorted
        .iter()
        .filter(|m| m.margin > a_thres)
        .map(|m| (m.layer, m.head))
        .collect();
    if picked.is_empty() {
        sorted
            .first()
            .map(|m| vec![(m.layer, m.head)])
            .unwrap_or_default()
    } else {
        picked
    }
}

/// Tab-separated margin table.
pub fn margin_report_tsv(margins: &[HeadMargin]) -> String {
    let mut out = String::from("layer\thead\ta_w\ta_a\tmargin\tn_dialogs\n");
    for m in margins {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            m.layer, m.head, m.a_w, m.a_a, m.margin, m.n_dialogs
        );
    }
    out
}
