//! Single-stream multi-modal transformer.
//!
//! The visual tokens and the dialog text are embedded into one sequence and
//! run through a stack of post-norm transformer layers. Every head's output
//! and attention map is kept so that callers can probe or reuse them.

mod dump;

use serde::{Deserialize, Serialize};

use crate::corpus::{AssembledInput, N_SEGMENTS, PAD};
use crate::error::{Error, Result};
use crate::numerics::{Axis, Graph, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

pub use dump::{
    read_attention_dump, read_mention_sidecar, write_attention_dump, write_mention_sidecar,
    AttentionRecord,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub visual_dim: usize,
}

impl EncoderConfig {
    /// Small default geometry for the given vocabulary and feature width.
    pub fn small(vocab_size: usize, visual_dim: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            model_dim: 32,
            ff_dim: 64,
            max_positions: 256,
            vocab_size,
            visual_dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_heads", self.n_heads),
            ("model_dim", self.model_dim),
            ("ff_dim", self.ff_dim),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
            ("visual_dim", self.visual_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Raw encoder input. Positions `1..=visual.len()` are visual tokens; every
/// other position is looked up in the token table.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    pub visual: Vec<Vec<f64>>,
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `true` for every non-PAD position, or `None` when nothing is padded.
    pub fn key_mask(&self) -> Option<Vec<bool>> {
        self.tokens
            .contains(&PAD)
            .then(|| self.tokens.iter().map(|&t| t != PAD).collect())
    }
}

impl From<&AssembledInput> for EncoderInput {
    fn from(a: &AssembledInput) -> Self {
        Self {
            tokens: a.tokens.clone(),
            segments: a.segments.iter().map(|&s| s as usize).collect(),
            visual: a.visual.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct LayerParams {
    q_w: ParamId,
    q_b: ParamId,
    k_w: ParamId,
    k_b: ParamId,
    v_w: ParamId,
    v_b: ParamId,
    o_w: ParamId,
    o_b: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Handles to the encoder's parameters inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    tok: ParamId,
    pos: ParamId,
    seg: ParamId,
    vis_w: ParamId,
    vis_b: ParamId,
    layers: Vec<LayerParams>,
}

/// Per-head projections of one attention head, each `[d x d/K]` or `[1 x d/K]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadProjection {
    pub q_w: Var,
    pub q_b: Var,
    pub k_w: Var,
    pub k_b: Var,
    pub v_w: Var,
    pub v_b: Var,
}

/// Result of one transformer layer.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub output: Var,
    pub heads: Vec<Var>,
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub embeddings: Var,
    /// `[T x d]` output of the last layer.
    pub final_reps: Var,
    /// `head_outputs[layer][head]`, each `[T x d/K]`.
    pub head_outputs: Vec<Vec<Var>>,
    /// `attention[layer][head]`, each `[T x T]`.
    pub attention: Vec<Vec<Var>>,
}

impl EncoderOutput {
    /// Copies every attention map out of the graph, ordered by layer then head.
    pub fn attention_maps<S: Scalar>(&self, g: &Graph<S>) -> Vec<Vec<Tensor<S>>> {
        self.attention
            .iter()
            .map(|heads| heads.iter().map(|&a| g.value(a).clone()).collect())
            .collect()
    }
}

fn layer_name(l: usize, part: &str) -> String {
    format!("encoder.layer{l}.{part}")
}

impl Encoder {
    /// Registers freshly initialized encoder parameters in `store`.
    pub fn init<S: Scalar>(
        config: EncoderConfig,
        store: &mut ParamStore<S>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.model_dim, config.ff_dim);
        let tok = store.glorot("encoder.token_embedding", config.vocab_size, d, seed)?;
        let pos = store.glorot("encoder.position_embedding", config.max_positions, d, seed)?;
        let seg = store.glorot("encoder.segment_embedding", N_SEGMENTS, d, seed)?;
        let vis_w = store.glorot("encoder.visual.weight", config.visual_dim, d, seed)?;
        let vis_b = store.zeros("encoder.visual.bias", &[1, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut lin =
                |part: &str, fan_in: usize, fan_out: usize| -> Result<(ParamId, ParamId)> {
                    let w = store.glorot(
                        &layer_name(l, &format!("{part}.weight")),
                        fan_in,
                        fan_out,
                        seed,
                    )?;
                    let b = store.zeros(&layer_name(l, &format!("{part}.bias")), &[1, fan_out])?;
                    Ok((w, b))
                };
            let (q_w, q_b) = lin("query", d, d)?;
            let (k_w, k_b) = lin("key", d, d)?;
            let (v_w, v_b) = lin("value", d, d)?;
            let (o_w, o_b) = lin("output", d, d)?;
            let (ff1_w, ff1_b) = lin("ff1", d, f)?;
            let (ff2_w, ff2_b) = lin("ff2", f, d)?;
            let ln1_g = store.ones(&layer_name(l, "ln1.gain"), &[d])?;
            let ln1_b = store.zeros(&layer_name(l, "ln1.bias"), &[d])?;
            let ln2_g = store.ones(&layer_name(l, "ln2.gain"), &[d])?;
            let ln2_b = store.zeros(&layer_name(l, "ln2.bias"), &[d])?;
            layers.push(LayerParams {
                q_w,
                q_b,
                k_w,
                k_b,
                v_w,
                v_b,
                o_w,
                o_b,
                ln1_g,
                ln1_b,
                ff1_w,
                ff1_b,
                ff2_w,
                ff2_b,
                ln2_g,
                ln2_b,
            });
        }
        Ok(Self {
            config,
            tok,
            pos,
            seg,
            vis_w,
            vis_b,
            layers,
        })
    }

    /// Looks up existing encoder parameters (e.g. after loading a checkpoint)
    /// and checks their shapes against `config`.
    pub fn bind<S: Scalar>(config: EncoderConfig, store: &ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.model_dim, config.ff_dim);
        let get = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if store.get(id).value.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    store.get(id).value.shape()
                )));
            }
            Ok(id)
        };
        let layers = (0..config.n_layers)
            .map(|l| {
                let n = |part: &str| layer_name(l, part);
                Ok(LayerParams {
                    q_w: get(&n("query.weight"), &[d, d])?,
                    q_b: get(&n("query.bias"), &[1, d])?,
                    k_w: get(&n("key.weight"), &[d, d])?,
                    k_b: get(&n("key.bias"), &[1, d])?,
                    v_w: get(&n("value.weight"), &[d, d])?,
                    v_b: get(&n("value.bias"), &[1, d])?,
                    o_w: get(&n("output.weight"), &[d, d])?,
                    o_b: get(&n("output.bias"), &[1, d])?,
                    ln1_g: get(&n("ln1.gain"), &[d])?,
                    ln1_b: get(&n("ln1.bias"), &[d])?,
                    ff1_w: get(&n("ff1.weight"), &[d, f])?,
                    ff1_b: get(&n("ff1.bias"), &[1, f])?,
                    ff2_w: get(&n("ff2.weight"), &[f, d])?,
                    ff2_b: get(&n("ff2.bias"), &[1, d])?,
                    ln2_g: get(&n("ln2.gain"), &[d])?,
                    ln2_b: get(&n("ln2.bias"), &[d])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            tok: get("encoder.token_embedding", &[config.vocab_size, d])?,
            pos: get("encoder.position_embedding", &[config.max_positions, d])?,
            seg: get("encoder.segment_embedding", &[N_SEGMENTS, d])?,
            vis_w: get("encoder.visual.weight", &[config.visual_dim, d])?,
            vis_b: get("encoder.visual.bias", &[1, d])?,
            layers,
        })
    }

    /// Token (or projected visual feature) + position + segment embedding, `[T x d]`.
    pub fn embed<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        input: &EncoderInput,
    ) -> Result<Var> {
        let t = input.len();
        let m = input.visual.len();
        if t == 0 {
            return Err(Error::Invalid("cannot encode an empty sequence".into()));
        }
        if t > self.config.max_positions {
            return Err(Error::SequenceTooLong {
                len: t,
                max: self.config.max_positions,
            });
        }
        if input.segments.len() != t {
            return Err(Error::Shape {
                op: "embed",
                lhs: vec![t],
                rhs: vec![input.segments.len()],
            });
        }
        if m > 0 && m + 1 > t {
            return Err(Error::Invalid(format!(
                "{m} visual tokens do not fit in {t} positions"
            )));
        }
        if let Some(&bad) = input
            .tokens
            .iter()
            .find(|&&id| id >= self.config.vocab_size)
        {
            return Err(Error::Invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if let Some(&bad) = input.segments.iter().find(|&&s| s >= N_SEGMENTS) {
            return Err(Error::Invalid(format!("segment id {bad} out of range")));
        }
        let tok = g.param(store, self.tok);
        let base = if m == 0 {
            g.gather(tok, &input.tokens)?
        } else {
            let dv = self.config.visual_dim;
            if input.visual.iter().any(|v| v.len() != dv) {
                return Err(Error::Shape {
                    op: "embed",
                    lhs: vec![m, dv],
                    rhs: input.visual.iter().map(Vec::len).collect(),
                });
            }
            let feats = input.visual.iter().flatten().map(|&v| S::of(v)).collect();
            let feats = g.constant(Tensor::new(vec![m, dv], feats)?)?;
            let vis_w = g.param(store, self.vis_w);
            let vis_b = g.param(store, self.vis_b);
            let vis = g.matmul(feats, vis_w)?;
            let vis = g.add_row(vis, vis_b)?;
            let head = g.gather(tok, &input.tokens[..1])?;
            let tail = g.gather(tok, &input.tokens[m + 1..])?;
            g.concat(&[head, vis, tail], Axis::Rows)?
        };
        let pos = g.param(store, self.pos);
        let positions: Vec<usize> = (0..t).collect();
        let pos = g.gather(pos, &positions)?;
        let seg = g.param(store, self.seg);
        let seg = g.gather(seg, &input.segments)?;
        let x = g.add(base, pos)?;
        g.add(x, seg)
    }

    /// Projections of head `k` in layer `l`, sliced out of the layer's full
    /// query/key/value matrices.
    fn head_projection<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        full: [Var; 6],
        k: usize,
    ) -> Result<HeadProjection> {
        let dh = self.config.head_dim();
        let mut cut = |v: Var| g.slice_cols(v, k * dh, dh);
        Ok(HeadProjection {
            q_w: cut(full[0])?,
            q_b: cut(full[1])?,
            k_w: cut(full[2])?,
            k_b: cut(full[3])?,
            v_w: cut(full[4])?,
            v_b: cut(full[5])?,
        })
    }

    /// One post-norm transformer layer over `x` (`[T x d]`).
    pub fn transformer_layer<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        l: usize,
        x: Var,
        keep: Option<&[bool]>,
    ) -> Result<LayerOutput> {
        let p = self
            .layers
            .get(l)
            .ok_or_else(|| Error::Invalid(format!("no layer {l}")))?;
        let full = [p.q_w, p.q_b, p.k_w, p.k_b, p.v_w, p.v_b].map(|id| g.param(store, id));
        let mut heads = Vec::with_capacity(self.config.n_heads);
        let mut attention = Vec::with_capacity(self.config.n_heads);
        for k in 0..self.config.n_heads {
            let proj = self.head_projection(g, full, k)?;
            let (y, att) = attention_head(g, x, &proj, keep)?;
            heads.push(y);
            attention.push(att);
        }
        let fused = g.concat(&heads, Axis::Cols)?;
        let o_w = g.param(store, p.o_w);
        let o_b = g.param(store, p.o_b);
        let x_a = g.matmul(fused, o_w)?;
        let x_a = g.add_row(x_a, o_b)?;
        let res = g.add(x_a, x)?;
        let (ln1_g, ln1_b) = (g.param(store, p.ln1_g), g.param(store, p.ln1_b));
        let x_t = g.layer_norm(res, ln1_g, ln1_b)?;
        let ff1_w = g.param(store, p.ff1_w);
        let ff1_b = g.param(store, p.ff1_b);
        let h = g.matmul(x_t, ff1_w)?;
        let h = g.add_row(h, ff1_b)?;
        let h = g.relu(h)?;
        let ff2_w = g.param(store, p.ff2_w);
        let ff2_b = g.param(store, p.ff2_b);
        let x_f = g.matmul(h, ff2_w)?;
        let x_f = g.add_row(x_f, ff2_b)?;
        let res = g.add(x_f, x_t)?;
        let (ln2_g, ln2_b) = (g.param(store, p.ln2_g), g.param(store, p.ln2_b));
        let output = g.layer_norm(res, ln2_g, ln2_b)?;
        Ok(LayerOutput {
            output,
            heads,
            attention,
        })
    }

    pub fn encode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        input: &EncoderInput,
    ) -> Result<EncoderOutput> {
        let embeddings = self.embed(g, store, input)?;
        let keep = input.key_mask();
        let mut x = embeddings;
        let mut head_outputs = Vec::with_capacity(self.layers.len());
        let mut attention = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let out = self.transformer_layer(g, store, l, x, keep.as_deref())?;
            x = out.output;
            head_outputs.push(out.heads);
            attention.push(out.attention);
        }
        Ok(EncoderOutput {
            embeddings,
            final_reps: x,
            head_outputs,
            attention,
        })
    }

    /// Convenience wrapper for an assembled dialog input.
    pub fn encode_assembled<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        input: &AssembledInput,
    ) -> Result<EncoderOutput> {
        self.encode(g, store, &EncoderInput::from(input))
    }
}

/// Scaled dot-product attention for one head.
///
/// Returns the head output `[T x d/K]` and the attention map `[T x T]`.
/// Columns with `keep[j] == false` get exactly zero attention.
pub fn attention_head<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    proj: &HeadProjection,
    keep: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let q = g.matmul(x, proj.q_w)?;
    let q = g.add_row(q, proj.q_b)?;
    let k = g.matmul(x, proj.k_w)?;
    let k = g.add_row(k, proj.k_b)?;
    let v = g.matmul(x, proj.v_w)?;
    let v = g.add_row(v, proj.v_b)?;
    let dh = g.shape(q)[1];
    let logits = g.matmul_bt(q, k)?;
    let logits = g.scale(logits, S::of(1.0 / (dh as f64).sqrt()))?;
    let att = g.softmax_masked(logits, keep)?;
    let y = g.matmul(att, v)?;
    Ok((y, att))
}
