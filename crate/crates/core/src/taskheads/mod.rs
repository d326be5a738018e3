//! Pronoun coreference, next-sentence, masked-token and relevance heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Span, MASK, N_SPECIAL};
use crate::encoder::{EncoderConfig, EncoderInput, EncoderOutput};
use crate::error::{Error, Result};
use crate::numerics::{Axis, Graph, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// Which encoder features feed the coreference scorer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PcrMode {
    /// Output of the last layer.
    #[default]
    LastLayer,
    /// Concatenated outputs of the listed `(layer, head)` pairs.
    SelectedHeads(Vec<(usize, usize)>),
}

impl PcrMode {
    pub fn width(&self, cfg: &EncoderConfig) -> usize {
        match self {
            PcrMode::LastLayer => cfg.model_dim,
            PcrMode::SelectedHeads(h) => h.len() * cfg.head_dim(),
        }
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        if let PcrMode::SelectedHeads(heads) = self {
            if heads.is_empty() {
                return Err(Error::Config("no heads selected".into()));
            }
            if let Some(&(l, k)) = heads
                .iter()
                .find(|&&(l, k)| l >= cfg.n_layers || k >= cfg.n_heads)
            {
                return Err(Error::Config(format!("unknown head ({l}, {k})")));
            }
        }
        Ok(())
    }
}

/// Per-token features for mention pooling, `[T x width]`.
pub fn pcr_representation<S: Scalar>(
    g: &mut Graph<S>,
    out: &EncoderOutput,
    mode: &PcrMode,
) -> Result<Var> {
    match mode {
        PcrMode::LastLayer => Ok(out.final_reps),
        PcrMode::SelectedHeads(heads) => {
            if heads.is_empty() {
                return Err(Error::Config("no heads selected".into()));
            }
            let parts = heads
                .iter()
                .map(|&(l, k)| {
                    out.head_outputs
                        .get(l)
                        .and_then(|layer| layer.get(k))
                        .copied()
                        .ok_or_else(|| Error::Config(format!("unknown head ({l}, {k})")))
                })
                .collect::<Result<Vec<_>>>()?;
            g.concat(&parts, Axis::Cols)
        }
    }
}

/// Mean of the representation rows at `positions`, `[1 x width]`.
pub fn mention_rep<S: Scalar>(g: &mut Graph<S>, reps: Var, positions: &[usize]) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::Invalid("mention has no positions".into()));
    }
    g.mean_pool(reps, positions)
}

fn linear<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    x: Var,
    w: ParamId,
    b: ParamId,
) -> Result<Var> {
    let wv = g.param(store, w);
    let bv = g.param(store, b);
    let y = g.matmul(x, wv)?;
    g.add_row(y, bv)
}

fn lookup<S: Scalar>(store: &ParamStore<S>, name: &str, shape: &[usize]) -> Result<ParamId> {
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
}

/// Two-layer scorer over `[x_p, x_n, x_p * x_n]`.
#[derive(Debug, Clone)]
pub struct PcrHead {
    pub width: usize,
    pub hidden: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl PcrHead {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        width: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            width,
            hidden,
            w1: store.glorot("pcr.ff1.weight", 3 * width, hidden, seed)?,
            b1: store.zeros("pcr.ff1.bias", &[1, hidden])?,
            w2: store.glorot("pcr.ff2.weight", hidden, 1, seed)?,
            b2: store.zeros("pcr.ff2.bias", &[1, 1])?,
        })
    }

    pub fn bind<S: Scalar>(store: &ParamStore<S>, width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            width,
            hidden,
            w1: lookup(store, "pcr.ff1.weight", &[3 * width, hidden])?,
            b1: lookup(store, "pcr.ff1.bias", &[1, hidden])?,
            w2: lookup(store, "pcr.ff2.weight", &[hidden, 1])?,
            b2: lookup(store, "pcr.ff2.bias", &[1, 1])?,
        })
    }

    /// Scores one pronoun `x_p` (`[1 x w]`) against every candidate row of
    /// `x_n` (`[N x w]`), returning `[N x 1]`.
    pub fn score<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x_p: Var,
        x_n: Var,
    ) -> Result<Var> {
        let (wp, wn) = (g.shape(x_p)[1], g.shape(x_n)[1]);
        if wp != self.width || wn != self.width || g.shape(x_p)[0] != 1 {
            return Err(Error::Shape {
                op: "pcr_score",
                lhs: g.shape(x_p).to_vec(),
                rhs: g.shape(x_n).to_vec(),
            });
        }
        let n = g.shape(x_n)[0];
        let xp = g.gather(x_p, &vec![0; n])?;
        let prod = g.mul(xp, x_n)?;
        let pair = g.concat(&[xp, x_n, prod], Axis::Cols)?;
        let h = linear(g, store, pair, self.w1, self.b1)?;
        let h = g.relu(h)?;
        linear(g, store, h, self.w2, self.b2)
    }
}

/// Candidate scores for one pronoun. The null antecedent always scores 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PcrScores {
    pub pronoun: Span,
    pub candidate_scores: Vec<f64>,
}

impl PcrScores {
    pub const NULL_SCORE: f64 = 0.0;
}

/// Indices of candidates scoring above the null antecedent.
pub fn pcr_predict(scores: &PcrScores) -> Vec<usize> {
    scores
        .candidate_scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > PcrScores::NULL_SCORE)
        .map(|(i, _)| i)
        .collect()
}

/// One pronoun's scores (`[N x 1]`, or `None` when it has no candidates)
/// with the indices of its gold antecedents.
#[derive(Debug, Clone)]
pub struct PcrTarget {
    pub scores: Option<Var>,
    pub antecedents: Vec<usize>,
}

/// Negative log-likelihood of the gold antecedents, summed over pronouns.
/// Non-referential pronouns are scored against the null antecedent.
pub fn pcr_loss<S: Scalar>(g: &mut Graph<S>, targets: &[PcrTarget]) -> Result<Var> {
    let null = g.constant(Tensor::zeros(&[1, 1]))?;
    let mut terms = Vec::with_capacity(targets.len());
    for t in targets {
        let all = match t.scores {
            Some(s) => g.concat(&[s, null], Axis::Rows)?,
            None if t.antecedents.is_empty() => null,
            None => {
                return Err(Error::Invalid(
                    "referential pronoun without candidates".into(),
                ))
            }
        };
        let n = g.shape(all)[0] - 1;
        if let Some(&bad) = t.antecedents.iter().find(|&&a| a >= n) {
            return Err(Error::Invalid(format!(
                "antecedent index {bad} out of {n} candidates"
            )));
        }
        let gold: Vec<usize> = if t.antecedents.is_empty() {
            vec![n]
        } else {
            t.antecedents.clone()
        };
        let every: Vec<usize> = (0..=n).collect();
        let denom = g.log_sum_exp(all, &every)?;
        let numer = g.log_sum_exp(all, &gold)?;
        let numer = g.scale(numer, -S::one())?;
        terms.push(g.add(denom, numer)?);
    }
    g.add_all(&terms)
}

/// `FFN_d(x_CLS * x_IMG)`, two logits: fits / does not fit.
#[derive(Debug, Clone)]
pub struct NspHead {
    w: ParamId,
    b: ParamId,
}

impl NspHead {
    pub fn init<S: Scalar>(store: &mut ParamStore<S>, dim: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            w: store.glorot("nsp.weight", dim, 2, seed)?,
            b: store.zeros("nsp.bias", &[1, 2])?,
        })
    }

    pub fn bind<S: Scalar>(store: &ParamStore<S>, dim: usize) -> Result<Self> {
        Ok(Self {
            w: lookup(store, "nsp.weight", &[dim, 2])?,
            b: lookup(store, "nsp.bias", &[1, 2])?,
        })
    }

    /// `[1 x 2]` logits from the final representations.
    pub fn logits<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        reps: Var,
        cls_pos: usize,
        img_pos: usize,
    ) -> Result<Var> {
        let cls = g.slice_rows(reps, cls_pos, 1)?;
        let img = g.slice_rows(reps, img_pos, 1)?;
        let fused = g.mul(cls, img)?;
        linear(g, store, fused, self.w, self.b)
    }
}

/// `(p, p_bar)` as a `[1 x 2]` softmax of the logits.
pub fn nsp_probs<S: Scalar>(g: &mut Graph<S>, logits: Var) -> Result<Var> {
    g.softmax_lastdim(logits)
}

/// Log-odds `log(p / p_bar)` of the answer fitting, `[1 x 1]`. Strictly
/// increasing in `p`, so rankings by it and by `p` agree.
pub fn candidate_score<S: Scalar>(g: &mut Graph<S>, logits: Var) -> Result<Var> {
    let fit = g.slice_cols(logits, 0, 1)?;
    let no = g.slice_cols(logits, 1, 1)?;
    let no = g.scale(no, -S::one())?;
    g.add(fit, no)
}

/// Cross-entropy of `(p, p_bar)` against labels (`true` = correct answer),
/// summed over the batch.
pub fn nsp_loss<S: Scalar>(g: &mut Graph<S>, batch: &[(Var, bool)]) -> Result<Var> {
    let mut terms = Vec::with_capacity(batch.len());
    for &(logits, label) in batch {
        let ls = g.log_softmax_lastdim(logits)?;
        let picked = g.pick_sum(ls, &[(0, if label { 0 } else { 1 })])?;
        terms.push(g.scale(picked, -S::one())?);
    }
    g.add_all(&terms)
}

/// Input with some textual tokens replaced by `[MASK]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedInput {
    pub input: EncoderInput,
    pub positions: Vec<usize>,
    pub originals: Vec<usize>,
}

/// Independently masks every eligible position with probability `rate`.
/// Eligible positions are textual, non-special and not `protected`.
pub fn mask_tokens<R: Rng>(
    input: &EncoderInput,
    rate: f64,
    protected: &[usize],
    rng: &mut R,
) -> MaskedInput {
    let first_text = if input.visual.is_empty() {
        0
    } else {
        input.visual.len() + 1
    };
    let mut out = input.clone();
    let mut positions = Vec::new();
    let mut originals = Vec::new();
    for i in first_text..input.len() {
        let tok = input.tokens[i];
        if tok < N_SPECIAL || protected.contains(&i) {
            continue;
        }
        // one draw per eligible position, independent of the rate
        let u: f64 = rng.gen();
        if u < rate {
            out.tokens[i] = MASK;
            positions.push(i);
            originals.push(tok);
        }
    }
    MaskedInput {
        input: out,
        positions,
        originals,
    }
}

/// `FFN_m`: one linear layer from the model dimension to vocabulary logits.
#[derive(Debug, Clone)]
pub struct MtmHead {
    w: ParamId,
    b: ParamId,
}

impl MtmHead {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        dim: usize,
        vocab: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            w: store.glorot("mtm.weight", dim, vocab, seed)?,
            b: store.zeros("mtm.bias", &[1, vocab])?,
        })
    }

    pub fn bind<S: Scalar>(store: &ParamStore<S>, dim: usize, vocab: usize) -> Result<Self> {
        Ok(Self {
            w: lookup(store, "mtm.weight", &[dim, vocab])?,
            b: lookup(store, "mtm.bias", &[1, vocab])?,
        })
    }

    /// Summed cross-entropy over the masked positions; 0 when none are masked.
    pub fn loss<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        reps: Var,
        masked: &MaskedInput,
    ) -> Result<Var> {
        if masked.positions.is_empty() {
            return g.constant(Tensor::scalar(S::zero()));
        }
        let rows = g.gather(reps, &masked.positions)?;
        let logits = linear(g, store, rows, self.w, self.b)?;
        let ls = g.log_softmax_lastdim(logits)?;
        let cells: Vec<(usize, usize)> = masked.originals.iter().copied().enumerate().collect();
        let picked = g.pick_sum(ls, &cells)?;
        g.scale(picked, -S::one())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub nsp: f64,
    pub mtm: f64,
    pub pcr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            nsp: 1.0,
            mtm: 1.0,
            pcr: 0.1,
        }
    }
}

/// `l_nsp * L_nsp + l_mtm * L_mtm + l_pcr * L_pcr`.
pub fn joint_loss<S: Scalar>(
    g: &mut Graph<S>,
    nsp: Var,
    mtm: Var,
    pcr: Var,
    w: &LossWeights,
) -> Result<Var> {
    let a = g.scale(nsp, S::of(w.nsp))?;
    let b = g.scale(mtm, S::of(w.mtm))?;
    let c = g.scale(pcr, S::of(w.pcr))?;
    g.add_all(&[a, b, c])
}

/// Cross-entropy between the softmax of relevance scores and the softmax of
/// candidate scores (`[n x 1]` or `[1 x n]`) for one round.
pub fn phase2_loss<S: Scalar>(g: &mut Graph<S>, scores: Var, dense: Option<&[f64]>) -> Result<Var> {
    let dense =
        dense.ok_or_else(|| Error::Invalid("round has no dense relevance scores".into()))?;
    let n = g.value(scores).len();
    if dense.len() != n {
        return Err(Error::Shape {
            op: "phase2_loss",
            lhs: g.shape(scores).to_vec(),
            rhs: vec![dense.len()],
        });
    }
    let mut target: Vec<S> = dense.iter().map(|&r| S::of(r)).collect();
    crate::numerics::softmax_in_place(&mut target);
    let row = if g.shape(scores)[0] == 1 {
        scores
    } else {
        let one = g.constant(Tensor::full(&[1, 1], S::one()))?;
        g.matmul_bt(one, scores)?
    };
    let ls = g.log_softmax_lastdim(row)?;
    let weights = g.constant(Tensor::new(vec![1, n], target)?)?;
    let prod = g.mul(ls, weights)?;
    let total = g.sum(prod)?;
    g.scale(total, -S::one())
}
