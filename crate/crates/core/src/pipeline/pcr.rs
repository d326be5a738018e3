use std::collections::{BTreeMap, BTreeSet, HashSet};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EpochLog, Model, TrainConfig};
use crate::corpus::{assemble_dialog, AssembledInput, CorefSource, Dialog, Span};
use crate::encoder::{EncoderInput, EncoderOutput};
use crate::error::{Error, Result};
use crate::metrics::{pcr_prf, Prf};
use crate::numerics::{Adam, Axis, Graph, Tensor, Var};
use crate::scalar::Scalar;
use crate::taskheads::{
    mention_rep, pcr_loss, pcr_predict, pcr_representation, PcrScores, PcrTarget,
};

/// One pronoun scored inside an encoded sequence.
#[derive(Debug, Clone)]
pub(crate) struct PronounScores {
    /// Index into the dialog's `coref`.
    pub ann: usize,
    /// Candidates present in the sequence, in annotation order.
    pub candidates: Vec<Span>,
    /// `[N x 1]`, `None` when no candidate is present.
    pub scores: Option<Var>,
    /// Indices into `candidates` of the gold antecedents that are present.
    pub antecedents: Vec<usize>,
    /// False for a referential pronoun whose antecedents were all cut away.
    pub supervised: bool,
}

impl<S: Scalar> Model<S> {
    /// Scores the annotations `anns` of `dialog` whose pronoun survives in
    /// `input`. With `detach`, the encoder features enter the scorer as
    /// constants so no coreference gradient reaches the encoder.
    pub(crate) fn pcr_forward(
        &self,
        g: &mut Graph<S>,
        out: &EncoderOutput,
        input: &AssembledInput,
        dialog: &Dialog,
        anns: &[usize],
        detach: bool,
    ) -> Result<Vec<PronounScores>> {
        let mut reps = pcr_representation(g, out, &self.config.pcr_mode)?;
        if detach {
            let frozen = g.value(reps).clone();
            reps = g.constant(frozen)?;
        }
        let mut result = Vec::new();
        for &ai in anns {
            let ann = &dialog.coref[ai];
            let Some(p_pos) = input.positions(&ann.pronoun) else {
                continue;
            };
            let x_p = mention_rep(g, reps, &p_pos)?;
            let mut candidates = Vec::new();
            let mut rows = Vec::new();
            for c in &ann.candidates {
                if let Some(pos) = input.positions(c) {
                    rows.push(mention_rep(g, reps, &pos)?);
                    candidates.push(*c);
                }
            }
            let scores = if rows.is_empty() {
                None
            } else {
                let x_n = g.concat(&rows, Axis::Rows)?;
                Some(self.pcr.score(g, &self.store, x_p, x_n)?)
            };
            let antecedents: Vec<usize> = candidates
                .iter()
                .enumerate()
                .filter(|(_, c)| ann.antecedents.contains(c))
                .map(|(i, _)| i)
                .collect();
            let supervised = !ann.is_referential() || !antecedents.is_empty();
            result.push(PronounScores {
                ann: ai,
                candidates,
                scores,
                antecedents,
                supervised,
            });
        }
        Ok(result)
    }
}

/// Coreference loss over the supervised pronouns; 0 when there are none.
pub(crate) fn pronoun_loss<S: Scalar>(g: &mut Graph<S>, scored: &[PronounScores]) -> Result<Var> {
    let targets: Vec<PcrTarget> = scored
        .iter()
        .filter(|p| p.supervised)
        .map(|p| PcrTarget {
            scores: p.scores,
            antecedents: p.antecedents.clone(),
        })
        .collect();
    if targets.is_empty() {
        return g.constant(Tensor::scalar(S::zero()));
    }
    pcr_loss(g, &targets)
}

fn all_annotations(d: &Dialog) -> Vec<usize> {
    (0..d.coref.len()).collect()
}

/// Coreference loss of a whole dialog (caption and every round) on `g`.
pub fn dialog_pcr_loss<S: Scalar>(
    model: &Model<S>,
    g: &mut Graph<S>,
    dialog: &Dialog,
) -> Result<Var> {
    let input = assemble_dialog(dialog, &model.vocab, &model.assembly())?;
    let out = model
        .encoder
        .encode(g, &model.store, &EncoderInput::from(&input))?;
    let scored = model.pcr_forward(g, &out, &input, dialog, &all_annotations(dialog), false)?;
    pronoun_loss(g, &scored)
}

/// Value of the coreference loss of one dialog.
pub fn pcr_loss_value<S: Scalar>(model: &Model<S>, dialog: &Dialog) -> Result<f64> {
    let mut g = Graph::new();
    let loss = dialog_pcr_loss(model, &mut g, dialog)?;
    Ok(g.value(loss).item().to_f64_lossy())
}

/// Predicted antecedents of every annotation of `dialog`, by annotation index.
pub fn predict_antecedents<S: Scalar>(model: &Model<S>, dialog: &Dialog) -> Result<Vec<Vec<Span>>> {
    let input = assemble_dialog(dialog, &model.vocab, &model.assembly())?;
    let mut g = Graph::new();
    let out = model
        .encoder
        .encode(&mut g, &model.store, &EncoderInput::from(&input))?;
    let scored = model.pcr_forward(
        &mut g,
        &out,
        &input,
        dialog,
        &all_annotations(dialog),
        false,
    )?;
    let mut predicted = vec![Vec::new(); dialog.coref.len()];
    for p in scored {
        let Some(s) = p.scores else { continue };
        let scores = PcrScores {
            pronoun: dialog.coref[p.ann].pronoun,
            candidate_scores: g.value(s).data().iter().map(|v| v.to_f64_lossy()).collect(),
        };
        predicted[p.ann] = pcr_predict(&scores)
            .into_iter()
            .map(|i| p.candidates[i])
            .collect();
    }
    Ok(predicted)
}

type Pair = (usize, Span, Span);

/// Pair-level precision, recall and F1 against each dialog's annotations.
pub fn evaluate_pcr<S: Scalar>(model: &Model<S>, dialogs: &[Dialog]) -> Result<Prf> {
    let per_dialog = dialogs
        .par_iter()
        .enumerate()
        .map(|(di, d)| {
            let predicted = predict_antecedents(model, d)?;
            let mut pred = Vec::new();
            let mut gold = Vec::new();
            for (ann, p) in d.coref.iter().zip(predicted) {
                pred.extend(p.into_iter().map(|c| (di, ann.pronoun, c)));
                gold.extend(ann.antecedents.iter().map(|&c| (di, ann.pronoun, c)));
            }
            Ok((pred, gold))
        })
        .collect::<Result<Vec<(Vec<Pair>, Vec<Pair>)>>>()?;
    let mut pred = BTreeSet::new();
    let mut gold = BTreeSet::new();
    for (p, g) in per_dialog {
        pred.extend(p);
        gold.extend(g);
    }
    Ok(pcr_prf(&pred, &gold))
}

/// Per-epoch losses and validation scores, plus the epoch whose parameters were kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_value: f64,
}

pub(crate) fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Trains the coreference scorer (and the encoder under it) on `train`
/// and keeps the parameters of the epoch with the best validation F1.
pub fn train_phase0<S: Scalar>(
    model: &mut Model<S>,
    train: &[Dialog],
    val: &[Dialog],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if !train.iter().any(|d| !d.coref.is_empty()) {
        return Err(Error::Invalid(
            "training corpus has no annotated pronouns".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam());
    let mut best = (f64::NEG_INFINITY, 0, model.store.clone());
    let mut epochs = Vec::new();
    for epoch in 1..=cfg.epochs {
        let order = shuffled(train.len(), &mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.store.zero_grad();
            let inv = S::of(1.0 / batch.len() as f64);
            for &i in batch {
                let mut g = Graph::new();
                let loss = dialog_pcr_loss(model, &mut g, &train[i])?;
                total += g.value(loss).item().to_f64_lossy();
                let scaled = g.scale(loss, inv)?;
                g.backward(scaled, &mut model.store)?;
            }
            adam.step(&mut model.store);
        }
        let f1 = evaluate_pcr(model, val)?.f1;
        info!(
            "phase0 epoch {epoch}: loss {:.5} val f1 {f1:.4}",
            total / train.len() as f64
        );
        epochs.push(EpochLog::new(
            "phase0",
            epoch,
            total / train.len() as f64,
            "f1",
            f1,
        ));
        if f1 > best.0 {
            best = (f1, epoch, model.store.clone());
        }
    }
    model.store = best.2;
    Ok(TrainReport {
        epochs,
        best_epoch: best.1,
        best_value: best.0,
    })
}

/// Groups mentions linked by `(pronoun, antecedent)` pairs into clusters of
/// two or more, ordered by their first mention.
pub fn clusters_from_links(links: &[(Span, Span)]) -> Vec<Vec<Span>> {
    let mut parent: BTreeMap<Span, Span> = BTreeMap::new();
    fn find(parent: &mut BTreeMap<Span, Span>, x: Span) -> Span {
        let p = *parent.entry(x).or_insert(x);
        if p == x {
            return x;
        }
        let root = find(parent, p);
        parent.insert(x, root);
        root
    }
    for &(a, b) in links {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            parent.insert(hi, lo);
        }
    }
    let keys: Vec<Span> = parent.keys().copied().collect();
    let mut groups: BTreeMap<Span, Vec<Span>> = BTreeMap::new();
    for k in keys {
        let r = find(&mut parent, k);
        groups.entry(r).or_default().push(k);
    }
    groups.into_values().filter(|g| g.len() >= 2).collect()
}

/// Replaces every annotation's antecedents with the model's predictions,
/// marks them as pseudo labels and rebuilds clusters from the predicted links.
pub fn resolve<S: Scalar>(model: &Model<S>, dialogs: &[Dialog]) -> Result<Vec<Dialog>> {
    dialogs
        .par_iter()
        .map(|d| {
            let predicted = predict_antecedents(model, d)?;
            let mut out = d.clone();
            let mut links = Vec::new();
            for (ann, p) in out.coref.iter_mut().zip(predicted) {
                links.extend(p.iter().map(|&c| (ann.pronoun, c)));
                ann.antecedents = p;
                ann.source = CorefSource::Pseudo;
            }
            out.clusters = clusters_from_links(&links);
            Ok(out)
        })
        .collect()
}

/// Removes antecedent labels and clusters, keeping pronoun and candidate spans.
pub fn strip_labels(dialogs: &[Dialog]) -> Vec<Dialog> {
    dialogs
        .iter()
        .map(|d| {
            let mut out = d.clone();
            for ann in &mut out.coref {
                ann.antecedents.clear();
            }
            out.clusters.clear();
            out
        })
        .collect()
}

fn check_disjoint(labeled: &[Dialog], unlabeled: &[Dialog]) -> Result<()> {
    let ids: HashSet<&str> = labeled.iter().map(|d| d.id.as_str()).collect();
    match unlabeled.iter().find(|d| ids.contains(d.id.as_str())) {
        Some(d) => Err(Error::Invalid(format!(
            "dialog {} is both labeled and unlabeled",
            d.id
        ))),
        None => Ok(()),
    }
}

/// Gold dialogs unchanged, followed by the pseudo-labeled ones.
pub fn merge_pseudo_labels(labeled: &[Dialog], pseudo: &[Dialog]) -> Result<Vec<Dialog>> {
    check_disjoint(labeled, pseudo)?;
    Ok(labeled.iter().chain(pseudo).cloned().collect())
}

pub struct Bootstrap<S: Scalar = f64> {
    pub merged: Vec<Dialog>,
    pub model: Model<S>,
    pub report: TrainReport,
}

/// Labels `unlabeled` with `teacher`, merges the result with `labeled` and
/// trains a fresh model of the same configuration on the merged corpus.
pub fn bootstrap_pseudo_labels<S: Scalar>(
    teacher: &Model<S>,
    labeled: &[Dialog],
    unlabeled: &[Dialog],
    val: &[Dialog],
    cfg: &TrainConfig,
) -> Result<Bootstrap<S>> {
    check_disjoint(labeled, unlabeled)?;
    let pseudo = resolve(teacher, unlabeled)?;
    let merged = merge_pseudo_labels(labeled, &pseudo)?;
    let mut model = Model::init(teacher.config.clone(), teacher.vocab.clone(), cfg.seed)?;
    let report = train_phase0(&mut model, &merged, val, cfg)?;
    Ok(Bootstrap {
        merged,
        model,
        report,
    })
}
