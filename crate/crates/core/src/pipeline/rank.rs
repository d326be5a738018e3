use log::{info, warn};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pcr::{pronoun_loss, shuffled, TrainReport};
use super::{EpochLog, Model, TrainConfig};
use crate::corpus::{assemble_input, AssembledInput, Dialog, Round};
use crate::encoder::EncoderInput;
use crate::error::{Error, Result};
use crate::metrics::{
    grouped_report, mean_ndcg, report_rows, retrieval_metrics, GroupKey, GroupRow, RankingResult,
    ReportRow, RetrievalMetrics,
};
use crate::numerics::{softmax_in_place, Adam, Axis, Graph, Var};
use crate::pruning::{prune, relevant_rounds, PruneRule};
use crate::scalar::Scalar;
use crate::taskheads::{candidate_score, joint_loss, mask_tokens, nsp_loss, phase2_loss};

/// Input for candidate `candidate` of round `round`, history pruned by `rule`.
pub fn round_input<S: Scalar>(
    model: &Model<S>,
    dialog: &Dialog,
    round: usize,
    candidate: usize,
    rule: PruneRule,
) -> Result<AssembledInput> {
    let kept = prune(&relevant_rounds(dialog, round, &dialog.coref), rule);
    assemble_input(
        dialog,
        &model.vocab,
        round,
        candidate,
        &kept,
        &model.assembly(),
    )
}

/// Log-odds score of one encoded candidate sequence, `[1 x 1]`.
fn score_var<S: Scalar>(
    model: &Model<S>,
    g: &mut Graph<S>,
    input: &EncoderInput,
    cls_pos: usize,
) -> Result<Var> {
    let out = model.encoder.encode(g, &model.store, input)?;
    let logits = model.nsp.logits(
        g,
        &model.store,
        out.final_reps,
        cls_pos,
        AssembledInput::IMG_POS,
    )?;
    candidate_score(g, logits)
}

/// Scores every candidate of a round, each encoded independently.
pub fn score_candidates<S: Scalar>(
    model: &Model<S>,
    dialog: &Dialog,
    round: usize,
    rule: PruneRule,
) -> Result<Vec<f64>> {
    (0..dialog.rounds[round].answers.len())
        .map(|c| {
            let input = round_input(model, dialog, round, c, rule)?;
            let mut g = Graph::new();
            let s = score_var(model, &mut g, &EncoderInput::from(&input), input.cls_pos)?;
            Ok(g.value(s).item().to_f64_lossy())
        })
        .collect()
}

/// Candidate scores of one round with its labels and grouping facts.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundScores {
    pub dialog_id: String,
    pub round: usize,
    pub result: RankingResult<f64>,
    pub key: GroupKey,
}

fn group_key(dialog: &Dialog, round: usize) -> GroupKey {
    GroupKey {
        clusters: dialog.clusters.len(),
        question_pronoun: dialog.has_referential_question_pronoun(round),
    }
}

/// Scores every candidate of every round of `dialogs`.
pub fn rank_dialogs<S: Scalar>(
    model: &Model<S>,
    dialogs: &[Dialog],
    rule: PruneRule,
) -> Result<Vec<RoundScores>> {
    let jobs: Vec<(&Dialog, usize)> = dialogs
        .iter()
        .flat_map(|d| (0..d.rounds.len()).map(move |r| (d, r)))
        .collect();
    jobs.par_iter()
        .map(|&(d, r)| {
            let round = &d.rounds[r];
            Ok(RoundScores {
                dialog_id: d.id.clone(),
                round: r,
                result: RankingResult {
                    scores: score_candidates(model, d, r, rule)?,
                    gt_index: round.gt_index,
                    dense_scores: round.dense_scores.clone(),
                },
                key: group_key(d, r),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEvaluation {
    pub retrieval: Option<RetrievalMetrics>,
    pub ndcg: Option<f64>,
    /// Rounds with dense scores but no positively relevant candidate.
    pub ndcg_flagged: usize,
    pub groups: Vec<GroupRow>,
}

impl RankEvaluation {
    pub fn rows(&self, split: &str) -> Vec<ReportRow> {
        report_rows(split, self.retrieval.as_ref(), self.ndcg, &self.groups)
    }
}

pub fn summarize_rounds(rounds: &[RoundScores]) -> Result<RankEvaluation> {
    let results: Vec<RankingResult<f64>> = rounds.iter().map(|r| r.result.clone()).collect();
    let keys: Vec<GroupKey> = rounds.iter().map(|r| r.key).collect();
    let retrieval = if results.iter().any(|r| r.gt_index.is_some()) {
        Some(retrieval_metrics(&results)?)
    } else {
        None
    };
    let (ndcg, ndcg_flagged) = if results.iter().any(|r| r.dense_scores.is_some()) {
        let (v, f) = mean_ndcg(&results)?;
        (Some(v), f)
    } else {
        (None, 0)
    };
    Ok(RankEvaluation {
        retrieval,
        ndcg,
        ndcg_flagged,
        groups: grouped_report(&results, &keys)?,
    })
}

pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    dialogs: &[Dialog],
    rule: PruneRule,
) -> Result<(Vec<RoundScores>, RankEvaluation)> {
    let rounds = rank_dialogs(model, dialogs, rule)?;
    let summary = summarize_rounds(&rounds)?;
    Ok((rounds, summary))
}

/// Loss terms of one training round, before weighting.
pub struct Phase1Terms {
    pub nsp: Var,
    pub mtm: Var,
    pub pcr: Var,
}

/// NSP over the ground truth and `negatives`; MTM and coreference on the
/// ground-truth sequence, whose mention tokens are never masked.
pub fn phase1_terms<S: Scalar>(
    model: &Model<S>,
    g: &mut Graph<S>,
    dialog: &Dialog,
    round: usize,
    negatives: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Phase1Terms> {
    let gt = dialog.rounds[round].gt_index.ok_or_else(|| {
        Error::Invalid(format!("{} round {round} has no ground truth", dialog.id))
    })?;
    let pos = round_input(model, dialog, round, gt, cfg.prune_rule)?;
    let protected: Vec<usize> = pos.mentions.values().flat_map(|&(s, e)| s..=e).collect();
    let masked = mask_tokens(&EncoderInput::from(&pos), cfg.mask_rate, &protected, rng);
    let out = model.encoder.encode(g, &model.store, &masked.input)?;
    let pos_logits = model.nsp.logits(
        g,
        &model.store,
        out.final_reps,
        pos.cls_pos,
        AssembledInput::IMG_POS,
    )?;
    let mtm = model.mtm.loss(g, &model.store, out.final_reps, &masked)?;
    let anns: Vec<usize> = dialog
        .coref
        .iter()
        .enumerate()
        .filter(|(_, c)| c.pronoun.round == round as i32)
        .map(|(i, _)| i)
        .collect();
    let scored = model.pcr_forward(g, &out, &pos, dialog, &anns, cfg.detach_pcr)?;
    let pcr = pronoun_loss(g, &scored)?;

    let mut batch = vec![(pos_logits, true)];
    for &c in negatives {
        let neg = round_input(model, dialog, round, c, cfg.prune_rule)?;
        let out = model
            .encoder
            .encode(g, &model.store, &EncoderInput::from(&neg))?;
        batch.push((
            model.nsp.logits(
                g,
                &model.store,
                out.final_reps,
                neg.cls_pos,
                AssembledInput::IMG_POS,
            )?,
            false,
        ));
    }
    let nsp = nsp_loss(g, &batch)?;
    Ok(Phase1Terms { nsp, mtm, pcr })
}

/// Up to `n` distinct wrong candidates, in sampled order.
pub(crate) fn sample_negatives(
    round: &Round,
    gt: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let wrong: Vec<usize> = (0..round.answers.len()).filter(|&c| c != gt).collect();
    let k = n.min(wrong.len());
    sample(rng, wrong.len(), k)
        .into_iter()
        .map(|i| wrong[i])
        .collect()
}

/// Joint training on sparse annotations. Keeps the parameters of the epoch
/// with the best validation MRR.
pub fn train_phase1<S: Scalar>(
    model: &mut Model<S>,
    train: &[Dialog],
    val: &[Dialog],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for d in train {
        for (r, round) in d.rounds.iter().enumerate() {
            match round.gt_index {
                Some(gt) => jobs.push((d, r, gt)),
                None => warn!("{} round {r}: no ground-truth answer, skipped", d.id),
            }
        }
    }
    if jobs.is_empty() {
        return Err(Error::Invalid(
            "no training round has a ground-truth answer".into(),
        ));
    }
    let weights = cfg.weights();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::<S>::new(cfg.adam());
    let mut best = (f64::NEG_INFINITY, 0, model.store.clone());
    let mut epochs = Vec::new();
    for epoch in 1..=cfg.epochs {
        let order = shuffled(jobs.len(), &mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.store.zero_grad();
            let inv = S::of(1.0 / batch.len() as f64);
            for &j in batch {
                let (d, r, gt) = jobs[j];
                let negatives = sample_negatives(&d.rounds[r], gt, cfg.n_negatives, &mut rng);
                let mut g = Graph::new();
                let t = phase1_terms(model, &mut g, d, r, &negatives, cfg, &mut rng)?;
                let loss = joint_loss(&mut g, t.nsp, t.mtm, t.pcr, &weights)?;
                total += g.value(loss).item().to_f64_lossy();
                let scaled = g.scale(loss, inv)?;
                g.backward(scaled, &mut model.store)?;
            }
            adam.step(&mut model.store);
        }
        let (_, eval) = evaluate(model, val, cfg.prune_rule)?;
        let m = eval
            .retrieval
            .ok_or_else(|| Error::Invalid("validation rounds have no ground truth".into()))?;
        let mean_loss = total / jobs.len() as f64;
        info!(
            "phase1 epoch {epoch}: loss {mean_loss:.5} val mrr {:.4} r@1 {:.4}",
            m.mrr, m.r1
        );
        epochs.push(EpochLog::new("phase1", epoch, mean_loss, "mrr", m.mrr));
        if m.mrr > best.0 {
            best = (m.mrr, epoch, model.store.clone());
        }
    }
    model.store = best.2;
    Ok(TrainReport {
        epochs,
        best_epoch: best.1,
        best_value: best.0,
    })
}

/// Dense relevance with the ground-truth answer set to 1.0.
pub fn corrected_relevance(round: &Round) -> Option<Vec<f64>> {
    let mut dense = round.dense_scores.clone()?;
    if let Some(gt) = round.gt_index {
        dense[gt] = 1.0;
    }
    Some(dense)
}

/// Relevance-weighted ranking loss of one round over all of its candidates.
pub fn phase2_round_loss<S: Scalar>(
    model: &Model<S>,
    g: &mut Graph<S>,
    dialog: &Dialog,
    round: usize,
    relevance: &[f64],
    rule: PruneRule,
) -> Result<Var> {
    let scores = (0..dialog.rounds[round].answers.len())
        .map(|c| {
            let input = round_input(model, dialog, round, c, rule)?;
            score_var(model, g, &EncoderInput::from(&input), input.cls_pos)
        })
        .collect::<Result<Vec<_>>>()?;
    let column = g.concat(&scores, Axis::Rows)?;
    phase2_loss(g, column, Some(relevance))
}

/// Finetunes on rounds with dense relevance (ground truth corrected to 1.0)
/// using only the ranking loss. Keeps the parameters with the best
/// validation NDCG.
pub fn train_phase2<S: Scalar>(
    model: &mut Model<S>,
    train: &[Dialog],
    val: &[Dialog],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let jobs: Vec<(&Dialog, usize, Vec<f64>)> = train
        .iter()
        .flat_map(|d| {
            d.rounds
                .iter()
                .enumerate()
                .filter_map(move |(r, round)| corrected_relevance(round).map(|rel| (d, r, rel)))
        })
        .collect();
    if jobs.is_empty() {
        return Err(Error::Invalid(
            "no training round has dense relevance scores".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::<S>::new(cfg.adam());
    let mut best = (f64::NEG_INFINITY, 0, model.store.clone());
    let mut epochs = Vec::new();
    for epoch in 1..=cfg.epochs {
        let order = shuffled(jobs.len(), &mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.store.zero_grad();
            let inv = S::of(1.0 / batch.len() as f64);
            for &j in batch {
                let (d, r, rel) = &jobs[j];
                let mut g = Graph::new();
                let loss = phase2_round_loss(model, &mut g, d, *r, rel, cfg.prune_rule)?;
                total += g.value(loss).item().to_f64_lossy();
                let scaled = g.scale(loss, inv)?;
                g.backward(scaled, &mut model.store)?;
            }
            adam.step(&mut model.store);
        }
        let (_, eval) = evaluate(model, val, cfg.prune_rule)?;
        let ndcg = eval.ndcg.ok_or_else(|| {
            Error::Invalid("validation rounds have no dense relevance scores".into())
        })?;
        let mean_loss = total / jobs.len() as f64;
        info!("phase2 epoch {epoch}: loss {mean_loss:.5} val ndcg {ndcg:.4}");
        epochs.push(EpochLog::new("phase2", epoch, mean_loss, "ndcg", ndcg));
        if ndcg > best.0 {
            best = (ndcg, epoch, model.store.clone());
        }
    }
    model.store = best.2;
    Ok(TrainReport {
        epochs,
        best_epoch: best.1,
        best_value: best.0,
    })
}

/// Per-round mean of the members' softmax-normalized scores. Members must
/// list the same rounds in the same order with equal candidate counts.
pub fn ensemble(members: &[Vec<RoundScores>]) -> Result<Vec<RoundScores>> {
    let first = members
        .first()
        .ok_or_else(|| Error::Invalid("ensemble has no members".into()))?;
    for (m, member) in members.iter().enumerate() {
        if member.len() != first.len() {
            return Err(Error::Invalid(format!(
                "member {m} scores {} rounds, expected {}",
                member.len(),
                first.len()
            )));
        }
        for (a, b) in member.iter().zip(first) {
            if a.dialog_id != b.dialog_id
                || a.round != b.round
                || a.result.scores.len() != b.result.scores.len()
            {
                return Err(Error::Invalid(format!(
                    "member {m} disagrees on {} round {} ({} vs {} candidates)",
                    a.dialog_id,
                    a.round,
                    a.result.scores.len(),
                    b.result.scores.len()
                )));
            }
        }
    }
    let k = members.len() as f64;
    Ok((0..first.len())
        .map(|i| {
            let normalized: Vec<Vec<f64>> = members
                .iter()
                .map(|m| {
                    let mut p = m[i].result.scores.clone();
                    softmax_in_place(&mut p);
                    p
                })
                .collect();
            let base = &normalized[0];
            // mean written as base + mean offset, so identical members reproduce base exactly
            let scores = (0..base.len())
                .map(|c| base[c] + normalized.iter().map(|p| p[c] - base[c]).sum::<f64>() / k)
                .collect();
            RoundScores {
                result: RankingResult {
                    scores,
                    ..first[i].result.clone()
                },
                ..first[i].clone()
            }
        })
        .collect())
}
