//! Pronoun coreference pair metrics and answer-ranking metrics.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Empty denominators yield 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

/// Precision, recall and F1 over (pronoun, candidate) pairs.
pub fn pcr_prf<T: Ord>(predicted: &BTreeSet<T>, gold: &BTreeSet<T>) -> Prf {
    let tp = predicted.intersection(gold).count();
    Prf::from_counts(tp, predicted.len() - tp, gold.len() - tp)
}

/// Candidate scores of one round with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult<S = f64> {
    pub scores: Vec<S>,
    pub gt_index: Option<usize>,
    pub dense_scores: Option<Vec<f64>>,
}

impl<S: Scalar> RankingResult<S> {
    pub fn validate(&self) -> Result<()> {
        let n = self.scores.len();
        if self.gt_index.is_some_and(|g| g >= n)
            || self.dense_scores.as_ref().is_some_and(|d| d.len() != n)
        {
            return Err(Error::Invalid(format!(
                "ranking result with {n} scores has mismatched labels"
            )));
        }
        Ok(())
    }

    /// Candidate indices from best to worst.
    pub fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| {
            self.scores[b]
                .partial_cmp(&self.scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx
    }
}

/// 1-based rank of `target`: higher scores first, ties by lower index.
pub fn rank_of<S: Scalar>(scores: &[S], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub mrr: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mean_rank: f64,
    pub count: usize,
}

/// Metrics over every result that has a ground-truth index.
pub fn retrieval_metrics<S: Scalar>(results: &[RankingResult<S>]) -> Result<RetrievalMetrics> {
    let ranks = results
        .iter()
        .filter_map(|r| r.gt_index.map(|g| (r, g)))
        .map(|(r, g)| r.validate().map(|_| rank_of(&r.scores, g)))
        .collect::<Result<Vec<_>>>()?;
    retrieval_from_ranks(&ranks)
}

pub fn retrieval_from_ranks(ranks: &[usize]) -> Result<RetrievalMetrics> {
    if ranks.is_empty() {
        return Err(Error::Invalid(
            "no results with a ground-truth answer".into(),
        ));
    }
    let n = ranks.len() as f64;
    let within = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(RetrievalMetrics {
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        r1: within(1),
        r5: within(5),
        r10: within(10),
        mean_rank: ranks.iter().map(|&r| r as f64).sum::<f64>() / n,
        count: ranks.len(),
    })
}

/// NDCG of one round. `k` is the number of positively relevant candidates;
/// when it is 0 the value is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ndcg {
    pub value: f64,
    pub k: usize,
}

impl Ndcg {
    pub fn is_degenerate(&self) -> bool {
        self.k == 0
    }
}

pub fn ndcg<S: Scalar>(result: &RankingResult<S>) -> Result<Ndcg> {
    result.validate()?;
    let rel = result
        .dense_scores
        .as_ref()
        .ok_or_else(|| Error::Invalid("ndcg needs dense relevance scores".into()))?;
    let k = rel.iter().filter(|&&r| r > 0.0).count();
    if k == 0 {
        return Ok(Ndcg { value: 0.0, k });
    }
    let discount = |i: usize| ((i + 2) as f64).log2();
    let dcg: f64 = result
        .order()
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &c)| rel[c] / discount(i))
        .sum();
    let mut ideal = rel.clone();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &r)| r / discount(i))
        .sum();
    Ok(Ndcg {
        value: dcg / idcg,
        k,
    })
}

/// Mean NDCG over results with dense scores, and how many were degenerate.
pub fn mean_ndcg<S: Scalar>(results: &[RankingResult<S>]) -> Result<(f64, usize)> {
    let vals = results
        .iter()
        .filter(|r| r.dense_scores.is_some())
        .map(ndcg)
        .collect::<Result<Vec<_>>>()?;
    if vals.is_empty() {
        return Err(Error::Invalid(
            "no results with dense relevance scores".into(),
        ));
    }
    let flagged = vals.iter().filter(|v| v.is_degenerate()).count();
    Ok((
        vals.iter().map(|v| v.value).sum::<f64>() / vals.len() as f64,
        flagged,
    ))
}

/// Dialog-level facts used to split results into groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupKey {
    pub clusters: usize,
    pub question_pronoun: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub count: usize,
    pub mrr: Option<f64>,
    pub ndcg: Option<f64>,
}

fn cluster_bin(n: usize) -> String {
    if n >= 4 {
        "clusters=4+".into()
    } else {
        format!("clusters={n}")
    }
}

const GROUPS: [&str; 8] = [
    "all",
    "clusters=0",
    "clusters=1",
    "clusters=2",
    "clusters=3",
    "clusters=4+",
    "pronoun=yes",
    "pronoun=no",
];

fn summarize<S: Scalar>(group: &str, results: &[&RankingResult<S>]) -> Result<GroupRow> {
    let owned: Vec<RankingResult<S>> = results.iter().map(|&r| r.clone()).collect();
    let has_gt = owned.iter().any(|r| r.gt_index.is_some());
    let has_dense = owned.iter().any(|r| r.dense_scores.is_some());
    Ok(GroupRow {
        group: group.to_string(),
        count: owned.len(),
        mrr: if has_gt {
            Some(retrieval_metrics(&owned)?.mrr)
        } else {
            None
        },
        ndcg: if has_dense {
            Some(mean_ndcg(&owned)?.0)
        } else {
            None
        },
    })
}

/// MRR and NDCG per cluster-count bin and per question-pronoun presence.
pub fn grouped_report<S: Scalar>(
    results: &[RankingResult<S>],
    keys: &[GroupKey],
) -> Result<Vec<GroupRow>> {
    if results.len() != keys.len() {
        return Err(Error::Invalid(
            "one group key per result is required".into(),
        ));
    }
    GROUPS
        .iter()
        .map(|&group| {
            let members: Vec<&RankingResult<S>> = results
                .iter()
                .zip(keys)
                .filter(|(_, k)| match group {
                    "all" => true,
                    "pronoun=yes" => k.question_pronoun,
                    "pronoun=no" => !k.question_pronoun,
                    bin => cluster_bin(k.clusters) == bin,
                })
                .map(|(r, _)| r)
                .collect();
            summarize(group, &members)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDelta {
    pub group: String,
    pub count: usize,
    pub delta_mrr: Option<f64>,
    pub delta_ndcg: Option<f64>,
}

/// Per-group metric differences `b - a` for two models on the same rounds.
pub fn grouped_delta<S: Scalar>(
    a: &[RankingResult<S>],
    b: &[RankingResult<S>],
    keys: &[GroupKey],
) -> Result<Vec<GroupDelta>> {
    let (ra, rb) = (grouped_report(a, keys)?, grouped_report(b, keys)?);
    Ok(ra
        .into_iter()
        .zip(rb)
        .map(|(x, y)| GroupDelta {
            group: x.group,
            count: x.count,
            delta_mrr: x.mrr.zip(y.mrr).map(|(p, q)| q - p),
            delta_ndcg: x.ndcg.zip(y.ndcg).map(|(p, q)| q - p),
        })
        .collect())
}

/// One line of a tab-separated report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub split: String,
    pub group: String,
    pub metric: String,
    pub value: f64,
}

impl ReportRow {
    pub fn new(split: &str, group: &str, metric: &str, value: f64) -> Self {
        Self {
            split: split.into(),
            group: group.into(),
            metric: metric.into(),
            value,
        }
    }
}

/// Rows for the overall retrieval/ranking metrics and every non-empty group.
pub fn report_rows(
    split: &str,
    retrieval: Option<&RetrievalMetrics>,
    ndcg: Option<f64>,
    groups: &[GroupRow],
) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    if let Some(m) = retrieval {
        for (name, v) in [
            ("mrr", m.mrr),
            ("r@1", m.r1),
            ("r@5", m.r5),
            ("r@10", m.r10),
            ("mean_rank", m.mean_rank),
        ] {
            rows.push(ReportRow::new(split, "all", name, v));
        }
    }
    if let Some(v) = ndcg {
        rows.push(ReportRow::new(split, "all", "ndcg", v));
    }
    for g in groups.iter().filter(|g| g.group != "all" && g.count > 0) {
        rows.push(ReportRow::new(split, &g.group, "count", g.count as f64));
        if let Some(v) = g.mrr {
            rows.push(ReportRow::new(split, &g.group, "mrr", v));
        }
        if let Some(v) = g.ndcg {
            rows.push(ReportRow::new(split, &g.group, "ndcg", v));
        }
    }
    rows
}

pub fn report_tsv(rows: &[ReportRow]) -> String {
    let mut out = String::from("split\tgroup\tmetric\tvalue\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.split, r.group, r.metric, r.value);
    }
    out
}
