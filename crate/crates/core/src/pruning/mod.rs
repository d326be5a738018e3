//! History pruning driven by pronoun coreference.
//!
//! A round is relevant to a target question when it contains a noun-phrase
//! antecedent of a pronoun in that question. A relevant answer keeps its whole
//! (question, answer) round. Pronoun-to-pronoun links are not followed.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorefAnnotation, Dialog, KeptRounds, CAPTION};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PruneRule {
    /// Caption and every earlier round.
    #[serde(rename = "all")]
    All,
    /// Only rounds holding antecedents (the caption only if it holds one).
    #[serde(rename = "crf")]
    Crf,
    /// Caption only.
    #[serde(rename = "cap")]
    Cap,
    /// Caption plus rounds holding antecedents.
    #[serde(rename = "crf+cap")]
    CrfCap,
}

impl PruneRule {
    pub const ALL_RULES: [PruneRule; 4] = [
        PruneRule::All,
        PruneRule::Crf,
        PruneRule::Cap,
        PruneRule::CrfCap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PruneRule::All => "all",
            PruneRule::Crf => "crf",
            PruneRule::Cap => "cap",
            PruneRule::CrfCap => "crf+cap",
        }
    }
}

impl fmt::Display for PruneRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PruneRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(PruneRule::All),
            "crf" => Ok(PruneRule::Crf),
            "cap" => Ok(PruneRule::Cap),
            "crf+cap" | "crfcap" | "crf_cap" => Ok(PruneRule::CrfCap),
            other => Err(Error::Config(format!("unknown pruning rule {other:?}"))),
        }
    }
}

/// Rounds (caption = -1) holding antecedents of the target question's pronouns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevanceSet {
    pub target_round: usize,
    pub relevant_rounds: BTreeSet<i32>,
}

/// Union of the antecedent rounds of every referential pronoun in the
/// question of `target`, using the annotations in `coref`.
pub fn relevant_rounds(dialog: &Dialog, target: usize, coref: &[CorefAnnotation]) -> RelevanceSet {
    let qlen = dialog.rounds.get(target).map_or(0, |r| r.question.len());
    let relevant_rounds = coref
        .iter()
        .filter(|c| c.pronoun.round == target as i32 && c.pronoun.end < qlen)
        .flat_map(|c| c.antecedents.iter().map(|a| a.round))
        .filter(|&r| r < target as i32)
        .collect();
    RelevanceSet {
        target_round: target,
        relevant_rounds,
    }
}

/// History kept in front of the target round under `rule`.
pub fn prune(relevance: &RelevanceSet, rule: PruneRule) -> KeptRounds {
    let from_relevance = || KeptRounds::from_indices(relevance.relevant_rounds.iter().copied());
    match rule {
        PruneRule::All => KeptRounds::all_before(relevance.target_round),
        PruneRule::Crf => from_relevance(),
        PruneRule::Cap => KeptRounds {
            caption: true,
            rounds: BTreeSet::new(),
        },
        PruneRule::CrfCap => KeptRounds {
            caption: true,
            ..from_relevance()
        },
    }
}

/// Fraction of referential question pronouns with at least one antecedent
/// in the caption; `None` when the corpus has no such pronoun.
pub fn caption_coverage(dialogs: &[Dialog]) -> Option<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for d in dialogs {
        for r in 0..d.rounds.len() {
            for c in d.question_pronouns(r).filter(|c| c.is_referential()) {
                total += 1;
                if c.antecedents.iter().any(|a| a.round == CAPTION) {
                    hits += 1;
                }
            }
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Audit line of the `prune` command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub dialog_id: String,
    pub round: usize,
    pub rule: PruneRule,
    pub kept: Vec<i32>,
}

/// One record per round of every dialog, using each dialog's own annotations.
pub fn prune_records(dialogs: &[Dialog], rule: PruneRule) -> Vec<PruneRecord> {
    dialogs
        .iter()
        .flat_map(|d| {
            (0..d.rounds.len()).map(move |r| PruneRecord {
                dialog_id: d.id.clone(),
                round: r,
                rule,
                kept: prune(&relevant_rounds(d, r, &d.coref), rule).as_indices(),
            })
        })
        .collect()
}

pub fn prune_records_jsonl(records: &[PruneRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
