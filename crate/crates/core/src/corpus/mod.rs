//! Dialog data model, vocabulary, corpus files, synthetic corpora and
//! model-input assembly.

mod assemble;
mod io;
mod synthetic;
mod vocab;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use assemble::{
    assemble_dialog, assemble_input, AssembledInput, AssemblyConfig, KeptRounds, Segment,
    N_SEGMENTS,
};
pub use io::{
    build_vocab, dialog_from_json, dialog_to_json, load_corpus, parse_corpus, save_corpus,
    serialize_corpus,
};
pub use synthetic::{generate_synthetic, generate_synthetic_traced, PronounTrace, SyntheticConfig};
pub use vocab::{
    tokenize, Token, Vocabulary, CLS, IMG, MASK, N_RESERVED, N_SPECIAL, PAD, SEP, UNK,
};

/// Round index used for the caption.
pub const CAPTION: i32 = -1;

/// Third-person personal and possessive pronouns considered for coreference.
pub const PRONOUNS: [&str; 10] = [
    "it", "he", "she", "they", "him", "her", "them", "its", "his", "their",
];

pub fn is_pronoun(surface: &str) -> bool {
    PRONOUNS.contains(&surface)
}

/// Inclusive token range inside one utterance. The utterance of round `r`
/// is its question followed by its ground-truth answer; round `-1` is the
/// caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub round: i32,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(round: i32, start: usize, end: usize) -> Self {
        Self { round, start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    /// Dialog order: strictly before `other` without overlap.
    pub fn precedes(&self, other: &Span) -> bool {
        self.round < other.round || (self.round == other.round && self.end < other.start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MentionKind {
    Pronoun,
    NounPhrase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Mention {
    pub span: Span,
    pub kind: MentionKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorefSource {
    Gold,
    Pseudo,
}

/// Candidate antecedents of one pronoun and the subset it co-refers with.
/// Empty `antecedents` marks a non-referential pronoun.
#[derive(Debug, Clone, PartialEq)]
pub struct CorefAnnotation {
    pub pronoun: Span,
    pub candidates: Vec<Span>,
    pub antecedents: Vec<Span>,
    pub source: CorefSource,
}

impl CorefAnnotation {
    pub fn is_referential(&self) -> bool {
        !self.antecedents.is_empty()
    }
}

/// Mentions referring to one entity.
pub type CoreferenceCluster = Vec<Span>;

#[derive(Debug, Clone, PartialEq)]
pub struct Round {
    pub question: Vec<String>,
    pub answers: Vec<Vec<String>>,
    pub gt_index: Option<usize>,
    pub dense_scores: Option<Vec<f64>>,
}

impl Round {
    pub fn gt_answer(&self) -> Option<&[String]> {
        self.gt_index
            .and_then(|i| self.answers.get(i))
            .map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dialog {
    pub id: String,
    pub visual_features: Vec<Vec<f64>>,
    pub caption: Vec<String>,
    pub rounds: Vec<Round>,
    pub coref: Vec<CorefAnnotation>,
    pub clusters: Vec<CoreferenceCluster>,
}

impl Dialog {
    /// Tokens addressed by spans of round `round` (caption for `-1`).
    pub fn utterance(&self, round: i32) -> Option<Vec<&str>> {
        if round == CAPTION {
            return Some(self.caption.iter().map(String::as_str).collect());
        }
        let r = self.rounds.get(usize::try_from(round).ok()?)?;
        let mut toks: Vec<&str> = r.question.iter().map(String::as_str).collect();
        if let Some(a) = r.gt_answer() {
            toks.extend(a.iter().map(String::as_str));
        }
        Some(toks)
    }

    pub fn span_tokens(&self, span: &Span) -> Option<Vec<&str>> {
        let u = self.utterance(span.round)?;
        (span.start <= span.end && span.end < u.len()).then(|| u[span.start..=span.end].to_vec())
    }

    /// Pronoun annotations located in the question of round `round`.
    pub fn question_pronouns(&self, round: usize) -> impl Iterator<Item = &CorefAnnotation> {
        let qlen = self.rounds.get(round).map_or(0, |r| r.question.len());
        self.coref
            .iter()
            .filter(move |c| c.pronoun.round == round as i32 && c.pronoun.end < qlen)
    }

    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Validation {
            dialog: self.id.clone(),
            msg: msg.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(first) = self.visual_features.first() {
            if self.visual_features.iter().any(|v| v.len() != first.len()) {
                return Err(self.fail("visual feature vectors differ in length"));
            }
        }
        if self
            .visual_features
            .iter()
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(self.fail("non-finite visual feature"));
        }
        for (i, r) in self.rounds.iter().enumerate() {
            if let Some(gt) = r.gt_index {
                if gt >= r.answers.len() {
                    return Err(self.fail(format!(
                        "round {i}: gt_index {gt} out of {} candidates",
                        r.answers.len()
                    )));
                }
            }
            if let Some(d) = &r.dense_scores {
                if d.len() != r.answers.len() {
                    return Err(self.fail(format!(
                        "round {i}: {} dense scores for {} candidates",
                        d.len(),
                        r.answers.len()
                    )));
                }
                if d.iter().any(|s| !(0.0..=1.0).contains(s)) {
                    return Err(self.fail(format!("round {i}: dense score outside [0, 1]")));
                }
            }
        }
        let check_span = |s: &Span| -> Result<()> {
            match self.span_tokens(s) {
                Some(_) => Ok(()),
                None => Err(self.fail(format!("span {s:?} out of range"))),
            }
        };
        for c in &self.coref {
            check_span(&c.pronoun)?;
            let surface = self.span_tokens(&c.pronoun).expect("checked");
            if surface.len() != 1 || !is_pronoun(surface[0]) {
                return Err(self.fail(format!("pronoun span {:?} covers {:?}", c.pronoun, surface)));
            }
            for n in &c.candidates {
                check_span(n)?;
                if !n.precedes(&c.pronoun) {
                    return Err(self.fail(format!(
                        "candidate {n:?} does not precede pronoun {:?}",
                        c.pronoun
                    )));
                }
            }
            for a in &c.antecedents {
                if !c.candidates.contains(a) {
                    return Err(self.fail(format!(
                        "antecedent {a:?} is not a candidate of {:?}",
                        c.pronoun
                    )));
                }
            }
        }
        let mut cluster_of: HashMap<Span, usize> = HashMap::new();
        for (ci, cluster) in self.clusters.iter().enumerate() {
            if cluster.len() < 2 {
                return Err(self.fail(format!("cluster {ci} has fewer than two mentions")));
            }
            for m in cluster {
                check_span(m)?;
                if cluster_of.insert(*m, ci).is_some_and(|prev| prev != ci) {
                    return Err(self.fail(format!("mention {m:?} appears in two clusters")));
                }
            }
        }
        for c in &self.coref {
            for a in &c.antecedents {
                let (p, q) = (cluster_of.get(&c.pronoun), cluster_of.get(a));
                if p.is_none() || p != q {
                    return Err(self.fail(format!(
                        "pronoun {:?} and antecedent {a:?} are not co-clustered",
                        c.pronoun
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every distinct span referenced by coreference annotations or clusters.
    pub fn mention_spans(&self) -> Vec<Span> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let all = self
            .coref
            .iter()
            .flat_map(|c| std::iter::once(&c.pronoun).chain(&c.candidates))
            .chain(self.clusters.iter().flatten());
        for s in all {
            if seen.insert(*s) {
                out.push(*s);
            }
        }
        out.sort();
        out
    }

    /// Whether the question of `round` contains a referential pronoun.
    pub fn has_referential_question_pronoun(&self, round: usize) -> bool {
        self.question_pronouns(round)
            .any(CorefAnnotation::is_referential)
    }
}
