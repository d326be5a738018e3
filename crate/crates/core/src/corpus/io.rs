//! JSON-lines corpus files: one dialog object per line.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{tokenize, Vocabulary};
use super::{CorefAnnotation, CorefSource, Dialog, Round, Span};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct DialogRecord {
    id: String,
    visual_features: Vec<Vec<f64>>,
    caption: String,
    rounds: Vec<RoundRecord>,
    #[serde(default)]
    coref: Vec<CorefRecord>,
    #[serde(default)]
    clusters: Vec<Vec<[i64; 3]>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RoundRecord {
    question: String,
    answers: Vec<String>,
    gt_index: Option<usize>,
    dense_scores: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorefRecord {
    pronoun: [i64; 3],
    candidates: Vec<[i64; 3]>,
    antecedents: Vec<[i64; 3]>,
    source: CorefSource,
}

fn span_from(t: [i64; 3]) -> std::result::Result<Span, String> {
    let [r, s, e] = t;
    if r < -1 || s < 0 || e < 0 || r > i32::MAX as i64 {
        return Err(format!("invalid span {t:?}"));
    }
    Ok(Span::new(r as i32, s as usize, e as usize))
}

fn span_to(s: &Span) -> [i64; 3] {
    [s.round as i64, s.start as i64, s.end as i64]
}

fn join(tokens: &[String]) -> String {
    tokens.join(" ")
}

impl DialogRecord {
    fn into_dialog(self) -> std::result::Result<Dialog, String> {
        let spans = |v: Vec<[i64; 3]>| {
            v.into_iter()
                .map(span_from)
                .collect::<std::result::Result<Vec<_>, _>>()
        };
        let coref = self
            .coref
            .into_iter()
            .map(|c| {
                Ok(CorefAnnotation {
                    pronoun: span_from(c.pronoun)?,
                    candidates: spans(c.candidates)?,
                    antecedents: spans(c.antecedents)?,
                    source: c.source,
                })
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        let clusters = self
            .clusters
            .into_iter()
            .map(spans)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Dialog {
            id: self.id,
            visual_features: self.visual_features,
            caption: tokenize(&self.caption),
            rounds: self
                .rounds
                .into_iter()
                .map(|r| Round {
                    question: tokenize(&r.question),
                    answers: r.answers.iter().map(|a| tokenize(a)).collect(),
                    gt_index: r.gt_index,
                    dense_scores: r.dense_scores,
                })
                .collect(),
            coref,
            clusters,
        })
    }

    fn from_dialog(d: &Dialog) -> Self {
        Self {
            id: d.id.clone(),
            visual_features: d.visual_features.clone(),
            caption: join(&d.caption),
            rounds: d
                .rounds
                .iter()
                .map(|r| RoundRecord {
                    question: join(&r.question),
                    answers: r.answers.iter().map(|a| join(a)).collect(),
                    gt_index: r.gt_index,
                    dense_scores: r.dense_scores.clone(),
                })
                .collect(),
            coref: d
                .coref
                .iter()
                .map(|c| CorefRecord {
                    pronoun: span_to(&c.pronoun),
                    candidates: c.candidates.iter().map(span_to).collect(),
                    antecedents: c.antecedents.iter().map(span_to).collect(),
                    source: c.source,
                })
                .collect(),
            clusters: d
                .clusters
                .iter()
                .map(|c| c.iter().map(span_to).collect())
                .collect(),
        }
    }
}

pub fn dialog_from_json(line: &str) -> std::result::Result<Dialog, String> {
    let record: DialogRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    record.into_dialog()
}

pub fn dialog_to_json(dialog: &Dialog) -> String {
    serde_json::to_string(&DialogRecord::from_dialog(dialog))
        .expect("dialog records always serialize")
}

/// Vocabulary over captions, questions and every candidate answer, in
/// corpus order.
pub fn build_vocab(dialogs: &[Dialog]) -> Vocabulary {
    let mut v = Vocabulary::new();
    for d in dialogs {
        for t in &d.caption {
            v.add(t);
        }
        for r in &d.rounds {
            for t in r.question.iter().chain(r.answers.iter().flatten()) {
                v.add(t);
            }
        }
    }
    v
}

/// Parses corpus text. `path` is used only for error messages.
pub fn parse_corpus(
    text: &str,
    path: &Path,
    vocab: Option<Vocabulary>,
) -> Result<(Vec<Dialog>, Vocabulary)> {
    let mut dialogs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let dialog = dialog_from_json(line).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?;
        dialog.validate()?;
        dialogs.push(dialog);
    }
    let vocab = vocab.unwrap_or_else(|| build_vocab(&dialogs));
    Ok((dialogs, vocab))
}

pub fn load_corpus(path: &Path, vocab: Option<Vocabulary>) -> Result<(Vec<Dialog>, Vocabulary)> {
    let text = fs::read_to_string(path)?;
    parse_corpus(&text, path, vocab)
}

pub fn serialize_corpus(dialogs: &[Dialog]) -> String {
    dialogs.iter().map(|d| dialog_to_json(d) + "\n").collect()
}

pub fn save_corpus(path: &Path, dialogs: &[Dialog]) -> Result<()> {
    crate::numerics::write_atomic(path, serialize_corpus(dialogs).as_bytes())
}
