//! Model input layout:
//!
//! ```text
//! [IMG] v_1 .. v_M [CLS] <kept history, [SEP] after each utterance> Q_t A_t^(j) [SEP]
//! ```
//!
//! A history round contributes its question and ground-truth answer as one
//! utterance. Mention spans of every surviving utterance are re-based to
//! absolute positions.

use std::collections::{BTreeSet, HashMap};

use super::vocab::{Vocabulary, CLS, IMG, SEP};
use super::{Dialog, Span, CAPTION};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssemblyConfig {
    pub max_len: usize,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        Self { max_len: 256 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Segment {
    Visual = 0,
    History = 1,
    Target = 2,
}

pub const N_SEGMENTS: usize = 3;

/// History kept in front of the target round.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KeptRounds {
    pub caption: bool,
    pub rounds: BTreeSet<usize>,
}

impl KeptRounds {
    /// Caption plus every round before `target`.
    pub fn all_before(target: usize) -> Self {
        Self {
            caption: true,
            rounds: (0..target).collect(),
        }
    }

    pub fn none() -> Self {
        Self::default()
    }

    /// Round indices with the caption encoded as `-1`, ascending.
    pub fn as_indices(&self) -> Vec<i32> {
        let mut out = Vec::new();
        if self.caption {
            out.push(CAPTION);
        }
        out.extend(self.rounds.iter().map(|&r| r as i32));
        out
    }

    pub fn from_indices(indices: impl IntoIterator<Item = i32>) -> Self {
        let mut k = Self::none();
        for i in indices {
            if i == CAPTION {
                k.caption = true;
            } else if i >= 0 {
                k.rounds.insert(i as usize);
            }
        }
        k
    }

    pub fn is_subset(&self, other: &KeptRounds) -> bool {
        (!self.caption || other.caption) && self.rounds.is_subset(&other.rounds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledInput {
    pub dialog_id: String,
    /// Token id per position; visual positions carry `[IMG]`.
    pub tokens: Vec<usize>,
    pub segments: Vec<Segment>,
    /// Feature vectors for positions `1..=visual.len()`.
    pub visual: Vec<Vec<f64>>,
    pub cls_pos: usize,
    /// Absolute inclusive position range of every mention span that survived.
    pub mentions: HashMap<Span, (usize, usize)>,
    /// `(round, first position, length)` of each textual utterance, in order.
    pub layout: Vec<(i32, usize, usize)>,
    /// Surface string per textual position (empty for visual positions).
    pub surfaces: Vec<String>,
}

impl AssembledInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub const IMG_POS: usize = 0;

    pub fn positions(&self, span: &Span) -> Option<Vec<usize>> {
        self.mentions.get(span).map(|&(s, e)| (s..=e).collect())
    }

    /// Round order of the textual utterances, e.g. `[-1, 0, 1, 2]`.
    pub fn round_order(&self) -> Vec<i32> {
        self.layout.iter().map(|&(r, _, _)| r).collect()
    }
}

struct Builder<'a> {
    dialog: &'a Dialog,
    vocab: &'a Vocabulary,
    spans: Vec<Span>,
    out: AssembledInput,
}

impl<'a> Builder<'a> {
    fn new(dialog: &'a Dialog, vocab: &'a Vocabulary) -> Self {
        let m = dialog.visual_features.len();
        let mut tokens = vec![IMG; m + 1];
        tokens.push(CLS);
        let mut surfaces = vec![String::new(); m + 1];
        surfaces.push("[CLS]".into());
        Self {
            dialog,
            vocab,
            spans: dialog.mention_spans(),
            out: AssembledInput {
                dialog_id: dialog.id.clone(),
                tokens,
                segments: [vec![Segment::Visual; m + 1], vec![Segment::History]].concat(),
                visual: dialog.visual_features.clone(),
                cls_pos: m + 1,
                mentions: HashMap::new(),
                layout: Vec::new(),
                surfaces,
            },
        }
    }

    /// Appends `words` as the utterance of `round`; spans ending before
    /// `mapped_len` are re-based.
    fn utterance(&mut self, round: i32, words: &[&str], mapped_len: usize, seg: Segment) {
        let base = self.out.tokens.len();
        for w in words {
            self.out.tokens.push(self.vocab.id(w));
            self.out.surfaces.push((*w).to_string());
            self.out.segments.push(seg);
        }
        self.out.layout.push((round, base, words.len()));
        for s in self
            .spans
            .iter()
            .filter(|s| s.round == round && s.end < mapped_len)
        {
            self.out.mentions.insert(*s, (base + s.start, base + s.end));
        }
    }

    fn sep(&mut self, seg: Segment) {
        self.out.tokens.push(SEP);
        self.out.surfaces.push("[SEP]".into());
        self.out.segments.push(seg);
    }

    fn history_round(&mut self, round: i32) -> Result<()> {
        let words = self
            .dialog
            .utterance(round)
            .ok_or_else(|| Error::Validation {
                dialog: self.dialog.id.clone(),
                msg: format!("round {round} does not exist"),
            })?;
        let n = words.len();
        self.utterance(round, &words, n, Segment::History);
        self.sep(Segment::History);
        Ok(())
    }

    fn finish(self, cfg: &AssemblyConfig) -> Result<AssembledInput> {
        if self.out.tokens.len() > cfg.max_len {
            return Err(Error::SequenceTooLong {
                len: self.out.tokens.len(),
                max: cfg.max_len,
            });
        }
        Ok(self.out)
    }
}

/// Builds the input for scoring candidate `candidate` of round `target`
/// with the history in `kept`.
pub fn assemble_input(
    dialog: &Dialog,
    vocab: &Vocabulary,
    target: usize,
    candidate: usize,
    kept: &KeptRounds,
    cfg: &AssemblyConfig,
) -> Result<AssembledInput> {
    let round = dialog
        .rounds
        .get(target)
        .ok_or_else(|| invalid(format!("dialog {}: no round {target}", dialog.id)))?;
    let answer = round.answers.get(candidate).ok_or_else(|| {
        invalid(format!(
            "dialog {}: round {target} has no candidate {candidate}",
            dialog.id
        ))
    })?;
    if let Some(&r) = kept.rounds.iter().find(|&&r| r >= target) {
        return Err(invalid(format!(
            "kept round {r} is not before target round {target}"
        )));
    }
    let mut b = Builder::new(dialog, vocab);
    if kept.caption {
        b.history_round(CAPTION)?;
    }
    for &r in &kept.rounds {
        b.history_round(r as i32)?;
    }
    let mut words: Vec<&str> = round.question.iter().map(String::as_str).collect();
    words.extend(answer.iter().map(String::as_str));
    // answer-side spans only line up when the candidate is the ground truth
    let mapped = if round.gt_index == Some(candidate) {
        words.len()
    } else {
        round.question.len()
    };
    b.utterance(target as i32, &words, mapped, Segment::Target);
    b.sep(Segment::Target);
    b.finish(cfg)
}

/// Whole dialog (caption and every round with its ground-truth answer), no
/// candidate appended. Used for coreference training and head analysis.
pub fn assemble_dialog(
    dialog: &Dialog,
    vocab: &Vocabulary,
    cfg: &AssemblyConfig,
) -> Result<AssembledInput> {
    let mut b = Builder::new(dialog, vocab);
    b.history_round(CAPTION)?;
    for r in 0..dialog.rounds.len() {
        b.history_round(r as i32)?;
    }
    b.finish(cfg)
}
