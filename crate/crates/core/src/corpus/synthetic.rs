//! Deterministic synthetic dialogs with gold coreference.
//!
//! Each dialog holds at most one entity per pronoun class (it / he / she /
//! they), so a referential pronoun always resolves to the most recent (and
//! only) entity of its class. The caption introduces one or two entities;
//! round 0 always introduces one more, so later pronouns can point at the
//! caption or at dialog history.
//!
//! A non-referential pronoun is either the weather "it" or a he / she /
//! they question about someone the text never mentions.
//!
//! Answers are typed by question (yes/no, color, location, object). The
//! ground truth is the only plain answer of the matching type among the
//! candidates; hedged answers of the same type ("maybe white") are partially
//! relevant in the dense annotation, everything else has relevance 0.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CorefAnnotation, CorefSource, Dialog, Round, Span, CAPTION};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub rounds: usize,
    pub n_candidates: usize,
    pub visual_tokens: usize,
    pub visual_dim: usize,
    /// Probability that a generated pronoun is referential.
    pub referential_rate: f64,
    /// Probability that a non-referential pronoun is a person or group
    /// pronoun ("is he smiling") about someone never mentioned in the text,
    /// rather than the weather "it". Needs a class with no entity yet.
    pub exophoric_rate: f64,
    /// Probability that a referential question pronoun points at a caption entity.
    pub caption_antecedent_rate: f64,
    /// Probability that a round after the first asks about an entity by pronoun.
    pub pronoun_question_rate: f64,
    /// Same-type hedged candidates per round.
    pub hedged_candidates: usize,
    /// Probability that the dense annotation gives the ground truth relevance 0.
    pub gt_dense_zero_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            rounds: 5,
            n_candidates: 10,
            visual_tokens: 4,
            visual_dim: 8,
            referential_rate: 0.75,
            exophoric_rate: 0.5,
            caption_antecedent_rate: 0.8,
            pronoun_question_rate: 0.6,
            hedged_candidates: 2,
            gt_dense_zero_rate: 0.1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let rate = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        rate("referential_rate", self.referential_rate)?;
        rate("exophoric_rate", self.exophoric_rate)?;
        rate("caption_antecedent_rate", self.caption_antecedent_rate)?;
        rate("pronoun_question_rate", self.pronoun_question_rate)?;
        rate("gt_dense_zero_rate", self.gt_dense_zero_rate)?;
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be positive".into()));
        }
        if self.n_candidates < 2 + self.hedged_candidates || self.n_candidates > 100 {
            return Err(Error::Config(format!(
                "n_candidates must lie in [{}, 100], got {}",
                2 + self.hedged_candidates,
                self.n_candidates
            )));
        }
        if self.visual_tokens == 0 || self.visual_dim == 0 {
            return Err(Error::Config(
                "visual_tokens and visual_dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Generator bookkeeping for one pronoun, for self-checks.
#[derive(Debug, Clone, PartialEq)]
pub struct PronounTrace {
    pub dialog: usize,
    pub span: Span,
    pub referential: bool,
    pub caption_entity: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Class {
    It,
    He,
    She,
    They,
}

const CLASSES: [Class; 4] = [Class::It, Class::He, Class::She, Class::They];

impl Class {
    fn nouns(self) -> &'static [&'static str] {
        match self {
            Class::It => &[
                "dog", "cat", "ball", "kite", "horse", "car", "bench", "bird", "frisbee",
                "umbrella",
            ],
            Class::He => &["man", "boy", "guy", "player"],
            Class::She => &["woman", "girl", "lady"],
            Class::They => &["people", "kids", "cows", "trees", "sheep"],
        }
    }

    fn subject(self) -> &'static str {
        match self {
            Class::It => "it",
            Class::He => "he",
            Class::She => "she",
            Class::They => "they",
        }
    }

    fn object(self) -> &'static str {
        match self {
            Class::It => "it",
            Class::He => "him",
            Class::She => "her",
            Class::They => "them",
        }
    }

    fn possessive(self) -> &'static str {
        match self {
            Class::It => "its",
            Class::He => "his",
            Class::She => "her",
            Class::They => "their",
        }
    }

    fn be(self) -> &'static str {
        if self == Class::They {
            "are"
        } else {
            "is"
        }
    }

    fn indefinite(self, noun: &str) -> &'static str {
        if self == Class::They {
            "some"
        } else if noun.starts_with(['a', 'e', 'i', 'o', 'u']) {
            "an"
        } else {
            "a"
        }
    }

    fn parts(self) -> &'static [&'static str] {
        match self {
            Class::It => &["collar", "tail", "top", "side"],
            Class::He | Class::She => &["shirt", "hair", "hat", "jacket"],
            Class::They => &["clothes", "shirts", "hats"],
        }
    }
}

const SCENES: [&str; 6] = ["grass", "street", "beach", "table", "snow", "park"];
const PREPS: [&str; 3] = ["on", "near", "by"];
const ADJECTIVES: [&str; 6] = ["big", "small", "happy", "old", "young", "moving"];
const WEATHER: [&str; 5] = ["sunny", "raining", "daytime", "cold", "indoors"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AnswerType {
    YesNo,
    Color,
    Location,
    Object,
}

const ANSWER_TYPES: [AnswerType; 4] = [
    AnswerType::YesNo,
    AnswerType::Color,
    AnswerType::Location,
    AnswerType::Object,
];

impl AnswerType {
    fn pool(self) -> Vec<String> {
        let words: &[&str] = match self {
            AnswerType::YesNo => &["yes", "no"],
            AnswerType::Color => &["white", "black", "brown", "red", "blue", "green", "gray"],
            AnswerType::Location => &[
                "on the left",
                "on the right",
                "in the middle",
                "in the back",
            ],
            AnswerType::Object => &[
                "a dog",
                "a cat",
                "a ball",
                "a man",
                "a woman",
                "some people",
                "a car",
                "a bird",
            ],
        };
        words.iter().map(|w| w.to_string()).collect()
    }
}

const HEDGES: [&str; 2] = ["maybe", "i think"];

#[derive(Debug, Clone)]
struct Entity {
    class: Class,
    noun: &'static str,
    noun_id: usize,
    in_caption: bool,
    mentions: Vec<Span>,
}

fn noun_id(class: Class, noun: &str) -> usize {
    let base: usize = CLASSES
        .iter()
        .take_while(|&&c| c != class)
        .map(|c| c.nouns().len())
        .sum();
    base + class
        .nouns()
        .iter()
        .position(|&n| n == noun)
        .expect("known noun")
}

fn keyed_vector(seed: u64, key: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ key);
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

struct DialogBuilder<'a> {
    cfg: &'a SyntheticConfig,
    rng: ChaCha8Rng,
    entities: Vec<Entity>,
    /// Every noun-phrase mention so far, in dialog order.
    noun_phrases: Vec<Span>,
    coref: Vec<CorefAnnotation>,
    trace: Vec<PronounTrace>,
    dialog_index: usize,
}

impl<'a> DialogBuilder<'a> {
    fn unused_classes(&self) -> Vec<Class> {
        CLASSES
            .iter()
            .copied()
            .filter(|c| self.entities.iter().all(|e| e.class != *c))
            .collect()
    }

    fn new_entity(&mut self, in_caption: bool) -> Option<usize> {
        let class = *self.unused_classes().choose(&mut self.rng)?;
        let noun = *class.nouns().choose(&mut self.rng).expect("non-empty");
        self.entities.push(Entity {
            class,
            noun,
            noun_id: noun_id(class, noun),
            in_caption,
            mentions: Vec::new(),
        });
        Some(self.entities.len() - 1)
    }

    fn np_mention(&mut self, entity: Option<usize>, span: Span) {
        self.noun_phrases.push(span);
        if let Some(e) = entity {
            self.entities[e].mentions.push(span);
        }
    }

    fn caption(&mut self) -> Vec<String> {
        let n = if self.rng.gen_bool(0.5) { 2 } else { 1 };
        let ids: Vec<usize> = (0..n).filter_map(|_| self.new_entity(true)).collect();
        let mut words: Vec<String> = Vec::new();
        for (k, &e) in ids.iter().enumerate() {
            if k > 0 {
                words.push("and".into());
            }
            let start = words.len();
            words.push(
                self.entities[e]
                    .class
                    .indefinite(self.entities[e].noun)
                    .into(),
            );
            words.push(self.entities[e].noun.into());
            self.np_mention(Some(e), Span::new(CAPTION, start, start + 1));
        }
        words.push((*PREPS.choose(&mut self.rng).expect("non-empty")).into());
        let start = words.len();
        words.push("the".into());
        words.push((*SCENES.choose(&mut self.rng).expect("non-empty")).into());
        self.np_mention(None, Span::new(CAPTION, start, start + 1));
        words
    }

    /// Question introducing a new entity; the noun phrase sits in the
    /// question or in the answer.
    fn intro_round(&mut self, round: i32) -> Option<(Vec<String>, Vec<String>, AnswerType)> {
        let e = self.new_entity(false)?;
        let (class, noun) = (self.entities[e].class, self.entities[e].noun);
        if self.rng.gen_bool(0.5) {
            let q: Vec<String> = format!(
                "is there {} {} in the picture",
                class.indefinite(noun),
                noun
            )
            .split(' ')
            .map(String::from)
            .collect();
            self.np_mention(Some(e), Span::new(round, 2, 3));
            Some((q, vec!["yes".into()], AnswerType::YesNo))
        } else {
            let q: Vec<String> = ["what", "else", "is", "there"].map(String::from).to_vec();
            let a = vec![class.indefinite(noun).to_string(), noun.to_string()];
            self.np_mention(Some(e), Span::new(round, q.len(), q.len() + 1));
            Some((q, a, AnswerType::Object))
        }
    }

    /// Question naming an existing entity by a definite noun phrase.
    fn repeat_round(&mut self, round: i32) -> (Vec<String>, Vec<String>, AnswerType) {
        let e = self.rng.gen_range(0..self.entities.len());
        let class = self.entities[e].class;
        let np = ["the", self.entities[e].noun];
        let (q, start, ty): (Vec<&str>, usize, AnswerType) = match self.rng.gen_range(0..3) {
            0 => (
                vec!["what", "color", class.be(), np[0], np[1]],
                3,
                AnswerType::Color,
            ),
            1 => {
                let adj = *ADJECTIVES.choose(&mut self.rng).expect("non-empty");
                (vec![class.be(), np[0], np[1], adj], 1, AnswerType::YesNo)
            }
            _ => (
                vec!["where", class.be(), np[0], np[1]],
                2,
                AnswerType::Location,
            ),
        };
        self.np_mention(Some(e), Span::new(round, start, start + 1));
        let answer = self.answer(ty);
        (q.into_iter().map(String::from).collect(), answer, ty)
    }

    fn answer(&mut self, ty: AnswerType) -> Vec<String> {
        let pool = ty.pool();
        let a = pool.choose(&mut self.rng).expect("non-empty");
        a.split(' ').map(String::from).collect()
    }

    /// Question with a `class` pronoun, the pronoun's position and the answer type.
    fn pronoun_question(&mut self, class: Class) -> (Vec<String>, usize, AnswerType) {
        let (words, pos, ty): (Vec<&str>, usize, AnswerType) = match self.rng.gen_range(0..5) {
            0 => (
                vec!["what", "color", class.be(), class.subject()],
                3,
                AnswerType::Color,
            ),
            1 => {
                let adj = *ADJECTIVES.choose(&mut self.rng).expect("non-empty");
                (vec![class.be(), class.subject(), adj], 1, AnswerType::YesNo)
            }
            2 => (
                vec!["where", class.be(), class.subject()],
                2,
                AnswerType::Location,
            ),
            3 => {
                let part = *class.parts().choose(&mut self.rng).expect("non-empty");
                (
                    vec!["what", "color", "is", class.possessive(), part],
                    3,
                    AnswerType::Color,
                )
            }
            _ => (
                vec!["is", "anyone", "near", class.object()],
                3,
                AnswerType::YesNo,
            ),
        };
        (words.into_iter().map(String::from).collect(), pos, ty)
    }

    fn pronoun_round(&mut self, round: i32) -> (Vec<String>, Vec<String>, AnswerType) {
        let referential = self.rng.gen_bool(self.cfg.referential_rate);
        let (q, pos, ty, referent): (Vec<String>, usize, AnswerType, Option<usize>) = if referential
        {
            let want_caption = self.rng.gen_bool(self.cfg.caption_antecedent_rate);
            let pool: Vec<usize> = (0..self.entities.len())
                .filter(|&i| self.entities[i].in_caption == want_caption)
                .collect();
            let pool = if pool.is_empty() {
                (0..self.entities.len()).collect()
            } else {
                pool
            };
            let e = *pool.choose(&mut self.rng).expect("entities exist");
            let (q, pos, ty) = self.pronoun_question(self.entities[e].class);
            (q, pos, ty, Some(e))
        } else {
            let unseen: Vec<Class> = self
                .unused_classes()
                .into_iter()
                .filter(|&c| c != Class::It)
                .collect();
            if !unseen.is_empty() && self.rng.gen_bool(self.cfg.exophoric_rate) {
                let class = *unseen.choose(&mut self.rng).expect("non-empty");
                let (q, pos, ty) = self.pronoun_question(class);
                (q, pos, ty, None)
            } else {
                let w = *WEATHER.choose(&mut self.rng).expect("non-empty");
                (
                    vec!["is".into(), "it".into(), w.into()],
                    1,
                    AnswerType::YesNo,
                    None,
                )
            }
        };
        let span = Span::new(round, pos, pos);
        let candidates: Vec<Span> = self.noun_phrases.clone();
        let antecedents: Vec<Span> = match referent {
            Some(e) => candidates
                .iter()
                .copied()
                .filter(|s| self.entities[e].mentions.contains(s))
                .collect(),
            None => Vec::new(),
        };
        if let Some(e) = referent {
            self.entities[e].mentions.push(span);
        }
        self.coref.push(CorefAnnotation {
            pronoun: span,
            candidates,
            antecedents,
            source: CorefSource::Gold,
        });
        self.trace.push(PronounTrace {
            dialog: self.dialog_index,
            span,
            referential,
            caption_entity: referent.is_some_and(|e| self.entities[e].in_caption),
        });
        let answer = self.answer(ty);
        (q, answer, ty)
    }

    /// Candidate list with the ground truth at a random slot, plus dense
    /// relevance.
    fn candidates(
        &mut self,
        gt: Vec<String>,
        ty: AnswerType,
    ) -> (Vec<Vec<String>>, usize, Vec<f64>) {
        let gt_text = gt.join(" ");
        let mut seen: HashSet<String> = HashSet::from([gt_text]);
        let mut out: Vec<(Vec<String>, f64)> = Vec::new();
        let hedge = |rng: &mut ChaCha8Rng, a: &str| {
            format!("{} {}", HEDGES.choose(rng).expect("non-empty"), a)
        };
        let same_pool = ty.pool();
        let mut guard = 0;
        while out.len() < self.cfg.hedged_candidates && guard < 100 {
            guard += 1;
            let base = same_pool.choose(&mut self.rng).expect("non-empty");
            let text = hedge(&mut self.rng, base);
            if seen.insert(text.clone()) {
                out.push((text.split(' ').map(String::from).collect(), 0.5));
            }
        }
        let others: Vec<AnswerType> = ANSWER_TYPES.iter().copied().filter(|&t| t != ty).collect();
        while out.len() < self.cfg.n_candidates - 1 {
            let t = *others.choose(&mut self.rng).expect("non-empty");
            let base = t.pool().choose(&mut self.rng).expect("non-empty").clone();
            let text = if self.rng.gen_bool(0.3) {
                hedge(&mut self.rng, &base)
            } else {
                base
            };
            if seen.insert(text.clone()) {
                out.push((text.split(' ').map(String::from).collect(), 0.0));
            }
        }
        out.shuffle(&mut self.rng);
        let gt_index = self.rng.gen_range(0..self.cfg.n_candidates);
        let gt_relevance = if self.rng.gen_bool(self.cfg.gt_dense_zero_rate) {
            0.0
        } else {
            1.0
        };
        out.insert(gt_index, (gt, gt_relevance));
        let (answers, dense) = out.into_iter().unzip();
        (answers, gt_index, dense)
    }
}

fn generate_one(index: usize, seed: u64, cfg: &SyntheticConfig) -> (Dialog, Vec<PronounTrace>) {
    let mut b = DialogBuilder {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0xd1b5_4a32_d192_ed03)),
        entities: Vec::new(),
        noun_phrases: Vec::new(),
        coref: Vec::new(),
        trace: Vec::new(),
        dialog_index: index,
    };
    let caption = b.caption();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for r in 0..cfg.rounds {
        let ri = r as i32;
        let (q, a, ty) = if r == 0 {
            b.intro_round(ri).unwrap_or_else(|| b.repeat_round(ri))
        } else if b.rng.gen_bool(cfg.pronoun_question_rate) {
            b.pronoun_round(ri)
        } else if b.rng.gen_bool(0.5) {
            b.intro_round(ri).unwrap_or_else(|| b.repeat_round(ri))
        } else {
            b.repeat_round(ri)
        };
        let (answers, gt_index, dense) = b.candidates(a, ty);
        rounds.push(Round {
            question: q,
            answers,
            gt_index: Some(gt_index),
            dense_scores: Some(dense),
        });
    }
    let m = cfg.visual_tokens;
    let mut visual: Vec<Vec<f64>> = b
        .entities
        .iter()
        .take(m)
        .map(|e| keyed_vector(seed, e.noun_id as u64, cfg.visual_dim))
        .collect();
    let mut slot = visual.len();
    while visual.len() < m {
        visual.push(keyed_vector(
            seed,
            1_000_000 + (index * 64 + slot) as u64,
            cfg.visual_dim,
        ));
        slot += 1;
    }
    let clusters = b
        .entities
        .iter()
        .filter(|e| e.mentions.len() >= 2)
        .map(|e| {
            let mut m = e.mentions.clone();
            m.sort();
            m
        })
        .collect();
    let dialog = Dialog {
        id: format!("syn-{seed}-{index:05}"),
        visual_features: visual,
        caption,
        rounds,
        coref: b.coref,
        clusters,
    };
    (dialog, b.trace)
}

pub fn generate_synthetic(
    n_dialogs: usize,
    seed: u64,
    cfg: &SyntheticConfig,
) -> Result<Vec<Dialog>> {
    Ok(generate_synthetic_traced(n_dialogs, seed, cfg)?.0)
}

/// Like [`generate_synthetic`], also returning the generator's record of
/// every pronoun it emitted.
pub fn generate_synthetic_traced(
    n_dialogs: usize,
    seed: u64,
    cfg: &SyntheticConfig,
) -> Result<(Vec<Dialog>, Vec<PronounTrace>)> {
    cfg.validate()?;
    let pairs: Vec<(Dialog, Vec<PronounTrace>)> = (0..n_dialogs)
        .into_par_iter()
        .map(|i| generate_one(i, seed, cfg))
        .collect();
    let mut dialogs = Vec::with_capacity(n_dialogs);
    let mut trace = Vec::new();
    for (d, t) in pairs {
        dialogs.push(d);
        trace.extend(t);
    }
    Ok((dialogs, trace))
}
