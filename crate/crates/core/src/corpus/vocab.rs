use std::collections::HashMap;

pub const IMG: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const PAD: usize = 4;
pub const UNK: usize = 5;

/// Structural special tokens (`[IMG]`, `[CLS]`, `[SEP]`, `[MASK]`, `[PAD]`).
pub const N_SPECIAL: usize = 5;
/// Special tokens plus `[UNK]`; the first corpus word gets this id.
pub const N_RESERVED: usize = 6;

const RESERVED: [&str; N_RESERVED] = ["[IMG]", "[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub id: usize,
    pub surface: String,
}

/// Whitespace split plus lowercasing.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Closed vocabulary. Ids are assigned in first-seen order after the
/// reserved entries, so identical input order gives identical ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    surfaces: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let surfaces: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let ids = surfaces
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self { surfaces, ids }
    }

    pub fn from_surfaces(words: impl IntoIterator<Item = String>) -> Self {
        let mut v = Self::new();
        for w in words {
            v.add(&w);
        }
        v
    }

    pub fn add(&mut self, surface: &str) -> usize {
        if let Some(&id) = self.ids.get(surface) {
            return id;
        }
        let id = self.surfaces.len();
        self.surfaces.push(surface.to_string());
        self.ids.insert(surface.to_string(), id);
        id
    }

    pub fn id(&self, surface: &str) -> usize {
        self.ids.get(surface).copied().unwrap_or(UNK)
    }

    pub fn surface(&self, id: usize) -> &str {
        self.surfaces.get(id).map_or("[UNK]", String::as_str)
    }

    pub fn token(&self, surface: &str) -> Token {
        Token {
            id: self.id(surface),
            surface: surface.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Corpus words (everything after the reserved ids), in id order.
    pub fn words(&self) -> &[String] {
        &self.surfaces[N_RESERVED..]
    }

    pub fn to_lines(&self) -> String {
        self.words().iter().map(|w| format!("{w}\n")).collect()
    }

    pub fn from_lines(text: &str) -> Self {
        Self::from_surfaces(text.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }
}
