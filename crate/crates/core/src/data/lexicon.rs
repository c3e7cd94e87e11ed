//! Closed-vocabulary part-of-speech lexicon and concept parsing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::scene::{Action, Color, Shape};
use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pos {
    Noun,
    Adj,
    Verb,
    Adv,
    Det,
    Prep,
    Conj,
    Aux,
}

impl Pos {
    /// Content classes that may become concepts.
    pub const CONTENT: [Pos; 4] = [Pos::Noun, Pos::Adj, Pos::Verb, Pos::Adv];

    pub fn is_content(self) -> bool {
        Self::CONTENT.contains(&self)
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Pos::Noun => "noun",
            Pos::Adj => "adj",
            Pos::Verb => "verb",
            Pos::Adv => "adv",
            Pos::Det => "det",
            Pos::Prep => "prep",
            Pos::Conj => "conj",
            Pos::Aux => "aux",
        };
        f.write_str(s)
    }
}

impl FromStr for Pos {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "noun" => Pos::Noun,
            "adj" => Pos::Adj,
            "verb" => Pos::Verb,
            "adv" => Pos::Adv,
            other => return Err(DataError::Config(format!("unknown part of speech {other:?}"))),
        })
    }
}

/// Set of enabled concept classes, e.g. `noun+adj+verb+adv`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosSet(pub BTreeSet<Pos>);

impl PosSet {
    pub fn all() -> Self {
        Self(Pos::CONTENT.into_iter().collect())
    }

    pub fn of(classes: &[Pos]) -> Self {
        Self(classes.iter().copied().collect())
    }

    pub fn contains(&self, p: Pos) -> bool {
        self.0.contains(&p)
    }
}

impl Default for PosSet {
    fn default() -> Self {
        Self::all()
    }
}

impl fmt::Display for PosSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|p| p.to_string()).collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for PosSet {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let set = s
            .split(['+', ','])
            .filter(|p| !p.trim().is_empty())
            .map(Pos::from_str)
            .collect::<Result<BTreeSet<_>, _>>()?;
        if set.is_empty() {
            return Err(DataError::Config("empty part-of-speech set".into()));
        }
        Ok(Self(set))
    }
}

// Edit-operation verbs, grouped by the operation they express.
pub const ADD_VERBS: [&str; 4] = ["add", "insert", "place", "include"];
pub const REMOVE_VERBS: [&str; 4] = ["remove", "delete", "erase", "take"];
pub const CHANGE_VERBS: [&str; 4] = ["make", "turn", "change", "paint"];

const FUNCTION_WORDS: [(&str, Pos); 10] = [
    ("a", Pos::Det),
    ("an", Pos::Det),
    ("the", Pos::Det),
    ("one", Pos::Det),
    ("another", Pos::Det),
    ("to", Pos::Prep),
    ("out", Pos::Prep),
    ("and", Pos::Conj),
    ("is", Pos::Aux),
    ("that", Pos::Conj),
];

/// Word → part-of-speech map covering every word the generator emits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    tags: BTreeMap<String, Pos>,
}

impl Lexicon {
    pub fn from_entries<I: IntoIterator<Item = (String, Pos)>>(entries: I) -> Self {
        Self {
            tags: entries.into_iter().collect(),
        }
    }

    /// The generator's full closed vocabulary.
    pub fn standard() -> Self {
        let mut tags = BTreeMap::new();
        for s in Shape::ALL {
            tags.insert(s.word().to_string(), Pos::Noun);
        }
        for c in Color::ALL {
            tags.insert(c.word().to_string(), Pos::Adj);
        }
        for a in Action::ALL {
            tags.insert(a.verb().to_string(), a.verb_pos());
            if let Some(adv) = a.adverb() {
                tags.insert(adv.to_string(), Pos::Adv);
            }
        }
        for v in ADD_VERBS.iter().chain(&REMOVE_VERBS).chain(&CHANGE_VERBS) {
            tags.insert(v.to_string(), Pos::Verb);
        }
        for (w, p) in FUNCTION_WORDS {
            tags.insert(w.to_string(), p);
        }
        Self { tags }
    }

    pub fn tag(&self, word: &str) -> Option<Pos> {
        self.tags.get(word).copied()
    }

    pub fn words(&self) -> impl Iterator<Item = (&String, &Pos)> {
        self.tags.iter()
    }
}

/// Lowercases and splits on whitespace and ASCII punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Content words of `modifier` whose tag is enabled. Unknown words are
/// skipped with a warning; function words never become concepts.
pub fn parse_concepts(modifier: &str, lexicon: &Lexicon, enabled: &PosSet) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for w in tokenize(modifier) {
        match lexicon.tag(&w) {
            Some(p) if p.is_content() && enabled.contains(p) => {
                out.insert(w);
            }
            Some(_) => {}
            None => log::warn!("word {w:?} missing from lexicon; skipped"),
        }
    }
    out
}

/// Ordered concept label space built from training modifiers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptVocabulary {
    pub concepts: Vec<String>,
    pub tags: Vec<Pos>,
}

impl ConceptVocabulary {
    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn id(&self, concept: &str) -> Option<usize> {
        self.concepts.binary_search_by(|c| c.as_str().cmp(concept)).ok()
    }

    /// Multi-hot label over the vocabulary; concepts outside it are ignored.
    pub fn multi_hot<'a>(&self, concepts: impl IntoIterator<Item = &'a String>) -> Vec<f32> {
        let mut v = vec![0.0; self.len()];
        for c in concepts {
            if let Some(i) = self.id(c) {
                v[i] = 1.0;
            }
        }
        v
    }
}

/// Sorted union of parsed concepts over the training modifiers.
pub fn build_vocabulary<S: AsRef<str>>(
    training_modifiers: &[S],
    lexicon: &Lexicon,
    enabled: &PosSet,
) -> Result<ConceptVocabulary, DataError> {
    if training_modifiers.is_empty() {
        return Err(DataError::Empty("no training modifiers".into()));
    }
    let all: BTreeSet<String> = training_modifiers
        .iter()
        .flat_map(|m| parse_concepts(m.as_ref(), lexicon, enabled))
        .collect();
    if all.is_empty() {
        return Err(DataError::Empty("concept vocabulary is empty".into()));
    }
    let concepts: Vec<String> = all.into_iter().collect();
    let tags = concepts.iter().map(|c| lexicon.tag(c).expect("parsed words are tagged")).collect();
    Ok(ConceptVocabulary { concepts, tags })
}
