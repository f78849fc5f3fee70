//! Text normalization shared by database matching, annotation checks and
//! metrics, plus the position-preserving normalization used for dictionary
//! alignment.

use std::collections::HashMap;

use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::value_map::ValueMapping;

/// ASCII punctuation plus the common general-punctuation, CJK and fullwidth blocks.
pub fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c, '¡' | '¿' | '«' | '»' | '·' | '§' | '¶')
        || ('\u{2010}'..='\u{2027}').contains(&c)
        || ('\u{2030}'..='\u{205E}').contains(&c)
        || ('\u{3001}'..='\u{3003}').contains(&c)
        || ('\u{3008}'..='\u{3011}').contains(&c)
        || ('\u{3014}'..='\u{301F}').contains(&c)
        || ('\u{FF01}'..='\u{FF0F}').contains(&c)
        || ('\u{FF1A}'..='\u{FF20}').contains(&c)
        || ('\u{FF3B}'..='\u{FF40}').contains(&c)
        || ('\u{FF5B}'..='\u{FF65}').contains(&c)
}

/// Casefold, trim whitespace and punctuation at both ends, collapse internal
/// whitespace to single spaces.
pub fn basic_normalize(text: &str) -> String {
    let lowered = text.to_lowercase();
    let trimmed = lowered.trim_matches(|c: char| c.is_whitespace() || is_punctuation(c));
    trimmed.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Entity normalizer: [`basic_normalize`] followed by a canonical-form lookup
/// derived from a value mapping.
///
/// Lookup chains are resolved when the index is built, so normalization is
/// idempotent even when one mapping's canonical form is another's surface.
#[derive(Debug, Clone, Default)]
pub struct Normalizer {
    canonical: HashMap<String, String>,
}

impl Normalizer {
    /// No canonical mapping; only [`basic_normalize`].
    pub fn plain() -> Self {
        Self::default()
    }

    pub fn from_value_mapping(vm: &ValueMapping) -> Self {
        let mut raw: HashMap<String, String> = HashMap::new();
        // source keys take precedence over candidate surfaces; first entry wins
        for (source, slots) in vm.entries() {
            for entry in slots.values() {
                raw.entry(basic_normalize(source))
                    .or_insert_with(|| basic_normalize(&entry.canonical));
            }
        }
        for slots in vm.entries().values() {
            for entry in slots.values() {
                let canon = basic_normalize(&entry.canonical);
                for cand in &entry.candidates {
                    raw.entry(basic_normalize(cand)).or_insert_with(|| canon.clone());
                }
            }
        }
        raw.retain(|k, v| !k.is_empty() && k != v);
        let canonical = raw
            .keys()
            .map(|k| (k.clone(), resolve_chain(k, |s| raw.get(s).cloned())))
            .collect();
        Self { canonical }
    }

    pub fn is_plain(&self) -> bool {
        self.canonical.is_empty()
    }

    pub fn normalize(&self, text: &str) -> String {
        let base = basic_normalize(text);
        match self.canonical.get(&base) {
            Some(c) => c.clone(),
            None => base,
        }
    }

    pub fn eq(&self, a: &str, b: &str) -> bool {
        self.normalize(a) == self.normalize(b)
    }
}

/// Follows `step` from `start` until a fixpoint or a cycle; a cycle resolves
/// to its lexicographically smallest member.
pub(crate) fn resolve_chain(start: &str, step: impl Fn(&str) -> Option<String>) -> String {
    let mut path = vec![start.to_string()];
    loop {
        let cur = path.last().expect("path is never empty");
        let Some(next) = step(cur) else {
            return cur.clone();
        };
        if &next == cur {
            return next;
        }
        if let Some(i) = path.iter().position(|p| p == &next) {
            return path[i..].iter().min().expect("cycle is non-empty").clone();
        }
        path.push(next);
    }
}

/// `normalize_entity` with a one-off normalizer.
pub fn normalize_entity(text: &str, vm: &ValueMapping) -> String {
    Normalizer::from_value_mapping(vm).normalize(text)
}

/// Options for locating candidate strings in running text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NormConfig {
    pub casefold: bool,
    pub collapse_whitespace: bool,
    pub fold_diacritics: bool,
    /// Require matches to start and end on Unicode word boundaries. Turn off
    /// for scripts written without spaces.
    pub word_boundaries: bool,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            casefold: true,
            collapse_whitespace: true,
            fold_diacritics: false,
            word_boundaries: true,
        }
    }
}

impl NormConfig {
    /// Settings for scripts without word separators (Chinese, Japanese).
    pub fn unspaced() -> Self {
        Self {
            word_boundaries: false,
            ..Self::default()
        }
    }
}

/// Normalized text with, for every normalized character, the original
/// character range it came from.
#[derive(Debug, Clone)]
pub struct MappedText {
    pub chars: Vec<char>,
    pub origin: Vec<(usize, usize)>,
}

impl MappedText {
    pub fn new(text: &str, cfg: &NormConfig) -> Self {
        let mut chars = Vec::new();
        let mut origin = Vec::new();
        let mut last_ws = false;
        for (i, c) in text.chars().enumerate() {
            if c.is_whitespace() && cfg.collapse_whitespace {
                if !last_ws {
                    chars.push(' ');
                    origin.push((i, i + 1));
                }
                last_ws = true;
                continue;
            }
            last_ws = false;
            let mut push = |ch: char| {
                if cfg.casefold {
                    for l in ch.to_lowercase() {
                        chars.push(l);
                        origin.push((i, i + 1));
                    }
                } else {
                    chars.push(ch);
                    origin.push((i, i + 1));
                }
            };
            if cfg.fold_diacritics {
                let mut any = false;
                for d in std::iter::once(c).nfd().filter(|d| !is_combining_mark(*d)) {
                    push(d);
                    any = true;
                }
                if !any {
                    push(c);
                }
            } else {
                push(c);
            }
        }
        Self { chars, origin }
    }

    pub fn as_string(&self) -> String {
        self.chars.iter().collect()
    }

    /// Original character range covered by normalized range `[start, end)`.
    pub fn original_range(&self, start: usize, end: usize) -> (usize, usize) {
        (self.origin[start].0, self.origin[end - 1].1)
    }
}

/// Normalizes a standalone needle (trimmed).
pub fn normalize_needle(text: &str, cfg: &NormConfig) -> Vec<char> {
    let mapped = MappedText::new(text.trim(), cfg);
    let s: String = mapped.as_string();
    s.trim().chars().collect()
}
