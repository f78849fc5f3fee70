//! Locating translated entities in target-language sentences.
//!
//! Dictionary alignment scans the translation for any pre-generated candidate
//! translation of an entity. Neural alignment reads a cross-attention matrix:
//! every target token is assigned to its highest-weighted source token, and
//! the entity's translation is the character hull of the target tokens
//! assigned to the entity's source tokens. Hybrid alignment tries the
//! dictionary first and falls back to attention.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_segmentation::UnicodeSegmentation;

use crate::exec::Execution;
use crate::model::{char_slice, Dataset, EntitySpan, Side, SlotTriplet, Turn};
use crate::norm::{is_punctuation, normalize_needle, MappedText, NormConfig};
use crate::value_map::{canonicalize_value, SlotRef, ValueMapping};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlignError {
    #[error("no candidate occurs in the target text")]
    NoMatch,
    #[error("no target token aligns to the source span")]
    NoAlignment,
    #[error("invalid attention matrix: {0}")]
    InvalidMatrix(String),
    #[error("source span covers no token")]
    EmptySourceSpan,
    #[error("alignment failed (dictionary: {dictionary}; neural: {neural})")]
    AlignmentFailed { dictionary: String, neural: String },
    #[error("zero vector at {side} index {index}")]
    ZeroVector { side: &'static str, index: usize },
    #[error("vector dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("alignment index out of range: ({0}, {1})")]
    IndexOutOfRange(usize, usize),
    #[error("unmapped value {domain}.{slot} = {value:?}")]
    UnmappedValue {
        domain: String,
        slot: String,
        value: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    /// Character offsets into the owning text.
    pub start: usize,
    pub end: usize,
}

/// Splits on whitespace, recording character offsets.
pub fn whitespace_tokens(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.chars().chain(std::iter::once(' ')).enumerate() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push(Token {
                    text: text.chars().skip(s).take(i - s).collect(),
                    start: s,
                    end: i,
                });
                start = None;
            }
            _ => {}
        }
    }
    out
}

/// A pre-aggregated cross-attention matrix, `weights[target][source]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMatrix {
    pub src_text: String,
    pub tgt_text: String,
    pub src_tokens: Vec<Token>,
    pub tgt_tokens: Vec<Token>,
    pub weights: Vec<Vec<f64>>,
}

pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

fn check_tokens(tokens: &[Token], text: &str, what: &str) -> Result<(), AlignError> {
    let len = text.chars().count();
    let mut prev_end = 0;
    for (i, t) in tokens.iter().enumerate() {
        if t.start >= t.end || t.end > len || (i > 0 && t.start < prev_end) {
            return Err(AlignError::InvalidMatrix(format!(
                "{what} token {i} has offsets [{}, {}) (previous end {prev_end}, text length {len})",
                t.start, t.end
            )));
        }
        prev_end = t.end;
    }
    Ok(())
}

impl AttentionMatrix {
    pub fn validate(&self) -> Result<(), AlignError> {
        check_tokens(&self.src_tokens, &self.src_text, "source")?;
        check_tokens(&self.tgt_tokens, &self.tgt_text, "target")?;
        if self.weights.len() != self.tgt_tokens.len() {
            return Err(AlignError::InvalidMatrix(format!(
                "{} rows for {} target tokens",
                self.weights.len(),
                self.tgt_tokens.len()
            )));
        }
        for (r, row) in self.weights.iter().enumerate() {
            if row.len() != self.src_tokens.len() {
                return Err(AlignError::InvalidMatrix(format!(
                    "row {r} has {} columns for {} source tokens",
                    row.len(),
                    self.src_tokens.len()
                )));
            }
            if row.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(AlignError::InvalidMatrix(format!(
                    "row {r} has a negative or non-finite weight"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(AlignError::InvalidMatrix(format!("row {r} sums to {sum}")));
            }
        }
        Ok(())
    }

    /// Source token with the largest weight for each target token; ties go to
    /// the lowest index.
    pub fn argmax_sources(&self) -> Vec<usize> {
        self.weights
            .iter()
            .map(|row| {
                let mut best = 0;
                for (j, w) in row.iter().enumerate() {
                    if *w > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Source tokens overlapping the character range `[start, end)`.
    pub fn source_tokens_in(&self, span: (usize, usize)) -> Vec<usize> {
        self.src_tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.start < span.1 && t.end > span.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Up to K candidate translations of one entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub entity: String,
    pub candidates: Vec<String>,
}

impl CandidateSet {
    /// Drops empty and repeated candidates and keeps at most `budget`.
    pub fn new(entity: impl Into<String>, candidates: impl IntoIterator<Item = String>, budget: usize) -> Self {
        let mut out: Vec<String> = Vec::new();
        for c in candidates {
            let c = c.trim().to_string();
            if !c.is_empty() && !out.contains(&c) {
                out.push(c);
            }
            if out.len() == budget {
                break;
            }
        }
        Self {
            entity: entity.into(),
            candidates: out,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Dictionary,
    Neural,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedEntity {
    pub source_value: String,
    /// Character offsets into the target sentence.
    pub target_span: (usize, usize),
    pub target_text: String,
    pub provenance: Provenance,
}

fn word_boundaries(chars: &[char]) -> HashSet<usize> {
    let s: String = chars.iter().collect();
    let mut byte_to_char = vec![0usize; s.len() + 1];
    for (ci, (bi, _)) in s.char_indices().enumerate() {
        byte_to_char[bi] = ci;
    }
    byte_to_char[s.len()] = chars.len();
    let mut out: HashSet<usize> = s.split_word_bound_indices().map(|(b, _)| byte_to_char[b]).collect();
    out.insert(chars.len());
    out
}

/// Longest candidate occurring in `target_text` (earliest on ties), with the
/// span in the original text's character coordinates.
pub fn dictionary_align(cs: &CandidateSet, target_text: &str, norm: &NormConfig) -> Result<AlignedEntity, AlignError> {
    let text = MappedText::new(target_text, norm);
    let bounds = norm.word_boundaries.then(|| word_boundaries(&text.chars));
    let mut best: Option<(usize, usize)> = None; // (len, start)
    for cand in &cs.candidates {
        let needle = normalize_needle(cand, norm);
        let n = needle.len();
        if n == 0 || n > text.chars.len() {
            continue;
        }
        for start in 0..=text.chars.len() - n {
            if text.chars[start..start + n] != needle[..] {
                continue;
            }
            if let Some(b) = &bounds {
                if !b.contains(&start) || !b.contains(&(start + n)) {
                    continue;
                }
            }
            let better = match best {
                None => true,
                Some((bl, bs)) => n > bl || (n == bl && start < bs),
            };
            if better {
                best = Some((n, start));
            }
            break;
        }
    }
    let (n, start) = best.ok_or(AlignError::NoMatch)?;
    let (s, e) = text.original_range(start, start + n);
    Ok(AlignedEntity {
        source_value: cs.entity.clone(),
        target_span: (s, e),
        target_text: char_slice(target_text, s, e).expect("range inside text").to_string(),
        provenance: Provenance::Dictionary,
    })
}

fn is_trimmable(c: char) -> bool {
    c.is_whitespace() || is_punctuation(c)
}

pub fn neural_align(am: &AttentionMatrix, src_span: (usize, usize)) -> Result<AlignedEntity, AlignError> {
    am.validate()?;
    let selected = am.source_tokens_in(src_span);
    if selected.is_empty() {
        return Err(AlignError::EmptySourceSpan);
    }
    let assigned: Vec<usize> = am
        .argmax_sources()
        .into_iter()
        .enumerate()
        .filter(|(_, src)| selected.contains(src))
        .map(|(t, _)| t)
        .collect();
    let (Some(&first), Some(&last)) = (assigned.first(), assigned.last()) else {
        return Err(AlignError::NoAlignment);
    };
    let chars: Vec<char> = am.tgt_text.chars().collect();
    let mut s = am.tgt_tokens[first].start;
    let mut e = am.tgt_tokens[last].end;
    while s < e && is_trimmable(chars[s]) {
        s += 1;
    }
    while e > s && is_trimmable(chars[e - 1]) {
        e -= 1;
    }
    if s == e {
        return Err(AlignError::NoAlignment);
    }
    Ok(AlignedEntity {
        source_value: char_slice(&am.src_text, src_span.0, src_span.1)
            .map(str::to_string)
            .unwrap_or_default(),
        target_span: (s, e),
        target_text: chars[s..e].iter().collect(),
        provenance: Provenance::Neural,
    })
}

/// Dictionary first; attention when the dictionary finds nothing.
pub fn hybrid_align(
    cs: Option<&CandidateSet>,
    am: Option<&AttentionMatrix>,
    src_span: Option<(usize, usize)>,
    target_text: &str,
    norm: &NormConfig,
) -> Result<AlignedEntity, AlignError> {
    let dictionary = match cs {
        Some(cs) => match dictionary_align(cs, target_text, norm) {
            Ok(a) => return Ok(a),
            Err(e) => e.to_string(),
        },
        None => "no candidates".to_string(),
    };
    let neural = match (am, src_span) {
        (Some(am), Some(span)) => match neural_align(am, span) {
            Ok(mut a) => {
                if let Some(cs) = cs {
                    a.source_value = cs.entity.clone();
                }
                return Ok(a);
            }
            Err(e) => e.to_string(),
        },
        (None, _) => "no attention matrix".to_string(),
        (Some(_), None) => "no source span".to_string(),
    };
    Err(AlignError::AlignmentFailed { dictionary, neural })
}

/// Sorted unique `(source word, target word)` index pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordAlignment {
    pub pairs: Vec<(usize, usize)>,
}

impl WordAlignment {
    pub fn new(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let set: BTreeSet<(usize, usize)> = pairs.into_iter().collect();
        Self {
            pairs: set.into_iter().collect(),
        }
    }

    pub fn transposed(&self) -> Self {
        Self::new(self.pairs.iter().map(|&(a, b)| (b, a)))
    }
}

fn norms(vecs: &[Vec<f64>], side: &'static str, dim: usize) -> Result<Vec<f64>, AlignError> {
    vecs.iter()
        .enumerate()
        .map(|(i, v)| {
            if v.len() != dim {
                return Err(AlignError::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                Err(AlignError::ZeroVector { side, index: i })
            } else {
                Ok(n)
            }
        })
        .collect()
}

fn argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Mutual-argmax alignment over cosine similarities.
pub fn align_by_embeddings(src: &[Vec<f64>], tgt: &[Vec<f64>]) -> Result<WordAlignment, AlignError> {
    let dim = src.first().or(tgt.first()).map(Vec::len).unwrap_or(0);
    let src_norms = norms(src, "source", dim)?;
    let tgt_norms = norms(tgt, "target", dim)?;
    let sim: Vec<Vec<f64>> = src
        .iter()
        .zip(&src_norms)
        .map(|(s, sn)| {
            tgt.iter()
                .zip(&tgt_norms)
                .map(|(t, tn)| s.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / (sn * tn))
                .collect()
        })
        .collect();
    let mut pairs = Vec::new();
    for (i, row) in sim.iter().enumerate() {
        let Some(j) = argmax(row.iter().copied()) else {
            continue;
        };
        if argmax(sim.iter().map(|r| r[j])) == Some(i) {
            pairs.push((i, j));
        }
    }
    Ok(WordAlignment::new(pairs))
}

/// Which aligned words are replaced.
pub struct SubstitutionPolicy<'a> {
    /// Fraction of eligible aligned pairs to substitute, clamped to [0, 1].
    pub ratio: f64,
    pub seed: u64,
    /// `(matrix index, embedded index) -> eligible`; all pairs when `None`.
    pub eligible: Option<&'a (dyn Fn(usize, usize) -> bool + Sync)>,
}

/// Replaces a seeded selection of aligned matrix-language words with their
/// embedded-language counterparts.
pub fn codemix_substitute(
    matrix: &[&str],
    embedded: &[&str],
    wa: &WordAlignment,
    policy: &SubstitutionPolicy<'_>,
) -> Result<String, AlignError> {
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for &(m, e) in &wa.pairs {
        if m >= matrix.len() || e >= embedded.len() {
            return Err(AlignError::IndexOutOfRange(m, e));
        }
        if policy.eligible.is_some_and(|f| !f(m, e)) {
            continue;
        }
        if seen.insert(m) {
            pairs.push((m, e));
        }
    }
    let ratio = policy.ratio.clamp(0.0, 1.0);
    let k = (ratio * pairs.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut chosen: Vec<usize> = sample(&mut rng, pairs.len(), k).into_vec();
    chosen.sort_unstable();
    let mut out: Vec<&str> = matrix.to_vec();
    for c in chosen {
        let (m, e) = pairs[c];
        out[m] = embedded[e];
    }
    Ok(out.join(" "))
}

/// Target-language utterances of one turn with the entity alignments found in each.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslatedTurn {
    pub user_utterance: String,
    pub agent_utterance: String,
    pub user_alignments: Vec<AlignedEntity>,
    pub agent_alignments: Vec<AlignedEntity>,
}

impl TranslatedTurn {
    fn alignments(&self, side: Side) -> &[AlignedEntity] {
        match side {
            Side::User => &self.user_alignments,
            Side::Agent => &self.agent_alignments,
        }
    }

    fn utterance(&self, side: Side) -> &str {
        match side {
            Side::User => &self.user_utterance,
            Side::Agent => &self.agent_utterance,
        }
    }
}

fn translate_value(
    domain: &str,
    slot: &str,
    value: &str,
    target: &TranslatedTurn,
    vm: &ValueMapping,
) -> Result<String, AlignError> {
    if vm.get(value, &SlotRef::new(domain, slot)).is_some() {
        return Ok(canonicalize_value(domain, slot, value, vm));
    }
    target
        .user_alignments
        .iter()
        .chain(&target.agent_alignments)
        .find(|a| a.source_value == value)
        .map(|a| a.target_text.clone())
        .ok_or_else(|| AlignError::UnmappedValue {
            domain: domain.to_string(),
            slot: slot.to_string(),
            value: value.to_string(),
        })
}

/// Rewrites a source-language turn into the target language: annotation
/// values through the value mapping (or their alignment when unmapped), and
/// spans onto the aligned target surface forms.
pub fn project_annotations(
    turn: &Turn,
    target: &TranslatedTurn,
    vm: &ValueMapping,
    norm: &NormConfig,
) -> Result<Turn, AlignError> {
    let tr = |t: &SlotTriplet| -> Result<SlotTriplet, AlignError> {
        Ok(SlotTriplet {
            value: translate_value(&t.domain, &t.slot, &t.value, target, vm)?,
            ..t.clone()
        })
    };
    let mut out = turn.clone();
    out.user_utterance = target.user_utterance.clone();
    out.agent_utterance = target.agent_utterance.clone();
    out.belief_state.triplets = turn.belief_state.triplets.iter().map(tr).collect::<Result<_, _>>()?;
    if let Some(call) = &mut out.api_call {
        call.constraints = call.constraints.iter().map(tr).collect::<Result<_, _>>()?;
    }
    for item in &mut out.agent_acts.items {
        if let (Some(slot), Some(value)) = (&item.slot, &item.value) {
            item.value = Some(translate_value(&item.domain, slot, value, target, vm)?);
        }
    }
    let mut spans = Vec::with_capacity(turn.spans.len());
    for span in &turn.spans {
        let text = target.utterance(span.side);
        let aligned = target
            .alignments(span.side)
            .iter()
            .find(|a| a.source_value == span.value);
        let (s, e) = match aligned {
            Some(a) => a.target_span,
            None => {
                // fall back to scanning for the mapped surface forms
                let forms = vm.surface_forms(&span.value, &SlotRef::new(&span.domain, &span.slot));
                let cs = CandidateSet::new(&span.value, forms.into_iter().skip(1), usize::MAX);
                dictionary_align(&cs, text, norm)
                    .map_err(|_| AlignError::UnmappedValue {
                        domain: span.domain.clone(),
                        slot: span.slot.clone(),
                        value: span.value.clone(),
                    })?
                    .target_span
            }
        };
        let value = char_slice(text, s, e)
            .ok_or_else(|| AlignError::InvalidMatrix(format!("alignment span [{s}, {e}) outside target text")))?
            .to_string();
        let projected = EntitySpan {
            value,
            start_char: s,
            end_char: e,
            ..span.clone()
        };
        debug_assert!(projected.matches(text));
        spans.push(projected);
    }
    out.spans = spans;
    Ok(out)
}

/// Candidate translations keyed by source value.
pub type CandidateTable = BTreeMap<String, Vec<String>>;

/// An attention matrix for one side of one turn, with the character span of
/// each source value in the matrix's source text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionEntry {
    pub dialogue_id: String,
    pub turn_id: u32,
    pub side: Side,
    pub matrix: AttentionMatrix,
    #[serde(default)]
    pub source_spans: BTreeMap<String, (usize, usize)>,
}

/// Everything alignment can draw on for a dataset.
#[derive(Debug, Clone, Default)]
pub struct AlignmentSources {
    pub candidates: CandidateTable,
    attention: HashMap<(String, u32, Side), AttentionEntry>,
    /// Candidates considered per entity.
    pub budget: usize,
}

pub const DEFAULT_CANDIDATE_BUDGET: usize = 8;

impl AlignmentSources {
    pub fn new(candidates: CandidateTable, attention: Vec<AttentionEntry>) -> Self {
        Self {
            candidates,
            attention: attention
                .into_iter()
                .map(|e| ((e.dialogue_id.clone(), e.turn_id, e.side), e))
                .collect(),
            budget: DEFAULT_CANDIDATE_BUDGET,
        }
    }

    pub fn attention(&self, dialogue_id: &str, turn_id: u32, side: Side) -> Option<&AttentionEntry> {
        self.attention.get(&(dialogue_id.to_string(), turn_id, side))
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty() && self.attention.is_empty()
    }
}

/// Result of aligning one annotation value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignOutcome {
    pub dialogue_id: String,
    pub turn_id: u32,
    pub side: Side,
    pub domain: String,
    pub slot: String,
    pub value: String,
    pub aligned: Option<AlignedEntity>,
    pub error: Option<String>,
}

/// Hybrid alignment of every value the turn's spans must cover, against the
/// turn's current utterances. Attention is ignored when its target text no
/// longer matches the utterance.
pub fn align_turn(
    dialogue_id: &str,
    turn: &Turn,
    prev: Option<&Turn>,
    sources: &AlignmentSources,
    norm: &NormConfig,
) -> Vec<AlignOutcome> {
    let expected = crate::check::expected_entities(turn, crate::check::PriorContext::from_previous(prev));
    expected
        .into_iter()
        .map(|e| {
            let text = turn.utterance(e.side);
            let cs = sources
                .candidates
                .get(&e.value)
                .map(|c| CandidateSet::new(&e.value, c.iter().cloned(), sources.budget));
            let att = sources
                .attention(dialogue_id, turn.turn_id, e.side)
                .filter(|a| a.matrix.tgt_text == text);
            let span = att.and_then(|a| a.source_spans.get(&e.value).copied());
            let result = hybrid_align(cs.as_ref(), att.map(|a| &a.matrix), span, text, norm);
            let (aligned, error) = match result {
                Ok(mut a) => {
                    a.source_value = e.value.clone();
                    (Some(a), None)
                }
                Err(err) => (None, Some(err.to_string())),
            };
            AlignOutcome {
                dialogue_id: dialogue_id.to_string(),
                turn_id: turn.turn_id,
                side: e.side,
                domain: e.key.domain,
                slot: e.key.slot,
                value: e.value,
                aligned,
                error,
            }
        })
        .collect()
}

/// [`align_turn`] over every turn, in dataset order.
pub fn align_dataset(
    ds: &Dataset,
    sources: &AlignmentSources,
    norm: &NormConfig,
    exec: Execution,
) -> Vec<AlignOutcome> {
    let units: Vec<(&str, &Turn, Option<&Turn>)> = ds
        .dialogues
        .iter()
        .flat_map(|d| {
            d.turns
                .iter()
                .enumerate()
                .map(move |(i, t)| (d.dialogue_id.as_str(), t, i.checked_sub(1).map(|p| &d.turns[p])))
        })
        .collect();
    crate::exec::map(exec, &units, |(d, t, p)| align_turn(d, t, *p, sources, norm))
        .into_iter()
        .flatten()
        .collect()
}
