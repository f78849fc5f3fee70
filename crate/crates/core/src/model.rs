//! The dataset representation: dialogues, turns and their annotations, plus
//! the JSON on-disk format and its validation.
//!
//! One [`Turn`] is a full user→agent exchange. Entity spans are indexed by
//! Unicode scalar values (characters), never by bytes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The default relation for belief-state triplets and constraints.
pub const EQUAL_TO: &str = "equal_to";
/// The complement relation supported by the database engine.
pub const NOT_EQUAL_TO: &str = "not_equal_to";

/// One database or API result row: slot name → value, ordered by slot name.
pub type Record = BTreeMap<String, String>;

/// `(domain, slot, relation)`: the identity of a slot annotation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotKey {
    pub domain: String,
    pub slot: String,
    pub relation: String,
}

impl SlotKey {
    pub fn new(domain: impl Into<String>, slot: impl Into<String>, relation: impl Into<String>) -> Self {
        Self {
            domain: domain.into(),
            slot: slot.into(),
            relation: relation.into(),
        }
    }
}

impl fmt::Display for SlotKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.domain, self.slot, self.relation)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotTriplet {
    pub domain: String,
    pub slot: String,
    pub relation: String,
    pub value: String,
}

impl SlotTriplet {
    /// A triplet with the default `equal_to` relation.
    pub fn new(domain: impl Into<String>, slot: impl Into<String>, value: impl Into<String>) -> Self {
        Self::with_relation(domain, slot, EQUAL_TO, value)
    }

    pub fn with_relation(
        domain: impl Into<String>,
        slot: impl Into<String>,
        relation: impl Into<String>,
        value: impl Into<String>,
    ) -> Self {
        Self {
            domain: domain.into(),
            slot: slot.into(),
            relation: relation.into(),
            value: value.into(),
        }
    }

    pub fn key(&self) -> SlotKey {
        SlotKey::new(&self.domain, &self.slot, &self.relation)
    }
}

/// The accumulated user constraints, in annotation order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BeliefState {
    pub triplets: Vec<SlotTriplet>,
}

impl BeliefState {
    pub fn new(triplets: Vec<SlotTriplet>) -> Self {
        Self { triplets }
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn get(&self, key: &SlotKey) -> Option<&SlotTriplet> {
        self.triplets
            .iter()
            .find(|t| t.domain == key.domain && t.slot == key.slot && t.relation == key.relation)
    }

    /// First key that occurs twice, if any.
    pub fn duplicate_key(&self) -> Option<SlotKey> {
        let mut seen = HashSet::new();
        self.triplets
            .iter()
            .map(SlotTriplet::key)
            .find(|k| !seen.insert(k.clone()))
    }

    /// Domains in order of first appearance.
    pub fn domains(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for t in &self.triplets {
            if !out.contains(&t.domain.as_str()) {
                out.push(&t.domain);
            }
        }
        out
    }

    /// Triplets of `self` that are absent from `prev` or carry a different value there.
    pub fn delta_from<'a>(&'a self, prev: &BeliefState) -> Vec<&'a SlotTriplet> {
        self.triplets
            .iter()
            .filter(|t| prev.get(&t.key()).is_none_or(|p| p.value != t.value))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActItem {
    pub domain: String,
    pub act: String,
    pub slot: Option<String>,
    pub relation: Option<String>,
    pub value: Option<String>,
}

impl ActItem {
    /// An act without slot or value, e.g. `general`.
    pub fn bare(domain: impl Into<String>, act: impl Into<String>) -> Self {
        Self {
            domain: domain.into(),
            act: act.into(),
            slot: None,
            relation: None,
            value: None,
        }
    }

    pub fn with_value(
        domain: impl Into<String>,
        act: impl Into<String>,
        slot: impl Into<String>,
        value: impl Into<String>,
    ) -> Self {
        Self {
            domain: domain.into(),
            act: act.into(),
            slot: Some(slot.into()),
            relation: Some(EQUAL_TO.to_string()),
            value: Some(value.into()),
        }
    }

    /// Relation with the implicit default applied when a value is present.
    pub fn effective_relation(&self) -> Option<&str> {
        match (&self.relation, &self.value) {
            (Some(r), _) => Some(r),
            (None, Some(_)) => Some(EQUAL_TO),
            (None, None) => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActSeq {
    pub items: Vec<ActItem>,
}

impl ActSeq {
    pub fn new(items: Vec<ActItem>) -> Self {
        Self { items }
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn domains(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for a in &self.items {
            if !out.contains(&a.domain.as_str()) {
                out.push(&a.domain);
            }
        }
        out
    }

    /// Values carried by the acts, in order, with their domain.
    pub fn values(&self) -> impl Iterator<Item = (&ActItem, &str)> {
        self.items.iter().filter_map(|a| a.value.as_deref().map(|v| (a, v)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ApiCall {
    pub domain: String,
    pub constraints: Vec<SlotTriplet>,
}

impl ApiCall {
    pub fn new(domain: impl Into<String>, constraints: Vec<SlotTriplet>) -> Self {
        Self {
            domain: domain.into(),
            constraints,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    User,
    Agent,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::User => "user",
            Side::Agent => "agent",
        })
    }
}

/// A highlighted surface form of an annotation value inside an utterance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub domain: String,
    pub slot: String,
    pub relation: String,
    pub value: String,
    pub start_char: usize,
    pub end_char: usize,
    pub side: Side,
}

impl EntitySpan {
    pub fn key(&self) -> SlotKey {
        SlotKey::new(&self.domain, &self.slot, &self.relation)
    }

    /// Checks the substring invariant against `utterance`.
    pub fn matches(&self, utterance: &str) -> bool {
        self.end_char > self.start_char
            && char_slice(utterance, self.start_char, self.end_char) == Some(self.value.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub turn_id: u32,
    pub user_utterance: String,
    pub belief_state: BeliefState,
    pub api_call: Option<ApiCall>,
    pub api_results: Option<Vec<Record>>,
    pub agent_acts: ActSeq,
    pub agent_utterance: String,
    pub spans: Vec<EntitySpan>,
}

impl Turn {
    pub fn utterance(&self, side: Side) -> &str {
        match side {
            Side::User => &self.user_utterance,
            Side::Agent => &self.agent_utterance,
        }
    }

    pub fn spans_on(&self, side: Side) -> impl Iterator<Item = &EntitySpan> {
        self.spans.iter().filter(move |s| s.side == side)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub domains: Vec<String>,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn turn(&self, turn_id: u32) -> Option<&Turn> {
        self.turns.iter().find(|t| t.turn_id == turn_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Fewshot,
    Valid,
    Test,
    Train,
}

/// A list of dialogues plus optional language and split tags.
///
/// The tags are not part of the on-disk array format; they are carried in
/// memory for callers that track them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub language: Option<String>,
    pub split: Option<Split>,
    pub dialogues: Vec<Dialogue>,
}

impl Dataset {
    pub fn new(dialogues: Vec<Dialogue>) -> Self {
        Self {
            language: None,
            split: None,
            dialogues,
        }
    }

    pub fn with_tags(mut self, language: impl Into<String>, split: Split) -> Self {
        self.language = Some(language.into());
        self.split = Some(split);
        self
    }

    pub fn dialogue(&self, dialogue_id: &str) -> Option<&Dialogue> {
        self.dialogues.iter().find(|d| d.dialogue_id == dialogue_id)
    }

    pub fn turn(&self, dialogue_id: &str, turn_id: u32) -> Option<&Turn> {
        self.dialogue(dialogue_id).and_then(|d| d.turn(turn_id))
    }

    pub fn turn_mut(&mut self, dialogue_id: &str, turn_id: u32) -> Option<&mut Turn> {
        self.dialogues
            .iter_mut()
            .find(|d| d.dialogue_id == dialogue_id)
            .and_then(|d| d.turns.iter_mut().find(|t| t.turn_id == turn_id))
    }

    pub fn turn_count(&self) -> usize {
        self.dialogues.iter().map(|d| d.turns.len()).sum()
    }

    /// All `(dialogue_id, turn_id)` pairs in dataset order.
    pub fn turn_refs(&self) -> Vec<(String, u32)> {
        self.dialogues
            .iter()
            .flat_map(|d| d.turns.iter().map(move |t| (d.dialogue_id.clone(), t.turn_id)))
            .collect()
    }
}

/// Slice `s` by character (Unicode scalar) offsets.
pub fn char_slice(s: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut indices = s.char_indices().map(|(i, _)| i).chain(std::iter::once(s.len()));
    let b_start = indices.nth(start)?;
    let b_end = if end == start {
        b_start
    } else {
        indices.nth(end - start - 1)?
    };
    Some(&s[b_start..b_end])
}

/// Finds `needle` in `haystack` and returns character offsets of each occurrence.
pub fn char_find_all(haystack: &str, needle: &str) -> Vec<(usize, usize)> {
    if needle.is_empty() {
        return Vec::new();
    }
    let n_len = needle.chars().count();
    haystack
        .match_indices(needle)
        .map(|(b, _)| {
            let start = haystack[..b].chars().count();
            (start, start + n_len)
        })
        .collect()
}

// -----------------------------------------------------------------------------
// Validation
// -----------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    DupDialogueId,
    DupSlotKey,
    BadIdentifier,
    BadValue,
    ActValueWithoutSlot,
    GeneralActWithSlot,
    EmptyActs,
    ApiDomainMismatch,
    SpanRange,
    SpanTextMismatch,
    TurnOrder,
}

impl ViolationCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViolationCode::DupDialogueId => "DUP_DIALOGUE_ID",
            ViolationCode::DupSlotKey => "DUP_SLOT_KEY",
            ViolationCode::BadIdentifier => "BAD_IDENTIFIER",
            ViolationCode::BadValue => "BAD_VALUE",
            ViolationCode::ActValueWithoutSlot => "ACT_VALUE_WITHOUT_SLOT",
            ViolationCode::GeneralActWithSlot => "GENERAL_ACT_WITH_SLOT",
            ViolationCode::EmptyActs => "EMPTY_ACTS",
            ViolationCode::ApiDomainMismatch => "API_DOMAIN_MISMATCH",
            ViolationCode::SpanRange => "SPAN_RANGE",
            ViolationCode::SpanTextMismatch => "SPAN_TEXT_MISMATCH",
            ViolationCode::TurnOrder => "TURN_ORDER",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One violated invariant found by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub dialogue_id: String,
    pub turn_id: Option<u32>,
    pub code: ViolationCode,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.turn_id {
            Some(t) => write!(
                f,
                "dialogue {} turn {}: {}: {}",
                self.dialogue_id, t, self.code, self.message
            ),
            None => write!(f, "dialogue {}: {}: {}", self.dialogue_id, self.code, self.message),
        }
    }
}

/// Identifiers are non-empty and free of whitespace, quotes and the grammar's
/// structural characters.
pub fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && !s
            .chars()
            .any(|c| c.is_whitespace() || matches!(c, '"' | '\'' | '(' | ')' | ','))
}

/// Values are non-empty, carry no double quote and no surrounding whitespace.
pub fn is_valid_value(s: &str) -> bool {
    !s.is_empty() && !s.contains('"') && s.trim() == s
}

struct Collector<'a> {
    dialogue_id: &'a str,
    turn_id: Option<u32>,
    out: Vec<Violation>,
}

impl Collector<'_> {
    fn push(&mut self, code: ViolationCode, message: impl Into<String>) {
        self.out.push(Violation {
            dialogue_id: self.dialogue_id.to_string(),
            turn_id: self.turn_id,
            code,
            message: message.into(),
        });
    }

    fn ident(&mut self, what: &str, s: &str) {
        if !is_identifier(s) {
            self.push(
                ViolationCode::BadIdentifier,
                format!("{what} {s:?} is not a valid identifier"),
            );
        }
    }

    fn value(&mut self, what: &str, s: &str) {
        if !is_valid_value(s) {
            self.push(ViolationCode::BadValue, format!("{what} {s:?} is not a valid value"));
        }
    }

    fn triplet(&mut self, what: &str, t: &SlotTriplet) {
        self.ident(&format!("{what} domain"), &t.domain);
        self.ident(&format!("{what} slot"), &t.slot);
        self.ident(&format!("{what} relation"), &t.relation);
        self.value(&format!("{what} value"), &t.value);
    }
}

/// Checks every type invariant and returns the violations; empty iff valid.
pub fn validate_dataset(ds: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen_ids = HashSet::new();
    for d in &ds.dialogues {
        let mut c = Collector {
            dialogue_id: &d.dialogue_id,
            turn_id: None,
            out: Vec::new(),
        };
        if !seen_ids.insert(d.dialogue_id.as_str()) {
            c.push(
                ViolationCode::DupDialogueId,
                format!("dialogue id {:?} is not unique", d.dialogue_id),
            );
        }
        for dom in &d.domains {
            c.ident("dialogue domain", dom);
        }
        let mut last_turn: Option<u32> = None;
        for t in &d.turns {
            c.turn_id = Some(t.turn_id);
            if let Some(prev) = last_turn {
                if t.turn_id <= prev {
                    c.push(
                        ViolationCode::TurnOrder,
                        format!("turn id {} does not follow {}", t.turn_id, prev),
                    );
                }
            }
            last_turn = Some(t.turn_id);
            validate_turn(&mut c, t);
        }
        out.extend(c.out);
    }
    out
}

fn validate_turn(c: &mut Collector<'_>, t: &Turn) {
    for tr in &t.belief_state.triplets {
        c.triplet("belief state", tr);
    }
    if let Some(k) = t.belief_state.duplicate_key() {
        c.push(ViolationCode::DupSlotKey, format!("belief state repeats slot key {k}"));
    }
    if let Some(call) = &t.api_call {
        c.ident("api domain", &call.domain);
        for tr in &call.constraints {
            c.triplet("api constraint", tr);
            if tr.domain != call.domain {
                c.push(
                    ViolationCode::ApiDomainMismatch,
                    format!(
                        "constraint domain {} differs from call domain {}",
                        tr.domain, call.domain
                    ),
                );
            }
        }
    }
    if t.agent_acts.is_empty() {
        c.push(ViolationCode::EmptyActs, "agent turn carries no dialogue acts");
    }
    for a in &t.agent_acts.items {
        c.ident("act domain", &a.domain);
        c.ident("act", &a.act);
        if let Some(s) = &a.slot {
            c.ident("act slot", s);
        }
        if let Some(r) = &a.relation {
            c.ident("act relation", r);
        }
        if let Some(v) = &a.value {
            c.value("act value", v);
        }
        if a.value.is_some() && a.slot.is_none() {
            c.push(
                ViolationCode::ActValueWithoutSlot,
                format!("act {} has a value but no slot", a.act),
            );
        }
        if a.relation.is_some() && a.value.is_none() {
            c.push(
                ViolationCode::ActValueWithoutSlot,
                format!("act {} has a relation but no value", a.act),
            );
        }
        if a.act == "general" && (a.slot.is_some() || a.value.is_some()) {
            c.push(ViolationCode::GeneralActWithSlot, "general act carries a slot or value");
        }
    }
    for (i, s) in t.spans.iter().enumerate() {
        c.ident("span domain", &s.domain);
        c.ident("span slot", &s.slot);
        c.ident("span relation", &s.relation);
        if s.end_char <= s.start_char {
            c.push(
                ViolationCode::SpanRange,
                format!("span {i} has end_char {} <= start_char {}", s.end_char, s.start_char),
            );
        } else if !s.matches(t.utterance(s.side)) {
            c.push(
                ViolationCode::SpanTextMismatch,
                format!(
                    "span {i} [{}, {}) on {} utterance does not equal {:?}",
                    s.start_char, s.end_char, s.side, s.value
                ),
            );
        }
    }
}

// -----------------------------------------------------------------------------
// IO
// -----------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error at {location}: {reason}")]
    Schema { location: String, reason: String },
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Parses dataset JSON text and validates it.
pub fn parse_dataset(text: &str) -> Result<Dataset, DatasetError> {
    let dialogues: Vec<Dialogue> = serde_json::from_str(text).map_err(|e| DatasetError::Schema {
        location: format!("line {} column {}", e.line(), e.column()),
        reason: e.to_string(),
    })?;
    let ds = Dataset::new(dialogues);
    if let Some(v) = validate_dataset(&ds).into_iter().next() {
        let location = match v.turn_id {
            Some(t) => format!("dialogue {} turn {}", v.dialogue_id, t),
            None => format!("dialogue {}", v.dialogue_id),
        };
        return Err(DatasetError::Schema {
            location,
            reason: format!("{}: {}", v.code, v.message),
        });
    }
    Ok(ds)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    parse_dataset(&text)
}

pub fn dataset_to_json(ds: &Dataset) -> String {
    serde_json::to_string_pretty(&ds.dialogues).expect("dataset serialization is infallible")
}

/// Writes the dataset via a temporary file in the same directory and an
/// atomic rename.
pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_atomic(path.as_ref(), dataset_to_json(ds).as_bytes())
}

/// Temp file in the same directory, fsync, rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.write_all(b"\n")?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(DatasetError::io(path, e));
    }
    Ok(())
}
