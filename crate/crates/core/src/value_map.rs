//! One-to-many mapping from source-language slot values to their candidate
//! translations, with a chosen canonical form per slot.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::model::DatasetError;
use crate::norm::resolve_chain;

/// `(domain, slot)`; serialized as `"domain.slot"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotRef {
    pub domain: String,
    pub slot: String,
}

impl SlotRef {
    pub fn new(domain: impl Into<String>, slot: impl Into<String>) -> Self {
        Self {
            domain: domain.into(),
            slot: slot.into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let (d, sl) = s.split_once('.')?;
        (!d.is_empty() && !sl.is_empty()).then(|| Self::new(d, sl))
    }
}

impl fmt::Display for SlotRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.domain, self.slot)
    }
}

impl Serialize for SlotRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SlotRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        SlotRef::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("expected \"domain.slot\", got {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub candidates: Vec<String>,
    pub canonical: String,
    /// Occurrence counts backing the canonical choice; empty for hand-edited entries.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub counts: BTreeMap<String, usize>,
}

impl MappingEntry {
    fn recompute_canonical(&mut self) {
        // most frequent; ties go to the lexicographically first candidate
        if let Some((best, _)) = self
            .counts
            .iter()
            .max_by(|(a, ca), (b, cb)| ca.cmp(cb).then_with(|| b.cmp(a)))
        {
            self.canonical = best.clone();
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValueMapping {
    entries: BTreeMap<String, BTreeMap<SlotRef, MappingEntry>>,
}

impl ValueMapping {
    pub fn entries(&self) -> &BTreeMap<String, BTreeMap<SlotRef, MappingEntry>> {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, source: &str, slot: &SlotRef) -> Option<&MappingEntry> {
        self.entries.get(source).and_then(|m| m.get(slot))
    }

    /// Records one observed translation; the canonical form follows the counts.
    pub fn add_occurrence(&mut self, source: &str, slot: &SlotRef, target: &str) {
        let entry = self
            .entries
            .entry(source.to_string())
            .or_default()
            .entry(slot.clone())
            .or_insert_with(|| MappingEntry {
                candidates: Vec::new(),
                canonical: target.to_string(),
                counts: BTreeMap::new(),
            });
        if !entry.candidates.iter().any(|c| c == target) {
            entry.candidates.push(target.to_string());
        }
        *entry.counts.entry(target.to_string()).or_default() += 1;
        entry.recompute_canonical();
    }

    /// Replaces an entry outright. The canonical form joins the candidates if absent.
    pub fn set_entry(&mut self, source: &str, slot: &SlotRef, candidates: Vec<String>, canonical: &str) {
        let mut deduped: Vec<String> = Vec::new();
        for c in candidates {
            if !c.is_empty() && !deduped.contains(&c) {
                deduped.push(c);
            }
        }
        if !deduped.iter().any(|c| c == canonical) {
            deduped.push(canonical.to_string());
        }
        self.entries.entry(source.to_string()).or_default().insert(
            slot.clone(),
            MappingEntry {
                candidates: deduped,
                canonical: canonical.to_string(),
                counts: BTreeMap::new(),
            },
        );
    }

    /// Sets the canonical form of an existing entry, adding it to the candidates.
    pub fn set_canonical(&mut self, source: &str, slot: &SlotRef, canonical: &str) -> bool {
        match self.entries.get_mut(source).and_then(|m| m.get_mut(slot)) {
            Some(e) => {
                if !e.candidates.iter().any(|c| c == canonical) {
                    e.candidates.push(canonical.to_string());
                }
                e.canonical = canonical.to_string();
                e.counts.clear();
                true
            }
            None => false,
        }
    }

    /// Every surface form the mapping knows for `value` in `slot`: the value
    /// itself, its candidates, and its canonical form.
    pub fn surface_forms(&self, value: &str, slot: &SlotRef) -> Vec<String> {
        let mut out = vec![value.to_string()];
        let mut push = |s: &str| {
            if !out.iter().any(|o| o == s) {
                out.push(s.to_string());
            }
        };
        if let Some(e) = self.get(value, slot) {
            for c in &e.candidates {
                push(c);
            }
            push(&e.canonical);
        }
        // the value may itself be a translation of some source entry
        for slots in self.entries.values() {
            if let Some(e) = slots.get(slot) {
                if e.canonical == value || e.candidates.iter().any(|c| c == value) {
                    for c in &e.candidates {
                        push(c);
                    }
                    push(&e.canonical);
                }
            }
        }
        out
    }

    /// Checks `canonical ∈ candidates` and deduplicated candidates.
    pub fn validate(&self) -> Result<(), String> {
        for (src, slots) in &self.entries {
            for (slot, e) in slots {
                if !e.candidates.contains(&e.canonical) {
                    return Err(format!(
                        "{src} / {slot}: canonical {:?} is not a candidate",
                        e.canonical
                    ));
                }
                let mut seen = std::collections::HashSet::new();
                if let Some(dup) = e.candidates.iter().find(|c| !seen.insert(c.as_str())) {
                    return Err(format!("{src} / {slot}: duplicate candidate {dup:?}"));
                }
            }
        }
        Ok(())
    }
}

/// The canonical form for `raw` in `(domain, slot)`, or `raw` unchanged.
///
/// `raw` may be a source value or any known candidate. Chains are followed to
/// a fixpoint so the function is idempotent.
pub fn canonicalize_value(domain: &str, slot: &str, raw: &str, vm: &ValueMapping) -> String {
    let slot = SlotRef::new(domain, slot);
    let step = |s: &str| -> Option<String> {
        if let Some(e) = vm.get(s, &slot) {
            return Some(e.canonical.clone());
        }
        vm.entries
            .values()
            .filter_map(|m| m.get(&slot))
            .find(|e| e.candidates.iter().any(|c| c == s))
            .map(|e| e.canonical.clone())
    };
    resolve_chain(raw, step)
}

pub fn load_value_mapping(path: impl AsRef<Path>) -> Result<ValueMapping, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let vm: ValueMapping = serde_json::from_str(&text).map_err(|e| DatasetError::Schema {
        location: format!("{} line {}", path.display(), e.line()),
        reason: e.to_string(),
    })?;
    vm.validate().map_err(|reason| DatasetError::Schema {
        location: path.display().to_string(),
        reason,
    })?;
    Ok(vm)
}

pub fn save_value_mapping(vm: &ValueMapping, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(vm).expect("value mapping serialization is infallible");
    crate::model::write_atomic(path.as_ref(), text.as_bytes())
}
