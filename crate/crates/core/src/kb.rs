//! Ontology and database storage, and API-call execution.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ApiCall, DatasetError, Record, EQUAL_TO, NOT_EQUAL_TO};
use crate::norm::{basic_normalize, Normalizer};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KbError {
    #[error("unknown domain {0}")]
    UnknownDomain(String),
    #[error("unknown slot {domain}.{slot}")]
    UnknownSlot { domain: String, slot: String },
    #[error("unsupported relation {0}")]
    UnsupportedRelation(String),
    #[error("invalid knowledge base: {0}")]
    Invalid(String),
}

/// Canonical values per `(domain, slot)`, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ontology {
    domains: BTreeMap<String, BTreeMap<String, Vec<String>>>,
}

impl Ontology {
    pub fn new(domains: BTreeMap<String, BTreeMap<String, Vec<String>>>) -> Result<Self, KbError> {
        let o = Self { domains };
        o.validate()?;
        Ok(o)
    }

    fn validate(&self) -> Result<(), KbError> {
        for (d, slots) in &self.domains {
            for (s, values) in slots {
                if values.is_empty() {
                    return Err(KbError::Invalid(format!("{d}.{s} has no values")));
                }
                let unique: BTreeSet<&String> = values.iter().collect();
                if unique.len() != values.len() {
                    return Err(KbError::Invalid(format!("{d}.{s} repeats a value")));
                }
            }
        }
        Ok(())
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.domains.keys().map(String::as_str)
    }

    pub fn slots(&self, domain: &str) -> Result<Vec<&str>, KbError> {
        self.domains
            .get(domain)
            .map(|s| s.keys().map(String::as_str).collect())
            .ok_or_else(|| KbError::UnknownDomain(domain.to_string()))
    }

    pub fn has_slot(&self, domain: &str, slot: &str) -> bool {
        self.domains.get(domain).is_some_and(|s| s.contains_key(slot))
    }

    /// Ontology built from every value seen in a database, in database order.
    pub fn from_database(db: &Database) -> Self {
        let mut domains: BTreeMap<String, BTreeMap<String, Vec<String>>> = BTreeMap::new();
        for (d, records) in &db.domains {
            let slots = domains.entry(d.clone()).or_default();
            for r in records {
                for (s, v) in r {
                    let values = slots.entry(s.clone()).or_default();
                    if !values.contains(v) {
                        values.push(v.clone());
                    }
                }
            }
        }
        Self { domains }
    }
}

pub fn slot_values<'a>(ontology: &'a Ontology, domain: &str, slot: &str) -> Result<&'a [String], KbError> {
    ontology
        .domains
        .get(domain)
        .and_then(|s| s.get(slot))
        .map(Vec::as_slice)
        .ok_or_else(|| KbError::UnknownSlot {
            domain: domain.to_string(),
            slot: slot.to_string(),
        })
}

/// slot → normalized value → record positions
type DomainIndex = HashMap<String, HashMap<String, Vec<usize>>>;

/// Records per domain, loaded fully into memory. A per-domain value index is
/// built on first use.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(from = "BTreeMap<String, Vec<Record>>", into = "BTreeMap<String, Vec<Record>>")]
pub struct Database {
    domains: BTreeMap<String, Vec<Record>>,
    indexes: BTreeMap<String, OnceLock<DomainIndex>>,
}

impl Clone for Database {
    fn clone(&self) -> Self {
        Self::new(self.domains.clone())
    }
}

impl PartialEq for Database {
    fn eq(&self, other: &Self) -> bool {
        self.domains == other.domains
    }
}

impl From<BTreeMap<String, Vec<Record>>> for Database {
    fn from(domains: BTreeMap<String, Vec<Record>>) -> Self {
        Self::new(domains)
    }
}

impl From<Database> for BTreeMap<String, Vec<Record>> {
    fn from(db: Database) -> Self {
        db.domains
    }
}

impl Database {
    pub fn new(domains: BTreeMap<String, Vec<Record>>) -> Self {
        let indexes = domains.keys().map(|d| (d.clone(), OnceLock::new())).collect();
        Self { domains, indexes }
    }

    pub fn records(&self, domain: &str) -> Result<&[Record], KbError> {
        self.domains
            .get(domain)
            .map(Vec::as_slice)
            .ok_or_else(|| KbError::UnknownDomain(domain.to_string()))
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.domains.keys().map(String::as_str)
    }

    /// Every record slot must exist in the ontology for its domain.
    pub fn check_against(&self, ontology: &Ontology) -> Result<(), KbError> {
        for (d, records) in &self.domains {
            for (i, r) in records.iter().enumerate() {
                for s in r.keys() {
                    if !ontology.has_slot(d, s) {
                        return Err(KbError::Invalid(format!(
                            "record {i} of {d} uses slot {s} missing from the ontology"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn index(&self, domain: &str) -> Option<&DomainIndex> {
        let records = self.domains.get(domain)?;
        let cell = self.indexes.get(domain)?;
        Some(cell.get_or_init(|| {
            let mut idx: DomainIndex = HashMap::new();
            for (i, r) in records.iter().enumerate() {
                for (s, v) in r {
                    idx.entry(s.clone())
                        .or_default()
                        .entry(basic_normalize(v))
                        .or_default()
                        .push(i);
                }
            }
            idx
        }))
    }

    /// Runs `call` with `norm` deciding value equality. Results keep database order.
    pub fn execute(&self, call: &ApiCall, norm: &Normalizer) -> Result<ResultSet, KbError> {
        let records = self.records(&call.domain)?;
        for c in &call.constraints {
            if c.relation != EQUAL_TO && c.relation != NOT_EQUAL_TO {
                return Err(KbError::UnsupportedRelation(c.relation.clone()));
            }
        }
        let mut keep = vec![true; records.len()];
        if norm.is_plain() {
            let idx = self.index(&call.domain).expect("domain exists");
            for c in &call.constraints {
                let hits: &[usize] = idx
                    .get(&c.slot)
                    .and_then(|m| m.get(&basic_normalize(&c.value)))
                    .map(Vec::as_slice)
                    .unwrap_or(&[]);
                let mut hit = vec![false; records.len()];
                for &i in hits {
                    hit[i] = true;
                }
                let want = c.relation == EQUAL_TO;
                for (k, h) in keep.iter_mut().zip(hit) {
                    *k &= h == want;
                }
            }
        } else {
            let wanted: Vec<(String, bool)> = call
                .constraints
                .iter()
                .map(|c| (norm.normalize(&c.value), c.relation == EQUAL_TO))
                .collect();
            for (k, r) in keep.iter_mut().zip(records) {
                *k = call.constraints.iter().zip(&wanted).all(|(c, (value, eq))| {
                    let matches = r.get(&c.slot).is_some_and(|v| norm.normalize(v) == *value);
                    matches == *eq
                });
            }
        }
        let records: Vec<Record> = records
            .iter()
            .zip(keep)
            .filter(|(_, k)| *k)
            .map(|(r, _)| r.clone())
            .collect();
        Ok(ResultSet::new(call.domain.clone(), records))
    }
}

/// `execute_api` with plain entity normalization.
pub fn execute_api(call: &ApiCall, db: &Database) -> Result<ResultSet, KbError> {
    db.execute(call, &Normalizer::plain())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultSet {
    pub domain: String,
    pub records: Vec<Record>,
    pub available_options: usize,
}

impl ResultSet {
    pub fn new(domain: impl Into<String>, records: Vec<Record>) -> Self {
        let available_options = records.len();
        Self {
            domain: domain.into(),
            records,
            available_options,
        }
    }
}

/// `( domain ) slot " value " , ...` for the first record, with the synthetic
/// `available_options` slot, slots in lexicographic order; `null` when empty.
pub fn render_knowledge(results: &ResultSet) -> String {
    let Some(first) = results.records.first() else {
        return "null".to_string();
    };
    let mut slots: BTreeMap<&str, String> = first.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    slots.insert("available_options", results.available_options.to_string());
    let body: Vec<String> = slots.iter().map(|(k, v)| format!("{k} \" {v} \"")).collect();
    format!("( {} ) {}", results.domain, body.join(" , "))
}

fn read(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn schema(path: &Path, reason: impl ToString) -> DatasetError {
    DatasetError::Schema {
        location: path.display().to_string(),
        reason: reason.to_string(),
    }
}

pub fn load_database(path: impl AsRef<Path>) -> Result<Database, DatasetError> {
    let path = path.as_ref();
    serde_json::from_str(&read(path)?).map_err(|e| schema(path, e))
}

pub fn load_ontology(path: impl AsRef<Path>) -> Result<Ontology, DatasetError> {
    let path = path.as_ref();
    let o: Ontology = serde_json::from_str(&read(path)?).map_err(|e| schema(path, e))?;
    o.validate().map_err(|e| schema(path, e))?;
    Ok(o)
}
