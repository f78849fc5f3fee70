#![allow(dead_code)]

use std::path::PathBuf;

use dialogue_workbench::kb::{load_database, load_ontology, Database, Ontology};
use dialogue_workbench::model::{load_dataset, Dataset};
use dialogue_workbench::value_map::{load_value_mapping, ValueMapping};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn suite() -> Dataset {
    load_dataset(fixture("suite.json")).expect("suite fixture")
}

pub fn suite_db() -> Database {
    load_database(fixture("suite_db.json")).expect("suite db")
}

pub fn suite_ontology() -> Ontology {
    load_ontology(fixture("suite_ontology.json")).expect("suite ontology")
}

pub fn suite_vm() -> ValueMapping {
    load_value_mapping(fixture("suite_vm.json")).expect("suite value mapping")
}

pub fn sample() -> Dataset {
    load_dataset(fixture("sample.json")).expect("sample fixture")
}

/// Expected strings have uneven spacing; compare on single spaces.
pub fn squash(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
