use std::fmt::Debug;
use std::path::PathBuf;

use dialogue_workbench::kb::{load_database, load_ontology, Database, Ontology};
use dialogue_workbench::model::{load_dataset, Dataset};
use dialogue_workbench::value_map::{load_value_mapping, ValueMapping};
use proptest::strategy::Strategy;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
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

/// Collapses whitespace runs; some expected strings have double gaps.
pub fn squash(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Runs `test` on exactly `cases` generated values from a fixed seed.
pub fn for_all<S>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S: Strategy,
    S::Value: Debug,
{
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}
