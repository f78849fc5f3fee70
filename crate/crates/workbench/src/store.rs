//! On-disk state of a post-editing session: the dataset itself, a sidecar
//! file with per-turn versions and checked flags, and the value mapping.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dialogue_workbench::model::{load_dataset, write_atomic, Dataset, DatasetError};
use dialogue_workbench::norm::Normalizer;
use dialogue_workbench::value_map::{load_value_mapping, save_value_mapping, ValueMapping};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct Paths {
    pub dataset: PathBuf,
    pub meta: PathBuf,
    pub value_map: PathBuf,
}

impl Paths {
    /// Meta lives next to the dataset as `<file>.workbench.json`; the value
    /// mapping defaults to `<file>.value-map.json`.
    pub fn for_dataset(dataset: impl Into<PathBuf>, value_map: Option<PathBuf>) -> Self {
        let dataset = dataset.into();
        let sibling = |suffix: &str| {
            let mut name = dataset.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            name.push(suffix);
            dataset.with_file_name(name)
        };
        Self {
            meta: sibling(".workbench.json"),
            value_map: value_map.unwrap_or_else(|| sibling(".value-map.json")),
            dataset,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnMeta {
    pub version: u64,
    pub checked: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    #[serde(default)]
    pub turns: BTreeMap<String, BTreeMap<u32, TurnMeta>>,
    #[serde(default)]
    pub value_mapping_version: u64,
}

impl Meta {
    pub fn turn(&self, dialogue_id: &str, turn_id: u32) -> TurnMeta {
        self.turns
            .get(dialogue_id)
            .and_then(|t| t.get(&turn_id))
            .copied()
            .unwrap_or_default()
    }

    pub fn turn_mut(&mut self, dialogue_id: &str, turn_id: u32) -> &mut TurnMeta {
        self.turns
            .entry(dialogue_id.to_string())
            .or_default()
            .entry(turn_id)
            .or_default()
    }
}

/// An immutable view of the session. Writers build a new one and swap it in.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub dataset: Dataset,
    pub meta: Meta,
    pub vm: ValueMapping,
    pub normalizer: Normalizer,
}

impl Snapshot {
    pub fn new(dataset: Dataset, meta: Meta, vm: ValueMapping) -> Self {
        let normalizer = Normalizer::from_value_mapping(&vm);
        Self {
            dataset,
            meta,
            vm,
            normalizer,
        }
    }

    pub fn with_value_mapping(mut self, vm: ValueMapping) -> Self {
        self.normalizer = Normalizer::from_value_mapping(&vm);
        self.vm = vm;
        self
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn load(paths: &Paths) -> Result<Snapshot, DatasetError> {
    let dataset = load_dataset(&paths.dataset)?;
    let meta = if paths.meta.exists() {
        let text = fs::read_to_string(&paths.meta).map_err(|e| io_err(&paths.meta, e))?;
        serde_json::from_str(&text).map_err(|e| DatasetError::Schema {
            location: paths.meta.display().to_string(),
            reason: e.to_string(),
        })?
    } else {
        Meta::default()
    };
    let vm = if paths.value_map.exists() {
        load_value_mapping(&paths.value_map)?
    } else {
        ValueMapping::default()
    };
    Ok(Snapshot::new(dataset, meta, vm))
}

pub fn save_meta(paths: &Paths, meta: &Meta) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    write_atomic(&paths.meta, text.as_bytes())
}

/// Meta goes first. A crash between the two writes then leaves a bumped
/// version over old content, which costs a client a spurious conflict
/// rather than letting a stale write through.
pub fn save_turn_edit(paths: &Paths, snap: &Snapshot) -> Result<(), DatasetError> {
    save_meta(paths, &snap.meta)?;
    dialogue_workbench::model::save_dataset(&snap.dataset, &paths.dataset)
}

pub fn save_mapping(paths: &Paths, snap: &Snapshot) -> Result<(), DatasetError> {
    save_meta(paths, &snap.meta)?;
    save_value_mapping(&snap.vm, &paths.value_map)
}
