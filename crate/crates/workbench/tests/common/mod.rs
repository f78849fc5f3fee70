#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use dialogue_workbench::align::AlignmentSources;
use dialogue_workbench::kb::load_database;
use dialogue_workbench::model::{load_dataset, save_dataset, Dataset, SlotTriplet};
use dialogue_workbench::norm::NormConfig;
use dialogue_workbench::Execution;
use dialogue_workbench_cli::service::{router, AppState, Config};
use dialogue_workbench_cli::store::Paths;
use serde_json::Value;
use tempfile::TempDir;
use tower::ServiceExt;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

/// A scratch copy of the suite with its own sidecar files.
pub struct Workspace {
    pub dir: TempDir,
    pub paths: Paths,
}

impl Workspace {
    pub fn new() -> Self {
        Self::with_dataset(&load_dataset(fixture("suite.json")).unwrap())
    }

    pub fn with_dataset(ds: &Dataset) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("suite.json");
        save_dataset(ds, &data).unwrap();
        let vm = dir.path().join("vm.json");
        std::fs::copy(fixture("suite_vm.json"), &vm).unwrap();
        let paths = Paths::for_dataset(data, Some(vm));
        Self { dir, paths }
    }

    pub fn config(&self, sources: AlignmentSources) -> Config {
        Config {
            paths: self.paths.clone(),
            db: Some(load_database(fixture("suite_db.json")).unwrap()),
            sources,
            norm: NormConfig::default(),
            exec: Execution::default(),
        }
    }

    pub fn open(&self) -> Arc<AppState> {
        AppState::open(self.config(AlignmentSources::default())).unwrap()
    }

    pub fn router(&self) -> Router {
        router(self.open())
    }

    pub fn path(&self, name: &str) -> &Path {
        match name {
            "dataset" => &self.paths.dataset,
            "meta" => &self.paths.meta,
            _ => &self.paths.value_map,
        }
    }
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let json = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, json)
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Method::GET, uri, None).await
}

/// A constraint on a slot the call leaves open, whose value some gold
/// result does not share, so adding it changes the result set.
pub fn redundant_constraint(ds: &Dataset, d: &str, t: u32) -> SlotTriplet {
    let db = load_database(fixture("suite_db.json")).unwrap();
    let turn = ds.turn(d, t).unwrap();
    let call = turn.api_call.as_ref().unwrap();
    let gold = turn.api_results.as_ref().unwrap();
    for r in db.records(&call.domain).unwrap() {
        for (slot, v) in r {
            if call.constraints.iter().any(|c| &c.slot == slot) {
                continue;
            }
            if gold.iter().any(|g| g.get(slot) != Some(v)) {
                return SlotTriplet::new(&call.domain, slot.as_str(), v.as_str());
            }
        }
    }
    panic!("no redundant constraint for {d}/{t}");
}
