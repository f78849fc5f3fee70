//! HTTP JSON API for the post-editing loop.
//!
//! Reads clone an `Arc<Snapshot>` and never block on writers. Writes take the
//! writer mutex, build a new snapshot, persist it and then publish it.

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use dialogue_workbench::align::{align_turn, AlignedEntity, AlignmentSources};
use dialogue_workbench::check::{
    apply_fixes, apply_mapping_additions, check_dataset, check_turn, CheckError, Finding, Fix, Location,
};
use dialogue_workbench::kb::Database;
use dialogue_workbench::model::{Dataset, EntitySpan, Side, Turn};
use dialogue_workbench::norm::NormConfig;
use dialogue_workbench::value_map::{MappingEntry, SlotRef, ValueMapping};
use dialogue_workbench::Execution;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::store::{self, Paths, Snapshot};

pub struct Config {
    pub paths: Paths,
    pub db: Option<Database>,
    pub sources: AlignmentSources,
    pub norm: NormConfig,
    pub exec: Execution,
}

pub struct AppState {
    cfg: Config,
    snapshot: RwLock<Arc<Snapshot>>,
    writer: Mutex<()>,
    /// Fixes proposed by the last checks, by id.
    proposed: Mutex<HashMap<String, Fix>>,
}

impl AppState {
    pub fn open(cfg: Config) -> Result<Arc<Self>, dialogue_workbench::model::DatasetError> {
        let snap = store::load(&cfg.paths)?;
        Ok(Arc::new(Self {
            cfg,
            snapshot: RwLock::new(Arc::new(snap)),
            writer: Mutex::new(()),
            proposed: Mutex::new(HashMap::new()),
        }))
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().clone()
    }

    fn publish(&self, snap: Snapshot) -> Arc<Snapshot> {
        let snap = Arc::new(snap);
        *self.snapshot.write() = snap.clone();
        snap
    }

    fn turn_findings(&self, snap: &Snapshot, dialogue_id: &str, turn_id: u32) -> Result<Vec<Finding>, ApiError> {
        let d = snap
            .dataset
            .dialogue(dialogue_id)
            .ok_or_else(|| ApiError::unknown_turn(dialogue_id, turn_id))?;
        let i = d
            .turns
            .iter()
            .position(|t| t.turn_id == turn_id)
            .ok_or_else(|| ApiError::unknown_turn(dialogue_id, turn_id))?;
        let prev = i.checked_sub(1).map(|p| &d.turns[p]);
        check_turn(
            dialogue_id,
            &d.turns[i],
            prev,
            self.cfg.db.as_ref(),
            &snap.vm,
            &self.cfg.norm,
            &snap.normalizer,
        )
        .map_err(|e| {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "KB_ERROR", e.to_string()).at(dialogue_id, turn_id)
        })
    }

    fn remember_fixes(&self, findings: &[Finding]) {
        let mut proposed = self.proposed.lock();
        for f in findings {
            if let Some(fix) = &f.suggested_fix {
                proposed.insert(fix.id.clone(), fix.clone());
            }
        }
    }
}

// -----------------------------------------------------------------------------
// Errors
// -----------------------------------------------------------------------------

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    location: Option<Box<Location>>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            location: None,
        }
    }

    fn at(mut self, dialogue_id: &str, turn_id: u32) -> Self {
        self.location = Some(Box::new(Location::turn(dialogue_id, turn_id)));
        self
    }

    fn unknown_turn(dialogue_id: &str, turn_id: u32) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "UNKNOWN_TURN",
            format!("no turn {dialogue_id}/{turn_id}"),
        )
        .at(dialogue_id, turn_id)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BAD_REQUEST", message)
    }

    fn storage(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "STORAGE_ERROR", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "code": self.code, "message": self.message, "location": self.location });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Runs `f` off the async executor.
async fn blocking<T: Send + 'static>(
    state: &Arc<AppState>,
    f: impl FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let state = state.clone();
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string()))?
}

// -----------------------------------------------------------------------------
// Turns
// -----------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct TurnView {
    pub dialogue_id: String,
    pub turn_id: u32,
    pub turn: Turn,
    pub version: u64,
    pub checked: bool,
    pub findings: Vec<Finding>,
}

fn turn_view(state: &AppState, snap: &Snapshot, dialogue_id: &str, turn_id: u32) -> Result<TurnView, ApiError> {
    let findings = state.turn_findings(snap, dialogue_id, turn_id)?;
    let turn = snap.dataset.turn(dialogue_id, turn_id).expect("checked above").clone();
    let meta = snap.meta.turn(dialogue_id, turn_id);
    Ok(TurnView {
        dialogue_id: dialogue_id.to_string(),
        turn_id,
        turn,
        version: meta.version,
        checked: meta.checked,
        findings,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFilter {
    #[default]
    All,
    Unchecked,
    HasFindings,
}

#[derive(Debug, Default, Deserialize)]
pub struct NextQuery {
    #[serde(default)]
    pub filter: TaskFilter,
    pub after_dialogue: Option<String>,
    pub after_turn: Option<u32>,
}

/// Turn refs in (dialogue_id, turn_id) order.
fn ordered_refs(ds: &Dataset) -> Vec<(String, u32)> {
    let mut refs = ds.turn_refs();
    refs.sort();
    refs
}

async fn next_task(State(state): State<Arc<AppState>>, Query(q): Query<NextQuery>) -> ApiResult<TurnView> {
    blocking(&state, move |state| {
        let snap = state.snapshot();
        let refs = ordered_refs(&snap.dataset);
        let start = match (&q.after_dialogue, q.after_turn) {
            (Some(d), Some(t)) => refs.partition_point(|r| (r.0.as_str(), r.1) <= (d.as_str(), t)),
            (Some(d), None) => refs.partition_point(|r| r.0.as_str() <= d.as_str()),
            _ => 0,
        };
        for k in 0..refs.len() {
            let (d, t) = &refs[(start + k) % refs.len()];
            let meta = snap.meta.turn(d, *t);
            let hit = match q.filter {
                TaskFilter::All => true,
                TaskFilter::Unchecked => !meta.checked,
                TaskFilter::HasFindings => !state.turn_findings(&snap, d, *t)?.is_empty(),
            };
            if hit {
                return turn_view(state, &snap, d, *t);
            }
        }
        Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "NO_MATCHING_TASK",
            format!("no turn matches {:?}", q.filter),
        ))
    })
    .await
    .map(Json)
}

async fn get_turn(State(state): State<Arc<AppState>>, Path((d, t)): Path<(String, u32)>) -> ApiResult<TurnView> {
    blocking(&state, move |state| turn_view(state, &state.snapshot(), &d, t))
        .await
        .map(Json)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnPatch {
    pub dialogue_id: Option<String>,
    pub turn_id: Option<u32>,
    pub base_version: u64,
    pub user_utterance: Option<String>,
    pub agent_utterance: Option<String>,
    pub spans: Option<Vec<EntitySpan>>,
    /// Marks the turn as reviewed; defaults to true.
    pub checked: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PatchResult {
    pub dialogue_id: String,
    pub turn_id: u32,
    pub version: u64,
    pub findings: Vec<Finding>,
}

fn apply_patch(turn: &mut Turn, patch: &TurnPatch) -> Result<(), String> {
    if let Some(u) = &patch.user_utterance {
        turn.user_utterance = u.clone();
    }
    if let Some(a) = &patch.agent_utterance {
        turn.agent_utterance = a.clone();
    }
    if let Some(spans) = &patch.spans {
        turn.spans = spans.clone();
    }
    for s in &turn.spans {
        if !s.matches(turn.utterance(s.side)) {
            return Err(format!(
                "span {}..{} on the {} side does not read {:?}",
                s.start_char, s.end_char, s.side, s.value
            ));
        }
    }
    Ok(())
}

fn submit_patch(state: &AppState, d: &str, t: u32, patch: TurnPatch) -> Result<PatchResult, ApiError> {
    if patch.dialogue_id.as_deref().is_some_and(|x| x != d) || patch.turn_id.is_some_and(|x| x != t) {
        return Err(ApiError::bad_request("patch target differs from the request path").at(d, t));
    }
    let _w = state.writer.lock();
    let cur = state.snapshot();
    let current = cur.meta.turn(d, t).version;
    let mut dataset = cur.dataset.clone();
    let turn = dataset.turn_mut(d, t).ok_or_else(|| ApiError::unknown_turn(d, t))?;
    if patch.base_version != current {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "VERSION_CONFLICT",
            format!("base version {} is stale; current is {current}", patch.base_version),
        )
        .at(d, t));
    }
    apply_patch(turn, &patch)
        .map_err(|m| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "SPAN_INVARIANT_VIOLATION", m).at(d, t))?;
    let mut meta = cur.meta.clone();
    let tm = meta.turn_mut(d, t);
    tm.version += 1;
    tm.checked = patch.checked.unwrap_or(true);
    let version = tm.version;
    let next = Snapshot::new(dataset, meta, cur.vm.clone());
    store::save_turn_edit(&state.cfg.paths, &next).map_err(ApiError::storage)?;
    let snap = state.publish(next);
    let findings = state.turn_findings(&snap, d, t)?;
    state.remember_fixes(&findings);
    Ok(PatchResult {
        dialogue_id: d.to_string(),
        turn_id: t,
        version,
        findings,
    })
}

async fn put_turn(
    State(state): State<Arc<AppState>>,
    Path((d, t)): Path<(String, u32)>,
    Json(patch): Json<TurnPatch>,
) -> ApiResult<PatchResult> {
    blocking(&state, move |state| submit_patch(state, &d, t, patch))
        .await
        .map(Json)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Suggestion {
    pub side: Side,
    pub domain: String,
    pub slot: String,
    pub value: String,
    pub entity: AlignedEntity,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AlignmentFailure {
    pub side: Side,
    pub domain: String,
    pub slot: String,
    pub value: String,
    pub error: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Suggestions {
    pub dialogue_id: String,
    pub turn_id: u32,
    pub version: u64,
    pub suggestions: Vec<Suggestion>,
    pub failures: Vec<AlignmentFailure>,
}

async fn suggest_spans(
    State(state): State<Arc<AppState>>,
    Path((d, t)): Path<(String, u32)>,
) -> ApiResult<Suggestions> {
    blocking(&state, move |state| {
        let snap = state.snapshot();
        let dialogue = snap.dataset.dialogue(&d).ok_or_else(|| ApiError::unknown_turn(&d, t))?;
        let i = dialogue
            .turns
            .iter()
            .position(|x| x.turn_id == t)
            .ok_or_else(|| ApiError::unknown_turn(&d, t))?;
        let prev = i.checked_sub(1).map(|p| &dialogue.turns[p]);
        let mut out = Suggestions {
            dialogue_id: d.clone(),
            turn_id: t,
            version: snap.meta.turn(&d, t).version,
            suggestions: Vec::new(),
            failures: Vec::new(),
        };
        for o in align_turn(&d, &dialogue.turns[i], prev, &state.cfg.sources, &state.cfg.norm) {
            match o.aligned {
                Some(entity) => out.suggestions.push(Suggestion {
                    side: o.side,
                    domain: o.domain,
                    slot: o.slot,
                    value: o.value,
                    entity,
                }),
                None => out.failures.push(AlignmentFailure {
                    side: o.side,
                    domain: o.domain,
                    slot: o.slot,
                    value: o.value,
                    error: o.error.unwrap_or_default(),
                }),
            }
        }
        Ok(out)
    })
    .await
    .map(Json)
}

// -----------------------------------------------------------------------------
// Checks and fixes
// -----------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Turn,
    Dialogue,
    #[default]
    Dataset,
}

#[derive(Debug, Default, Deserialize)]
pub struct CheckQuery {
    #[serde(default)]
    pub scope: Scope,
    pub dialogue_id: Option<String>,
    pub turn_id: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckReport {
    pub scope: Scope,
    pub turns: usize,
    pub findings: Vec<Finding>,
}

fn run_checks(state: &AppState, q: &CheckQuery) -> Result<CheckReport, ApiError> {
    let snap = state.snapshot();
    let (turns, findings) = match q.scope {
        Scope::Turn => {
            let (Some(d), Some(t)) = (&q.dialogue_id, q.turn_id) else {
                return Err(ApiError::bad_request("turn scope needs dialogue_id and turn_id"));
            };
            (1, state.turn_findings(&snap, d, t)?)
        }
        Scope::Dialogue => {
            let Some(d) = &q.dialogue_id else {
                return Err(ApiError::bad_request("dialogue scope needs dialogue_id"));
            };
            let dialogue = snap
                .dataset
                .dialogue(d)
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "UNKNOWN_DIALOGUE", format!("no dialogue {d}")))?;
            let mut out = Vec::new();
            for t in &dialogue.turns {
                out.extend(state.turn_findings(&snap, d, t.turn_id)?);
            }
            (dialogue.turns.len(), out)
        }
        Scope::Dataset => {
            let f = check_dataset(
                &snap.dataset,
                state.cfg.db.as_ref(),
                &snap.vm,
                &state.cfg.norm,
                state.cfg.exec,
            )
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "KB_ERROR", e.to_string()))?;
            (snap.dataset.turn_count(), f)
        }
    };
    state.remember_fixes(&findings);
    Ok(CheckReport {
        scope: q.scope,
        turns,
        findings,
    })
}

async fn check(State(state): State<Arc<AppState>>, Query(q): Query<CheckQuery>) -> ApiResult<CheckReport> {
    blocking(&state, move |state| run_checks(state, &q)).await.map(Json)
}

fn find_fix(state: &AppState, id: &str) -> Result<Fix, ApiError> {
    if let Some(f) = state.proposed.lock().get(id) {
        return Ok(f.clone());
    }
    let snap = state.snapshot();
    let all = check_dataset(
        &snap.dataset,
        state.cfg.db.as_ref(),
        &snap.vm,
        &state.cfg.norm,
        state.cfg.exec,
    )
    .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "KB_ERROR", e.to_string()))?;
    state.remember_fixes(&all);
    all.into_iter()
        .filter_map(|f| f.suggested_fix)
        .find(|f| f.id == id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "UNKNOWN_FIX", format!("no proposed fix {id}")))
}

fn confirm_fix(state: &AppState, id: &str) -> Result<PatchResult, ApiError> {
    let fix = find_fix(state, id)?;
    let (d, t) = (fix.dialogue_id.clone(), fix.turn_id);
    let _w = state.writer.lock();
    let cur = state.snapshot();
    let dataset = apply_fixes(&cur.dataset, std::slice::from_ref(&fix)).map_err(|e| match e {
        CheckError::StaleFix { .. } => ApiError::new(StatusCode::CONFLICT, "STALE_FIX", e.to_string()).at(&d, t),
        CheckError::UnknownTarget { .. } => ApiError::unknown_turn(&d, t),
        other => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "CHECK_ERROR", other.to_string()).at(&d, t),
    })?;
    let mut meta = cur.meta.clone();
    let tm = meta.turn_mut(&d, t);
    tm.version += 1;
    let version = tm.version;
    let mut vm = cur.vm.clone();
    if !fix.mapping_additions.is_empty() {
        apply_mapping_additions(&mut vm, std::slice::from_ref(&fix));
        meta.value_mapping_version += 1;
    }
    let next = Snapshot::new(dataset, meta, vm);
    store::save_turn_edit(&state.cfg.paths, &next).map_err(ApiError::storage)?;
    if !fix.mapping_additions.is_empty() {
        store::save_mapping(&state.cfg.paths, &next).map_err(ApiError::storage)?;
    }
    let snap = state.publish(next);
    state.proposed.lock().remove(id);
    let findings = state.turn_findings(&snap, &d, t)?;
    state.remember_fixes(&findings);
    Ok(PatchResult {
        dialogue_id: d,
        turn_id: t,
        version,
        findings,
    })
}

async fn confirm(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<PatchResult> {
    blocking(&state, move |state| confirm_fix(state, &id)).await.map(Json)
}

// -----------------------------------------------------------------------------
// Progress and value mapping
// -----------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Progress {
    pub total: usize,
    pub checked: usize,
    /// Turns with at least one finding.
    pub flagged: usize,
    pub clean: usize,
}

async fn progress(State(state): State<Arc<AppState>>) -> ApiResult<Progress> {
    blocking(&state, |state| {
        let snap = state.snapshot();
        let refs = snap.dataset.turn_refs();
        let findings = check_dataset(
            &snap.dataset,
            state.cfg.db.as_ref(),
            &snap.vm,
            &state.cfg.norm,
            state.cfg.exec,
        )
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "KB_ERROR", e.to_string()))?;
        let mut flagged: Vec<(&str, u32)> = findings
            .iter()
            .filter_map(|f| Some((f.location.dialogue_id.as_deref()?, f.location.turn_id?)))
            .collect();
        flagged.sort_unstable();
        flagged.dedup();
        let checked = refs.iter().filter(|(d, t)| snap.meta.turn(d, *t).checked).count();
        Ok(Progress {
            total: refs.len(),
            checked,
            flagged: flagged.len(),
            clean: refs.len() - flagged.len(),
        })
    })
    .await
    .map(Json)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ValueMappingView {
    pub version: u64,
    pub mapping: ValueMapping,
}

async fn get_value_mapping(State(state): State<Arc<AppState>>) -> Json<ValueMappingView> {
    let snap = state.snapshot();
    Json(ValueMappingView {
        version: snap.meta.value_mapping_version,
        mapping: snap.vm.clone(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MappingUpdate {
    /// `domain.slot`
    pub slot: String,
    #[serde(default)]
    pub candidates: Vec<String>,
    pub canonical: String,
    pub base_version: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MappingUpdated {
    pub version: u64,
    pub source_value: String,
    pub slot: SlotRef,
    pub entry: MappingEntry,
}

fn update_mapping(state: &AppState, source: &str, u: MappingUpdate) -> Result<MappingUpdated, ApiError> {
    let slot = SlotRef::parse(&u.slot)
        .ok_or_else(|| ApiError::bad_request(format!("slot {:?} is not of the form domain.slot", u.slot)))?;
    let _w = state.writer.lock();
    let cur = state.snapshot();
    if let Some(base) = u.base_version {
        if base != cur.meta.value_mapping_version {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "VERSION_CONFLICT",
                format!(
                    "base version {base} is stale; current is {}",
                    cur.meta.value_mapping_version
                ),
            ));
        }
    }
    let mut vm = cur.vm.clone();
    vm.set_entry(source, &slot, u.candidates, &u.canonical);
    vm.validate()
        .map_err(|m| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "INVALID_VALUE_MAPPING", m))?;
    let mut meta = cur.meta.clone();
    meta.value_mapping_version += 1;
    let next = Snapshot::new(cur.dataset.clone(), meta, vm);
    store::save_mapping(&state.cfg.paths, &next).map_err(ApiError::storage)?;
    let snap = state.publish(next);
    Ok(MappingUpdated {
        version: snap.meta.value_mapping_version,
        source_value: source.to_string(),
        entry: snap.vm.get(source, &slot).expect("just set").clone(),
        slot,
    })
}

async fn put_value_mapping(
    State(state): State<Arc<AppState>>,
    Path(source): Path<String>,
    Json(u): Json<MappingUpdate>,
) -> ApiResult<MappingUpdated> {
    blocking(&state, move |state| update_mapping(state, &source, u))
        .await
        .map(Json)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/turns/next", get(next_task))
        .route("/api/turns/{d}/{t}", get(get_turn).put(put_turn))
        .route("/api/turns/{d}/{t}/suggest-spans", post(suggest_spans))
        .route("/api/check", post(check))
        .route("/api/fixes/{id}/confirm", post(confirm))
        .route("/api/progress", get(progress))
        .route("/api/value-mapping", get(get_value_mapping))
        .route("/api/value-mapping/{source}", put(put_value_mapping))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
