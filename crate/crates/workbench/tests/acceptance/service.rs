use axum::http::{Method, StatusCode};
use serde_json::json;

use crate::fixtures::ensure;

#[path = "../common/mod.rs"]
mod common;

use common::{call, get, Workspace};

const TURN: &str = "/api/turns/suite-1/3";

async fn durability() -> Result<String, String> {
    let ws = Workspace::new();
    let app = ws.router();
    let (s, body) = get(&app, TURN).await;
    ensure(s == StatusCode::OK, || format!("initial read: {s} {body}"))?;
    let base = body["version"].as_u64().ok_or("no version")?;

    let edit = json!({"base_version": base, "user_utterance": "Is it open on Mondays?"});
    let (s, body) = call(&app, Method::PUT, TURN, Some(edit)).await;
    ensure(s == StatusCode::OK, || format!("patch: {s} {body}"))?;
    drop(app);

    let app = ws.router();
    let (_, body) = get(&app, TURN).await;
    ensure(body["turn"]["user_utterance"] == "Is it open on Mondays?", || {
        format!("edit lost on restart: {body}")
    })?;
    ensure(body["version"] == base + 1, || {
        format!("version after restart: {}", body["version"])
    })?;

    let stale = json!({"base_version": base, "user_utterance": "overwritten"});
    let (s, body) = call(&app, Method::PUT, TURN, Some(stale)).await;
    ensure(s == StatusCode::CONFLICT && body["code"] == "VERSION_CONFLICT", || {
        format!("stale write: {s} {body}")
    })?;
    let (_, body) = get(&app, TURN).await;
    ensure(body["turn"]["user_utterance"] == "Is it open on Mondays?", || {
        format!("stale write leaked: {body}")
    })?;

    // many writers on one base version: exactly one lands
    let writers = 16;
    let tasks: Vec<_> = (0..writers)
        .map(|i| {
            let app = app.clone();
            let edit = json!({"base_version": base + 1, "user_utterance": format!("writer {i}")});
            tokio::spawn(async move { call(&app, Method::PUT, TURN, Some(edit)).await.0 })
        })
        .collect();
    let mut ok = 0;
    for t in tasks {
        match t.await.map_err(|e| e.to_string())? {
            StatusCode::OK => ok += 1,
            StatusCode::CONFLICT => {}
            other => return Err(format!("concurrent writer got {other}")),
        }
    }
    ensure(ok == 1, || format!("{ok} of {writers} concurrent writers succeeded"))?;
    drop(app);
    let (_, body) = get(&ws.router(), TURN).await;
    ensure(body["version"] == base + 2, || {
        format!("final version {}", body["version"])
    })?;

    Ok(format!(
        "edit survived restart; stale write got 409; 1 of {writers} concurrent writers won"
    ))
}

pub fn run() -> Result<String, String> {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?
        .block_on(durability())
}
