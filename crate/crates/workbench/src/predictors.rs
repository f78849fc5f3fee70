//! Predictor backends selectable from the command line.

use std::time::Duration;

use anyhow::{bail, Context};
use dialogue_workbench::eval::{LookupPredictor, PredictError, Predictor};
use dialogue_workbench::format::{Style, SubtaskKind};
use dialogue_workbench::model::Dataset;
use serde::{Deserialize, Serialize};

/// Sends `{"kind", "input"}` to a URL and reads `{"output"}` back.
pub struct HttpPredictor {
    url: String,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    kind: SubtaskKind,
    input: &'a str,
}

#[derive(Deserialize)]
struct HttpResponse {
    output: String,
}

impl HttpPredictor {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { url: url.into(), agent }
    }
}

impl Predictor for HttpPredictor {
    fn predict(&self, kind: SubtaskKind, input: &str) -> Result<String, PredictError> {
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(HttpRequest { kind, input })
            .map_err(|e| PredictError(format!("{}: {e}", self.url)))?;
        let body: HttpResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| PredictError(format!("{}: bad response: {e}", self.url)))?;
        Ok(body.output)
    }
}

/// `echo`, `script:FILE` or `http:URL`.
pub fn from_spec(spec: &str, ds: &Dataset, style: Style) -> anyhow::Result<Box<dyn Predictor>> {
    if spec == "echo" {
        return Ok(Box::new(
            LookupPredictor::gold_echo(ds, style).context("rendering gold outputs")?,
        ));
    }
    if let Some(path) = spec.strip_prefix("script:") {
        let p = LookupPredictor::load(path).with_context(|| format!("loading script {path}"))?;
        return Ok(Box::new(p));
    }
    if let Some(url) = spec.strip_prefix("http:") {
        // accept both http:URL and a bare http://host form
        let url = if url.starts_with("//") {
            format!("http:{url}")
        } else {
            url.to_string()
        };
        return Ok(Box::new(HttpPredictor::new(url, Duration::from_secs(60))));
    }
    bail!("unknown predictor {spec:?}; expected echo, script:FILE or http:URL")
}
