//! Evaluation protocols. Turn-by-turn feeds gold context to every subtask;
//! end-to-end carries the predicted state forward within a dialogue and
//! feeds gold agent acts into the next turn's history.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::format::{
    parse_act_seq, parse_api_decision, parse_belief_state, render_api_decision, render_subtask_input,
    serialize_act_seq, serialize_belief_state, FormatError, Style, SubtaskContext, SubtaskKind,
};
use crate::kb::{Database, ResultSet};
use crate::metrics::{self, BleuConfig};
use crate::model::{ActSeq, ApiCall, BeliefState, Dataset, DatasetError, Dialogue, Turn};
use crate::norm::Normalizer;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct PredictError(pub String);

/// Maps a rendered subtask input to model output text.
pub trait Predictor: Sync {
    fn predict(&self, kind: SubtaskKind, input: &str) -> Result<String, PredictError>;

    /// Whether `predict` may be called from several threads at once.
    fn concurrent(&self) -> bool {
        true
    }
}

impl<F> Predictor for F
where
    F: Fn(SubtaskKind, &str) -> Result<String, PredictError> + Sync,
{
    fn predict(&self, kind: SubtaskKind, input: &str) -> Result<String, PredictError> {
        self(kind, input)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub kind: SubtaskKind,
    pub input: String,
    pub output: String,
}

/// Answers from a fixed table keyed by (kind, input); anything else is a miss.
#[derive(Debug, Clone, Default)]
pub struct LookupPredictor {
    table: HashMap<(SubtaskKind, String), String>,
}

impl LookupPredictor {
    /// First entry wins for a repeated (kind, input).
    pub fn from_entries(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        let mut table = HashMap::new();
        for e in entries {
            table.entry((e.kind, e.input)).or_insert(e.output);
        }
        Self { table }
    }

    /// Echoes the gold output for every gold-context input of `ds`.
    pub fn gold_echo(ds: &Dataset, style: Style) -> Result<Self, FormatError> {
        let mut entries = Vec::new();
        for d in &ds.dialogues {
            for io in gold_subtasks(d, style)? {
                entries.extend(io.entries());
            }
        }
        Ok(Self::from_entries(entries))
    }

    /// A JSON array of `{kind, input, output}` objects.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DatasetError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let entries: Vec<ScriptEntry> = serde_json::from_str(&text).map_err(|e| DatasetError::Schema {
            location: format!("{} line {}", path.display(), e.line()),
            reason: e.to_string(),
        })?;
        Ok(Self::from_entries(entries))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Predictor for LookupPredictor {
    fn predict(&self, kind: SubtaskKind, input: &str) -> Result<String, PredictError> {
        self.table
            .get(&(kind, input.to_string()))
            .cloned()
            .ok_or_else(|| PredictError(format!("no scripted {kind} output for this input")))
    }
}

/// Rendered gold inputs and outputs of one turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldTurnIo {
    pub turn_id: u32,
    pub dst: (String, String),
    pub api: (String, String),
    pub da: (String, String),
    pub rg: (String, String),
}

impl GoldTurnIo {
    pub fn entries(&self) -> Vec<ScriptEntry> {
        [
            (SubtaskKind::Dst, &self.dst),
            (SubtaskKind::Api, &self.api),
            (SubtaskKind::Da, &self.da),
            (SubtaskKind::Rg, &self.rg),
        ]
        .into_iter()
        .map(|(kind, (input, output))| ScriptEntry {
            kind,
            input: input.clone(),
            output: output.clone(),
        })
        .collect()
    }
}

fn gold_results(turn: &Turn) -> Option<ResultSet> {
    let call = turn.api_call.as_ref()?;
    Some(ResultSet::new(
        &call.domain,
        turn.api_results.clone().unwrap_or_default(),
    ))
}

fn history_window(turns: &[Turn], upto: usize) -> Vec<ActSeq> {
    let start = upto.saturating_sub(crate::format::HISTORY_WINDOW);
    turns[start..upto].iter().map(|t| t.agent_acts.clone()).collect()
}

/// DA always needs a knowledge block; before any call it renders `null`.
fn knowledge_or_null(k: Option<&ResultSet>) -> ResultSet {
    k.cloned().unwrap_or_else(|| ResultSet::new("", Vec::new()))
}

/// Gold-context inputs and outputs for every turn of a dialogue.
pub fn gold_subtasks(dialogue: &Dialogue, style: Style) -> Result<Vec<GoldTurnIo>, FormatError> {
    let empty = BeliefState::default();
    let mut carried: Option<ResultSet> = None;
    let mut out = Vec::with_capacity(dialogue.turns.len());
    for (i, turn) in dialogue.turns.iter().enumerate() {
        let prev_state = i.checked_sub(1).map_or(&empty, |p| &dialogue.turns[p].belief_state);
        let base = SubtaskContext {
            state: Some(prev_state.clone()),
            history_acts: history_window(&dialogue.turns, i),
            user_utterance: Some(turn.user_utterance.clone()),
            style,
            ..SubtaskContext::default()
        };
        let dst_in = render_subtask_input(SubtaskKind::Dst, &base)?;
        let dst_out = serialize_belief_state(&turn.belief_state, style);

        let mut ctx = base;
        ctx.state = Some(turn.belief_state.clone());
        ctx.knowledge = carried.clone();
        let api_in = render_subtask_input(SubtaskKind::Api, &ctx)?;
        let api_out = render_api_decision(turn.api_call.is_some()).to_string();

        if let Some(r) = gold_results(turn) {
            carried = Some(r);
        }
        ctx.knowledge = Some(knowledge_or_null(carried.as_ref()));
        let da_in = render_subtask_input(SubtaskKind::Da, &ctx)?;
        let da_out = serialize_act_seq(&turn.agent_acts, style)?;

        ctx.acts_for_rg = Some(turn.agent_acts.clone());
        let rg_in = render_subtask_input(SubtaskKind::Rg, &ctx)?;
        out.push(GoldTurnIo {
            turn_id: turn.turn_id,
            dst: (dst_in, dst_out),
            api: (api_in, api_out),
            da: (da_in, da_out),
            rg: (rg_in, turn.agent_utterance.clone()),
        });
    }
    Ok(out)
}

/// Per-turn scores. Indicators that a protocol does not compute stay `None`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub dialogue_id: String,
    pub turn_id: u32,
    /// Task domains of the turn: domains of its gold acts and gold call.
    pub domains: Vec<String>,
    pub dst: Option<u8>,
    pub da: Option<u8>,
    pub jga: Option<u8>,
    pub api: Option<u8>,
    pub daa: Option<u8>,
    pub ser: Option<u8>,
    /// SER restricted to each task domain's gold entities.
    pub task_ser: BTreeMap<String, u8>,
    pub response: Option<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dst_acc: Option<f64>,
    pub da_acc: Option<f64>,
    pub jga: Option<f64>,
    pub tsr: Option<f64>,
    pub dsr: Option<f64>,
    pub api_acc: Option<f64>,
    pub daa: Option<f64>,
    pub bleu: Option<f64>,
    pub ser: Option<f64>,
    pub trace: Vec<TurnTrace>,
}

impl EvalReport {
    /// `(name, value)` in report order.
    pub fn summary(&self) -> [(&'static str, Option<f64>); 9] {
        [
            ("dst_acc", self.dst_acc),
            ("da_acc", self.da_acc),
            ("jga", self.jga),
            ("tsr", self.tsr),
            ("dsr", self.dsr),
            ("api_acc", self.api_acc),
            ("daa", self.daa),
            ("bleu", self.bleu),
            ("ser", self.ser),
        ]
    }

    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        for (name, v) in self.summary() {
            let shown = v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
            out.push_str(&format!("{name:<8} {shown:>8}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    pub style: Style,
    pub bleu: BleuConfig,
    pub exec: Execution,
}

fn mean(xs: impl Iterator<Item = Option<u8>>) -> Option<f64> {
    let (mut sum, mut n) = (0u64, 0u64);
    for x in xs.flatten() {
        sum += u64::from(x);
        n += 1;
    }
    (n > 0).then(|| 100.0 * sum as f64 / n as f64)
}

/// The `general` pseudo-domain (greetings, goodbyes) is not a task.
fn task_domains(turn: &Turn) -> Vec<String> {
    let mut out: BTreeSet<String> = turn
        .agent_acts
        .domains()
        .into_iter()
        .filter(|d| *d != "general")
        .map(str::to_string)
        .collect();
    if let Some(c) = &turn.api_call {
        out.insert(c.domain.clone());
    }
    out.into_iter().collect()
}

fn gold_entities(acts: &ActSeq, domain: Option<&str>) -> Vec<String> {
    acts.values()
        .filter(|(a, _)| domain.is_none_or(|d| a.domain == d))
        .map(|(_, v)| v.to_string())
        .collect()
}

/// Task and dialogue success rates over an end-to-end trace. A task is a
/// (dialogue, domain) pair; it succeeds when every turn touching the domain
/// has a correct API prediction and a response carrying the domain's gold
/// entities. Dialogues without tasks are left out of the dialogue rate.
pub fn tsr_dsr(trace: &[TurnTrace]) -> (Option<f64>, Option<f64>) {
    let mut tasks: BTreeMap<(&str, &str), bool> = BTreeMap::new();
    for t in trace {
        for d in &t.domains {
            let ok = t.api == Some(1) && t.task_ser.get(d).copied().unwrap_or(1) == 0;
            let e = tasks.entry((t.dialogue_id.as_str(), d.as_str())).or_insert(true);
            *e &= ok;
        }
    }
    if tasks.is_empty() {
        return (None, None);
    }
    let tsr = 100.0 * tasks.values().filter(|ok| **ok).count() as f64 / tasks.len() as f64;
    let mut dialogues: BTreeMap<&str, bool> = BTreeMap::new();
    for ((d, _), ok) in &tasks {
        *dialogues.entry(d).or_insert(true) &= *ok;
    }
    let dsr = 100.0 * dialogues.values().filter(|ok| **ok).count() as f64 / dialogues.len() as f64;
    (Some(tsr), Some(dsr))
}

fn corpus_bleu(trace: &[TurnTrace], ds: &Dataset, cfg: &BleuConfig) -> Option<f64> {
    let mut preds = Vec::new();
    let mut refs = Vec::new();
    for t in trace {
        if let (Some(r), Some(gold)) = (&t.response, ds.turn(&t.dialogue_id, t.turn_id)) {
            preds.push(r.clone());
            refs.push(gold.agent_utterance.clone());
        }
    }
    match metrics::bleu_with(&preds, &refs, cfg) {
        Ok(b) => Some(b),
        Err(e) => {
            debug!("bleu undefined: {e}");
            None
        }
    }
}

fn effective_exec(p: &dyn Predictor, exec: Execution) -> Execution {
    if p.concurrent() {
        exec
    } else {
        Execution::Serial
    }
}

fn call(p: &dyn Predictor, kind: SubtaskKind, input: &str, notes: &mut Vec<String>) -> Option<String> {
    match p.predict(kind, input) {
        Ok(out) => Some(out),
        Err(e) => {
            warn!("{kind} predictor failure: {e}");
            notes.push(format!("{kind}: predictor failed: {e}"));
            None
        }
    }
}

fn parsed<T>(
    kind: SubtaskKind,
    out: Option<String>,
    f: impl Fn(&str) -> Result<T, FormatError>,
    notes: &mut Vec<String>,
) -> Option<T> {
    let out = out?;
    match f(&out) {
        Ok(v) => Some(v),
        Err(e) => {
            warn!("unparseable {kind} output {out:?}: {e}");
            notes.push(format!("{kind}: unparseable output: {e}"));
            None
        }
    }
}

/// Each subtask on gold context; reports dst_acc, da_acc and bleu.
pub fn evaluate_turn_by_turn(ds: &Dataset, p: &dyn Predictor, norm: &Normalizer, opts: &EvalOptions) -> EvalReport {
    let units: Vec<(&Dialogue, usize)> = ds
        .dialogues
        .iter()
        .flat_map(|d| (0..d.turns.len()).map(move |i| (d, i)))
        .collect();
    let gold_io: HashMap<&str, Vec<GoldTurnIo>> = ds
        .dialogues
        .iter()
        .filter_map(|d| match gold_subtasks(d, opts.style) {
            Ok(io) => Some((d.dialogue_id.as_str(), io)),
            Err(e) => {
                warn!("dialogue {} cannot be rendered: {e}", d.dialogue_id);
                None
            }
        })
        .collect();
    let trace = exec::map(effective_exec(p, opts.exec), &units, |(d, i)| {
        let turn = &d.turns[*i];
        let mut tr = TurnTrace {
            dialogue_id: d.dialogue_id.clone(),
            turn_id: turn.turn_id,
            domains: task_domains(turn),
            ..TurnTrace::default()
        };
        let Some(io) = gold_io.get(d.dialogue_id.as_str()).map(|v| &v[*i]) else {
            tr.notes.push("gold context cannot be rendered".into());
            tr.dst = Some(0);
            tr.da = Some(0);
            return tr;
        };
        let out = call(p, SubtaskKind::Dst, &io.dst.0, &mut tr.notes);
        let state = parsed(SubtaskKind::Dst, out, parse_belief_state, &mut tr.notes);
        tr.dst = Some(state.map_or(0, |s| metrics::jga(&s, &turn.belief_state, norm)));

        let out = call(p, SubtaskKind::Da, &io.da.0, &mut tr.notes);
        let acts = parsed(SubtaskKind::Da, out, parse_act_seq, &mut tr.notes);
        tr.da = Some(acts.map_or(0, |a| metrics::da_accuracy(&a, &turn.agent_acts, norm)));

        tr.response = Some(call(p, SubtaskKind::Rg, &io.rg.0, &mut tr.notes).unwrap_or_default());
        tr
    });
    EvalReport {
        dst_acc: mean(trace.iter().map(|t| t.dst)),
        da_acc: mean(trace.iter().map(|t| t.da)),
        bleu: corpus_bleu(&trace, ds, &opts.bleu),
        trace,
        ..EvalReport::default()
    }
}

/// Domain whose constraints a predicted call uses: the domain of the last
/// triplet that changed this turn, else the previous active domain, else the
/// domain of the last triplet.
pub fn active_domain(prev: &BeliefState, current: &BeliefState, prev_active: Option<&str>) -> Option<String> {
    if let Some(t) = current.delta_from(prev).last() {
        return Some(t.domain.clone());
    }
    if let Some(d) = prev_active {
        return Some(d.to_string());
    }
    current.triplets.last().map(|t| t.domain.clone())
}

fn call_from_state(state: &BeliefState, domain: &str) -> ApiCall {
    ApiCall::new(
        domain,
        state.triplets.iter().filter(|t| t.domain == domain).cloned().collect(),
    )
}

fn end_to_end_dialogue(
    d: &Dialogue,
    p: &dyn Predictor,
    db: &Database,
    norm: &Normalizer,
    style: Style,
) -> Vec<TurnTrace> {
    let mut state = BeliefState::default();
    let mut active: Option<String> = None;
    let mut carried: Option<ResultSet> = None;
    let mut out = Vec::with_capacity(d.turns.len());
    for (i, turn) in d.turns.iter().enumerate() {
        let mut tr = TurnTrace {
            dialogue_id: d.dialogue_id.clone(),
            turn_id: turn.turn_id,
            domains: task_domains(turn),
            ..TurnTrace::default()
        };
        let mut ctx = SubtaskContext {
            state: Some(state.clone()),
            history_acts: history_window(&d.turns, i),
            user_utterance: Some(turn.user_utterance.clone()),
            style,
            ..SubtaskContext::default()
        };

        // DST; an unusable prediction leaves the carried state unchanged
        let predicted = match render_subtask_input(SubtaskKind::Dst, &ctx) {
            Ok(input) => {
                let out = call(p, SubtaskKind::Dst, &input, &mut tr.notes);
                parsed(SubtaskKind::Dst, out, parse_belief_state, &mut tr.notes)
            }
            Err(e) => {
                tr.notes.push(format!("DST: {e}"));
                None
            }
        };
        let prev_state = std::mem::take(&mut state);
        state = predicted.unwrap_or_else(|| prev_state.clone());
        active = active_domain(&prev_state, &state, active.as_deref());
        tr.jga = Some(metrics::jga(&state, &turn.belief_state, norm));

        // API decision, then the call built from the predicted state
        ctx.state = Some(state.clone());
        ctx.knowledge = carried.clone();
        let decision = render_subtask_input(SubtaskKind::Api, &ctx)
            .map_err(|e| tr.notes.push(format!("API: {e}")))
            .ok()
            .and_then(|input| {
                let out = call(p, SubtaskKind::Api, &input, &mut tr.notes);
                parsed(SubtaskKind::Api, out, parse_api_decision, &mut tr.notes)
            });
        let pred_call = match (decision, &active) {
            (Some(true), Some(domain)) => Some(call_from_state(&state, domain)),
            _ => None,
        };
        tr.api = Some(if decision.is_none() {
            0
        } else {
            metrics::api_accuracy(
                decision == Some(true),
                pred_call.as_ref(),
                turn.api_call.is_some(),
                turn.api_call.as_ref(),
                norm,
            )
        });
        if let Some(c) = &pred_call {
            match db.execute(c, norm) {
                Ok(r) => carried = Some(r),
                Err(e) => tr.notes.push(format!("API: {e}")),
            }
        }

        // DA on this turn's knowledge, RG on the predicted acts
        ctx.knowledge = Some(knowledge_or_null(carried.as_ref()));
        let acts = render_subtask_input(SubtaskKind::Da, &ctx)
            .map_err(|e| tr.notes.push(format!("DA: {e}")))
            .ok()
            .and_then(|input| {
                let out = call(p, SubtaskKind::Da, &input, &mut tr.notes);
                parsed(SubtaskKind::Da, out, parse_act_seq, &mut tr.notes)
            });
        tr.daa = Some(
            acts.as_ref()
                .map_or(0, |a| metrics::da_accuracy(a, &turn.agent_acts, norm)),
        );
        let response = acts.and_then(|a| {
            ctx.acts_for_rg = Some(a);
            render_subtask_input(SubtaskKind::Rg, &ctx)
                .map_err(|e| tr.notes.push(format!("RG: {e}")))
                .ok()
                .and_then(|input| call(p, SubtaskKind::Rg, &input, &mut tr.notes))
        });
        let response = response.unwrap_or_default();
        tr.ser = Some(metrics::ser(&response, &gold_entities(&turn.agent_acts, None), norm));
        for dom in &tr.domains {
            let ents = gold_entities(&turn.agent_acts, Some(dom));
            tr.task_ser.insert(dom.clone(), metrics::ser(&response, &ents, norm));
        }
        tr.response = Some(response);
        out.push(tr);
    }
    out
}

/// Full pipeline per dialogue; dialogues run independently.
pub fn evaluate_end_to_end(
    ds: &Dataset,
    p: &dyn Predictor,
    db: &Database,
    norm: &Normalizer,
    opts: &EvalOptions,
) -> EvalReport {
    let per_dialogue = exec::map(effective_exec(p, opts.exec), &ds.dialogues, |d| {
        end_to_end_dialogue(d, p, db, norm, opts.style)
    });
    let trace: Vec<TurnTrace> = per_dialogue.into_iter().flatten().collect();
    let (tsr, dsr) = tsr_dsr(&trace);
    EvalReport {
        jga: mean(trace.iter().map(|t| t.jga)),
        api_acc: mean(trace.iter().map(|t| t.api)),
        daa: mean(trace.iter().map(|t| t.daa)),
        ser: mean(trace.iter().map(|t| t.ser)),
        bleu: corpus_bleu(&trace, ds, &opts.bleu),
        tsr,
        dsr,
        trace,
        ..EvalReport::default()
    }
}
