use std::collections::HashMap;

use dialogue_workbench::eval::{
    evaluate_end_to_end, evaluate_turn_by_turn, gold_subtasks, EvalOptions, GoldTurnIo, LookupPredictor, PredictError,
    Predictor,
};
use dialogue_workbench::format::{parse_belief_state, serialize_belief_state, Style, SubtaskKind};
use dialogue_workbench::model::{BeliefState, Dataset};
use dialogue_workbench::norm::Normalizer;

use crate::fixtures::{ensure, suite, suite_db, suite_vm};

fn close(a: Option<f64>, b: f64) -> bool {
    a.is_some_and(|a| (a - b).abs() < 1e-9)
}

/// Applies the gold state change to whatever state it is shown and drops
/// one slot on every first turn. Other subtasks answer gold.
struct FirstTurnSlip {
    by_utterance: HashMap<String, (usize, GoldTurnIo, BeliefState, BeliefState)>,
}

impl FirstTurnSlip {
    fn new(ds: &Dataset) -> Result<Self, String> {
        let mut by_utterance = HashMap::new();
        for d in &ds.dialogues {
            let io = gold_subtasks(d, Style::ImplicitRelation).map_err(|e| e.to_string())?;
            for (i, (t, io)) in d.turns.iter().zip(io).enumerate() {
                let prev = if i == 0 {
                    BeliefState::default()
                } else {
                    d.turns[i - 1].belief_state.clone()
                };
                by_utterance.insert(t.user_utterance.clone(), (i, io, prev, t.belief_state.clone()));
            }
        }
        Ok(Self { by_utterance })
    }
}

fn between<'a>(s: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let a = s.find(open)? + open.len();
    let b = a + s[a..].find(close)?;
    Some(s[a..b].trim())
}

impl Predictor for FirstTurnSlip {
    fn predict(&self, kind: SubtaskKind, input: &str) -> Result<String, PredictError> {
        let utt = between(input, "USER: ", " <endofhistory>").ok_or_else(|| PredictError("no history".into()))?;
        let (i, io, gold_prev, gold) = self.by_utterance.get(utt).ok_or_else(|| PredictError(utt.into()))?;
        Ok(match kind {
            SubtaskKind::Dst => {
                let shown = between(input, "<state>", "<endofstate>").ok_or_else(|| PredictError("no state".into()))?;
                let mut state = parse_belief_state(shown).map_err(|e| PredictError(e.to_string()))?;
                state
                    .triplets
                    .retain(|t| gold_prev.get(&t.key()).is_none() || gold.get(&t.key()).is_some());
                for t in gold.delta_from(gold_prev) {
                    match state.triplets.iter_mut().find(|s| s.key() == t.key()) {
                        Some(s) => s.value = t.value.clone(),
                        None => state.triplets.push(t.clone()),
                    }
                }
                if *i == 0 {
                    state.triplets.pop();
                }
                serialize_belief_state(&state, Style::ImplicitRelation)
            }
            SubtaskKind::Api => io.api.1.clone(),
            SubtaskKind::Da => io.da.1.clone(),
            SubtaskKind::Rg => io.rg.1.clone(),
        })
    }
}

pub fn run() -> Result<String, String> {
    let ds = suite();
    let db = suite_db();
    let norm = Normalizer::from_value_mapping(&suite_vm());
    let opts = EvalOptions::default();

    let echo = LookupPredictor::gold_echo(&ds, Style::ImplicitRelation).map_err(|e| e.to_string())?;
    let r = evaluate_end_to_end(&ds, &echo, &db, &norm, &opts);
    for (name, v) in [
        ("JGA", r.jga),
        ("TSR", r.tsr),
        ("DSR", r.dsr),
        ("API", r.api_acc),
        ("DAA", r.daa),
        ("BLEU", r.bleu),
    ] {
        ensure(close(v, 100.0), || {
            format!("gold echo {name} = {v:?}\n{}", r.summary_table())
        })?;
    }
    ensure(close(r.ser, 0.0), || format!("gold echo SER = {:?}", r.ser))?;

    let slip = FirstTurnSlip::new(&ds)?;
    let tbt = evaluate_turn_by_turn(&ds, &slip, &norm, &opts);
    let e2e = evaluate_end_to_end(&ds, &slip, &db, &norm, &opts);
    let (dst, jga) = (tbt.dst_acc.unwrap_or(f64::NAN), e2e.jga.unwrap_or(f64::NAN));
    ensure(jga < dst, || {
        format!("end-to-end JGA {jga} not below turn-by-turn DST {dst}")
    })?;
    Ok(format!(
        "gold echo perfect over {} turns (SER 0, BLEU 100); first-turn slip: turn-by-turn DST {dst:.1} > end-to-end JGA {jga:.1}",
        r.trace.len()
    ))
}
