use std::collections::BTreeMap;

use dialogue_workbench::check::{check_dataset, greedy_constraint_drop, Finding, FindingCode};
use dialogue_workbench::kb::Database;
use dialogue_workbench::model::{char_find_all, ApiCall, Dataset, Record, Side, SlotKey, SlotTriplet};
use dialogue_workbench::norm::{NormConfig, Normalizer};
use dialogue_workbench::value_map::ValueMapping;
use dialogue_workbench::Execution;

use crate::fixtures::{ensure, suite, suite_db, suite_vm};

struct Env {
    clean: Dataset,
    db: Database,
    vm: ValueMapping,
}

impl Env {
    fn findings(&self, ds: &Dataset) -> Result<Vec<Finding>, String> {
        check_dataset(
            ds,
            Some(&self.db),
            &self.vm,
            &NormConfig::default(),
            Execution::default(),
        )
        .map_err(|e| e.to_string())
    }

    /// Checks the mutated copy and demands a finding of `code` at `d/t`.
    fn expect(
        &self,
        ds: &Dataset,
        code: FindingCode,
        d: &str,
        t: u32,
        key: Option<&SlotKey>,
        what: &str,
    ) -> Result<(), String> {
        let findings = self.findings(ds)?;
        let hit = findings.iter().any(|f| {
            f.code == code
                && f.location.dialogue_id.as_deref() == Some(d)
                && f.location.turn_id == Some(t)
                && key.is_none_or(|k| f.location.slot_key.as_ref() == Some(k))
        });
        ensure(hit, || format!("{what} at {d}/{t}: no {code:?} among {findings:?}"))
    }
}

fn delete_entity(ds: &mut Dataset, d: &str, t: u32, side: Side, value: &str) {
    let turn = ds.turn_mut(d, t).unwrap();
    let text = turn.utterance(side).to_string();
    let mut chars: Vec<char> = text.chars().collect();
    for (s, e) in char_find_all(&text, value) {
        chars[s..e].iter_mut().for_each(|c| *c = '#');
    }
    let blanked: String = chars.into_iter().collect();
    match side {
        Side::User => turn.user_utterance = blanked,
        Side::Agent => turn.agent_utterance = blanked,
    }
    turn.spans.retain(|sp| !(sp.side == side && sp.value == value));
}

/// Constraints on open slots whose value excludes some gold record.
fn redundant_constraints(call: &ApiCall, gold: &[Record], db: &Database) -> Vec<SlotTriplet> {
    let records = db.records(&call.domain).unwrap();
    let mut out = Vec::new();
    for slot in records[0].keys() {
        if call.constraints.iter().any(|c| &c.slot == slot) {
            continue;
        }
        if let Some(v) = records
            .iter()
            .map(|r| &r[slot])
            .find(|v| gold.iter().any(|g| g.get(slot) != Some(v)))
        {
            out.push(SlotTriplet::new(&call.domain, slot.as_str(), v.as_str()));
        }
    }
    out
}

fn oracle_distance(records: &[Record], keep: &[&SlotTriplet], gold: &[Record]) -> usize {
    let norm = |s: &str| s.trim().to_lowercase();
    let mut counts: BTreeMap<&Record, i64> = BTreeMap::new();
    for r in records {
        if keep
            .iter()
            .all(|c| r.get(&c.slot).map(|v| norm(v)) == Some(norm(&c.value)))
        {
            *counts.entry(r).or_default() += 1;
        }
    }
    for r in gold {
        *counts.entry(r).or_default() -= 1;
    }
    counts.values().map(|c| c.unsigned_abs() as usize).sum()
}

/// (smallest reachable distance, fewest drops reaching it) over all subsets.
fn exhaustive(call: &ApiCall, gold: &[Record], db: &Database) -> (usize, usize) {
    let n = call.constraints.len();
    let records = db.records(&call.domain).unwrap();
    (0u32..(1 << n))
        .map(|mask| {
            let keep: Vec<&SlotTriplet> = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| &call.constraints[i])
                .collect();
            (oracle_distance(records, &keep, gold), n - keep.len())
        })
        .min()
        .unwrap()
}

pub fn run() -> Result<String, String> {
    let env = Env {
        clean: suite(),
        db: suite_db(),
        vm: suite_vm(),
    };
    ensure(env.clean.turn_count() == 20, || {
        format!("fixture has {} turns", env.clean.turn_count())
    })?;
    let clean_findings = env.findings(&env.clean)?;
    ensure(clean_findings.is_empty(), || {
        format!("clean fixture: {clean_findings:?}")
    })?;

    let mut counts = BTreeMap::new();
    for (d, t) in env.clean.turn_refs() {
        let turn = env.clean.turn(&d, t).unwrap();
        for sp in &turn.spans {
            let mut ds = env.clean.clone();
            delete_entity(&mut ds, &d, t, sp.side, &sp.value);
            env.expect(
                &ds,
                FindingCode::MissingEntity,
                &d,
                t,
                Some(&sp.key()),
                &format!("deleting {:?}", sp.value),
            )?;
            *counts.entry("entity deletion").or_insert(0) += 1;
        }
        for i in 0..turn.spans.len() {
            let mut ds = env.clean.clone();
            ds.turn_mut(&d, t).unwrap().spans.remove(i);
            env.expect(
                &ds,
                FindingCode::SpanCountMismatch,
                &d,
                t,
                None,
                &format!("removing span {i}"),
            )?;
            *counts.entry("span removal").or_insert(0) += 1;
        }
        let (Some(call), Some(gold)) = (&turn.api_call, &turn.api_results) else {
            continue;
        };
        for extra in redundant_constraints(call, gold, &env.db) {
            let mut ds = env.clean.clone();
            ds.turn_mut(&d, t)
                .unwrap()
                .api_call
                .as_mut()
                .unwrap()
                .constraints
                .push(extra.clone());
            env.expect(
                &ds,
                FindingCode::RedundantSlot,
                &d,
                t,
                None,
                &format!("adding {extra:?}"),
            )?;
            *counts.entry("redundant constraint").or_insert(0) += 1;
        }
        for (i, c) in call.constraints.iter().enumerate() {
            let records = env.db.records(&call.domain).unwrap();
            let Some(other) = records.iter().filter_map(|r| r.get(&c.slot)).find(|v| **v != c.value) else {
                continue;
            };
            let mut ds = env.clean.clone();
            ds.turn_mut(&d, t).unwrap().api_call.as_mut().unwrap().constraints[i].value = other.clone();
            env.expect(
                &ds,
                FindingCode::ApiResultMismatch,
                &d,
                t,
                None,
                &format!("{} -> {other:?}", c.slot),
            )?;
            *counts.entry("wrong value").or_insert(0) += 1;
        }
    }
    for kind in ["entity deletion", "span removal", "redundant constraint", "wrong value"] {
        ensure(counts.get(kind).copied().unwrap_or(0) > 0, || {
            format!("no {kind} faults injected")
        })?;
    }

    let norm = Normalizer::from_value_mapping(&env.vm);
    let mut greedy_cases = 0;
    for (d, t) in env.clean.turn_refs() {
        let turn = env.clean.turn(&d, t).unwrap();
        let (Some(call), Some(gold)) = (&turn.api_call, &turn.api_results) else {
            continue;
        };
        let extras = redundant_constraints(call, gold, &env.db);
        let mut variants = vec![call.clone()];
        for k in 0..extras.len() {
            for j in k..extras.len() {
                let mut v = call.clone();
                v.constraints.push(extras[k].clone());
                if j != k {
                    v.constraints.push(extras[j].clone());
                }
                variants.push(v);
            }
        }
        for v in variants.into_iter().filter(|v| v.constraints.len() <= 4) {
            let greedy = greedy_constraint_drop(&v, gold, &env.db, &norm).map_err(|e| e.to_string())?;
            let (best_d, best_drops) = exhaustive(&v, gold, &env.db);
            ensure(greedy.distance == best_d, || {
                format!("{d}/{t}: greedy distance {} vs {best_d}", greedy.distance)
            })?;
            if best_d == 0 {
                ensure(greedy.dropped.len() == best_drops, || {
                    format!("{d}/{t}: greedy dropped {} vs {best_drops}", greedy.dropped.len())
                })?;
            }
            greedy_cases += 1;
        }
    }
    let faults: Vec<String> = counts.iter().map(|(k, n)| format!("{n} {k}")).collect();
    Ok(format!(
        "clean fixture silent; faults caught: {}; greedy = exhaustive on {greedy_cases} calls",
        faults.join(", ")
    ))
}
