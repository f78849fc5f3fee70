//! Automated annotation checking: entity/span consistency, API-result
//! consistency with suggested fixes, value-mapping construction and
//! cross-domain value consistency.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::AlignedEntity;
use crate::kb::{Database, KbError};
use crate::model::{ApiCall, BeliefState, Dataset, Record, Side, SlotKey, SlotTriplet, Turn};
use crate::norm::{basic_normalize, normalize_needle, MappedText, NormConfig, Normalizer};
use crate::value_map::{SlotRef, ValueMapping};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FindingCode {
    MissingEntity,
    RedundantSlot,
    SpanCountMismatch,
    ApiResultMismatch,
    ValueInconsistent,
    NeedsReannotation,
}

impl FindingCode {
    pub fn auto_fixable(&self) -> bool {
        matches!(self, FindingCode::RedundantSlot | FindingCode::ApiResultMismatch)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Location {
    pub dialogue_id: Option<String>,
    pub turn_id: Option<u32>,
    pub slot_key: Option<SlotKey>,
}

impl Location {
    pub fn turn(dialogue_id: &str, turn_id: u32) -> Self {
        Self {
            dialogue_id: Some(dialogue_id.to_string()),
            turn_id: Some(turn_id),
            slot_key: None,
        }
    }

    fn with_slot(mut self, key: SlotKey) -> Self {
        self.slot_key = Some(key);
        self
    }
}

/// A value-mapping entry proposed by the API checker: the annotated
/// `source` value should map to the database's `target` value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MappingAddition {
    pub slot: SlotRef,
    pub source: String,
    pub target: String,
}

/// A reviewable edit to one turn's API call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fix {
    pub id: String,
    pub dialogue_id: String,
    pub turn_id: u32,
    /// The call as found; applying the fix to anything else is stale.
    pub before: ApiCall,
    pub after: ApiCall,
    pub dropped: Vec<SlotTriplet>,
    pub mapping_additions: Vec<MappingAddition>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub code: FindingCode,
    pub location: Location,
    pub message: String,
    pub suggested_fix: Option<Fix>,
}

impl Finding {
    fn new(code: FindingCode, location: Location, message: impl Into<String>) -> Self {
        Self {
            code,
            location,
            message: message.into(),
            suggested_fix: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckError {
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("stale fix {id}: turn no longer matches the recorded call")]
    StaleFix { id: String },
    #[error("fix {id} targets unknown turn {dialogue_id}/{turn_id}")]
    UnknownTarget {
        id: String,
        dialogue_id: String,
        turn_id: u32,
    },
    #[error("datasets are not turn-parallel: {0}")]
    ParallelismError(String),
}

// -----------------------------------------------------------------------------
// Entity checking
// -----------------------------------------------------------------------------

/// What the previous turn contributes: state values already established and
/// agent offers the user may accept without repeating them.
#[derive(Debug, Clone, Copy, Default)]
pub struct PriorContext<'a> {
    pub state: Option<&'a BeliefState>,
    pub agent_acts: Option<&'a crate::model::ActSeq>,
}

impl<'a> PriorContext<'a> {
    pub fn from_previous(prev: Option<&'a Turn>) -> Self {
        Self {
            state: prev.map(|t| &t.belief_state),
            agent_acts: prev.map(|t| &t.agent_acts),
        }
    }
}

/// One annotation value that must be highlighted in an utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectedEntity {
    pub side: Side,
    pub key: SlotKey,
    pub value: String,
}

/// Annotation values a turn's spans must cover: new or changed user state
/// values (except ones accepted from the previous agent offer) and agent act
/// values.
pub fn expected_entities(turn: &Turn, prior: PriorContext<'_>) -> Vec<ExpectedEntity> {
    let empty = BeliefState::default();
    let prev_state = prior.state.unwrap_or(&empty);
    let mut out = Vec::new();
    for t in turn.belief_state.delta_from(prev_state) {
        let offered = prior.agent_acts.is_some_and(|acts| {
            acts.items.iter().any(|a| {
                a.domain == t.domain && a.slot.as_deref() == Some(&t.slot) && a.value.as_deref() == Some(&t.value)
            })
        });
        if !offered {
            out.push(ExpectedEntity {
                side: Side::User,
                key: t.key(),
                value: t.value.clone(),
            });
        }
    }
    for (a, v) in turn.agent_acts.values() {
        let key = SlotKey::new(
            &a.domain,
            a.slot.as_deref().unwrap_or_default(),
            a.effective_relation().unwrap_or_default(),
        );
        if !out
            .iter()
            .any(|e| e.side == Side::Agent && e.key == key && e.value == v)
        {
            out.push(ExpectedEntity {
                side: Side::Agent,
                key,
                value: v.to_string(),
            });
        }
    }
    out
}

fn occurs(surface: &str, text: &MappedText, norm: &NormConfig) -> bool {
    let needle = normalize_needle(surface, norm);
    !needle.is_empty() && text.chars.windows(needle.len()).any(|w| w == needle.as_slice())
}

/// MISSING_ENTITY for every expected value without a covering span, and
/// SPAN_COUNT_MISMATCH per side whose span count differs from its number of
/// distinct values.
pub fn check_entities(
    dialogue_id: &str,
    turn: &Turn,
    prior: PriorContext<'_>,
    vm: &ValueMapping,
    norm: &NormConfig,
) -> Vec<Finding> {
    let loc = Location::turn(dialogue_id, turn.turn_id);
    let expected = expected_entities(turn, prior);
    let mut findings = Vec::new();
    for e in &expected {
        let forms = vm.surface_forms(&e.value, &SlotRef::new(&e.key.domain, &e.key.slot));
        let normalized: Vec<String> = forms.iter().map(|f| basic_normalize(f)).collect();
        let covered = turn.spans_on(e.side).any(|s| {
            s.domain == e.key.domain && s.slot == e.key.slot && normalized.contains(&basic_normalize(&s.value))
        });
        if covered {
            continue;
        }
        let text = MappedText::new(turn.utterance(e.side), norm);
        let message = if forms.iter().any(|f| occurs(f, &text, norm)) {
            format!(
                "{} value {:?} occurs in the {} utterance but is not highlighted",
                e.key, e.value, e.side
            )
        } else {
            format!(
                "{} value {:?} does not occur in the {} utterance",
                e.key, e.value, e.side
            )
        };
        findings.push(Finding::new(
            FindingCode::MissingEntity,
            loc.clone().with_slot(e.key.clone()),
            message,
        ));
    }
    for side in [Side::User, Side::Agent] {
        let distinct: BTreeSet<(&SlotKey, &str)> = expected
            .iter()
            .filter(|e| e.side == side)
            .map(|e| (&e.key, e.value.as_str()))
            .collect();
        let spans = turn.spans_on(side).count();
        if spans != distinct.len() {
            findings.push(Finding::new(
                FindingCode::SpanCountMismatch,
                loc.clone(),
                format!(
                    "{side} utterance has {spans} highlighted spans for {} annotation values",
                    distinct.len()
                ),
            ));
        }
    }
    findings
}

// -----------------------------------------------------------------------------
// API checking
// -----------------------------------------------------------------------------

fn normalized_records(records: &[Record], norm: &Normalizer) -> Vec<BTreeMap<String, String>> {
    records
        .iter()
        .map(|r| r.iter().map(|(k, v)| (k.clone(), norm.normalize(v))).collect())
        .collect()
}

/// Size of the symmetric difference between two record multisets.
fn symmetric_difference(a: &[Record], b: &[Record], norm: &Normalizer) -> usize {
    let mut counts: HashMap<BTreeMap<String, String>, i64> = HashMap::new();
    for r in normalized_records(a, norm) {
        *counts.entry(r).or_default() += 1;
    }
    for r in normalized_records(b, norm) {
        *counts.entry(r).or_default() -= 1;
    }
    counts.values().map(|c| c.unsigned_abs() as usize).sum()
}

/// Outcome of greedy constraint dropping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropOutcome {
    pub call: ApiCall,
    pub dropped: Vec<SlotTriplet>,
    pub distance: usize,
}

impl DropOutcome {
    pub fn exact(&self) -> bool {
        self.distance == 0
    }
}

/// Number of gold records that fail constraint `c`.
fn gold_violations(c: &SlotTriplet, gold: &[Record], norm: &Normalizer) -> usize {
    let want = c.relation != crate::model::NOT_EQUAL_TO;
    gold.iter()
        .filter(|r| r.get(&c.slot).is_some_and(|v| norm.eq(v, &c.value)) != want)
        .count()
}

/// Drops constraints one at a time until the results match `gold` or no
/// move helps. A constraint some gold record fails can never be part of an
/// exact call, so those go first (most violations first); after that the
/// drop that most reduces the symmetric difference wins. Ties go to the
/// earliest constraint.
pub fn greedy_constraint_drop(
    call: &ApiCall,
    gold: &[Record],
    db: &Database,
    norm: &Normalizer,
) -> Result<DropOutcome, KbError> {
    let mut current = call.clone();
    let mut dropped = Vec::new();
    let mut distance = symmetric_difference(&db.execute(&current, norm)?.records, gold, norm);
    let mut best_seen = (distance, 0);
    while distance > 0 && !current.constraints.is_empty() {
        let mut best: Option<(usize, usize, usize)> = None;
        for i in 0..current.constraints.len() {
            let v = gold_violations(&current.constraints[i], gold, norm);
            let mut trial = current.clone();
            trial.constraints.remove(i);
            let d = symmetric_difference(&db.execute(&trial, norm)?.records, gold, norm);
            if v == 0 && d >= distance {
                continue;
            }
            if best.is_none_or(|(_, bv, bd)| v > bv || (v == bv && d < bd)) {
                best = Some((i, v, d));
            }
        }
        let Some((i, _, d)) = best else { break };
        dropped.push(current.constraints.remove(i));
        distance = d;
        if d < best_seen.0 {
            best_seen = (d, dropped.len());
        }
    }
    // violation-driven drops may pass through worse states; keep the best prefix
    let (distance, n) = best_seen;
    let mut call = call.clone();
    call.constraints.retain(|c| !dropped[..n].contains(c));
    dropped.truncate(n);
    Ok(DropOutcome {
        call,
        dropped,
        distance,
    })
}

/// Replaces constraint values that disagree with a value shared by every gold
/// record. Returns the rewritten call and the `(constraint, new value)` pairs.
fn substitute_values(call: &ApiCall, gold: &[Record], norm: &Normalizer) -> (ApiCall, Vec<(SlotTriplet, String)>) {
    let mut out = call.clone();
    let mut changes = Vec::new();
    if gold.is_empty() {
        return (out, changes);
    }
    for c in &mut out.constraints {
        if c.relation != crate::model::EQUAL_TO {
            continue;
        }
        let values: BTreeSet<&String> = gold.iter().filter_map(|r| r.get(&c.slot)).collect();
        if values.len() != 1 || gold.iter().any(|r| !r.contains_key(&c.slot)) {
            continue;
        }
        let shared = values.into_iter().next().expect("one value").clone();
        if !norm.eq(&shared, &c.value) {
            changes.push((c.clone(), shared.clone()));
            c.value = shared;
        }
    }
    (out, changes)
}

fn fix_id(dialogue_id: &str, turn_id: u32, after: &ApiCall) -> String {
    let text = format!(
        "{dialogue_id}\u{1f}{turn_id}\u{1f}{}",
        serde_json::to_string(after).unwrap_or_default()
    );
    format!("{:016x}", crate::exec::stable_hash(text.as_bytes()))
}

/// Re-executes the gold call and compares with the gold results. On a
/// mismatch proposes, in order of preference: dropping constraints that are
/// not backed by the belief state (REDUNDANT_SLOT); rewriting values to the
/// value every gold record shares, recording a mapping addition when the
/// annotated value never occurs in the database; dropping constraints; both.
pub fn check_api(dialogue_id: &str, turn: &Turn, db: &Database, norm: &Normalizer) -> Result<Vec<Finding>, KbError> {
    let (Some(call), Some(gold)) = (&turn.api_call, &turn.api_results) else {
        return Ok(Vec::new());
    };
    let results = db.execute(call, norm)?;
    let initial = symmetric_difference(&results.records, gold, norm);
    if initial == 0 {
        return Ok(Vec::new());
    }
    let loc = Location::turn(dialogue_id, turn.turn_id);
    let verify = |c: &ApiCall| -> Result<bool, KbError> {
        Ok(symmetric_difference(&db.execute(c, norm)?.records, gold, norm) == 0)
    };
    let in_state = |t: &SlotTriplet| turn.belief_state.get(&t.key()).is_some();

    let greedy = greedy_constraint_drop(call, gold, db, norm)?;
    let (substituted, changes) = substitute_values(call, gold, norm);

    let make_fix =
        |after: ApiCall, dropped: Vec<SlotTriplet>, changes: &[(SlotTriplet, String)]| -> Result<Fix, KbError> {
            let column: BTreeSet<String> = db
                .records(&call.domain)?
                .iter()
                .flat_map(|r| r.values().map(|v| norm.normalize(v)))
                .collect();
            let mapping_additions = changes
                .iter()
                .filter(|(c, _)| !column.contains(&norm.normalize(&c.value)))
                .map(|(c, target)| MappingAddition {
                    slot: SlotRef::new(&c.domain, &c.slot),
                    source: c.value.clone(),
                    target: target.clone(),
                })
                .collect();
            Ok(Fix {
                id: fix_id(dialogue_id, turn.turn_id, &after),
                dialogue_id: dialogue_id.to_string(),
                turn_id: turn.turn_id,
                before: call.clone(),
                after,
                dropped,
                mapping_additions,
            })
        };

    let describe = |n: usize| {
        format!(
            "API call returns {} records; gold has {} (difference {initial})",
            n,
            gold.len()
        )
    };
    let mut finding = Finding::new(
        FindingCode::ApiResultMismatch,
        loc.clone(),
        describe(results.available_options),
    );

    if greedy.exact() && greedy.dropped.iter().all(|d| !in_state(d)) {
        debug_assert!(verify(&greedy.call)?);
        let names: Vec<String> = greedy
            .dropped
            .iter()
            .map(|d| format!("{}={}", d.slot, d.value))
            .collect();
        finding.code = FindingCode::RedundantSlot;
        finding.location.slot_key = greedy.dropped.first().map(SlotTriplet::key);
        finding.message = format!("{}; redundant constraints: {}", finding.message, names.join(", "));
        finding.suggested_fix = Some(make_fix(greedy.call.clone(), greedy.dropped.clone(), &[])?);
    } else if !changes.is_empty() && verify(&substituted)? {
        finding.location.slot_key = changes.first().map(|(c, _)| c.key());
        finding.suggested_fix = Some(make_fix(substituted, Vec::new(), &changes)?);
    } else if greedy.exact() {
        finding.suggested_fix = Some(make_fix(greedy.call.clone(), greedy.dropped.clone(), &[])?);
    } else {
        let (combined, more) = substitute_values(&greedy.call, gold, norm);
        if !more.is_empty() && verify(&combined)? {
            finding.suggested_fix = Some(make_fix(combined, greedy.dropped.clone(), &more)?);
        }
    }
    Ok(vec![finding])
}

/// Applies fixes to a copy of the dataset; each target call must still equal
/// the fix's recorded `before` call.
pub fn apply_fixes(ds: &Dataset, fixes: &[Fix]) -> Result<Dataset, CheckError> {
    let mut out = ds.clone();
    for fix in fixes {
        let turn = out
            .turn_mut(&fix.dialogue_id, fix.turn_id)
            .ok_or_else(|| CheckError::UnknownTarget {
                id: fix.id.clone(),
                dialogue_id: fix.dialogue_id.clone(),
                turn_id: fix.turn_id,
            })?;
        if turn.api_call.as_ref() != Some(&fix.before) {
            return Err(CheckError::StaleFix { id: fix.id.clone() });
        }
        turn.api_call = Some(fix.after.clone());
    }
    Ok(out)
}

/// Records each fix's mapping additions as observed translations.
pub fn apply_mapping_additions(vm: &mut ValueMapping, fixes: &[Fix]) {
    for add in fixes.iter().flat_map(|f| &f.mapping_additions) {
        if vm.get(&add.source, &add.slot).is_some() {
            vm.set_canonical(&add.source, &add.slot, &add.target);
        } else {
            vm.set_entry(&add.source, &add.slot, vec![add.target.clone()], &add.target);
        }
    }
}

// -----------------------------------------------------------------------------
// Value mapping construction and consistency
// -----------------------------------------------------------------------------

/// One alignment found in a target-language turn, tied to its annotation slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub dialogue_id: String,
    pub turn_id: u32,
    pub side: Side,
    pub domain: String,
    pub slot: String,
    pub entity: AlignedEntity,
}

/// Accumulates aligned target surfaces per source value and slot; the
/// canonical form is the most frequent surface.
pub fn build_value_mapping(
    source: &Dataset,
    target: &Dataset,
    alignments: &[AlignmentRecord],
) -> Result<ValueMapping, CheckError> {
    let src_refs = source.turn_refs();
    let tgt_refs = target.turn_refs();
    if src_refs != tgt_refs {
        let first = src_refs
            .iter()
            .zip(&tgt_refs)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("{}/{} vs {}/{}", a.0, a.1, b.0, b.1))
            .unwrap_or_else(|| format!("{} vs {} turns", src_refs.len(), tgt_refs.len()));
        return Err(CheckError::ParallelismError(first));
    }
    let mut vm = ValueMapping::default();
    for a in alignments {
        if source.turn(&a.dialogue_id, a.turn_id).is_none() {
            return Err(CheckError::ParallelismError(format!(
                "alignment references unknown turn {}/{}",
                a.dialogue_id, a.turn_id
            )));
        }
        vm.add_occurrence(
            &a.entity.source_value,
            &SlotRef::new(&a.domain, &a.slot),
            &a.entity.target_text,
        );
    }
    Ok(vm)
}

/// VALUE_INCONSISTENT for each source value whose canonical translation
/// differs between slots or domains.
pub fn check_value_consistency(vm: &ValueMapping) -> Vec<Finding> {
    let mut out = Vec::new();
    for (source, slots) in vm.entries() {
        let canon: BTreeSet<&str> = slots.values().map(|e| e.canonical.as_str()).collect();
        if canon.len() > 1 {
            let detail: Vec<String> = slots.iter().map(|(s, e)| format!("{s} → {:?}", e.canonical)).collect();
            out.push(Finding::new(
                FindingCode::ValueInconsistent,
                Location::default(),
                format!("{source:?} is translated inconsistently: {}", detail.join(", ")),
            ));
        }
    }
    out
}

/// NEEDS_REANNOTATION for every downstream turn whose upstream counterpart
/// changed since the pinned snapshot.
pub fn check_upstream_changes(pinned: &Dataset, upstream: &Dataset, downstream: &Dataset) -> Vec<Finding> {
    let mut out = Vec::new();
    for d in &upstream.dialogues {
        for t in &d.turns {
            if pinned.turn(&d.dialogue_id, t.turn_id) == Some(t) {
                continue;
            }
            if downstream.turn(&d.dialogue_id, t.turn_id).is_some() {
                out.push(Finding::new(
                    FindingCode::NeedsReannotation,
                    Location::turn(&d.dialogue_id, t.turn_id),
                    "upstream turn changed since the pinned snapshot",
                ));
            }
        }
    }
    out
}

/// Entity and API checks over one turn, given its predecessor.
pub fn check_turn(
    dialogue_id: &str,
    turn: &Turn,
    prev: Option<&Turn>,
    db: Option<&Database>,
    vm: &ValueMapping,
    norm_cfg: &NormConfig,
    normalizer: &Normalizer,
) -> Result<Vec<Finding>, KbError> {
    let mut out = check_entities(dialogue_id, turn, PriorContext::from_previous(prev), vm, norm_cfg);
    if let Some(db) = db {
        out.extend(check_api(dialogue_id, turn, db, normalizer)?);
    }
    Ok(out)
}

/// [`check_turn`] over every turn, in dataset order.
pub fn check_dataset(
    ds: &Dataset,
    db: Option<&Database>,
    vm: &ValueMapping,
    norm_cfg: &NormConfig,
    exec: crate::exec::Execution,
) -> Result<Vec<Finding>, KbError> {
    let normalizer = Normalizer::from_value_mapping(vm);
    let units: Vec<(&str, &Turn, Option<&Turn>)> = ds
        .dialogues
        .iter()
        .flat_map(|d| {
            d.turns
                .iter()
                .enumerate()
                .map(move |(i, t)| (d.dialogue_id.as_str(), t, i.checked_sub(1).map(|p| &d.turns[p])))
        })
        .collect();
    let per_turn = crate::exec::map(exec, &units, |(d, t, p)| {
        check_turn(d, t, *p, db, vm, norm_cfg, &normalizer)
    });
    let mut out = Vec::new();
    for r in per_turn {
        out.extend(r?);
    }
    Ok(out)
}
