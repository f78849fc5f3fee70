//! Synthesis of labeled correct/erroneous annotations for training error
//! classifiers, and the ensemble filter used to select self-training data.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::gold_subtasks;
use crate::exec::{self, derive_seed, Execution};
use crate::format::{serialize_act_seq, serialize_belief_state, FormatError, Style, SubtaskKind};
use crate::kb::{slot_values, Ontology};
use crate::model::{ActItem, ActSeq, BeliefState, Dataset, Dialogue, Record, SlotTriplet};
use crate::norm::basic_normalize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    Omit,
    WrongValue,
    Hallucinate,
}

impl ErrorType {
    pub const DST: [ErrorType; 3] = [ErrorType::Omit, ErrorType::WrongValue, ErrorType::Hallucinate];
    pub const DA: [ErrorType; 2] = [ErrorType::Omit, ErrorType::Hallucinate];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthTask {
    Dst,
    Da,
}

impl SynthTask {
    pub fn subtask(&self) -> SubtaskKind {
        match self {
            SynthTask::Dst => SubtaskKind::Dst,
            SynthTask::Da => SubtaskKind::Da,
        }
    }

    fn error_types(&self) -> &'static [ErrorType] {
        match self {
            SynthTask::Dst => &ErrorType::DST,
            SynthTask::Da => &ErrorType::DA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthError {
    #[error("{0:?} is not applicable: {1}")]
    NotApplicable(ErrorType, String),
    #[error("{preds} predictions for {golds} gold annotations")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("predicate {index} failed: {message}")]
    PredicateFailure { index: usize, message: String },
    #[error("an ensemble needs at least one predicate")]
    EmptyEnsemble,
    #[error(transparent)]
    Format(#[from] FormatError),
}

// -----------------------------------------------------------------------------
// Error statistics
// -----------------------------------------------------------------------------

/// `(task, domain, slot or act, error type)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StatKey {
    pub task: SynthTask,
    pub domain: String,
    /// Slot name for DST, act name for DA.
    pub target: String,
    pub error_type: ErrorType,
}

impl StatKey {
    pub fn new(task: SynthTask, domain: impl Into<String>, target: impl Into<String>, error_type: ErrorType) -> Self {
        Self {
            task,
            domain: domain.into(),
            target: target.into(),
            error_type,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatEntry {
    pub task: SynthTask,
    pub domain: String,
    pub target: String,
    pub error_type: ErrorType,
    pub count: usize,
    /// Share of the `(task, domain)` group; recomputed on load.
    #[serde(default)]
    pub frequency: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<StatEntry>", into = "Vec<StatEntry>")]
pub struct ErrorStats {
    counts: BTreeMap<StatKey, usize>,
}

impl From<Vec<StatEntry>> for ErrorStats {
    fn from(entries: Vec<StatEntry>) -> Self {
        let mut s = ErrorStats::default();
        for e in entries {
            let key = StatKey {
                task: e.task,
                domain: e.domain,
                target: e.target,
                error_type: e.error_type,
            };
            s.add(key, e.count);
        }
        s
    }
}

impl From<ErrorStats> for Vec<StatEntry> {
    fn from(s: ErrorStats) -> Self {
        s.entries()
    }
}

impl ErrorStats {
    pub fn add(&mut self, key: StatKey, n: usize) {
        if n > 0 {
            *self.counts.entry(key).or_default() += n;
        }
    }

    pub fn count(&self, key: &StatKey) -> usize {
        self.counts.get(key).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn merge(&mut self, other: &ErrorStats) {
        for (k, n) in &other.counts {
            self.add(k.clone(), *n);
        }
    }

    fn group_total(&self, task: SynthTask, domain: &str) -> usize {
        self.counts
            .iter()
            .filter(|(k, _)| k.task == task && k.domain == domain)
            .map(|(_, n)| n)
            .sum()
    }

    pub fn frequency(&self, key: &StatKey) -> f64 {
        match self.group_total(key.task, &key.domain) {
            0 => 0.0,
            total => self.count(key) as f64 / total as f64,
        }
    }

    pub fn entries(&self) -> Vec<StatEntry> {
        self.counts
            .iter()
            .map(|(k, n)| StatEntry {
                task: k.task,
                domain: k.domain.clone(),
                target: k.target.clone(),
                error_type: k.error_type,
                count: *n,
                frequency: self.frequency(k),
            })
            .collect()
    }

    /// Entries of one `(task, domain)` group.
    pub fn group(&self, task: SynthTask, domain: &str) -> Vec<(&StatKey, usize)> {
        self.counts
            .iter()
            .filter(|(k, _)| k.task == task && k.domain == domain)
            .map(|(k, n)| (k, *n))
            .collect()
    }
}

fn dst_key(t: &SlotTriplet, ty: ErrorType) -> StatKey {
    StatKey {
        task: SynthTask::Dst,
        domain: t.domain.clone(),
        target: t.slot.clone(),
        error_type: ty,
    }
}

/// Omissions, wrong values and hallucinations per `(domain, slot)`.
pub fn collect_dst_error_stats(preds: &[BeliefState], golds: &[BeliefState]) -> Result<ErrorStats, SynthError> {
    if preds.len() != golds.len() {
        return Err(SynthError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let mut stats = ErrorStats::default();
    for (p, g) in preds.iter().zip(golds) {
        for gt in &g.triplets {
            match p.get(&gt.key()) {
                None => stats.add(dst_key(gt, ErrorType::Omit), 1),
                Some(pt) if basic_normalize(&pt.value) != basic_normalize(&gt.value) => {
                    stats.add(dst_key(gt, ErrorType::WrongValue), 1)
                }
                Some(_) => {}
            }
        }
        for pt in &p.triplets {
            if g.get(&pt.key()).is_none() {
                stats.add(dst_key(pt, ErrorType::Hallucinate), 1);
            }
        }
    }
    Ok(stats)
}

fn item_key(a: &ActItem) -> (String, String, Option<String>, Option<String>) {
    (
        a.domain.clone(),
        a.act.clone(),
        a.slot.clone(),
        a.value.as_deref().map(basic_normalize),
    )
}

/// Omitted and hallucinated act items per `(domain, act)`.
pub fn collect_da_error_stats(preds: &[ActSeq], golds: &[ActSeq]) -> Result<ErrorStats, SynthError> {
    if preds.len() != golds.len() {
        return Err(SynthError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let mut stats = ErrorStats::default();
    let key = |a: &ActItem, ty| StatKey {
        task: SynthTask::Da,
        domain: a.domain.clone(),
        target: a.act.clone(),
        error_type: ty,
    };
    for (p, g) in preds.iter().zip(golds) {
        let pk: BTreeSet<_> = p.items.iter().map(item_key).collect();
        let gk: BTreeSet<_> = g.items.iter().map(item_key).collect();
        for a in &g.items {
            if !pk.contains(&item_key(a)) {
                stats.add(key(a, ErrorType::Omit), 1);
            }
        }
        for a in &p.items {
            if !gk.contains(&item_key(a)) {
                stats.add(key(a, ErrorType::Hallucinate), 1);
            }
        }
    }
    Ok(stats)
}

// -----------------------------------------------------------------------------
// Perturbations
// -----------------------------------------------------------------------------

/// The single edit that turned a gold annotation into a negative example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbation {
    pub error_type: ErrorType,
    pub domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<String>,
    pub before: Option<String>,
    pub after: Option<String>,
}

fn not_applicable(ty: ErrorType, why: impl Into<String>) -> SynthError {
    SynthError::NotApplicable(ty, why.into())
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, xs: &'a [T]) -> &'a T {
    &xs[rng.random_range(0..xs.len())]
}

/// Applies one DST error of type `ty`. `target_slot` restricts which slot is
/// edited; values come from the ontology entry of the same slot.
pub fn perturb_dst(
    gold: &BeliefState,
    ty: ErrorType,
    target_slot: Option<&str>,
    ontology: &Ontology,
    seed: u64,
) -> Result<(BeliefState, Perturbation), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targeted = |t: &&SlotTriplet| target_slot.is_none_or(|s| t.slot == s);
    let mut out = gold.clone();
    match ty {
        ErrorType::Omit => {
            let idx: Vec<usize> = (0..gold.triplets.len())
                .filter(|i| targeted(&&gold.triplets[*i]))
                .collect();
            if idx.is_empty() {
                return Err(not_applicable(ty, "no matching triplet to omit"));
            }
            let removed = out.triplets.remove(*pick(&mut rng, &idx));
            Ok((
                out,
                Perturbation {
                    error_type: ty,
                    domain: removed.domain,
                    act: None,
                    slot: Some(removed.slot),
                    before: Some(removed.value),
                    after: None,
                },
            ))
        }
        ErrorType::WrongValue => {
            let alternatives = |t: &SlotTriplet| -> Vec<String> {
                slot_values(ontology, &t.domain, &t.slot)
                    .map(|vs| {
                        vs.iter()
                            .filter(|v| basic_normalize(v) != basic_normalize(&t.value))
                            .cloned()
                            .collect()
                    })
                    .unwrap_or_default()
            };
            let idx: Vec<usize> = (0..gold.triplets.len())
                .filter(|i| targeted(&&gold.triplets[*i]) && !alternatives(&gold.triplets[*i]).is_empty())
                .collect();
            if idx.is_empty() {
                return Err(not_applicable(ty, "no slot with an alternative ontology value"));
            }
            let i = *pick(&mut rng, &idx);
            let alts = alternatives(&gold.triplets[i]);
            let new_value = pick(&mut rng, &alts).clone();
            let before = std::mem::replace(&mut out.triplets[i].value, new_value.clone());
            let (domain, slot) = (out.triplets[i].domain.clone(), out.triplets[i].slot.clone());
            Ok((
                out,
                Perturbation {
                    error_type: ty,
                    domain,
                    act: None,
                    slot: Some(slot),
                    before: Some(before),
                    after: Some(new_value),
                },
            ))
        }
        ErrorType::Hallucinate => {
            let mut options: Vec<(String, String)> = Vec::new();
            let domains: BTreeSet<&str> = gold.domains().into_iter().collect();
            for d in domains {
                for s in ontology.slots(d).unwrap_or_default() {
                    let present = gold.triplets.iter().any(|t| t.domain == d && t.slot == s);
                    if !present && target_slot.is_none_or(|ts| ts == s) {
                        options.push((d.to_string(), s.to_string()));
                    }
                }
            }
            options.retain(|(d, s)| slot_values(ontology, d, s).is_ok_and(|v| !v.is_empty()));
            if options.is_empty() {
                return Err(not_applicable(ty, "no unused ontology slot in the state's domains"));
            }
            let (d, s) = pick(&mut rng, &options).clone();
            let values = slot_values(ontology, &d, &s).expect("checked above");
            let v = pick(&mut rng, values).clone();
            out.triplets.push(SlotTriplet::new(&d, &s, &v));
            Ok((
                out,
                Perturbation {
                    error_type: ty,
                    domain: d,
                    act: None,
                    slot: Some(s),
                    before: None,
                    after: Some(v),
                },
            ))
        }
    }
}

/// Applies one DA error. Omission that would empty the list leaves a bare
/// `general` act for the removed item's domain; hallucination appends an
/// act (default `inform`) with a slot and value taken from `knowledge`, or
/// from the ontology when there is no usable knowledge.
pub fn perturb_da(
    gold: &ActSeq,
    ty: ErrorType,
    target_act: Option<&str>,
    knowledge: Option<&Record>,
    ontology: Option<&Ontology>,
    seed: u64,
) -> Result<(ActSeq, Perturbation), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = gold.clone();
    let perturbation = match ty {
        ErrorType::Omit => {
            let idx: Vec<usize> = (0..gold.items.len())
                .filter(|i| target_act.is_none_or(|a| gold.items[*i].act == a))
                .collect();
            if idx.is_empty() {
                return Err(not_applicable(ty, "no matching act to omit"));
            }
            let removed = out.items.remove(*pick(&mut rng, &idx));
            if out.items.is_empty() {
                out.items.push(ActItem::bare(&removed.domain, "general"));
            }
            Perturbation {
                error_type: ty,
                domain: removed.domain,
                act: Some(removed.act),
                slot: removed.slot,
                before: removed.value,
                after: None,
            }
        }
        ErrorType::WrongValue => return Err(not_applicable(ty, "dialogue acts are perturbed at the act level")),
        ErrorType::Hallucinate => {
            let Some(domain) = gold.items.last().map(|a| a.domain.clone()) else {
                return Err(not_applicable(ty, "no domain to hallucinate in"));
            };
            let act = target_act.unwrap_or("inform").to_string();
            let used = |slot: &str, value: &str| {
                gold.items.iter().any(|a| {
                    a.domain == domain
                        && a.slot.as_deref() == Some(slot)
                        && a.value
                            .as_deref()
                            .is_some_and(|v| basic_normalize(v) == basic_normalize(value))
                })
            };
            let mut options: Vec<(String, String)> = knowledge
                .map(|r| {
                    r.iter()
                        .filter(|(s, v)| !used(s, v))
                        .map(|(s, v)| (s.clone(), v.clone()))
                        .collect()
                })
                .unwrap_or_default();
            if options.is_empty() {
                if let Some(ont) = ontology {
                    for s in ont.slots(&domain).unwrap_or_default() {
                        for v in slot_values(ont, &domain, s).unwrap_or_default() {
                            if !used(s, v) {
                                options.push((s.to_string(), v.clone()));
                            }
                        }
                    }
                }
            }
            if options.is_empty() {
                return Err(not_applicable(ty, "no knowledge or ontology value to hallucinate"));
            }
            let (slot, value) = pick(&mut rng, &options).clone();
            out.items.push(ActItem::with_value(&domain, &act, &slot, &value));
            Perturbation {
                error_type: ty,
                domain,
                act: Some(act),
                slot: Some(slot),
                before: None,
                after: Some(value),
            }
        }
    };
    if out == *gold {
        return Err(not_applicable(ty, "the edit leaves the annotation unchanged"));
    }
    Ok((out, perturbation))
}

// -----------------------------------------------------------------------------
// Dataset synthesis
// -----------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub input: String,
    pub annotation: String,
    /// 0 for a correct annotation, 1 for an erroneous one.
    pub label: u8,
    pub perturbation: Option<Perturbation>,
}

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub task: SynthTask,
    pub negatives_per_positive: usize,
    pub seed: u64,
    pub style: Style,
    pub exec: Execution,
}

impl SynthConfig {
    pub fn new(task: SynthTask, negatives_per_positive: usize, seed: u64) -> Self {
        Self {
            task,
            negatives_per_positive,
            seed,
            style: Style::default(),
            exec: Execution::default(),
        }
    }
}

const ATTEMPTS_PER_NEGATIVE: usize = 8;

/// Weighted `(error type, target)` options for one turn: the stats entries of
/// the turn's domains, or every error type uniformly when there are none.
fn options_for(stats: &ErrorStats, task: SynthTask, domains: &[&str]) -> Vec<(ErrorType, Option<String>, usize)> {
    let mut out: Vec<(ErrorType, Option<String>, usize)> = Vec::new();
    for d in domains {
        for (k, n) in stats.group(task, d) {
            if task.error_types().contains(&k.error_type) {
                out.push((k.error_type, Some(k.target.clone()), n));
            }
        }
    }
    if out.is_empty() {
        out = task.error_types().iter().map(|t| (*t, None, 1)).collect();
    }
    out
}

fn synthesize_dialogue(
    d: &Dialogue,
    stats: &ErrorStats,
    ontology: &Ontology,
    cfg: &SynthConfig,
) -> Result<Vec<LabeledExample>, SynthError> {
    let io = gold_subtasks(d, cfg.style)?;
    let mut out = Vec::new();
    let mut knowledge: Option<Record> = None;
    for (turn, io) in d.turns.iter().zip(&io) {
        if let Some(first) = turn.api_results.as_ref().and_then(|r| r.first()) {
            knowledge = Some(first.clone());
        }
        let (input, gold_text, domains) = match cfg.task {
            SynthTask::Dst => (&io.dst.0, io.dst.1.clone(), turn.belief_state.domains()),
            SynthTask::Da => (&io.da.0, io.da.1.clone(), turn.agent_acts.domains()),
        };
        out.push(LabeledExample {
            input: input.clone(),
            annotation: gold_text.clone(),
            label: 0,
            perturbation: None,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &d.dialogue_id, turn.turn_id));
        let mut options = options_for(stats, cfg.task, &domains);
        let mut seen: BTreeSet<String> = BTreeSet::from([gold_text]);
        let mut made = 0;
        let mut attempts = 0;
        while made < cfg.negatives_per_positive
            && !options.is_empty()
            && attempts < cfg.negatives_per_positive * ATTEMPTS_PER_NEGATIVE
        {
            attempts += 1;
            let weights: Vec<usize> = options.iter().map(|o| o.2).collect();
            let i = WeightedIndex::new(&weights)
                .expect("weights are positive")
                .sample(&mut rng);
            let (ty, target, _) = options[i].clone();
            let seed = rng.random::<u64>();
            let result = match cfg.task {
                SynthTask::Dst => perturb_dst(&turn.belief_state, ty, target.as_deref(), ontology, seed)
                    .map(|(bs, p)| (serialize_belief_state(&bs, cfg.style), p)),
                SynthTask::Da => perturb_da(
                    &turn.agent_acts,
                    ty,
                    target.as_deref(),
                    knowledge.as_ref(),
                    Some(ontology),
                    seed,
                )
                .and_then(|(acts, p)| Ok((serialize_act_seq(&acts, cfg.style)?, p))),
            };
            match result {
                Ok((annotation, p)) => {
                    if seen.insert(annotation.clone()) {
                        out.push(LabeledExample {
                            input: input.clone(),
                            annotation,
                            label: 1,
                            perturbation: Some(p),
                        });
                        made += 1;
                    }
                }
                Err(SynthError::NotApplicable(..)) => {
                    options.remove(i);
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

/// One positive per turn plus up to `negatives_per_positive` distinct
/// negatives. Each turn draws from its own seed, so the output does not
/// depend on the execution mode.
pub fn synthesize_dataset(
    ds: &Dataset,
    stats: &ErrorStats,
    ontology: &Ontology,
    cfg: &SynthConfig,
) -> Result<Vec<LabeledExample>, SynthError> {
    let per_dialogue = exec::map(cfg.exec, &ds.dialogues, |d| {
        synthesize_dialogue(d, stats, ontology, cfg)
    });
    let mut out = Vec::new();
    for r in per_dialogue {
        out.extend(r?);
    }
    Ok(out)
}

pub fn to_jsonl(examples: &[LabeledExample]) -> String {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(e).expect("examples serialize"));
        out.push('\n');
    }
    out
}

// -----------------------------------------------------------------------------
// Ensemble filtering
// -----------------------------------------------------------------------------

/// Judges an annotation of an input: 0 when it looks correct, 1 otherwise.
pub trait ErrorClassifier: Sync {
    fn judge(&self, input: &str, annotation: &str) -> Result<u8, String>;
}

impl<F> ErrorClassifier for F
where
    F: Fn(&str, &str) -> Result<u8, String> + Sync,
{
    fn judge(&self, input: &str, annotation: &str) -> Result<u8, String> {
        self(input, annotation)
    }
}

pub struct EnsembleFilter {
    predicates: Vec<Box<dyn ErrorClassifier>>,
}

impl EnsembleFilter {
    pub fn new(predicates: Vec<Box<dyn ErrorClassifier>>) -> Result<Self, SynthError> {
        if predicates.is_empty() {
            return Err(SynthError::EmptyEnsemble);
        }
        Ok(Self { predicates })
    }

    pub fn len(&self) -> usize {
        self.predicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicates.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterDecision {
    Keep,
    Filter,
}

fn judge_all(input: &str, annotation: &str, ens: &EnsembleFilter) -> Result<FilterDecision, SynthError> {
    let mut sum = 0u32;
    for (index, p) in ens.predicates.iter().enumerate() {
        match p.judge(input, annotation) {
            Ok(v @ (0 | 1)) => sum += u32::from(v),
            Ok(v) => {
                return Err(SynthError::PredicateFailure {
                    index,
                    message: format!("returned {v}, expected 0 or 1"),
                })
            }
            Err(message) => return Err(SynthError::PredicateFailure { index, message }),
        }
    }
    Ok(if sum.min(1) == 1 {
        FilterDecision::Filter
    } else {
        FilterDecision::Keep
    })
}

/// `Filter` when any predicate flags the example. Every predicate is
/// consulted so failures always surface.
pub fn ensemble_filter(x: &LabeledExample, ens: &EnsembleFilter) -> Result<FilterDecision, SynthError> {
    judge_all(&x.input, &x.annotation, ens)
}

/// The pairs every predicate accepts, in input order.
pub fn select_self_training(
    unlabeled: &[(String, String)],
    ens: &EnsembleFilter,
) -> Result<Vec<(String, String)>, SynthError> {
    let mut out = Vec::new();
    for (input, annotation) in unlabeled {
        if judge_all(input, annotation, ens)? == FilterDecision::Keep {
            out.push((input.clone(), annotation.clone()));
        }
    }
    Ok(out)
}
