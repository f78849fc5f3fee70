use std::collections::BTreeMap;

use dialogue_workbench::format::{parse_act_seq, parse_belief_state, serialize_act_seq, serialize_belief_state, Style};
use dialogue_workbench::kb::Ontology;
use dialogue_workbench::model::{ActItem, ActSeq, BeliefState};
use dialogue_workbench::synth::{
    ensemble_filter, perturb_da, perturb_dst, synthesize_dataset, to_jsonl, EnsembleFilter, ErrorClassifier,
    ErrorStats, ErrorType, FilterDecision, LabeledExample, SynthConfig, SynthTask,
};
use dialogue_workbench::Execution;

use crate::fixtures::{ensure, suite, suite_ontology};

const MIN_NEGATIVES: usize = 1000;

fn hotel_ontology() -> Result<Ontology, String> {
    let vals = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let mut h = BTreeMap::new();
    h.insert("pricerange".to_string(), vals(&["cheap", "medium", "expensive"]));
    h.insert("stars".to_string(), vals(&["2", "3", "4", "5"]));
    h.insert("hotel_type".to_string(), vals(&["business", "boutique"]));
    Ontology::new([("hotel".to_string(), h)].into()).map_err(|e| e.to_string())
}

fn reference_examples() -> Result<usize, String> {
    let ont = hotel_ontology()?;
    let gold =
        parse_belief_state(r#"( hotel ) hotel_type " business " , pricerange " cheap ""#).map_err(|e| e.to_string())?;
    let dst_rows = [
        (ErrorType::Omit, "pricerange", 0, r#"( hotel ) hotel_type " business ""#),
        (
            ErrorType::WrongValue,
            "pricerange",
            1,
            r#"( hotel ) hotel_type " business " , pricerange " medium ""#,
        ),
        (
            ErrorType::Hallucinate,
            "stars",
            1,
            r#"( hotel ) hotel_type " business " , pricerange " cheap " , stars " 3 ""#,
        ),
    ];
    for (ty, slot, seed, want) in dst_rows {
        let (bs, _) = perturb_dst(&gold, ty, Some(slot), &ont, seed).map_err(|e| e.to_string())?;
        let got = serialize_belief_state(&bs, Style::ImplicitRelation);
        ensure(got == want, || format!("{ty:?} {slot}: {got:?} != {want:?}"))?;
    }

    let gold = parse_act_seq(r#"( attraction ) inform ticket_price " 45 yuan ""#).map_err(|e| e.to_string())?;
    let knowledge = [("name", "Japanese Garden"), ("ticket_price", "45 yuan")]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let da_rows = [
        (ErrorType::Omit, None, 0, "( attraction ) general"),
        (
            ErrorType::Hallucinate,
            Some(&knowledge),
            7,
            r#"( attraction ) inform ticket_price " 45 yuan " , inform name " Japanese Garden ""#,
        ),
    ];
    for (ty, kn, seed, want) in da_rows {
        let (acts, _) = perturb_da(&gold, ty, None, kn, None, seed).map_err(|e| e.to_string())?;
        let got = serialize_act_seq(&acts, Style::ImplicitRelation).map_err(|e| e.to_string())?;
        ensure(got == want, || format!("act {ty:?}: {got:?} != {want:?}"))?;
    }
    Ok(dst_rows.len() + da_rows.len())
}

fn multiset_minus<T: PartialEq + Clone>(a: &[T], b: &[T]) -> Vec<T> {
    let mut rest: Vec<Option<&T>> = b.iter().map(Some).collect();
    let mut out = Vec::new();
    for x in a {
        match rest.iter_mut().find(|r| r.is_some_and(|r| r == x)) {
            Some(slot) => *slot = None,
            None => out.push(x.clone()),
        }
    }
    out
}

/// The single edit turning `gold` into `neg`, if there is exactly one.
fn dst_edit(gold: &BeliefState, neg: &BeliefState) -> Option<ErrorType> {
    let removed = multiset_minus(&gold.triplets, &neg.triplets);
    let added = multiset_minus(&neg.triplets, &gold.triplets);
    match (removed.as_slice(), added.as_slice()) {
        ([r], []) => {
            let kept: Vec<_> = gold.triplets.iter().filter(|t| *t != r).cloned().collect();
            (kept == neg.triplets).then_some(ErrorType::Omit)
        }
        ([r], [a]) if r.key() == a.key() && r.value != a.value => {
            let pos = gold.triplets.iter().position(|t| t == r);
            (pos == neg.triplets.iter().position(|t| t == a)).then_some(ErrorType::WrongValue)
        }
        ([], [a]) if gold.get(&a.key()).is_none() && neg.triplets.last() == Some(a) => Some(ErrorType::Hallucinate),
        _ => None,
    }
}

fn da_edit(gold: &ActSeq, neg: &ActSeq) -> Option<ErrorType> {
    let removed = multiset_minus(&gold.items, &neg.items);
    let added = multiset_minus(&neg.items, &gold.items);
    match (removed.as_slice(), added.as_slice()) {
        ([_], []) => Some(ErrorType::Omit),
        ([r], [g]) if gold.items.len() == 1 && *g == ActItem::bare(&r.domain, "general") => Some(ErrorType::Omit),
        ([], [a]) if neg.items.last() == Some(a) && a.value.is_some() => Some(ErrorType::Hallucinate),
        _ => None,
    }
}

fn check_one_edit(examples: &[LabeledExample], task: SynthTask) -> Result<usize, String> {
    let mut gold: Option<&LabeledExample> = None;
    let mut negatives = 0;
    for x in examples {
        if x.label == 0 {
            gold = Some(x);
            continue;
        }
        let g = gold.ok_or("negative before any positive")?;
        ensure(g.input == x.input, || {
            format!("negative input differs from its positive: {}", x.input)
        })?;
        let p = x
            .perturbation
            .as_ref()
            .ok_or_else(|| format!("undeclared negative {}", x.annotation))?;
        let found = match task {
            SynthTask::Dst => dst_edit(
                &parse_belief_state(&g.annotation).map_err(|e| e.to_string())?,
                &parse_belief_state(&x.annotation).map_err(|e| e.to_string())?,
            ),
            SynthTask::Da => da_edit(
                &parse_act_seq(&g.annotation).map_err(|e| e.to_string())?,
                &parse_act_seq(&x.annotation).map_err(|e| e.to_string())?,
            ),
        };
        ensure(found == Some(p.error_type), || {
            format!(
                "declared {:?} but found {found:?}: {} -> {}",
                p.error_type, g.annotation, x.annotation
            )
        })?;
        negatives += 1;
    }
    Ok(negatives)
}

struct Fixed(u8);

impl ErrorClassifier for Fixed {
    fn judge(&self, _input: &str, _annotation: &str) -> Result<u8, String> {
        Ok(self.0)
    }
}

fn truth_table() -> Result<usize, String> {
    let x = LabeledExample {
        input: "DST: <state> null <endofstate> <history> USER: hi <endofhistory>".into(),
        annotation: "null".into(),
        label: 0,
        perturbation: None,
    };
    let mut rows = 0;
    for k in 1..=3u32 {
        for mask in 0..(1u32 << k) {
            let votes: Vec<u8> = (0..k).map(|i| u8::from(mask & (1 << i) != 0)).collect();
            let ens = EnsembleFilter::new(
                votes
                    .iter()
                    .map(|v| Box::new(Fixed(*v)) as Box<dyn ErrorClassifier>)
                    .collect(),
            )
            .map_err(|e| e.to_string())?;
            let want = if votes.contains(&1) {
                FilterDecision::Filter
            } else {
                FilterDecision::Keep
            };
            let got = ensemble_filter(&x, &ens).map_err(|e| e.to_string())?;
            ensure(got == want, || format!("votes {votes:?}: {got:?}"))?;
            rows += 1;
        }
    }
    Ok(rows)
}

pub fn run() -> Result<String, String> {
    let examples = reference_examples()?;

    let ds = suite();
    let ont = suite_ontology();
    let stats = ErrorStats::default();
    let (mut negatives, mut seed) = (0, 0);
    while negatives < MIN_NEGATIVES {
        for task in [SynthTask::Dst, SynthTask::Da] {
            let out =
                synthesize_dataset(&ds, &stats, &ont, &SynthConfig::new(task, 6, seed)).map_err(|e| e.to_string())?;
            negatives += check_one_edit(&out, task)?;
        }
        seed += 1;
    }

    let rows = truth_table()?;

    for task in [SynthTask::Dst, SynthTask::Da] {
        let mut cfg = SynthConfig::new(task, 4, 2024);
        cfg.exec = Execution::Serial;
        let a = synthesize_dataset(&ds, &stats, &ont, &cfg).map_err(|e| e.to_string())?;
        cfg.exec = Execution::Parallel;
        let b = synthesize_dataset(&ds, &stats, &ont, &cfg).map_err(|e| e.to_string())?;
        ensure(to_jsonl(&a) == to_jsonl(&b), || {
            format!("{task:?}: serial and parallel output differ")
        })?;
    }

    Ok(format!(
        "{examples} reference examples reproduced; {negatives} negatives each one declared edit; {rows} truth-table rows; serial = parallel"
    ))
}
