use dialogue_workbench::metrics::{api_accuracy, bleu, bleu_with, da_accuracy, jga, ser, BleuConfig};
use dialogue_workbench::model::{ActItem, ActSeq, ApiCall, BeliefState, SlotTriplet};
use dialogue_workbench::norm::Normalizer;
use proptest::prelude::*;

use crate::fixtures::{ensure, for_all};

const PAIRS: u32 = 500;

fn triplet() -> impl Strategy<Value = SlotTriplet> {
    (
        prop::sample::select(vec!["hotel", "restaurant"]),
        prop::sample::select(vec!["area", "stars", "name"]),
        prop::sample::select(vec!["equal_to", "not_equal_to"]),
        prop::sample::select(vec!["north", "North", "3", "mid", "Mid."]),
    )
        .prop_map(|(d, s, r, v)| SlotTriplet::with_relation(d, s, r, v))
}

fn state_pair() -> impl Strategy<Value = (BeliefState, BeliefState)> {
    (
        prop::collection::vec(triplet(), 0..5),
        prop::collection::vec(triplet(), 0..5),
        any::<bool>(),
    )
        .prop_map(|(a, b, copy)| {
            let b = if copy { a.iter().rev().cloned().collect() } else { b };
            (BeliefState::new(a), BeliefState::new(b))
        })
}

fn act() -> impl Strategy<Value = ActItem> {
    (
        prop::sample::select(vec!["attraction", "hotel"]),
        prop::sample::select(vec!["inform", "recommend", "general"]),
        prop::option::of((
            prop::sample::select(vec!["name", "area"]),
            prop::sample::select(vec!["Guanqian Street", "guanqian street", "east"]),
        )),
    )
        .prop_map(|(d, a, sv)| match sv {
            Some((s, v)) => ActItem::with_value(d, a, s, v),
            None => ActItem::bare(d, a),
        })
}

fn oracle_value(v: &str) -> String {
    v.to_lowercase().trim_end_matches('.').to_string()
}

/// Mutual containment under `eq`.
fn same_set<T>(a: &[T], b: &[T], eq: impl Fn(&T, &T) -> bool) -> bool {
    a.iter().all(|x| b.iter().any(|y| eq(x, y))) && b.iter().all(|y| a.iter().any(|x| eq(x, y)))
}

fn triplet_eq(a: &SlotTriplet, b: &SlotTriplet) -> bool {
    (&a.domain, &a.slot, &a.relation) == (&b.domain, &b.slot, &b.relation)
        && oracle_value(&a.value) == oracle_value(&b.value)
}

fn act_eq(a: &ActItem, b: &ActItem) -> bool {
    (&a.domain, &a.act, &a.slot) == (&b.domain, &b.act, &b.slot)
        && a.effective_relation() == b.effective_relation()
        && a.value.as_deref().map(oracle_value) == b.value.as_deref().map(oracle_value)
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|x| x.to_string()).collect()
}

pub fn run() -> Result<String, String> {
    let plain = Normalizer::plain();
    for_all(PAIRS, state_pair(), |(a, b)| {
        let want = u8::from(same_set(&a.triplets, &b.triplets, triplet_eq));
        prop_assert_eq!(jga(&a, &b, &plain), want);
        Ok(())
    })
    .map_err(|e| format!("jga: {e}"))?;

    let acts = (
        prop::collection::vec(act(), 1..4),
        prop::collection::vec(act(), 1..4),
        any::<bool>(),
    );
    for_all(PAIRS, acts, |(a, b, copy)| {
        let b = if copy { a.iter().rev().cloned().collect() } else { b };
        let want = u8::from(same_set(&a, &b, act_eq));
        prop_assert_eq!(da_accuracy(&ActSeq::new(a), &ActSeq::new(b), &plain), want);
        Ok(())
    })
    .map_err(|e| format!("da: {e}"))?;

    let calls = (state_pair(), any::<bool>(), any::<bool>(), any::<bool>());
    for_all(PAIRS, calls, |((a, b), pd, gd, same_domain)| {
        let pc = ApiCall::new("hotel", a.triplets.clone());
        let gc = ApiCall::new(if same_domain { "hotel" } else { "restaurant" }, b.triplets.clone());
        let want = match (pd, gd) {
            (false, false) => 1,
            (true, true) => u8::from(same_domain && same_set(&a.triplets, &b.triplets, triplet_eq)),
            _ => 0,
        };
        prop_assert_eq!(api_accuracy(pd, pd.then_some(&pc), gd, gd.then_some(&gc), &plain), want);
        Ok(())
    })
    .map_err(|e| format!("api: {e}"))?;

    let corpus = strings(&[
        "you can go to guanqian street .",
        "it is open all day",
        "the garden costs 30 yuan",
    ]);
    let same = bleu(&corpus, &corpus).map_err(|e| e.to_string())?;
    ensure((same - 100.0).abs() < 1e-9, || format!("bleu(x, x) = {same}"))?;
    let disjoint =
        bleu(&strings(&["one two three four"]), &strings(&["five six seven eight"])).map_err(|e| e.to_string())?;
    ensure(disjoint == 0.0, || format!("disjoint bleu = {disjoint}"))?;
    // "the cat sat" vs "the cat sat down": no 4-gram, so 0 unsmoothed;
    // smoothed p1 = 1, p2 = p3 = p4 = 1 after add-one, brevity exp(1 - 4/3)
    let pair = (strings(&["the cat sat"]), strings(&["the cat sat down"]));
    let raw = bleu(&pair.0, &pair.1).map_err(|e| e.to_string())?;
    ensure(raw == 0.0, || format!("unsmoothed single pair = {raw}"))?;
    let smoothed = bleu_with(
        &pair.0,
        &pair.1,
        &BleuConfig {
            smoothing: true,
            ..BleuConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let want = 100.0 * (1.0f64 - 4.0 / 3.0).exp();
    ensure((smoothed - want).abs() < 1e-9, || {
        format!("smoothed single pair = {smoothed}, want {want}")
    })?;

    let ents = strings(&["Guanqian Street", "all day"]);
    let all = ser("Guanqian Street is open all day.", &ents, &plain);
    let some = ser("Guanqian Street is lovely.", &ents, &plain);
    ensure(all == 0 && some == 1, || {
        format!("ser all-present {all}, one-missing {some}")
    })?;

    Ok(format!(
        "jga/da/api match set oracles on {PAIRS} pairs each; bleu(x,x)=100, disjoint=0, single pair {smoothed:.12}; SER 0 when all present"
    ))
}
