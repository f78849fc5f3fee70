use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};

use dialogue_workbench::format::{
    parse_act_seq, parse_api_decision, parse_belief_state, serialize_act_seq, serialize_belief_state, Style,
};
use dialogue_workbench::model::{ActItem, ActSeq, BeliefState, SlotTriplet, EQUAL_TO};
use proptest::prelude::*;

use crate::fixtures::{ensure, for_all};

const ROUND_TRIPS: u32 = 1000;
const FUZZ: u32 = 10_000;

fn ident() -> impl Strategy<Value = String> {
    prop_oneof![4 => "[a-z][a-z0-9_]{0,9}", 1 => "[\u{4e00}-\u{4e20}]{1,3}"]
}

fn value() -> impl Strategy<Value = String> {
    "[A-Za-z0-9\u{4e00}-\u{4e20},()'.:/-]([A-Za-z0-9 \u{4e00}-\u{4e20},()'.:/-]{0,14}[A-Za-z0-9,()'.:/-])?"
}

fn relation() -> impl Strategy<Value = String> {
    prop_oneof![3 => Just(EQUAL_TO.to_string()), 1 => Just("not_equal_to".to_string()), 1 => "(at_least|at_most)"]
}

fn style() -> impl Strategy<Value = Style> {
    prop_oneof![Just(Style::ImplicitRelation), Just(Style::ExplicitRelation)]
}

fn belief_state() -> impl Strategy<Value = BeliefState> {
    prop::collection::vec((ident(), ident(), relation(), value()), 0..8).prop_map(|raw| {
        let mut out: Vec<SlotTriplet> = Vec::new();
        for (d, s, r, v) in raw {
            let t = SlotTriplet::with_relation(d, s, r, v);
            if !out.iter().any(|p| p.key() == t.key()) {
                out.push(t);
            }
        }
        BeliefState::new(out)
    })
}

fn act_seq() -> impl Strategy<Value = ActSeq> {
    let item = (
        ident(),
        ident(),
        prop::option::of((ident(), prop::option::of((relation(), value())))),
    )
        .prop_map(|(d, act, rest)| {
            let mut item = ActItem::bare(d, act);
            if let Some((slot, rv)) = rest {
                item.slot = Some(slot);
                if let Some((r, v)) = rv {
                    item.relation = Some(r);
                    item.value = Some(v);
                }
            }
            item
        });
    prop::collection::vec(item, 1..6).prop_map(ActSeq::new)
}

fn noise() -> impl Strategy<Value = String> {
    let tokens = prop::collection::vec(
        prop::sample::select(vec![
            "(", ")", ",", "\"", " ", "null", "hotel", "equal_to", "x y", "yes", "no",
        ]),
        0..30,
    )
    .prop_map(|p| p.concat());
    prop_oneof!["\\PC{0,80}", tokens]
}

const SAMPLE_STATES: [&str; 2] = [
    r#"( attraction ) consumption " mid " , type " commercial center ""#,
    r#"( attraction ) consumption " mid " , name " Guanqian Street " , the_most_suitable_people " friend " , type " commercial center ""#,
];

const SAMPLE_ACTS: [&str; 2] = [
    r#"( attraction ) recommend name " Guanqian Street ""#,
    r#"( attraction ) inform opening_hours " all day ""#,
];

pub fn run() -> Result<String, String> {
    for_all(ROUND_TRIPS, (belief_state(), style()), |(bs, st)| {
        let text = serialize_belief_state(&bs, st);
        prop_assert_eq!(
            parse_belief_state(&text).map_err(|e| TestCaseError::fail(e.to_string()))?,
            bs
        );
        Ok(())
    })
    .map_err(|e| format!("belief state round trip: {e}"))?;
    for_all(ROUND_TRIPS, (act_seq(), style()), |(acts, st)| {
        let text = serialize_act_seq(&acts, st).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(
            parse_act_seq(&text).map_err(|e| TestCaseError::fail(e.to_string()))?,
            acts
        );
        Ok(())
    })
    .map_err(|e| format!("act round trip: {e}"))?;

    for s in SAMPLE_STATES {
        let back = parse_belief_state(s).map(|b| serialize_belief_state(&b, Style::ImplicitRelation));
        ensure(back.as_deref() == Ok(s), || format!("sample state {s:?} -> {back:?}"))?;
    }
    for s in SAMPLE_ACTS {
        let back = parse_act_seq(s).map(|a| serialize_act_seq(&a, Style::ImplicitRelation));
        ensure(matches!(&back, Ok(Ok(x)) if x == s), || {
            format!("sample acts {s:?} -> {back:?}")
        })?;
    }

    let crashes = AtomicUsize::new(0);
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let fuzz = for_all(FUZZ, noise(), |s| {
        let r = catch_unwind(AssertUnwindSafe(|| {
            let _ = parse_belief_state(&s);
            let _ = parse_act_seq(&s);
            let _ = parse_api_decision(&s);
        }));
        if r.is_err() {
            crashes.fetch_add(1, Ordering::Relaxed);
        }
        Ok(())
    });
    std::panic::set_hook(hook);
    fuzz?;
    let crashes = crashes.into_inner();
    ensure(crashes == 0, || {
        format!("{crashes} of {FUZZ} fuzz inputs crashed a parser")
    })?;
    Ok(format!(
        "{ROUND_TRIPS}+{ROUND_TRIPS} round trips, {} sample strings byte-exact, {FUZZ} fuzz inputs without a crash",
        SAMPLE_STATES.len() + SAMPLE_ACTS.len()
    ))
}
