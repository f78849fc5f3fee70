use std::cell::Cell;

use dialogue_workbench::align::{
    dictionary_align, hybrid_align, neural_align, whitespace_tokens, AlignError, AttentionMatrix, CandidateSet,
    Provenance,
};
use dialogue_workbench::model::char_slice;
use dialogue_workbench::norm::NormConfig;
use proptest::prelude::*;

use crate::fixtures::for_all;

const CASES: u32 = 200;

/// Each target token attends mostly to its planted source token.
#[derive(Debug, Clone)]
struct Planted {
    matrix: AttentionMatrix,
    planted: Vec<usize>,
    span_tokens: (usize, usize),
}

impl Planted {
    fn char_span(&self) -> (usize, usize) {
        (
            self.matrix.src_tokens[self.span_tokens.0].start,
            self.matrix.src_tokens[self.span_tokens.1].end,
        )
    }
}

fn planted() -> impl Strategy<Value = Planted> {
    (1usize..8, 1usize..10)
        .prop_flat_map(|(ns, nt)| {
            (
                prop::collection::vec("[a-z]{1,6}", ns),
                prop::collection::vec(prop_oneof![6 => "[a-z]{1,6}", 1 => Just(",".to_string())], nt),
                prop::collection::vec(0..ns, nt),
                prop::collection::vec(prop::collection::vec(0.0f64..1.0, ns), nt),
                (0..ns, 0..ns),
            )
        })
        .prop_map(|(src, tgt, planted, noise, (a, b))| {
            let ns = src.len() as f64;
            let weights = noise
                .into_iter()
                .zip(&planted)
                .map(|(mut row, &p)| {
                    row[p] += ns + 1.0;
                    let sum: f64 = row.iter().sum();
                    row.iter_mut().for_each(|w| *w /= sum);
                    row
                })
                .collect();
            let (src_text, tgt_text) = (src.join(" "), tgt.join(" "));
            Planted {
                matrix: AttentionMatrix {
                    src_tokens: whitespace_tokens(&src_text),
                    tgt_tokens: whitespace_tokens(&tgt_text),
                    src_text,
                    tgt_text,
                    weights,
                },
                planted,
                span_tokens: (a.min(b), a.max(b)),
            }
        })
}

/// Character hull of the target tokens planted on the selected sources,
/// with surrounding whitespace and punctuation trimmed.
fn hull_oracle(p: &Planted) -> Option<(usize, usize)> {
    let (a, b) = p.span_tokens;
    let hit: Vec<usize> = (0..p.planted.len())
        .filter(|&t| (a..=b).contains(&p.planted[t]))
        .collect();
    let (first, last) = (*hit.first()?, *hit.last()?);
    let chars: Vec<char> = p.matrix.tgt_text.chars().collect();
    let (mut s, mut e) = (p.matrix.tgt_tokens[first].start, p.matrix.tgt_tokens[last].end);
    let trim = |c: char| c.is_whitespace() || c.is_ascii_punctuation();
    while s < e && trim(chars[s]) {
        s += 1;
    }
    while e > s && trim(chars[e - 1]) {
        e -= 1;
    }
    (s < e).then_some((s, e))
}

/// Longest whole-word case-insensitive match of any candidate, leftmost on
/// ties, by scanning every substring.
fn substring_oracle(cands: &[String], text: &str) -> Option<(usize, usize)> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let word = |c: char| c.is_ascii_alphanumeric();
    let mut best: Option<(usize, usize)> = None;
    for cand in cands {
        let needle: Vec<char> = cand.to_lowercase().chars().collect();
        for s in 0..chars.len() {
            for e in s + 1..=chars.len() {
                if chars[s..e] != needle[..] {
                    continue;
                }
                let left = s == 0 || !word(chars[s - 1]) || !word(chars[s]);
                let right = e == chars.len() || !word(chars[e]) || !word(chars[e - 1]);
                if !(left && right) {
                    continue;
                }
                if best.is_none_or(|(bs, be)| e - s > be - bs || (e - s == be - bs && s < bs)) {
                    best = Some((s, e));
                }
            }
        }
    }
    best
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::sample::select(vec![
            "the",
            "old",
            "street",
            "garden",
            "tea",
            "house",
            "a",
            "old street",
            ",",
            "Garden",
        ]),
        1..10,
    )
    .prop_map(|w| w.join(" "))
}

pub fn run() -> Result<String, String> {
    let norm = NormConfig::default();
    let hulls = Cell::new(0);
    for_all(CASES, planted(), |p| {
        let got = neural_align(&p.matrix, p.char_span());
        match hull_oracle(&p) {
            Some(span) => {
                let a = got.map_err(|e| TestCaseError::fail(e.to_string()))?;
                prop_assert_eq!(a.target_span, span);
                prop_assert_eq!(
                    Some(a.target_text.as_str()),
                    char_slice(&p.matrix.tgt_text, span.0, span.1)
                );
                prop_assert_eq!(a.provenance, Provenance::Neural);
                hulls.set(hulls.get() + 1);
            }
            None => prop_assert_eq!(got, Err(AlignError::NoAlignment)),
        }
        Ok(())
    })
    .map_err(|e| format!("neural vs hull oracle: {e}"))?;

    let dict_hits = Cell::new(0);
    let cands = prop::collection::vec(
        prop::sample::select(vec!["old street", "street", "tea house", "Garden", "re", "house"]),
        1..4,
    );
    for_all(CASES, (sentence(), cands), |(text, cands)| {
        let cs = CandidateSet::new("x", cands.iter().map(|c| c.to_string()), 8);
        let got = dictionary_align(&cs, &text, &norm);
        match substring_oracle(&cs.candidates, &text) {
            Some(span) => {
                prop_assert_eq!(got.map_err(|e| TestCaseError::fail(e.to_string()))?.target_span, span);
                dict_hits.set(dict_hits.get() + 1);
            }
            None => prop_assert_eq!(got, Err(AlignError::NoMatch)),
        }
        Ok(())
    })
    .map_err(|e| format!("dictionary vs substring oracle: {e}"))?;

    // whenever the dictionary succeeds, hybrid returns exactly its answer
    let short = Cell::new(0);
    for_all(CASES, (planted(), 0usize..10), |(p, pick)| {
        let word = p.matrix.tgt_tokens[pick % p.matrix.tgt_tokens.len()].text.clone();
        let cs = CandidateSet::new("entity", [word], 8);
        if let Ok(dict) = dictionary_align(&cs, &p.matrix.tgt_text, &norm) {
            let hybrid = hybrid_align(
                Some(&cs),
                Some(&p.matrix),
                Some(p.char_span()),
                &p.matrix.tgt_text,
                &norm,
            )
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(hybrid, dict);
            short.set(short.get() + 1);
        }
        Ok(())
    })
    .map_err(|e| format!("hybrid short-circuit: {e}"))?;

    Ok(format!(
        "{CASES} matrices match the hull oracle ({} aligned), {CASES} dictionary cases match the scan oracle ({} hits), short-circuit held on {} dictionary hits",
        hulls.get(),
        dict_hits.get(),
        short.get()
    ))
}
