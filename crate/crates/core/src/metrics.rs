//! Per-turn indicators and corpus metrics. Indicators are 0 or 1; corpus
//! aggregates are on a 0 to 100 scale.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_segmentation::UnicodeSegmentation;

use crate::model::{ActSeq, ApiCall, BeliefState};
use crate::norm::{basic_normalize, Normalizer};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("{preds} predictions for {refs} references")]
    LengthMismatch { preds: usize, refs: usize },
    #[error("empty corpus")]
    EmptyCorpus,
}

type NormTriplet = (String, String, String, String);

fn triplet_set(bs: &BeliefState, norm: &Normalizer) -> BTreeSet<NormTriplet> {
    bs.triplets
        .iter()
        .map(|t| {
            (
                t.domain.to_lowercase(),
                t.slot.to_lowercase(),
                t.relation.to_lowercase(),
                norm.normalize(&t.value),
            )
        })
        .collect()
}

fn indicator(b: bool) -> u8 {
    u8::from(b)
}

/// 1 iff the normalized triplet sets are equal.
pub fn jga(pred: &BeliefState, gold: &BeliefState, norm: &Normalizer) -> u8 {
    indicator(triplet_set(pred, norm) == triplet_set(gold, norm))
}

type NormAct = (String, String, Option<String>, Option<String>, Option<String>);

fn act_set(acts: &ActSeq, norm: &Normalizer) -> BTreeSet<NormAct> {
    acts.items
        .iter()
        .map(|a| {
            (
                a.domain.to_lowercase(),
                a.act.to_lowercase(),
                a.slot.as_ref().map(|s| s.to_lowercase()),
                a.effective_relation().map(str::to_lowercase),
                a.value.as_deref().map(|v| norm.normalize(v)),
            )
        })
        .collect()
}

/// 1 iff the normalized act item sets are equal.
pub fn da_accuracy(pred: &ActSeq, gold: &ActSeq, norm: &Normalizer) -> u8 {
    indicator(act_set(pred, norm) == act_set(gold, norm))
}

fn call_key(call: Option<&ApiCall>, norm: &Normalizer) -> Option<(String, BTreeSet<NormTriplet>)> {
    call.map(|c| {
        (
            c.domain.to_lowercase(),
            triplet_set(&BeliefState::new(c.constraints.clone()), norm),
        )
    })
}

/// 1 iff the decisions agree and, for a positive decision, the calls agree
/// on domain and normalized constraint set.
pub fn api_accuracy(
    pred_decision: bool,
    pred_call: Option<&ApiCall>,
    gold_decision: bool,
    gold_call: Option<&ApiCall>,
    norm: &Normalizer,
) -> u8 {
    if pred_decision != gold_decision {
        return 0;
    }
    indicator(!pred_decision || call_key(pred_call, norm) == call_key(gold_call, norm))
}

/// 0 iff every normalized gold entity occurs in the normalized response.
pub fn ser(response: &str, gold_entities: &[String], norm: &Normalizer) -> u8 {
    let text = basic_normalize(response);
    let present = |e: &String| {
        let plain = basic_normalize(e);
        let canon = norm.normalize(e);
        text.contains(&plain) || text.contains(&canon)
    };
    indicator(!gold_entities.iter().all(present))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tokenization {
    /// Unicode word segmentation; whitespace is dropped, punctuation kept.
    #[default]
    Words,
    /// One token per non-whitespace character, for unspaced scripts.
    Chars,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub tokenization: Tokenization,
    /// Add one to numerator and denominator of the 2- to 4-gram precisions.
    pub smoothing: bool,
}

pub fn tokenize(text: &str, tok: Tokenization) -> Vec<&str> {
    match tok {
        Tokenization::Words => text.split_word_bounds().filter(|w| !w.trim().is_empty()).collect(),
        Tokenization::Chars => text
            .grapheme_indices(true)
            .map(|(_, g)| g)
            .filter(|g| !g.trim().is_empty())
            .collect(),
    }
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut out = HashMap::new();
    for w in tokens.windows(n) {
        *out.entry(w).or_default() += 1;
    }
    out
}

/// Corpus BLEU-4 with the default configuration (word tokens, no smoothing).
pub fn bleu(preds: &[String], refs: &[String]) -> Result<f64, MetricError> {
    bleu_with(preds, refs, &BleuConfig::default())
}

/// Corpus BLEU-4: clipped n-gram matches pooled over all pairs, uniform
/// weights, brevity penalty against the total reference length.
pub fn bleu_with(preds: &[String], refs: &[String], cfg: &BleuConfig) -> Result<f64, MetricError> {
    if preds.len() != refs.len() {
        return Err(MetricError::LengthMismatch {
            preds: preds.len(),
            refs: refs.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (p, g) in preds.iter().zip(refs) {
        let pt = tokenize(p, cfg.tokenization);
        let gt = tokenize(g, cfg.tokenization);
        c += pt.len();
        r += gt.len();
        for n in 1..=4 {
            let pc = ngram_counts(&pt, n);
            let gc = ngram_counts(&gt, n);
            matches[n - 1] += pc
                .iter()
                .map(|(k, v)| (*v).min(gc.get(k).copied().unwrap_or(0)))
                .sum::<usize>();
            totals[n - 1] += pt.len().saturating_sub(n - 1);
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let (m, t) = if cfg.smoothing && n > 0 {
            (matches[n] + 1, totals[n] + 1)
        } else {
            (matches[n], totals[n])
        };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * (log_sum / 4.0).exp())
}
