//! Textual belief-state and dialogue-act representation, and the
//! sentinel-token input strings fed to subtask predictors.
//!
//! ```text
//! state := "null" | group+
//! group := "(" domain ")" svp ("," svp)*
//! svp   := slot [relation] '"' value '"'
//! acts  := ("(" domain ")" item ("," item)*)+
//! item  := act [slot [[relation] '"' value '"']]
//! ```
//!
//! Input whitespace is free-form; output always uses single spaces. Values
//! cannot contain a double quote; there is no escaping.

use std::fmt;

use thiserror::Error;

use crate::kb::{render_knowledge, ResultSet};
use crate::model::{is_identifier, ActItem, ActSeq, BeliefState, SlotTriplet, EQUAL_TO};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("parse error at character {position}: expected {expected}")]
    Parse { position: usize, expected: String },
    #[error("duplicate slot key {domain}.{slot}.{relation}")]
    DuplicateKey {
        domain: String,
        slot: String,
        relation: String,
    },
    #[error("dialogue act sequence is empty")]
    EmptyActs,
    #[error("unrecognized API decision {0:?}")]
    UnrecognizedDecision(String),
    #[error("missing context field {0}")]
    MissingContext(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    /// Omit the relation when it is `equal_to`.
    #[default]
    ImplicitRelation,
    /// Always print the relation.
    ExplicitRelation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum SubtaskKind {
    #[serde(rename = "DST")]
    Dst,
    #[serde(rename = "API")]
    Api,
    #[serde(rename = "DA")]
    Da,
    #[serde(rename = "RG")]
    Rg,
}

impl SubtaskKind {
    pub const ALL: [SubtaskKind; 4] = [SubtaskKind::Dst, SubtaskKind::Api, SubtaskKind::Da, SubtaskKind::Rg];

    pub fn prefix(&self) -> &'static str {
        match self {
            SubtaskKind::Dst => "DST:",
            SubtaskKind::Api => "API:",
            SubtaskKind::Da => "DA:",
            SubtaskKind::Rg => "RG:",
        }
    }
}

impl fmt::Display for SubtaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix().trim_end_matches(':'))
    }
}

// -----------------------------------------------------------------------------
// Lexer
// -----------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    LParen,
    RParen,
    Comma,
    Word(String),
    Quoted(String),
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::Comma => "','".into(),
            Tok::Word(w) => format!("word {w:?}"),
            Tok::Quoted(q) => format!("quoted value {q:?}"),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, FormatError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '(' => {
                out.push((i, Tok::LParen));
                i += 1;
            }
            ')' => {
                out.push((i, Tok::RParen));
                i += 1;
            }
            ',' => {
                out.push((i, Tok::Comma));
                i += 1;
            }
            '"' => {
                let start = i;
                let close = chars[i + 1..]
                    .iter()
                    .position(|&c| c == '"')
                    .ok_or(FormatError::Parse {
                        position: start,
                        expected: "closing '\"'".into(),
                    })?;
                let raw: String = chars[i + 1..i + 1 + close].iter().collect();
                let value = raw.trim();
                if value.is_empty() {
                    return Err(FormatError::Parse {
                        position: start,
                        expected: "non-empty quoted value".into(),
                    });
                }
                out.push((start, Tok::Quoted(value.to_string())));
                i += close + 2;
            }
            _ => {
                let start = i;
                while i < chars.len() && !chars[i].is_whitespace() && !matches!(chars[i], '(' | ')' | ',' | '"') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                out.push((start, Tok::Word(word)));
            }
        }
    }
    Ok(out)
}

struct Cursor {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Cursor {
    fn new(text: &str) -> Result<Self, FormatError> {
        Ok(Self {
            toks: lex(text)?,
            pos: 0,
            end: text.chars().count(),
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn peek2(&self) -> Option<&Tok> {
        self.toks.get(self.pos + 1).map(|(_, t)| t)
    }

    fn at(&self) -> usize {
        self.toks.get(self.pos).map(|(p, _)| *p).unwrap_or(self.end)
    }

    fn error(&self, expected: &str) -> FormatError {
        let found = self.peek().map(Tok::describe).unwrap_or_else(|| "end of input".into());
        FormatError::Parse {
            position: self.at(),
            expected: format!("{expected}, found {found}"),
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), FormatError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(what))
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, FormatError> {
        match self.peek() {
            Some(Tok::Word(w)) if is_identifier(w) => {
                let w = w.clone();
                self.pos += 1;
                Ok(w)
            }
            _ => Err(self.error(what)),
        }
    }

    fn quoted(&mut self) -> Result<String, FormatError> {
        match self.peek() {
            Some(Tok::Quoted(v)) => {
                let v = v.clone();
                self.pos += 1;
                Ok(v)
            }
            _ => Err(self.error("quoted value")),
        }
    }

    fn is_done(&self) -> bool {
        self.pos >= self.toks.len()
    }

    /// Parses `( domain )`, skipping consecutive repeated groups with no body.
    fn domain_header(&mut self) -> Result<String, FormatError> {
        loop {
            self.expect(Tok::LParen, "'('")?;
            let domain = self.ident("domain")?;
            self.expect(Tok::RParen, "')'")?;
            if self.peek() != Some(&Tok::LParen) {
                return Ok(domain);
            }
        }
    }

    /// After an element: `,` continues the group, `(` starts a new one.
    fn separator(&mut self) -> Result<Sep, FormatError> {
        match self.peek() {
            None => Ok(Sep::End),
            Some(Tok::Comma) => {
                self.pos += 1;
                if self.peek() == Some(&Tok::LParen) {
                    Ok(Sep::Group)
                } else {
                    Ok(Sep::Item)
                }
            }
            Some(Tok::LParen) => Ok(Sep::Group),
            _ => Err(self.error("',' or '(' or end of input")),
        }
    }
}

enum Sep {
    Item,
    Group,
    End,
}

// -----------------------------------------------------------------------------
// Belief state
// -----------------------------------------------------------------------------

pub fn parse_belief_state(text: &str) -> Result<BeliefState, FormatError> {
    let mut cur = Cursor::new(text)?;
    if matches!(cur.peek(), Some(Tok::Word(w)) if w == "null") && cur.toks.len() == 1 {
        return Ok(BeliefState::default());
    }
    if cur.is_done() {
        return Err(cur.error("'null' or '('"));
    }
    let mut triplets: Vec<SlotTriplet> = Vec::new();
    'groups: loop {
        let domain = cur.domain_header()?;
        loop {
            let slot = cur.ident("slot name")?;
            let relation = match cur.peek() {
                Some(Tok::Word(_)) => cur.ident("relation")?,
                _ => EQUAL_TO.to_string(),
            };
            let value = cur.quoted()?;
            let t = SlotTriplet::with_relation(domain.clone(), slot, relation, value);
            if triplets.iter().any(|p| p.key() == t.key()) {
                return Err(FormatError::DuplicateKey {
                    domain: t.domain,
                    slot: t.slot,
                    relation: t.relation,
                });
            }
            triplets.push(t);
            match cur.separator()? {
                Sep::Item => continue,
                Sep::Group => continue 'groups,
                Sep::End => break 'groups,
            }
        }
    }
    Ok(BeliefState::new(triplets))
}

fn push_value(out: &mut String, slot: &str, relation: &str, value: &str, style: Style) {
    out.push_str(slot);
    if style == Style::ExplicitRelation || relation != EQUAL_TO {
        out.push(' ');
        out.push_str(relation);
    }
    out.push_str(" \" ");
    out.push_str(value);
    out.push_str(" \"");
}

/// Canonical single-space rendering; `null` for the empty state.
pub fn serialize_belief_state(bs: &BeliefState, style: Style) -> String {
    if bs.is_empty() {
        return "null".to_string();
    }
    let mut out = String::new();
    let mut current: Option<&str> = None;
    for t in &bs.triplets {
        if current != Some(t.domain.as_str()) {
            if current.is_some() {
                out.push(' ');
            }
            out.push_str("( ");
            out.push_str(&t.domain);
            out.push_str(" ) ");
            current = Some(&t.domain);
        } else {
            out.push_str(" , ");
        }
        push_value(&mut out, &t.slot, &t.relation, &t.value, style);
    }
    out
}

// -----------------------------------------------------------------------------
// Dialogue acts
// -----------------------------------------------------------------------------

pub fn parse_act_seq(text: &str) -> Result<ActSeq, FormatError> {
    let mut cur = Cursor::new(text)?;
    if cur.is_done() {
        return Err(cur.error("'('"));
    }
    let mut items = Vec::new();
    'groups: loop {
        let domain = cur.domain_header()?;
        loop {
            let act = cur.ident("act name")?;
            let mut item = ActItem::bare(domain.clone(), act);
            if let Some(Tok::Word(_)) = cur.peek() {
                item.slot = Some(cur.ident("slot name")?);
                match (cur.peek(), cur.peek2()) {
                    (Some(Tok::Word(_)), Some(Tok::Quoted(_))) => {
                        item.relation = Some(cur.ident("relation")?);
                        item.value = Some(cur.quoted()?);
                    }
                    (Some(Tok::Quoted(_)), _) => {
                        item.relation = Some(EQUAL_TO.to_string());
                        item.value = Some(cur.quoted()?);
                    }
                    _ => {}
                }
            }
            items.push(item);
            match cur.separator()? {
                Sep::Item => continue,
                Sep::Group => continue 'groups,
                Sep::End => break 'groups,
            }
        }
    }
    Ok(ActSeq::new(items))
}

pub fn serialize_act_seq(acts: &ActSeq, style: Style) -> Result<String, FormatError> {
    if acts.is_empty() {
        return Err(FormatError::EmptyActs);
    }
    let mut out = String::new();
    let mut current: Option<&str> = None;
    for a in &acts.items {
        if current != Some(a.domain.as_str()) {
            if current.is_some() {
                out.push(' ');
            }
            out.push_str("( ");
            out.push_str(&a.domain);
            out.push_str(" ) ");
            current = Some(&a.domain);
        } else {
            out.push_str(" , ");
        }
        out.push_str(&a.act);
        match (&a.slot, &a.value) {
            (Some(slot), Some(value)) => {
                out.push(' ');
                push_value(&mut out, slot, a.effective_relation().unwrap_or(EQUAL_TO), value, style);
            }
            (Some(slot), None) => {
                out.push(' ');
                out.push_str(slot);
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Trimmed, case-insensitive `yes` / `no`.
pub fn parse_api_decision(text: &str) -> Result<bool, FormatError> {
    match text.trim().to_lowercase().as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(FormatError::UnrecognizedDecision(text.trim().to_string())),
    }
}

pub fn render_api_decision(decision: bool) -> &'static str {
    if decision {
        "yes"
    } else {
        "no"
    }
}

// -----------------------------------------------------------------------------
// Subtask inputs
// -----------------------------------------------------------------------------

/// Everything a subtask input may draw on. Which fields are required depends
/// on the [`SubtaskKind`].
#[derive(Debug, Clone, Default)]
pub struct SubtaskContext {
    /// The state block: the prior state for DST, the current state for API and DA.
    pub state: Option<BeliefState>,
    /// Agent acts of up to the two previous turns, oldest first.
    pub history_acts: Vec<ActSeq>,
    pub user_utterance: Option<String>,
    /// Latest API results; `None` renders `null` for API and is an error for DA.
    pub knowledge: Option<ResultSet>,
    pub acts_for_rg: Option<ActSeq>,
    pub style: Style,
}

pub const HISTORY_WINDOW: usize = 2;

fn render_history(ctx: &SubtaskContext, with_acts: bool) -> Result<String, FormatError> {
    let utt = ctx
        .user_utterance
        .as_deref()
        .ok_or(FormatError::MissingContext("user_utterance"))?;
    let mut out = String::from("<history> ");
    if with_acts {
        let skip = ctx.history_acts.len().saturating_sub(HISTORY_WINDOW);
        for acts in &ctx.history_acts[skip..] {
            if acts.is_empty() {
                continue;
            }
            out.push_str("AGENT_ACTS: ");
            out.push_str(&serialize_act_seq(acts, ctx.style)?);
            out.push(' ');
        }
    }
    out.push_str("USER: ");
    out.push_str(utt);
    out.push_str(" <endofhistory>");
    Ok(out)
}

fn render_state(ctx: &SubtaskContext) -> Result<String, FormatError> {
    let state = ctx.state.as_ref().ok_or(FormatError::MissingContext("state"))?;
    Ok(format!(
        "<state> {} <endofstate>",
        serialize_belief_state(state, ctx.style)
    ))
}

fn render_knowledge_block(knowledge: Option<&ResultSet>) -> String {
    let body = knowledge.map(render_knowledge).unwrap_or_else(|| "null".to_string());
    format!("<knowledge> {body} <endofknowledge>")
}

pub fn render_subtask_input(kind: SubtaskKind, ctx: &SubtaskContext) -> Result<String, FormatError> {
    let prefix = kind.prefix();
    Ok(match kind {
        SubtaskKind::Dst => format!("{prefix} {} {}", render_state(ctx)?, render_history(ctx, true)?),
        SubtaskKind::Api => format!(
            "{prefix} {} {} {}",
            render_knowledge_block(ctx.knowledge.as_ref()),
            render_state(ctx)?,
            render_history(ctx, true)?
        ),
        SubtaskKind::Da => {
            let knowledge = ctx.knowledge.as_ref().ok_or(FormatError::MissingContext("knowledge"))?;
            format!(
                "{prefix} {} {} {}",
                render_knowledge_block(Some(knowledge)),
                render_state(ctx)?,
                render_history(ctx, true)?
            )
        }
        SubtaskKind::Rg => {
            let acts = ctx
                .acts_for_rg
                .as_ref()
                .ok_or(FormatError::MissingContext("acts_for_rg"))?;
            format!(
                "{prefix} <actions> {} <endofactions> {}",
                serialize_act_seq(acts, ctx.style)?,
                render_history(ctx, false)?
            )
        }
    })
}
