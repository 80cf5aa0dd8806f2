//! Tabular softmax policies over explicit conditioning contexts.
//!
//! A context identifies one next-token distribution: the role (trace, answer,
//! or posterior segment), the question, the role's extra conditioning (the
//! trace for answers, the hint for posteriors) and the prefix emitted so far.
//! Each context owns a logit row of length `vocab.size() + 1` (content tokens
//! plus end-of-segment); missing rows mean all-zero logits, i.e. uniform.
//!
//! Segments are produced ancestrally. While the prefix is shorter than the
//! role's cap the next token is drawn from the softmax row; once the prefix
//! reaches the cap, end-of-segment is forced with probability one, so that
//! final step contributes neither log-probability nor gradient. Contexts
//! therefore only exist for prefixes strictly shorter than the cap.

use crate::grad::GradVector;
use crate::math::{log_softmax, softmax_with_temperature};
use crate::seq::{all_segments, Seq, SegmentCaps, Vocab};
use crate::task::TaskSuite;
use rand::Rng;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("segment length {len} exceeds cap {cap}")]
    OverCap { len: usize, cap: usize },
    #[error("token {tok} out of range for vocab of size {size}")]
    TokenOutOfRange { tok: usize, size: usize },
    #[error("temperature {0} must be positive and finite")]
    BadTemperature(f64),
    #[error("logit row has {got} entries, expected {want}")]
    WidthMismatch { got: usize, want: usize },
    #[error("segment distribution has non-positive total mass")]
    ZeroMass,
    #[error("duplicate segment [{0}] in distribution")]
    DuplicateSegment(String),
    #[error("table line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Trace,
    Answer,
    Posterior,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Trace => "trace",
            Role::Answer => "answer",
            Role::Posterior => "posterior",
        }
    }
}

/// Key of one next-token distribution. The ordering (derived, variant order
/// then fields) fixes the serialization order of tables and gradients.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ContextKey {
    Trace { question: u32, prefix: Seq },
    Answer { question: u32, trace: Seq, prefix: Seq },
    Posterior { question: u32, hint: Seq, prefix: Seq },
}

impl ContextKey {
    pub fn role(&self) -> Role {
        match self {
            ContextKey::Trace { .. } => Role::Trace,
            ContextKey::Answer { .. } => Role::Answer,
            ContextKey::Posterior { .. } => Role::Posterior,
        }
    }

    pub fn prefix(&self) -> &Seq {
        match self {
            ContextKey::Trace { prefix, .. }
            | ContextKey::Answer { prefix, .. }
            | ContextKey::Posterior { prefix, .. } => prefix,
        }
    }
}

/// What a segment is conditioned on: the trace policy `pi(z|x)`, the answer
/// policy `pi(y|x,z)`, or the hint-conditioned posterior `q(z|x,y')`.
#[derive(Clone, Copy, Debug)]
pub enum Conditioning<'a> {
    Trace { question: u32 },
    Answer { question: u32, trace: &'a Seq },
    Posterior { question: u32, hint: &'a Seq },
}

impl Conditioning<'_> {
    pub fn role(&self) -> Role {
        match self {
            Conditioning::Trace { .. } => Role::Trace,
            Conditioning::Answer { .. } => Role::Answer,
            Conditioning::Posterior { .. } => Role::Posterior,
        }
    }

    pub fn context(&self, prefix: Seq) -> ContextKey {
        match self {
            Conditioning::Trace { question } => ContextKey::Trace {
                question: *question,
                prefix,
            },
            Conditioning::Answer { question, trace } => ContextKey::Answer {
                question: *question,
                trace: (*trace).clone(),
                prefix,
            },
            Conditioning::Posterior { question, hint } => ContextKey::Posterior {
                question: *question,
                hint: (*hint).clone(),
                prefix,
            },
        }
    }
}

/// Sparse logit table. A `BTreeMap` keeps iteration (and thus serialization,
/// norms and parameter updates) in key order, independent of insertion
/// history, which the bit-reproducibility contract relies on.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTable {
    width: usize,
    rows: BTreeMap<ContextKey, Vec<f64>>,
}

impl ParamTable {
    pub fn new(width: usize) -> Self {
        ParamTable {
            width,
            rows: BTreeMap::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, ctx: &ContextKey) -> Option<&[f64]> {
        self.rows.get(ctx).map(Vec::as_slice)
    }

    /// Row for `ctx`, inserting an all-zero row if absent.
    pub fn row_mut(&mut self, ctx: ContextKey) -> &mut [f64] {
        self.rows.entry(ctx).or_insert_with(|| vec![0.0; self.width])
    }

    pub fn set_row(&mut self, ctx: ContextKey, row: Vec<f64>) -> Result<(), PolicyError> {
        if row.len() != self.width {
            return Err(PolicyError::WidthMismatch {
                got: row.len(),
                want: self.width,
            });
        }
        self.rows.insert(ctx, row);
        Ok(())
    }

    pub fn contexts(&self) -> impl Iterator<Item = &ContextKey> {
        self.rows.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// `params += scale * grad`, creating zero rows on demand.
    pub fn apply_update(&mut self, grad: &GradVector, scale: f64) {
        for (ctx, grow) in grad.iter() {
            let row = self.row_mut(ctx.clone());
            for (p, g) in row.iter_mut().zip(grow.iter()) {
                *p += scale * g;
            }
        }
    }

    /// One `ctx` line per row, sorted by key; floats in shortest
    /// round-trippable form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (ctx, row) in self.rows.iter() {
            out.push_str(&fmt_row_line(ctx, row));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, width: usize) -> Result<Self, PolicyError> {
        let mut table = ParamTable::new(width);
        for (lno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (ctx, row) = parse_row_line(line, width, lno + 1)?;
            table.set_row(ctx, row)?;
        }
        Ok(table)
    }
}

/// Formats `ctx <role> <key-fields> : <logit csv>`.
pub(crate) fn fmt_row_line(ctx: &ContextKey, row: &[f64]) -> String {
    let values = row
        .iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(",");
    match ctx {
        ContextKey::Trace { question, prefix } => {
            format!("ctx trace q={} prefix={} : {}", question, prefix.to_csv(), values)
        }
        ContextKey::Answer {
            question,
            trace,
            prefix,
        } => format!(
            "ctx answer q={} z={} prefix={} : {}",
            question,
            trace.to_csv(),
            prefix.to_csv(),
            values
        ),
        ContextKey::Posterior {
            question,
            hint,
            prefix,
        } => format!(
            "ctx posterior q={} hint={} prefix={} : {}",
            question,
            hint.to_csv(),
            prefix.to_csv(),
            values
        ),
    }
}

pub(crate) fn parse_row_line(
    line: &str,
    width: usize,
    lno: usize,
) -> Result<(ContextKey, Vec<f64>), PolicyError> {
    let err = |msg: &str| PolicyError::Parse {
        line: lno,
        msg: msg.to_string(),
    };
    let (head, values) = line.split_once(" : ").ok_or_else(|| err("missing ` : `"))?;
    let mut fields = head.split_whitespace();
    if fields.next() != Some("ctx") {
        return Err(err("expected `ctx` line"));
    }
    let role = fields.next().ok_or_else(|| err("missing role"))?;
    let mut kv = BTreeMap::new();
    for field in fields {
        let (k, v) = field.split_once('=').ok_or_else(|| err("fields are key=value"))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let seq_field = |kv: &BTreeMap<String, String>, key: &str| -> Result<Seq, PolicyError> {
        let raw = kv.get(key).ok_or_else(|| err(&format!("missing {key}=")))?;
        Seq::from_csv(raw).map_err(|e| err(&e.to_string()))
    };
    let question: u32 = kv
        .get("q")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| err("missing or bad q="))?;
    let prefix = seq_field(&kv, "prefix")?;
    let ctx = match role {
        "trace" => ContextKey::Trace { question, prefix },
        "answer" => ContextKey::Answer {
            question,
            trace: seq_field(&kv, "z")?,
            prefix,
        },
        "posterior" => ContextKey::Posterior {
            question,
            hint: seq_field(&kv, "hint")?,
            prefix,
        },
        other => return Err(err(&format!("unknown role `{other}`"))),
    };
    let mut row = Vec::new();
    for part in values.split(',') {
        let v: f64 = part
            .trim()
            .parse()
            .map_err(|_| err(&format!("bad logit `{part}`")))?;
        row.push(v);
    }
    if row.len() != width {
        return Err(PolicyError::WidthMismatch {
            got: row.len(),
            want: width,
        });
    }
    Ok((ctx, row))
}

/// A tabular policy: logit table plus the vocabulary and caps that fix row
/// width and segment lengths. One `Policy` value can serve all three roles;
/// which rows are consulted depends on the [`Conditioning`] passed in.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub params: ParamTable,
    pub vocab: Vocab,
    pub caps: SegmentCaps,
}

impl Policy {
    /// Policy with an empty table: every context is uniform.
    pub fn uniform(vocab: Vocab, caps: SegmentCaps) -> Self {
        Policy {
            params: ParamTable::new(vocab.width()),
            vocab,
            caps,
        }
    }

    pub fn cap_for(&self, role: Role) -> usize {
        match role {
            Role::Trace | Role::Posterior => self.caps.trace,
            Role::Answer => self.caps.answer,
        }
    }

    /// Log-softmax row for a context (zeros when the row is absent).
    pub fn log_next(&self, ctx: &ContextKey) -> Vec<f64> {
        match self.params.row(ctx) {
            Some(row) => log_softmax(row),
            None => log_softmax(&vec![0.0; self.vocab.width()]),
        }
    }

    fn check_segment(&self, cond: Conditioning, seg: &Seq) -> Result<usize, PolicyError> {
        let cap = self.cap_for(cond.role());
        if seg.len() > cap {
            return Err(PolicyError::OverCap {
                len: seg.len(),
                cap,
            });
        }
        for &t in seg.ids() {
            if !self.vocab.contains(t) {
                return Err(PolicyError::TokenOutOfRange {
                    tok: t as usize,
                    size: self.vocab.size(),
                });
            }
        }
        Ok(cap)
    }

    /// Log-probability of emitting `seg` then end-of-segment: the sum of the
    /// per-step log-softmax terms, plus the end step unless the segment sits
    /// exactly at the cap (where end is forced and contributes zero).
    pub fn log_prob(&self, cond: Conditioning, seg: &Seq) -> Result<f64, PolicyError> {
        let cap = self.check_segment(cond, seg)?;
        let mut total = 0.0;
        for (i, &t) in seg.ids().iter().enumerate() {
            let row = self.log_next(&cond.context(seg.prefix(i)));
            total += row[t as usize];
        }
        if seg.len() < cap {
            let row = self.log_next(&cond.context(seg.clone()));
            total += row[self.vocab.end()];
        }
        Ok(total)
    }

    /// Ancestral sample at the given temperature (applied to logits before
    /// the softmax). Temperature does not change support, only sharpness.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        cond: Conditioning,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Seq, PolicyError> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(PolicyError::BadTemperature(temperature));
        }
        let cap = self.cap_for(cond.role());
        let mut seg = Seq::empty();
        while seg.len() < cap {
            let ctx = cond.context(seg.clone());
            let logits = match self.params.row(&ctx) {
                Some(row) => row.to_vec(),
                None => vec![0.0; self.vocab.width()],
            };
            let probs = softmax_with_temperature(&logits, temperature);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = self.vocab.end();
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            if pick == self.vocab.end() {
                return Ok(seg);
            }
            seg.push(pick as u8);
        }
        Ok(seg)
    }

    /// Accumulates `coefficient * d(log_prob)/d(logits)` into `out`. Each
    /// decided step contributes `coefficient * (onehot(emitted) - softmax)`
    /// on its context row, which sums to zero across the row; the forced end
    /// step at the cap contributes nothing.
    pub fn score_grad(
        &self,
        cond: Conditioning,
        seg: &Seq,
        coefficient: f64,
        out: &mut GradVector,
    ) -> Result<(), PolicyError> {
        let cap = self.check_segment(cond, seg)?;
        if out.width() != self.vocab.width() {
            return Err(PolicyError::WidthMismatch {
                got: out.width(),
                want: self.vocab.width(),
            });
        }
        if coefficient == 0.0 {
            return Ok(());
        }
        let mut step = |prefix: Seq, emitted: usize| {
            let ctx = cond.context(prefix);
            let probs: Vec<f64> = self.log_next(&ctx).iter().map(|l| l.exp()).collect();
            let row = out.row_mut(ctx);
            for (t, p) in probs.iter().enumerate() {
                let onehot = if t == emitted { 1.0 } else { 0.0 };
                row[t] += coefficient * (onehot - p);
            }
        };
        for (i, &t) in seg.ids().iter().enumerate() {
            step(seg.prefix(i), t as usize);
        }
        if seg.len() < cap {
            step(seg.clone(), self.vocab.end());
        }
        Ok(())
    }

    /// Overwrites the rows reachable under `cond` so that the segment
    /// distribution equals `dist` exactly (logits are log subtree masses;
    /// zero-mass branches get `-inf`). `dist` must cover segments within the
    /// cap, sum to a positive total, and contain no duplicates.
    pub fn set_conditional(
        &mut self,
        cond: Conditioning,
        dist: &[(Seq, f64)],
    ) -> Result<(), PolicyError> {
        let cap = self.cap_for(cond.role());
        let mut mass: BTreeMap<&Seq, f64> = BTreeMap::new();
        for (seg, p) in dist {
            self.check_segment(cond, seg)?;
            if *p < 0.0 || !p.is_finite() {
                return Err(PolicyError::ZeroMass);
            }
            if mass.insert(seg, *p).is_some() {
                return Err(PolicyError::DuplicateSegment(seg.to_csv()));
            }
        }
        let total: f64 = mass.values().sum();
        if total <= 0.0 {
            return Err(PolicyError::ZeroMass);
        }
        let subtree = |prefix: &Seq| -> f64 {
            mass.iter()
                .filter(|(s, _)| s.len() >= prefix.len() && s.prefix(prefix.len()) == *prefix)
                .map(|(_, p)| p)
                .sum()
        };
        for prefix in all_segments(self.vocab, cap.saturating_sub(1)) {
            let mut row = Vec::with_capacity(self.vocab.width());
            for t in 0..self.vocab.size() as u8 {
                let mut child = prefix.clone();
                child.push(t);
                row.push(subtree(&child).ln());
            }
            row.push(mass.get(&prefix).copied().unwrap_or(0.0).ln());
            self.params.set_row(cond.context(prefix), row)?;
        }
        Ok(())
    }
}

/// Posterior tables initialized as hint-independent copies of the trace
/// tables: for every question, its trace rows are duplicated under each
/// possible hint, so initially `q(z|x,y') = pi(z|x)` for every hint.
pub fn posterior_from_trace(src: &Policy, suite: &TaskSuite) -> Policy {
    let mut post = Policy::uniform(src.vocab, src.caps);
    for q in &suite.questions {
        let rows: Vec<(Seq, Vec<f64>)> = src
            .params
            .iter()
            .filter_map(|(ctx, row)| match ctx {
                ContextKey::Trace { question, prefix } if *question == q.id => {
                    Some((prefix.clone(), row.to_vec()))
                }
                _ => None,
            })
            .collect();
        for hint in q.answers.members() {
            for (prefix, row) in &rows {
                post.params
                    .set_row(
                        ContextKey::Posterior {
                            question: q.id,
                            hint: hint.clone(),
                            prefix: prefix.clone(),
                        },
                        row.clone(),
                    )
                    .expect("copied rows share the width");
            }
        }
    }
    post
}
