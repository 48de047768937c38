//! Reasoning traces, tokens and segments, plus corpus loading.
//!
//! A corpus is NDJSON with one record per line. Required keys are `trace_id`,
//! `query`, `answer` and `cot`; `tokens` (a list of `{text, start, end}` byte
//! spans into `cot`) and `answer_tokens` (spans into `answer`) are optional and
//! fall back to the supplied [`Tokenizer`].

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::segmenter::{align_to_tokens, segment_text, KeywordSet};
use crate::{ndjson, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub index: usize,
    pub text: String,
    /// Byte offset of the first byte.
    pub start: usize,
    /// Exclusive byte offset.
    pub end: usize,
}

/// A token as it appears in corpus files: position is implied by list order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub seg_index: usize,
    /// First token index (inclusive).
    pub first: usize,
    /// Last token index (inclusive).
    pub last: usize,
    /// Byte span of the segment text in `cot`.
    pub start: usize,
    pub end: usize,
    pub is_first: bool,
    pub is_last: bool,
}

impl Segment {
    pub fn n_tokens(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn tokens(&self) -> std::ops::Range<usize> {
        self.first..self.last + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub trace_id: String,
    pub query: String,
    pub answer: String,
    pub cot: String,
    pub tokens: Vec<Token>,
    /// Tokens of the answer, with spans offset by `cot.len()` so they address
    /// the training target `cot ++ answer`.
    pub answer_tokens: Vec<Token>,
    pub segments: Vec<Segment>,
}

impl ReasoningTrace {
    /// Tokenizes and segments a raw record.
    pub fn build(record: TraceRecord, keywords: &KeywordSet, tokenizer: &dyn Tokenizer) -> Result<Self> {
        let TraceRecord { trace_id, query, answer, cot, tokens, answer_tokens } = record;
        if cot.is_empty() {
            return Err(Error::Domain(format!("trace {trace_id:?} has an empty cot")));
        }
        let spans = tokens.unwrap_or_else(|| tokenizer.tokenize(&cot));
        let tokens: Vec<Token> = spans
            .into_iter()
            .enumerate()
            .map(|(index, s)| Token { index, text: s.text, start: s.start, end: s.end })
            .collect();
        let offset = cot.len();
        let answer_tokens = answer_tokens
            .unwrap_or_else(|| tokenizer.tokenize(&answer))
            .into_iter()
            .enumerate()
            .map(|(index, s)| Token { index, text: s.text, start: s.start + offset, end: s.end + offset })
            .collect();
        let segments = align_to_tokens(&segment_text(&cot, keywords), &tokens, cot.len())?;
        let trace = Self { trace_id, query, answer, cot, tokens, answer_tokens, segments };
        trace.validate()?;
        Ok(trace)
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    /// Length of the training target `cot ++ answer` in tokens.
    pub fn target_len(&self) -> usize {
        self.tokens.len() + self.answer_tokens.len()
    }

    pub fn segment_text(&self, m: usize) -> &str {
        let s = &self.segments[m];
        &self.cot[s.start..s.end]
    }

    /// Segment index of every token.
    pub fn token_segments(&self) -> Vec<usize> {
        let mut out = vec![0; self.tokens.len()];
        for s in &self.segments {
            out[s.tokens()].iter_mut().for_each(|x| *x = s.seg_index);
        }
        out
    }

    pub fn to_record(&self) -> TraceRecord {
        let off = self.cot.len();
        TraceRecord {
            trace_id: self.trace_id.clone(),
            query: self.query.clone(),
            answer: self.answer.clone(),
            cot: self.cot.clone(),
            tokens: Some(
                self.tokens.iter().map(|t| TokenSpan { text: t.text.clone(), start: t.start, end: t.end }).collect(),
            ),
            answer_tokens: Some(
                self.answer_tokens
                    .iter()
                    .map(|t| TokenSpan { text: t.text.clone(), start: t.start - off, end: t.end - off })
                    .collect(),
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Domain(format!("trace {:?}: {msg}", self.trace_id)));
        if self.tokens.is_empty() {
            return bad("no tokens".into());
        }
        if self.segments.is_empty() {
            return bad("no segments".into());
        }
        check_spans(&self.tokens, 0, self.cot.len()).or_else(bad)?;
        let off = self.cot.len();
        check_spans(&self.answer_tokens, off, off + self.answer.len()).or_else(bad)?;

        let mut next = 0;
        for (m, s) in self.segments.iter().enumerate() {
            if s.seg_index != m || s.first != next || s.last < s.first {
                return bad(format!("segment {m} breaks the token partition"));
            }
            if s.is_first != (m == 0) || s.is_last != (m + 1 == self.segments.len()) {
                return bad(format!("segment {m} has wrong boundary flags"));
            }
            if s.start >= s.end || s.end > self.cot.len() {
                return bad(format!("segment {m} has an invalid byte span"));
            }
            next = s.last + 1;
        }
        if next != self.tokens.len() {
            return bad("segments do not cover every token".into());
        }
        Ok(())
    }
}

fn check_spans(tokens: &[Token], lo: usize, hi: usize) -> std::result::Result<(), String> {
    let mut prev_end = lo;
    for (i, t) in tokens.iter().enumerate() {
        if t.index != i {
            return Err(format!("token {i} has index {}", t.index));
        }
        if t.end <= t.start || t.start < prev_end || t.end > hi {
            return Err(format!("token {i} span [{}, {}) is out of order or out of range", t.start, t.end));
        }
        prev_end = t.end;
    }
    Ok(())
}

/// One corpus line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub trace_id: String,
    pub query: String,
    pub answer: String,
    pub cot: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<TokenSpan>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_tokens: Option<Vec<TokenSpan>>,
}

pub trait Tokenizer: Send + Sync {
    fn id(&self) -> &str;
    fn tokenize(&self, text: &str) -> Vec<TokenSpan>;
}

/// One token per byte. Non-ASCII bytes carry U+FFFD as display text; the span
/// is authoritative.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn id(&self) -> &str {
        "byte"
    }

    fn tokenize(&self, text: &str) -> Vec<TokenSpan> {
        text.bytes()
            .enumerate()
            .map(|(i, b)| TokenSpan { text: String::from_utf8_lossy(&[b]).into_owned(), start: i, end: i + 1 })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CorpusSchema {
    #[default]
    #[serde(rename = "ndjson-v1")]
    NdjsonV1,
}

impl std::str::FromStr for CorpusSchema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ndjson-v1" | "v1" => Ok(Self::NdjsonV1),
            other => Err(Error::Config(format!("unknown corpus schema {other:?}"))),
        }
    }
}

const REQUIRED: [&str; 4] = ["trace_id", "query", "answer", "cot"];

/// Reads raw records, checking required keys and rejecting duplicate ids.
pub fn load_records(path: &Path, schema: CorpusSchema) -> Result<Vec<TraceRecord>> {
    let CorpusSchema::NdjsonV1 = schema;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, text) in ndjson::lines(path)? {
        let value: Value = ndjson::parse_line(line, &text)?;
        let obj =
            value.as_object().ok_or_else(|| Error::Schema { line, message: "record is not a JSON object".into() })?;
        for key in REQUIRED {
            match obj.get(key) {
                Some(Value::String(_)) => {}
                Some(_) => return Err(Error::Schema { line, message: format!("{key} must be a string") }),
                None => return Err(Error::Schema { line, message: format!("missing required field {key}") }),
            }
        }
        let record: TraceRecord =
            serde_json::from_value(value).map_err(|e| Error::Schema { line, message: e.to_string() })?;
        if !seen.insert(record.trace_id.clone()) {
            return Err(Error::Conflict(record.trace_id));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_traces(
    path: &Path,
    schema: CorpusSchema,
    keywords: &KeywordSet,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<ReasoningTrace>> {
    load_records(path, schema)?.into_iter().map(|r| ReasoningTrace::build(r, keywords, tokenizer)).collect()
}

/// Writes traces as corpus records with explicit token spans.
pub fn write_corpus(path: &Path, traces: &[ReasoningTrace]) -> Result<()> {
    let records: Vec<TraceRecord> = traces.iter().map(ReasoningTrace::to_record).collect();
    ndjson::write(path, &records)
}

/// Writes fully segmented traces (the `segment` stage artifact).
pub fn write_traces(path: &Path, traces: &[ReasoningTrace]) -> Result<()> {
    ndjson::write(path, traces)
}

pub fn read_traces(path: &Path) -> Result<Vec<ReasoningTrace>> {
    let traces: Vec<ReasoningTrace> = ndjson::read(path)?;
    let mut seen = HashSet::new();
    for t in &traces {
        t.validate()?;
        if !seen.insert(t.trace_id.as_str()) {
            return Err(Error::Conflict(t.trace_id.clone()));
        }
    }
    Ok(traces)
}
