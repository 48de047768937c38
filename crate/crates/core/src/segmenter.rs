//! Keyword segmentation of chain-of-thought text.
//!
//! Matching is literal and case-sensitive. At every byte position the keyword
//! list is tried in order and the first hit opens a new segment; the keyword
//! text belongs to the segment it opens. Lists are kept in longest-match order
//! so `"\n\nHmmm"` is tried before `"\n\nHmm"`.

use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::trace::{Segment, Token};
use crate::{Error, Result};

const PAPER_MAIN: [&str; 11] = [
    "\n\nWait",
    "\n\nAlternatively",
    "\n\nHowever",
    "\n\nNot sure",
    "\n\nGoing back",
    "\n\nBacktrack",
    "\n\nTrace back",
    "\n\nAnother",
    "\n\nBut wait",
    "\n\nBut alternatively",
    "\n\nBut just to",
];

const RETRO_STYLE: [&str; 11] = [
    "\n\nBut",
    "\n\nWait",
    "\n\nAlternatively",
    "\n\nHowever",
    "\n\nHmm",
    "\n\nHmmm",
    "\n\nNot sure",
    "\n\nGoing back",
    "\n\nBacktrack",
    "\n\nTrace back",
    "\n\nAnother",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeywordProfile {
    PaperMain,
    RetroStyle,
}

impl KeywordProfile {
    pub fn id(self) -> &'static str {
        match self {
            Self::PaperMain => "paper-main",
            Self::RetroStyle => "retro-style",
        }
    }
}

impl FromStr for KeywordProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-main" => Ok(Self::PaperMain),
            "retro-style" => Ok(Self::RetroStyle),
            other => Err(Error::Config(format!("unknown keyword profile {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSet {
    id: String,
    keywords: Vec<String>,
}

impl KeywordSet {
    /// Validates the list. Every keyword starts with a paragraph break, and a
    /// keyword that is a prefix of another must come after it.
    pub fn new(id: impl Into<String>, keywords: Vec<String>) -> Result<Self> {
        if keywords.is_empty() {
            return Err(Error::Config("keyword set is empty".into()));
        }
        for (i, k) in keywords.iter().enumerate() {
            if !k.starts_with("\n\n") || k.len() <= 2 {
                return Err(Error::Config(format!("keyword {k:?} must start with a paragraph break")));
            }
            if let Some(longer) = keywords[i + 1..].iter().find(|l| l.len() > k.len() && l.starts_with(k.as_str())) {
                return Err(Error::Config(format!(
                    "keyword {k:?} shadows the longer {longer:?}; list the longer one first"
                )));
            }
        }
        Ok(Self { id: id.into(), keywords })
    }

    /// Loads one keyword per line; `\n` and `\\` escapes are decoded and the
    /// list is reordered longest-first so shadowing cannot occur.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut keywords: Vec<String> = text.lines().filter(|l| !l.trim().is_empty()).map(unescape).collect();
        keywords.sort_by_key(|k| std::cmp::Reverse(k.len()));
        keywords.dedup();
        let id = format!("file:{}", path.file_name().and_then(|s| s.to_str()).unwrap_or("keywords"));
        Self::new(id, keywords)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn keywords(&self) -> &[String] {
        &self.keywords
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }

    fn match_at(&self, text: &[u8], pos: usize) -> Option<usize> {
        self.keywords.iter().find(|k| text[pos..].starts_with(k.as_bytes())).map(String::len)
    }
}

fn unescape(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

pub fn default_keywords(profile: KeywordProfile) -> KeywordSet {
    let list: &[&str] = match profile {
        KeywordProfile::PaperMain => &PAPER_MAIN,
        KeywordProfile::RetroStyle => &RETRO_STYLE,
    };
    let mut keywords: Vec<String> = list.iter().map(|s| s.to_string()).collect();
    // Stable sort keeps the listed order among equal lengths.
    keywords.sort_by_key(|k| std::cmp::Reverse(k.len()));
    KeywordSet::new(profile.id(), keywords).expect("built-in keyword profiles are valid")
}

/// Splits `cot` into byte spans that cover it exactly. Empty input yields one
/// empty span.
pub fn segment_text(cot: &str, ks: &KeywordSet) -> Vec<Range<usize>> {
    let bytes = cot.as_bytes();
    let mut starts = vec![0];
    let mut pos = 0;
    while pos < bytes.len() {
        match ks.match_at(bytes, pos) {
            Some(len) => {
                if pos > 0 {
                    starts.push(pos);
                }
                pos += len;
            }
            None => pos += 1,
        }
    }
    let mut spans: Vec<Range<usize>> = starts.windows(2).map(|w| w[0]..w[1]).collect();
    spans.push(*starts.last().unwrap()..bytes.len());
    spans
}

/// Assigns each token to the span holding its first byte. Spans that receive
/// no token are folded into the preceding segment, so segment byte spans still
/// cover the text.
pub fn align_to_tokens(spans: &[Range<usize>], tokens: &[Token], text_len: usize) -> Result<Vec<Segment>> {
    if spans.is_empty() {
        return Err(Error::Alignment("no spans to align against".into()));
    }
    if tokens.is_empty() {
        return Err(Error::Alignment("no tokens to align".into()));
    }
    let mut counts = vec![0usize; spans.len()];
    let mut owner = Vec::with_capacity(tokens.len());
    for t in tokens {
        if t.start >= text_len {
            return Err(Error::Alignment(format!(
                "token {} starts at byte {} beyond text end {text_len}",
                t.index, t.start
            )));
        }
        let s = spans.partition_point(|sp| sp.start <= t.start) - 1;
        if owner.last().is_some_and(|&prev| prev > s) {
            return Err(Error::Alignment(format!("token {} is out of order", t.index)));
        }
        counts[s] += 1;
        owner.push(s);
    }

    let mut segments: Vec<Segment> = Vec::new();
    let mut next_token = 0;
    for (s, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        segments.push(Segment {
            seg_index: segments.len(),
            first: next_token,
            last: next_token + n - 1,
            start: if segments.is_empty() { 0 } else { spans[s].start },
            end: 0,
            is_first: segments.is_empty(),
            is_last: false,
        });
        next_token += n;
    }
    let m = segments.len();
    for i in 0..m {
        segments[i].end = if i + 1 < m { segments[i + 1].start } else { text_len };
    }
    segments[m - 1].is_last = true;
    Ok(segments)
}
