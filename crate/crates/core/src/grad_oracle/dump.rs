//! Attribution dump: NDJSON whose first line is a run header and every
//! following line carries one trace's per-token IG values.
//!
//! Floats are written in shortest round-trip form, so reading a dump back
//! reproduces every value bit for bit.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::trace::{ReasoningTrace, TokenSpan};
use crate::{ndjson, Error, Result};

pub const DUMP_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub format_version: u32,
    pub model_id: String,
    /// `"pad"`, `"zero"` or `"token:<id>"`.
    pub baseline: String,
    pub steps: usize,
    pub keyword_profile: String,
    /// What `F` measures; this toolkit writes `"answer-logprob-sum"`.
    #[serde(default = "default_score_target")]
    pub score_target: String,
    #[serde(default = "default_region")]
    pub attributed_region: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenizer: Option<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

fn default_score_target() -> String {
    "answer-logprob-sum".into()
}

fn default_region() -> String {
    "cot-only".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub trace_id: String,
    pub token_igs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completeness_gap: Option<f64>,
    /// Number of leading entries of `token_igs` that belong to the query.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub query_tokens: usize,
    /// Token spans into the trace's cot, for producers with their own tokenizer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<TokenSpan>>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

pub fn write_dump(path: &Path, header: &DumpHeader, records: &[DumpRecord]) -> Result<()> {
    if header.format_version != DUMP_FORMAT_VERSION {
        return Err(Error::Incompatible(format!("cannot write dump format_version {}", header.format_version)));
    }
    if let Some(r) = records.iter().find(|r| r.token_igs.iter().any(|x| !x.is_finite())) {
        return Err(Error::Format(format!("trace {:?} has a non-finite IG value", r.trace_id)));
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<(DumpHeader, Vec<DumpRecord>)> {
    let mut lines = ndjson::lines(path)?.into_iter();
    let (n, first) = lines.next().ok_or_else(|| Error::Format("dump has no header line".into()))?;
    let raw: Value = ndjson::parse_line(n, &first)?;
    match raw.get("format_version").and_then(Value::as_u64) {
        Some(v) if v == DUMP_FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Incompatible(format!("dump format_version {v}, this build reads {DUMP_FORMAT_VERSION}")))
        }
        None => return Err(Error::Schema { line: n, message: "header lacks format_version".into() }),
    }
    let header: DumpHeader =
        serde_json::from_value(raw).map_err(|e| Error::Schema { line: n, message: e.to_string() })?;
    let records = lines.map(|(n, l)| ndjson::parse_line(n, &l)).collect::<Result<Vec<DumpRecord>>>()?;
    Ok((header, records))
}

/// Keys this build does not understand; an empty list means the dump matches
/// the format exactly.
pub fn dump_warnings(header: &DumpHeader, records: &[DumpRecord]) -> Vec<String> {
    let mut out: Vec<String> = header.extra.keys().map(|k| format!("header: unknown key {k:?}")).collect();
    for r in records {
        out.extend(r.extra.keys().map(|k| format!("trace {:?}: unknown key {k:?}", r.trace_id)));
    }
    out
}

/// Orders dump records by trace, checking ids and lengths.
pub fn join_dump(traces: &[ReasoningTrace], records: Vec<DumpRecord>) -> Result<Vec<DumpRecord>> {
    let index: HashMap<&str, usize> = traces.iter().enumerate().map(|(i, t)| (t.trace_id.as_str(), i)).collect();
    let mut slots: Vec<Option<DumpRecord>> = vec![None; traces.len()];
    for r in records {
        let &i = index
            .get(r.trace_id.as_str())
            .ok_or_else(|| Error::Join(format!("dump trace_id {:?} is not in the corpus", r.trace_id)))?;
        let want = traces[i].num_tokens() + r.query_tokens;
        if r.token_igs.len() != want {
            return Err(Error::Join(format!(
                "trace {:?}: dump has {} IG values, trace needs {want}",
                r.trace_id,
                r.token_igs.len()
            )));
        }
        if let Some(spans) = &r.tokens {
            let t = &traces[i];
            let aligned = spans.len() == t.tokens.len()
                && spans.iter().zip(&t.tokens).all(|(s, tok)| s.start == tok.start && s.end == tok.end);
            if !aligned {
                return Err(Error::Join(format!("trace {:?}: dump token spans differ from the corpus", r.trace_id)));
            }
        }
        if slots[i].replace(r).is_some() {
            return Err(Error::Join(format!("trace {:?} appears twice in the dump", traces[i].trace_id)));
        }
    }
    slots
        .into_iter()
        .zip(traces)
        .map(|(s, t)| s.ok_or_else(|| Error::Join(format!("trace {:?} has no dump record", t.trace_id))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(steps: usize) -> DumpHeader {
        DumpHeader {
            format_version: DUMP_FORMAT_VERSION,
            model_id: "m".into(),
            baseline: "pad".into(),
            steps,
            keyword_profile: "paper-main".into(),
            score_target: default_score_target(),
            attributed_region: default_region(),
            tokenizer: Some("byte".into()),
            extra: BTreeMap::new(),
        }
    }

    fn record(id: &str, igs: Vec<f64>) -> DumpRecord {
        DumpRecord {
            trace_id: id.into(),
            token_igs: igs,
            completeness_gap: None,
            query_tokens: 0,
            tokens: None,
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ndjson");
        let recs = vec![record("a", vec![0.1, -0.25]), record("b", vec![1.0 / 3.0, 2e-300, -0.0])];
        write_dump(&p, &header(50), &recs).unwrap();
        let (h, back) = read_dump(&p).unwrap();
        assert_eq!(h.steps, 50);
        assert_eq!(h, header(50));
        assert_eq!(back, recs);
        for (a, b) in recs.iter().zip(&back) {
            for (x, y) in a.token_igs.iter().zip(&b.token_igs) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert!(dump_warnings(&h, &back).is_empty());
    }

    #[test]
    fn version_mismatch_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ndjson");
        std::fs::write(
            &p,
            "{\"format_version\":99,\"model_id\":\"m\",\"baseline\":\"pad\",\"steps\":1,\"keyword_profile\":\"x\"}\n",
        )
        .unwrap();
        assert!(matches!(read_dump(&p), Err(Error::Incompatible(_))));
    }

    #[test]
    fn unknown_keys_surface_as_warnings() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ndjson");
        std::fs::write(
            &p,
            "{\"format_version\":1,\"model_id\":\"m\",\"baseline\":\"pad\",\"steps\":50,\"keyword_profile\":\"x\",\"device\":\"gpu\"}\n{\"trace_id\":\"a\",\"token_igs\":[1.5]}\n",
        )
        .unwrap();
        let (h, r) = read_dump(&p).unwrap();
        assert_eq!(dump_warnings(&h, &r), vec!["header: unknown key \"device\"".to_string()]);
    }

    #[test]
    fn join_rejects_unknown_trace() {
        use crate::segmenter::{default_keywords, KeywordProfile};
        use crate::trace::{ByteTokenizer, TraceRecord};
        let t = ReasoningTrace::build(
            TraceRecord {
                trace_id: "a".into(),
                query: "q".into(),
                answer: "1".into(),
                cot: "xy".into(),
                tokens: None,
                answer_tokens: None,
            },
            &default_keywords(KeywordProfile::PaperMain),
            &ByteTokenizer,
        )
        .unwrap();
        let ok = join_dump(std::slice::from_ref(&t), vec![record("a", vec![0.0, 1.0])]).unwrap();
        assert_eq!(ok.len(), 1);
        assert!(matches!(
            join_dump(std::slice::from_ref(&t), vec![record("zzz", vec![0.0, 1.0])]),
            Err(Error::Join(_))
        ));
        assert!(matches!(join_dump(std::slice::from_ref(&t), vec![record("a", vec![0.0])]), Err(Error::Join(_))));
        assert!(matches!(join_dump(std::slice::from_ref(&t), vec![]), Err(Error::Join(_))));
    }
}
