//! Segment-level analysis: perplexity and entropy, repetition by BLEU,
//! strength CDFs, decision-segment positions and the truncation judge.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Duration;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::grad_oracle::{trace_layout, CausalLm, SamplingConfig};
use crate::scoring::SegmentScore;
use crate::selection::SelectionResult;
use crate::trace::ReasoningTrace;
use crate::{Error, Result};

pub const REPETITION_THRESHOLD: f64 = 0.8;
pub const BLEU_MAX_NGRAM: usize = 4;
pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub seg_index: usize,
    pub mean_nll: f64,
    pub mean_entropy: f64,
    pub bleu_vs_preceding: f64,
    pub is_truncated: Option<bool>,
}

/// Mean token NLL and mean predictive entropy (nats) per segment, plus BLEU
/// against the preceding segments.
pub fn segment_stats(lm: &dyn CausalLm, trace: &ReasoningTrace) -> Result<Vec<SegmentStats>> {
    let layout = trace_layout(lm, trace)?;
    let lp = lm.log_probs(&layout.ids)?;
    Ok(trace
        .segments
        .iter()
        .map(|s| {
            let n = s.n_tokens() as f64;
            let (mut nll, mut ent) = (0.0, 0.0);
            for t in s.tokens() {
                let p = layout.cot.start + t;
                let row = lp.row(p - 1);
                nll -= row[layout.ids[p] as usize];
                ent -= row.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() * l }).sum::<f64>();
            }
            SegmentStats {
                seg_index: s.seg_index,
                mean_nll: nll / n,
                mean_entropy: ent / n,
                bleu_vs_preceding: bleu_vs_preceding(trace, s.seg_index),
                is_truncated: None,
            }
        })
        .collect())
}

fn ngram_counts<'a>(words: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut out = HashMap::new();
    for g in words.windows(n) {
        *out.entry(g).or_insert(0) += 1;
    }
    out
}

/// Sentence BLEU of `candidate` against `references` over whitespace words.
///
/// Uniform weights up to order `min(4, |candidate|)`; each n-gram count is
/// clipped by its largest count in any single reference; a zero match count
/// is replaced by `1e-9`; the brevity penalty uses the reference length
/// closest to the candidate (the shorter one on ties). No references or an
/// empty candidate give 0.
pub fn bleu(candidate: &str, references: &[&str]) -> f64 {
    let cand: Vec<&str> = candidate.split_whitespace().collect();
    let refs: Vec<Vec<&str>> = references.iter().map(|r| r.split_whitespace().collect()).collect();
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let order = BLEU_MAX_NGRAM.min(cand.len());
    let mut log_sum = 0.0;
    for n in 1..=order {
        let counts = ngram_counts(&cand, n);
        let mut max_ref: HashMap<&[&str], usize> = HashMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = counts.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let total = (cand.len() + 1 - n) as f64;
        let matched = if clipped == 0 { BLEU_EPSILON } else { clipped as f64 };
        log_sum += (matched / total).ln();
    }
    let c = cand.len() as i64;
    let r = refs.iter().map(|r| r.len() as i64).min_by_key(|&l| ((l - c).abs(), l)).unwrap_or(0);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    (bp * (log_sum / order as f64).exp()).clamp(0.0, 1.0)
}

/// BLEU of a segment against all earlier segments; 0 for the first.
pub fn bleu_vs_preceding(trace: &ReasoningTrace, seg_index: usize) -> f64 {
    let refs: Vec<&str> = (0..seg_index).map(|m| trace.segment_text(m)).collect();
    bleu(trace.segment_text(seg_index), &refs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    /// Share of a trace's segments, `b / B`.
    pub percentile: f64,
    /// Mean cumulative normalized strength of the top `⌈b·M/B⌉` segments.
    pub cumulative: f64,
}

/// Cumulative strength of the strongest segments, averaged over traces at
/// `bucket_count` evenly spaced segment shares.
pub fn strength_cdf(traces: &[Vec<f64>], bucket_count: usize) -> Result<Vec<CdfPoint>> {
    if bucket_count == 0 {
        return Err(Error::Config("bucket count must be at least 1".into()));
    }
    let traces: Vec<&Vec<f64>> = traces.iter().filter(|t| !t.is_empty()).collect();
    if traces.is_empty() {
        return Ok(Vec::new());
    }
    let cums: Vec<Vec<f64>> = traces
        .iter()
        .map(|t| {
            let mut v = (*t).clone();
            v.sort_by(|a, b| b.total_cmp(a));
            v.iter()
                .scan(0.0, |acc, &x| {
                    *acc += x;
                    Some(*acc)
                })
                .collect()
        })
        .collect();
    Ok((1..=bucket_count)
        .map(|b| {
            let mean = cums
                .iter()
                .map(|c| {
                    let m = c.len();
                    c[(b * m).div_ceil(bucket_count) - 1]
                })
                .sum::<f64>()
                / cums.len() as f64;
            CdfPoint { percentile: b as f64 / bucket_count as f64, cumulative: mean }
        })
        .collect())
}

/// Mean share of segments needed to accumulate `share` of a trace's strength.
pub fn segments_to_reach(traces: &[Vec<f64>], share: f64) -> f64 {
    let fracs: Vec<f64> = traces
        .iter()
        .filter(|t| !t.is_empty())
        .map(|t| {
            let mut v = t.clone();
            v.sort_by(|a, b| b.total_cmp(a));
            let mut acc = 0.0;
            let k = v.iter().position(|x| {
                acc += x;
                acc >= share - crate::selection::CUMULATIVE_SLACK
            });
            (k.map_or(v.len(), |k| k + 1)) as f64 / v.len() as f64
        })
        .collect();
    if fracs.is_empty() {
        0.0
    } else {
        fracs.iter().sum::<f64>() / fracs.len() as f64
    }
}

fn wrapper_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\\(boxed|text|mathrm|mathbf|textbf|fbox)").unwrap())
}

/// Case-folds and drops whitespace, `$`, braces and common LaTeX wrappers.
pub fn normalize_answer(text: &str) -> String {
    let stripped = wrapper_re().replace_all(text, "");
    stripped
        .chars()
        .filter(|c| !c.is_whitespace() && !matches!(c, '$' | '{' | '}'))
        .flat_map(char::to_lowercase)
        .collect()
}

/// First segment whose normalized text contains the normalized answer.
pub fn decision_segment(trace: &ReasoningTrace) -> Result<usize> {
    let needle = normalize_answer(&trace.answer);
    if needle.is_empty() {
        return Err(Error::Domain(format!("trace {} has an empty answer", trace.trace_id)));
    }
    (0..trace.num_segments())
        .find(|&m| normalize_answer(trace.segment_text(m)).contains(&needle))
        .ok_or_else(|| Error::NoDecision(trace.trace_id.clone()))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PositionalReport {
    pub traces: usize,
    pub excluded_traces: usize,
    pub important: usize,
    pub important_after: usize,
    pub unimportant: usize,
    pub unimportant_before: usize,
    /// Unimportant because they fell outside the strength prefix.
    pub low_strength: usize,
    pub low_strength_before: usize,
    /// Inside the prefix but rejected by the consistency filter.
    pub high_consistency: usize,
    pub high_consistency_after: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl PositionalReport {
    pub fn important_after_fraction(&self) -> f64 {
        ratio(self.important_after, self.important)
    }
    pub fn unimportant_before_fraction(&self) -> f64 {
        ratio(self.unimportant_before, self.unimportant)
    }
    pub fn low_strength_before_fraction(&self) -> f64 {
        ratio(self.low_strength_before, self.low_strength)
    }
    pub fn high_consistency_after_fraction(&self) -> f64 {
        ratio(self.high_consistency_after, self.high_consistency)
    }

    /// Reference fractions for comparison, in the order of the accessors above.
    pub const REFERENCE: [f64; 4] = [0.40, 0.57, 0.64, 0.72];
}

/// Positions of important and unimportant segments relative to each trace's
/// decision segment (strictly before or after; the decision segment itself
/// counts toward the totals only). Traces without a decision are excluded.
pub fn positional_stats(items: &[(&ReasoningTrace, &SelectionResult, &[SegmentScore])]) -> PositionalReport {
    let mut r = PositionalReport::default();
    for (trace, sel, scores) in items {
        let Ok(d) = decision_segment(trace) else {
            r.excluded_traces += 1;
            continue;
        };
        r.traces += 1;
        let prefix: BTreeSet<usize> = sel.ranking[..sel.k_star].iter().copied().collect();
        for m in 0..trace.num_segments() {
            let (before, after) = (m < d, m > d);
            if sel.important.contains(&m) {
                r.important += 1;
                r.important_after += after as usize;
                continue;
            }
            r.unimportant += 1;
            r.unimportant_before += before as usize;
            if prefix.contains(&m) && scores[m].consistency > sel.policy.beta {
                r.high_consistency += 1;
                r.high_consistency_after += after as usize;
            } else {
                r.low_strength += 1;
                r.low_strength_before += before as usize;
            }
        }
    }
    r
}

pub const JUDGE_PROMPT: &str = include_str!("../assets/judge_prompt_v1.txt");
pub const EARLY_STOP_PROMPT: &str = include_str!("../assets/early_stop_v1.txt");
pub const JUDGE_KEY_ENV: &str = "COTSEG_JUDGE_API_KEY";

pub fn judge_prompt(prev: &str, mid: &str, next: &str) -> String {
    JUDGE_PROMPT.replace("{SEGMENT 1}", prev).replace("{SEGMENT 2}", mid).replace("{SEGMENT 3}", next)
}

fn verdict_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\\boxed\{\s*([01])\s*\}").unwrap())
}

/// The last boxed 0/1 in a response, if any.
pub fn parse_verdict(text: &str) -> Option<bool> {
    verdict_re().captures_iter(text).last().map(|c| &c[1] == "1")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    pub repetition_penalty: f64,
}

pub trait JudgeTransport: Send + Sync {
    /// Returns the generated text or a transport error.
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    pub endpoint: String,
    pub model: String,
    pub round1: SamplingConfig,
    pub round2: SamplingConfig,
    pub retries: usize,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        let base = SamplingConfig { repetition_penalty: 1.1, top_p: 0.7, ..Default::default() };
        Self {
            endpoint: String::new(),
            model: "judge".into(),
            round1: SamplingConfig { temperature: 0.2, max_new_tokens: 2000, ..base },
            round2: SamplingConfig { temperature: 0.1, max_new_tokens: 1000, ..base },
            retries: 3,
            backoff_ms: 250,
            timeout_secs: 120,
            max_in_flight: 4,
        }
    }
}

impl JudgeConfig {
    fn request(&self, messages: Vec<ChatMessage>, s: &SamplingConfig) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages,
            temperature: s.temperature,
            top_p: s.top_p,
            max_tokens: s.max_new_tokens,
            repetition_penalty: s.repetition_penalty,
        }
    }
}

/// Posts requests to a chat-completions endpoint. A bearer token is read
/// from `COTSEG_JUDGE_API_KEY` when set.
pub struct HttpTransport {
    endpoint: String,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(cfg: &JudgeConfig) -> Result<Self> {
        if cfg.endpoint.is_empty() {
            return Err(Error::Config("judge endpoint is not set".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build()
            .new_agent();
        Ok(Self { endpoint: cfg.endpoint.clone(), agent, api_key: std::env::var(JUDGE_KEY_ENV).ok() })
    }
}

/// Pulls generated text out of the common response shapes.
pub fn response_text(body: &serde_json::Value) -> Option<String> {
    let choice = body.get("choices").and_then(|c| c.get(0));
    choice
        .and_then(|c| c.pointer("/message/content").or_else(|| c.get("text")))
        .or_else(|| body.get("text"))
        .or_else(|| body.get("output"))
        .and_then(|v| v.as_str())
        .map(str::to_string)
}

impl JudgeTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send_json(request).map_err(|e| Error::Transport(e.to_string()))?;
        let body: serde_json::Value = resp.body_mut().read_json().map_err(|e| Error::Transport(e.to_string()))?;
        response_text(&body).ok_or_else(|| Error::Transport("response carries no generated text".into()))
    }
}

fn call_with_retries(cfg: &JudgeConfig, transport: &dyn JudgeTransport, req: &ChatRequest) -> Result<String> {
    let mut attempt = 0;
    loop {
        match transport.complete(req) {
            Err(Error::Transport(_)) if attempt < cfg.retries => {
                std::thread::sleep(Duration::from_millis(cfg.backoff_ms << attempt));
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// Two-round truncation verdict for the middle of three segments. Round 2
/// continues the round-1 output with the early-stopping prompt.
pub fn judge_truncation(
    cfg: &JudgeConfig,
    transport: &dyn JudgeTransport,
    prev: &str,
    mid: &str,
    next: &str,
) -> Result<bool> {
    let user = ChatMessage { role: "user".into(), content: judge_prompt(prev, mid, next) };
    let first = call_with_retries(cfg, transport, &cfg.request(vec![user.clone()], &cfg.round1))?;
    if let Some(v) = parse_verdict(&first) {
        return Ok(v);
    }
    let cont = ChatMessage { role: "assistant".into(), content: format!("{first}{EARLY_STOP_PROMPT}") };
    let second = call_with_retries(cfg, transport, &cfg.request(vec![user, cont], &cfg.round2))?;
    parse_verdict(&second).ok_or(Error::JudgeUndecided)
}

/// Judges many triples with at most `max_in_flight` concurrent calls;
/// results keep input order.
pub fn judge_many(
    cfg: &JudgeConfig,
    transport: &dyn JudgeTransport,
    triples: &[(String, String, String)],
) -> Result<Vec<Result<bool>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.max_in_flight.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(|| triples.par_iter().map(|(a, b, c)| judge_truncation(cfg, transport, a, b, c)).collect()))
}

/// Middle-segment triples for every interior segment of a trace.
pub fn interior_triples(trace: &ReasoningTrace) -> Vec<(usize, (String, String, String))> {
    (1..trace.num_segments().saturating_sub(1))
        .map(|m| {
            let t = |i| trace.segment_text(i).to_string();
            (m, (t(m - 1), t(m), t(m + 1)))
        })
        .collect()
}

pub fn write_cdf_csv(path: &Path, cdf: &[CdfPoint]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "bucket,percentile,cumulative")?;
    for (b, p) in cdf.iter().enumerate() {
        writeln!(out, "{},{:e},{:e}", b + 1, p.percentile, p.cumulative)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad_oracle::hooks::PeakedLm;
    use crate::grad_oracle::{ModelDims, ReferenceModel, BYTE_OFFSET, BYTE_VOCAB};
    use crate::scoring::AggregationMode;
    use crate::segmenter::{default_keywords, KeywordProfile};
    use crate::selection::SelectionPolicy;
    use crate::trace::{ByteTokenizer, TraceRecord};
    use std::sync::Mutex;

    fn trace(cot: &str, answer: &str) -> ReasoningTrace {
        ReasoningTrace::build(
            TraceRecord {
                trace_id: "a".into(),
                query: "q".into(),
                answer: answer.into(),
                cot: cot.into(),
                tokens: None,
                answer_tokens: None,
            },
            &default_keywords(KeywordProfile::PaperMain),
            &ByteTokenizer,
        )
        .unwrap()
    }

    #[test]
    fn zeroed_model_stats_are_log_vocab() {
        let lm = ReferenceModel::zeroed(ModelDims {
            vocab_size: BYTE_VOCAB,
            embed_dim: 4,
            context_len: 128,
            ffn_dim: 4,
            rotary: false,
        })
        .unwrap();
        let ln_v = (BYTE_VOCAB as f64).ln();
        for s in segment_stats(&lm, &trace("ab c\n\nWait d", "1")).unwrap() {
            assert!((s.mean_nll - ln_v).abs() < 1e-12);
            assert!((s.mean_entropy - ln_v).abs() < 1e-12);
        }
    }

    #[test]
    fn one_token_segment_and_peaked_model() {
        let lm = PeakedLm::new(BYTE_OFFSET + b'x' as u32, 60.0);
        let t = trace("x", "1");
        let s = &segment_stats(&lm, &t).unwrap()[0];
        assert!(s.mean_entropy < 1e-20);
        assert!(s.mean_nll < 1e-20);
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        assert_eq!(bleu("a b c d e", &["x y", "a b c d e"]), 1.0);
        assert!(bleu("p q r s", &["a b c d"]) <= 0.01);
        assert_eq!(bleu("a", &[]), 0.0);
        assert_eq!(bleu("a b", &["a b"]), 1.0);
        let t = trace("one two three four\n\nWait five six\n\nWait five six", "1");
        assert_eq!(bleu_vs_preceding(&t, 0), 0.0);
        assert_eq!(bleu_vs_preceding(&t, 2), 1.0);
        assert_eq!(REPETITION_THRESHOLD, 0.8);
    }

    /// Independent sentence-BLEU with the same pinned choices, written with
    /// plain vectors instead of hash maps.
    fn naive_bleu(c: &str, refs: &[&str]) -> f64 {
        let c: Vec<&str> = c.split_whitespace().collect();
        let rs: Vec<Vec<&str>> = refs.iter().map(|r| r.split_whitespace().collect()).collect();
        let order = c.len().min(4);
        let mut lp = 0.0;
        for n in 1..=order {
            let grams: Vec<&[&str]> = c.windows(n).collect();
            let mut seen: Vec<&[&str]> = Vec::new();
            let mut clipped = 0;
            for g in &grams {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let cc = grams.iter().filter(|x| *x == g).count();
                let rc = rs.iter().map(|r| r.windows(n).filter(|x| x == g).count()).max().unwrap();
                clipped += cc.min(rc);
            }
            let p = if clipped == 0 { 1e-9 } else { clipped as f64 } / grams.len() as f64;
            lp += p.ln() / order as f64;
        }
        let mut best = rs[0].len();
        for r in &rs {
            let d = (r.len() as i64 - c.len() as i64).abs();
            let bd = (best as i64 - c.len() as i64).abs();
            if d < bd || (d == bd && r.len() < best) {
                best = r.len();
            }
        }
        let bp = if c.len() > best { 1.0 } else { (1.0 - best as f64 / c.len() as f64).exp() };
        bp * lp.exp()
    }

    #[test]
    fn bleu_matches_naive_oracle() {
        let cases: [(&str, &[&str]); 4] = [
            ("the cat sat on the mat", &["the cat is on the mat", "a cat sat"]),
            ("so 3 + 4 = 7 so 7", &["so 3 + 4 = 7", "check 7"]),
            ("x y x y x", &["x y", "y x y"]),
            ("a b c", &["a b c d e f", "a"]),
        ];
        for (c, r) in cases {
            assert!((bleu(c, r) - naive_bleu(c, r)).abs() < 1e-12, "{c}");
        }
        // permutation of references does not matter
        assert_eq!(bleu("a b c d", &["a b", "c d a"]), bleu("a b c d", &["c d a", "a b"]));
    }

    #[test]
    fn cdf_cases() {
        let c = strength_cdf(&[vec![0.2, 0.5, 0.3]], 3).unwrap();
        let v: Vec<f64> = c.iter().map(|p| p.cumulative).collect();
        assert!((v[0] - 0.5).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12 && (v[2] - 1.0).abs() < 1e-12);
        let uniform = vec![vec![0.1; 10]; 5];
        for (b, p) in strength_cdf(&uniform, 10).unwrap().iter().enumerate() {
            assert!((p.cumulative - (b + 1) as f64 / 10.0).abs() < 1e-12);
        }
        assert!(strength_cdf(&uniform, 0).is_err());
        assert!((segments_to_reach(&[vec![0.5, 0.3, 0.2]], 0.8) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn normalization_and_decision() {
        assert_eq!(normalize_answer(" $\\boxed{ 42 }$ "), "42");
        assert_eq!(normalize_answer("\\text{Yes}"), "yes");
        let t = trace("start\n\nWait so we get 42\n\nWait check", "42");
        assert_eq!(decision_segment(&t).unwrap(), 1);
        let boxed = trace("x\n\nWait \\boxed{42}", "42");
        assert_eq!(decision_segment(&boxed).unwrap(), 1);
        assert!(matches!(decision_segment(&trace("nothing", "42")), Err(Error::NoDecision(_))));
    }

    fn sel(m: usize, important: &[usize], k_star: usize) -> SelectionResult {
        SelectionResult {
            ranking: (0..m).collect(),
            k_star,
            important: important.iter().copied().collect(),
            policy: SelectionPolicy::default(),
        }
    }

    fn scores(m: usize) -> Vec<SegmentScore> {
        (0..m)
            .map(|i| SegmentScore {
                seg_index: i,
                strength: 1.0,
                normalized_strength: 1.0 / m as f64,
                consistency: 0.9,
                aggregation_mode: AggregationMode::default(),
            })
            .collect()
    }

    #[test]
    fn positional_cases() {
        let t = trace("a\n\nWait 42\n\nWait c\n\nWait d", "42");
        let s = sel(4, &[2], 1);
        let sc = scores(4);
        let r = positional_stats(&[(&t, &s, &sc)]);
        assert_eq!(r.important_after_fraction(), 1.0);
        assert_eq!((r.unimportant, r.unimportant_before), (3, 1));
        // segment 0 lies in the prefix with consistency 0.9 > 0.8
        assert_eq!((r.high_consistency, r.low_strength), (1, 2));

        let early = sel(4, &[0], 1);
        assert_eq!(positional_stats(&[(&t, &early, &sc)]).important_after_fraction(), 0.0);
        let none = trace("a\n\nWait b", "42");
        let r = positional_stats(&[(&none, &sel(2, &[0], 1), &scores(2)[..])]);
        assert_eq!((r.traces, r.excluded_traces), (0, 1));
    }

    struct Scripted {
        replies: Mutex<Vec<Result<String>>>,
        seen: Mutex<Vec<ChatRequest>>,
    }

    impl Scripted {
        fn new(mut replies: Vec<Result<String>>) -> Self {
            replies.reverse();
            Self { replies: Mutex::new(replies), seen: Mutex::new(Vec::new()) }
        }
    }

    impl JudgeTransport for Scripted {
        fn complete(&self, request: &ChatRequest) -> Result<String> {
            self.seen.lock().unwrap().push(request.clone());
            self.replies.lock().unwrap().pop().unwrap_or_else(|| Err(Error::Transport("exhausted".into())))
        }
    }

    fn fast() -> JudgeConfig {
        JudgeConfig { backoff_ms: 1, ..Default::default() }
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_verdict("thinking... \\boxed{1} done"), Some(true));
        assert_eq!(parse_verdict("$$\n\\boxed{ 0 }\n$$"), Some(false));
        assert_eq!(parse_verdict("\\boxed{1} no wait \\boxed{0}"), Some(false));
        assert_eq!(parse_verdict("\\boxed{1 or 0}"), None);
    }

    #[test]
    fn round_one_decides() {
        let t = Scripted::new(vec![Ok("ok \\boxed{1}".into())]);
        assert!(judge_truncation(&fast(), &t, "a", "b", "c").unwrap());
        let seen = t.seen.lock().unwrap();
        assert_eq!(seen.len(), 1);
        assert_eq!(
            (seen[0].temperature, seen[0].top_p, seen[0].max_tokens, seen[0].repetition_penalty),
            (0.2, 0.7, 2000, 1.1)
        );
        assert!(seen[0].messages[0].content.contains("Segment 2:\n\n> b"));
    }

    #[test]
    fn round_two_on_no_verdict() {
        let t = Scripted::new(vec![Ok("still thinking".into()), Ok("\\boxed{0}".into())]);
        assert!(!judge_truncation(&fast(), &t, "a", "b", "c").unwrap());
        let seen = t.seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert_eq!((seen[1].temperature, seen[1].top_p, seen[1].max_tokens), (0.1, 0.7, 1000));
        let cont = &seen[1].messages[1];
        assert_eq!(cont.role, "assistant");
        assert!(
            cont.content.starts_with("still thinking") && cont.content.contains("I have to immediately stop reasoning")
        );
    }

    #[test]
    fn undecided_and_transport_errors() {
        let t = Scripted::new(vec![Ok("hmm".into()), Ok("hmm".into())]);
        assert!(matches!(judge_truncation(&fast(), &t, "a", "b", "c"), Err(Error::JudgeUndecided)));
        let flaky = Scripted::new(vec![
            Err(Error::Transport("x".into())),
            Err(Error::Transport("y".into())),
            Ok("\\boxed{1}".into()),
        ]);
        assert!(judge_truncation(&fast(), &flaky, "a", "b", "c").unwrap());
        let dead = Scripted::new(vec![]);
        assert!(matches!(judge_truncation(&fast(), &dead, "a", "b", "c"), Err(Error::Transport(_))));
        assert_eq!(dead.seen.lock().unwrap().len(), 4);
    }

    #[test]
    fn many_keeps_order() {
        struct Echo;
        impl JudgeTransport for Echo {
            fn complete(&self, r: &ChatRequest) -> Result<String> {
                let mid = r.messages[0].content.contains("> one");
                Ok(format!("\\boxed{{{}}}", mid as u8))
            }
        }
        let triples: Vec<_> =
            ["one", "two", "one"].iter().map(|m| ("p".to_string(), m.to_string(), "n".to_string())).collect();
        let out: Vec<bool> = judge_many(&fast(), &Echo, &triples).unwrap().into_iter().map(|r| r.unwrap()).collect();
        assert_eq!(out, vec![true, false, true]);
    }

    #[test]
    fn prompts_are_complete() {
        assert!(JUDGE_PROMPT.contains("{SEGMENT 1}") && JUDGE_PROMPT.contains("{SEGMENT 3}"));
        assert!(EARLY_STOP_PROMPT.contains("</think>"));
        assert!(!JUDGE_PROMPT.ends_with("\n\n"));
    }

    #[test]
    fn response_shapes() {
        let chat = serde_json::json!({"choices": [{"message": {"content": "hi"}}]});
        let legacy = serde_json::json!({"choices": [{"text": "yo"}]});
        assert_eq!(response_text(&chat).as_deref(), Some("hi"));
        assert_eq!(response_text(&legacy).as_deref(), Some("yo"));
        assert_eq!(response_text(&serde_json::json!({})), None);
    }
}
