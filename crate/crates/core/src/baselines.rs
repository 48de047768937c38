//! Competing importance measures, ablation selectors and trace pruning.
//!
//! Segment-level methods return raw important sets; forced boundary
//! segments are added by the caller, as with the attribution method.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{decision_segment, normalize_answer};
use crate::grad_oracle::{
    decode_bytes, derive_seed, sample_answers, trace_layout, CausalLm, SamplingConfig, TokenId, BOS, EOS,
};
use crate::scoring::SegmentScore;
use crate::segmenter::KeywordSet;
use crate::selection::{cutoff, rank_segments};
use crate::trace::{ByteTokenizer, ReasoningTrace, TokenSpan, TraceRecord};
use crate::{Error, Result};

pub const DEFAULT_K_SAMPLES: usize = 32;
pub const DEFAULT_TOKEN_RATIO: f64 = 0.45;
pub const DEFAULT_RANDOM_FRACTION: f64 = 0.33;
pub const DEFAULT_PRUNE_RATIO: f64 = 0.30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    FirstCorrect,
    ConfidenceGain,
    PplRemoval,
    Entropy,
    RandomSegments,
    TopAbsIgTokens,
    TopSignedIgTokens,
    HighStrengthOnly,
}

impl BaselineMethod {
    pub const ALL: [Self; 8] = [
        Self::FirstCorrect,
        Self::ConfidenceGain,
        Self::PplRemoval,
        Self::Entropy,
        Self::RandomSegments,
        Self::TopAbsIgTokens,
        Self::TopSignedIgTokens,
        Self::HighStrengthOnly,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Self::FirstCorrect => "first-correct",
            Self::ConfidenceGain => "confidence-gain",
            Self::PplRemoval => "ppl-removal",
            Self::Entropy => "entropy",
            Self::RandomSegments => "random-segments",
            Self::TopAbsIgTokens => "top-abs-ig-tokens",
            Self::TopSignedIgTokens => "top-signed-ig-tokens",
            Self::HighStrengthOnly => "high-strength-only",
        }
    }

    pub fn is_token_level(self) -> bool {
        matches!(self, Self::TopAbsIgTokens | Self::TopSignedIgTokens)
    }
}

impl std::str::FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselinePolicy {
    /// Token share targeted by the ratio-matched methods (perplexity, entropy).
    pub token_ratio_target: f64,
    /// Token share kept by the token-level ablations.
    pub ablation_token_ratio: f64,
    pub random_fraction: f64,
    pub k_samples: usize,
    pub epsilon_gain: f64,
    pub seed: u64,
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for BaselinePolicy {
    fn default() -> Self {
        Self {
            token_ratio_target: DEFAULT_TOKEN_RATIO,
            ablation_token_ratio: DEFAULT_TOKEN_RATIO,
            random_fraction: DEFAULT_RANDOM_FRACTION,
            k_samples: DEFAULT_K_SAMPLES,
            epsilon_gain: 0.0,
            seed: 0,
            temperature: 0.6,
            top_p: 0.95,
        }
    }
}

impl BaselinePolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("token_ratio_target", self.token_ratio_target),
            ("ablation_token_ratio", self.ablation_token_ratio),
            ("random_fraction", self.random_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} {v} outside (0, 1]")));
            }
        }
        if self.k_samples == 0 {
            return Err(Error::Config("k_samples must be at least 1".into()));
        }
        if !self.epsilon_gain.is_finite() {
            return Err(Error::Config("epsilon_gain must be finite".into()));
        }
        Ok(())
    }
}

/// Stable per-trace stream so a trace's draws do not depend on corpus order.
fn trace_stream(trace_id: &str) -> u64 {
    trace_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// The decision segment and everything before it.
pub fn first_correct_select(trace: &ReasoningTrace) -> Result<BTreeSet<usize>> {
    Ok((0..=decision_segment(trace)?).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceStep {
    /// Number of revealed segments.
    pub revealed: usize,
    pub correct: usize,
    pub confidence: f64,
    /// Change from one fewer revealed segment; 0 when nothing is revealed.
    pub gain: f64,
}

fn sample_is_correct(sample: &[TokenId], answer: &str) -> bool {
    let end = sample.iter().position(|&t| t == EOS).unwrap_or(sample.len());
    normalize_answer(&decode_bytes(&sample[..end])) == normalize_answer(answer)
}

/// Reveals segments one at a time and samples `K` answers after each prefix.
/// Segment `m` is important when revealing it raises the correct fraction by
/// more than `epsilon_gain`. Each `(prefix, sample)` pair has its own seed.
pub fn confidence_gain_select(
    lm: &dyn CausalLm,
    trace: &ReasoningTrace,
    policy: &BaselinePolicy,
) -> Result<(BTreeSet<usize>, Vec<ConfidenceStep>)> {
    policy.validate()?;
    let layout = trace_layout(lm, trace)?;
    let forcing = &layout.ids[layout.forcing.clone()];
    let cfg = SamplingConfig {
        temperature: policy.temperature,
        top_p: policy.top_p,
        max_new_tokens: trace.answer_tokens.len().max(1),
        seed: 0,
        repetition_penalty: 1.0,
        greedy: false,
    };
    let stream = trace_stream(&trace.trace_id);
    let m_total = trace.num_segments();
    let prefix_ends: Vec<usize> = std::iter::once(0).chain(trace.segments.iter().map(|s| s.last + 1)).collect();
    let pairs: Vec<(usize, usize)> = (0..=m_total).flat_map(|m| (0..policy.k_samples).map(move |k| (m, k))).collect();
    let hits: Vec<bool> = pairs
        .par_iter()
        .map(|&(m, k)| {
            let mut ctx = layout.ids[..layout.cot.start + prefix_ends[m]].to_vec();
            ctx.extend_from_slice(forcing);
            let pair_cfg = SamplingConfig { seed: derive_seed(policy.seed, &[stream, m as u64, k as u64]), ..cfg };
            let s = sample_answers(lm, &ctx, &pair_cfg, 1)?;
            Ok(sample_is_correct(&s[0], &trace.answer))
        })
        .collect::<Result<_>>()?;

    let k = policy.k_samples;
    let counts: Vec<usize> = hits.chunks(k).map(|c| c.iter().filter(|h| **h).count()).collect();
    Ok(confidence_steps(&counts, k, policy.epsilon_gain))
}

/// Turns correct counts after revealing 0..=M segments into per-step
/// confidences and the set of segments whose gain exceeds `epsilon_gain`.
pub fn confidence_steps(correct: &[usize], k: usize, epsilon_gain: f64) -> (BTreeSet<usize>, Vec<ConfidenceStep>) {
    let mut steps: Vec<ConfidenceStep> = Vec::with_capacity(correct.len());
    let mut important = BTreeSet::new();
    for (m, &c) in correct.iter().enumerate() {
        let confidence = c as f64 / k as f64;
        let gain = if m == 0 { 0.0 } else { confidence - steps[m - 1].confidence };
        if m > 0 && gain > epsilon_gain {
            important.insert(m - 1);
        }
        steps.push(ConfidenceStep { revealed: m, correct: c, confidence, gain });
    }
    (important, steps)
}

/// Segments ranked by `value` descending (ties by index); the shortest
/// prefix holding at least `ratio · T` cot tokens.
pub fn ratio_prefix(trace: &ReasoningTrace, value: &[f64], ratio: f64) -> BTreeSet<usize> {
    let mut order: Vec<usize> = (0..value.len()).collect();
    order.sort_by(|&a, &b| value[b].total_cmp(&value[a]));
    let need = ratio * trace.num_tokens() as f64;
    let mut have = 0usize;
    let mut out = BTreeSet::new();
    for m in order {
        if have as f64 >= need && !out.is_empty() {
            break;
        }
        out.insert(m);
        have += trace.segments[m].n_tokens();
    }
    out
}

fn mean_cot_nll(lm: &dyn CausalLm, prefix: &[TokenId], cot: &[TokenId]) -> Result<f64> {
    if cot.is_empty() {
        return Ok(0.0);
    }
    let mut ids = prefix.to_vec();
    ids.extend_from_slice(cot);
    if ids.len() > lm.context_len() {
        return Err(Error::Capacity { needed: ids.len(), capacity: lm.context_len() });
    }
    let lp = lm.log_probs(&ids)?;
    let total: f64 = (prefix.len()..ids.len()).map(|p| -lp.get(p - 1, ids[p] as usize)).sum();
    Ok(total / cot.len() as f64)
}

/// Mean cot NLL with each segment removed, minus the full-cot mean NLL.
pub fn removal_nll_deltas(lm: &dyn CausalLm, trace: &ReasoningTrace) -> Result<Vec<f64>> {
    let layout = trace_layout(lm, trace)?;
    let prefix = &layout.ids[..layout.cot.start];
    let cot = &layout.ids[layout.cot.clone()];
    debug_assert_eq!(prefix[0], BOS);
    let full = mean_cot_nll(lm, prefix, cot)?;
    trace
        .segments
        .par_iter()
        .map(|s| {
            let kept: Vec<TokenId> = cot[..s.first].iter().chain(&cot[s.last + 1..]).copied().collect();
            Ok(mean_cot_nll(lm, prefix, &kept)? - full)
        })
        .collect()
}

pub fn ppl_removal_select(
    lm: &dyn CausalLm,
    trace: &ReasoningTrace,
    policy: &BaselinePolicy,
) -> Result<BTreeSet<usize>> {
    policy.validate()?;
    Ok(ratio_prefix(trace, &removal_nll_deltas(lm, trace)?, policy.token_ratio_target))
}

/// Mean entropy (nats) of the predictive distributions for each segment's tokens.
pub fn segment_entropies(lm: &dyn CausalLm, trace: &ReasoningTrace) -> Result<Vec<f64>> {
    let layout = trace_layout(lm, trace)?;
    let lp = lm.log_probs(&layout.ids)?;
    let ent = |p: usize| -> f64 { lp.row(p - 1).iter().map(|&l| -l.exp() * l).sum() };
    Ok(trace
        .segments
        .iter()
        .map(|s| s.tokens().map(|n| ent(layout.cot.start + n)).sum::<f64>() / s.n_tokens() as f64)
        .collect())
}

pub fn entropy_select(lm: &dyn CausalLm, trace: &ReasoningTrace, policy: &BaselinePolicy) -> Result<BTreeSet<usize>> {
    policy.validate()?;
    Ok(ratio_prefix(trace, &segment_entropies(lm, trace)?, policy.token_ratio_target))
}

/// `⌈fraction · M⌉` segments drawn uniformly without replacement.
pub fn random_segments_select(trace: &ReasoningTrace, policy: &BaselinePolicy) -> BTreeSet<usize> {
    let m = trace.num_segments();
    let n = ((policy.random_fraction * m as f64).ceil() as usize).clamp(1, m);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(policy.seed, &[trace_stream(&trace.trace_id)]));
    sample(&mut rng, m, n).into_iter().collect()
}

/// Flags the `⌈ratio · T⌉` cot tokens with the largest `|IG|` (or signed IG).
pub fn top_token_flags(cot_igs: &[f64], ratio: f64, signed: bool) -> Vec<bool> {
    let key = |v: f64| if signed { v } else { v.abs() };
    let n = ((ratio * cot_igs.len() as f64).ceil() as usize).min(cot_igs.len());
    let mut order: Vec<usize> = (0..cot_igs.len()).collect();
    order.sort_by(|&a, &b| key(cot_igs[b]).total_cmp(&key(cot_igs[a])));
    let mut flags = vec![false; cot_igs.len()];
    for &i in &order[..n] {
        flags[i] = true;
    }
    flags
}

/// The strength prefix without the consistency filter.
pub fn high_strength_select(scores: &[SegmentScore], tau: f64) -> BTreeSet<usize> {
    let ranking = rank_segments(scores);
    let k = cutoff(scores, &ranking, tau);
    ranking[..k].iter().copied().collect()
}

/// Output of a baseline: a segment set or, for token-level ablations, a
/// flag per cot token.
#[derive(Clone, Debug, PartialEq)]
pub enum BaselineSelection {
    Segments(BTreeSet<usize>),
    Tokens(Vec<bool>),
}

pub struct BaselineInputs<'a> {
    pub lm: Option<&'a dyn CausalLm>,
    pub scores: Option<&'a [SegmentScore]>,
    pub cot_igs: Option<&'a [f64]>,
    pub tau: f64,
}

pub fn run_baseline(
    method: BaselineMethod,
    trace: &ReasoningTrace,
    inputs: &BaselineInputs<'_>,
    policy: &BaselinePolicy,
) -> Result<BaselineSelection> {
    policy.validate()?;
    let need_lm = || inputs.lm.ok_or_else(|| Error::Config(format!("{} needs a language model", method.id())));
    let need_igs = || inputs.cot_igs.ok_or_else(|| Error::Config(format!("{} needs token attributions", method.id())));
    Ok(match method {
        BaselineMethod::FirstCorrect => BaselineSelection::Segments(first_correct_select(trace)?),
        BaselineMethod::ConfidenceGain => {
            BaselineSelection::Segments(confidence_gain_select(need_lm()?, trace, policy)?.0)
        }
        BaselineMethod::PplRemoval => BaselineSelection::Segments(ppl_removal_select(need_lm()?, trace, policy)?),
        BaselineMethod::Entropy => BaselineSelection::Segments(entropy_select(need_lm()?, trace, policy)?),
        BaselineMethod::RandomSegments => BaselineSelection::Segments(random_segments_select(trace, policy)),
        BaselineMethod::TopAbsIgTokens => {
            BaselineSelection::Tokens(top_token_flags(need_igs()?, policy.ablation_token_ratio, false))
        }
        BaselineMethod::TopSignedIgTokens => {
            BaselineSelection::Tokens(top_token_flags(need_igs()?, policy.ablation_token_ratio, true))
        }
        BaselineMethod::HighStrengthOnly => {
            let scores =
                inputs.scores.ok_or_else(|| Error::Config("high-strength-only needs segment scores".into()))?;
            BaselineSelection::Segments(high_strength_select(scores, inputs.tau))
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneOutcome {
    pub trace: ReasoningTrace,
    pub dropped: BTreeSet<usize>,
    pub dropped_fraction: f64,
    /// The target could not be met by dropping unimportant segments.
    pub shortfall: bool,
}

/// Drops unimportant, non-boundary segments, weakest first, until at least
/// `target` of the cot tokens are gone; survivors keep their order.
pub fn prune_trace(
    trace: &ReasoningTrace,
    important: &BTreeSet<usize>,
    scores: &[SegmentScore],
    target: f64,
    keywords: &KeywordSet,
) -> Result<PruneOutcome> {
    if scores.len() != trace.num_segments() {
        return Err(Error::Join(format!("{} scores for {} segments", scores.len(), trace.num_segments())));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Config(format!("prune target {target} outside [0, 1]")));
    }
    let mut candidates: Vec<usize> = trace
        .segments
        .iter()
        .filter(|s| !s.is_first && !s.is_last && !important.contains(&s.seg_index))
        .map(|s| s.seg_index)
        .collect();
    candidates.sort_by(|&a, &b| scores[a].normalized_strength.total_cmp(&scores[b].normalized_strength));

    let total = trace.num_tokens() as f64;
    let mut dropped = BTreeSet::new();
    let mut gone = 0usize;
    for m in candidates {
        if gone as f64 >= target * total {
            break;
        }
        dropped.insert(m);
        gone += trace.segments[m].n_tokens();
    }
    let dropped_fraction = gone as f64 / total;
    let shortfall = dropped_fraction < target;

    let mut cot = String::new();
    let mut tokens = Vec::new();
    for s in trace.segments.iter().filter(|s| !dropped.contains(&s.seg_index)) {
        let shift = cot.len() as isize - s.start as isize;
        for t in &trace.tokens[s.tokens()] {
            tokens.push(TokenSpan {
                text: t.text.clone(),
                start: (t.start as isize + shift) as usize,
                end: (t.end as isize + shift) as usize,
            });
        }
        cot.push_str(&trace.cot[s.start..s.end]);
    }
    let off = trace.cot.len();
    let answer_tokens = trace
        .answer_tokens
        .iter()
        .map(|t| TokenSpan { text: t.text.clone(), start: t.start - off, end: t.end - off })
        .collect();
    let record = TraceRecord {
        trace_id: trace.trace_id.clone(),
        query: trace.query.clone(),
        answer: trace.answer.clone(),
        cot,
        tokens: Some(tokens),
        answer_tokens: Some(answer_tokens),
    };
    let pruned = ReasoningTrace::build(record, keywords, &ByteTokenizer)?;
    Ok(PruneOutcome { trace: pruned, dropped, dropped_fraction, shortfall })
}
