//! Toy arithmetic traces with redundancy injected at known segments, and
//! brief training of the reference model on clean traces.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grad_oracle::{derive_seed, trace_layout, AdamConfig, ModelDims, ReferenceModel, TokenId, Trainer};
use crate::segmenter::KeywordSet;
use crate::trace::{ByteTokenizer, ReasoningTrace, TraceRecord};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentKind {
    Setup,
    Step,
    Conclusion,
    Repeat,
    Truncation,
    Filler,
}

impl SegmentKind {
    pub fn is_injected(self) -> bool {
        matches!(self, Self::Repeat | Self::Truncation | Self::Filler)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_traces: usize,
    pub seed: u64,
    pub min_addends: usize,
    pub max_addends: usize,
    /// Chance that a trace receives each kind of injection.
    pub repeat_rate: f64,
    pub truncation_rate: f64,
    pub filler_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_traces: 200,
            seed: 7,
            min_addends: 2,
            max_addends: 4,
            repeat_rate: 0.7,
            truncation_rate: 0.5,
            filler_rate: 0.5,
        }
    }
}

impl SynthConfig {
    /// No injections; addend counts up to `max_addends` so that clean traces
    /// span the lengths of injected ones.
    pub fn clean(n_traces: usize, seed: u64, max_addends: usize) -> Self {
        Self {
            n_traces,
            seed,
            max_addends,
            repeat_rate: 0.0,
            truncation_rate: 0.0,
            filler_rate: 0.0,
            ..Self::default()
        }
    }
}

/// A generated trace with the kind of every segment, in segment order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTrace {
    pub record: TraceRecord,
    pub kinds: Vec<SegmentKind>,
}

const STEP_OPENERS: [&str; 3] = ["\n\nWait, ", "\n\nAlternatively, ", "\n\nAnother step: "];

const FILLERS: [&str; 3] = [
    "\n\nHowever, addition does not depend on order.",
    "\n\nHowever, place value means tens and ones add apart.",
    "\n\nHowever, all numbers here are whole numbers.",
];

fn join_addends(xs: &[u32]) -> String {
    match xs {
        [] => String::new(),
        [x] => x.to_string(),
        [init @ .., last] => format!("{} and {last}", init.iter().map(u32::to_string).collect::<Vec<_>>().join(", ")),
    }
}

fn one_trace(rng: &mut ChaCha8Rng, idx: usize, cfg: &SynthConfig) -> SynthTrace {
    let n = rng.random_range(cfg.min_addends.max(2)..=cfg.max_addends.max(cfg.min_addends.max(2)));
    // two-digit addends and a two-digit total
    let hi = (99 / n as u32).max(10);
    let xs: Vec<u32> = (0..n).map(|_| rng.random_range(10..=hi)).collect();
    let total: u32 = xs.iter().sum();
    let mut parts: Vec<(String, SegmentKind)> = vec![(format!("We add {}.", join_addends(&xs)), SegmentKind::Setup)];
    let mut partial = xs[0];
    for (i, &x) in xs[1..].iter().enumerate() {
        let next = partial + x;
        parts.push((format!("{}{partial} + {x} = {next}.", STEP_OPENERS[i % STEP_OPENERS.len()]), SegmentKind::Step));
        partial = next;
    }
    if rng.random_bool(cfg.repeat_rate) {
        let src = rng.random_range(1..parts.len());
        let at = rng.random_range(src + 1..=parts.len());
        let text = parts[src].0.clone();
        parts.insert(at, (text, SegmentKind::Repeat));
    }
    if rng.random_bool(cfg.truncation_rate) {
        let at = rng.random_range(1..=parts.len());
        parts.insert(at, (format!("\n\nWait, let me recheck {} +", xs[0]), SegmentKind::Truncation));
    }
    if rng.random_bool(cfg.filler_rate) {
        let at = rng.random_range(1..=parts.len());
        parts.insert(at, (FILLERS.choose(rng).unwrap().to_string(), SegmentKind::Filler));
    }
    parts.push((format!("\n\nBut wait, so the total is {total}."), SegmentKind::Conclusion));
    let cot: String = parts.iter().map(|(p, _)| p.as_str()).collect();
    let query = format!("What is {}?", xs.iter().map(u32::to_string).collect::<Vec<_>>().join(" + "));
    SynthTrace {
        record: TraceRecord {
            trace_id: format!("synth-{idx:04}"),
            query,
            answer: total.to_string(),
            cot,
            tokens: None,
            answer_tokens: None,
        },
        kinds: parts.into_iter().map(|(_, k)| k).collect(),
    }
}

pub fn generate(cfg: &SynthConfig) -> Vec<SynthTrace> {
    (0..cfg.n_traces)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[i as u64]));
            one_trace(&mut rng, i, cfg)
        })
        .collect()
}

/// Builds traces and checks that segmentation reproduces the generated parts.
pub fn build_traces(synth: &[SynthTrace], keywords: &KeywordSet) -> Result<Vec<ReasoningTrace>> {
    synth
        .iter()
        .map(|s| {
            let t = ReasoningTrace::build(s.record.clone(), keywords, &ByteTokenizer)?;
            if t.num_segments() != s.kinds.len() {
                return Err(crate::Error::Domain(format!(
                    "{}: segmented into {} parts, generated {}",
                    t.trace_id,
                    t.num_segments(),
                    s.kinds.len()
                )));
            }
            Ok(t)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dims: ModelDims,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Answer positions appear this many times in each example's loss.
    pub answer_weight: usize,
    /// Include next-token loss on the cot itself.
    pub supervise_cot: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dims: ModelDims { embed_dim: 16, context_len: 320, ffn_dim: 32, rotary: true, ..ModelDims::default() },
            seed: 3,
            steps: 1200,
            batch_size: 16,
            adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
            answer_weight: 1,
            supervise_cot: false,
        }
    }
}

/// Next-token examples over the answer of each trace, repeated
/// `answer_weight` times, and over the cot when `supervise_cot` is set.
pub fn training_examples(
    model: &ReferenceModel,
    traces: &[ReasoningTrace],
    answer_weight: usize,
    supervise_cot: bool,
) -> Result<Vec<(Vec<TokenId>, Vec<usize>)>> {
    traces
        .iter()
        .map(|t| {
            let layout = trace_layout(model, t)?;
            let answer = layout.answer.start - 1..layout.answer.end - 1;
            let mut positions: Vec<usize> =
                if supervise_cot { (layout.cot.start - 1..answer.start).collect() } else { Vec::new() };
            for _ in 0..answer_weight.max(1) {
                positions.extend(answer.clone());
            }
            Ok((layout.ids, positions))
        })
        .collect()
}

/// Initializes and trains a reference model; returns it with the loss of
/// every step.
pub fn train_reference(traces: &[ReasoningTrace], cfg: &TrainConfig) -> Result<(ReferenceModel, Vec<f64>)> {
    let mut model = ReferenceModel::init(cfg.seed, cfg.dims)?;
    let examples = training_examples(&model, traces, cfg.answer_weight, cfg.supervise_cot)?;
    let mut trainer = Trainer::new(&model, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1]));
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch: Vec<_> = (0..cfg.batch_size.min(examples.len()))
            .map(|_| examples[rng.random_range(0..examples.len())].clone())
            .collect();
        losses.push(trainer.step(&mut model, &batch)?);
    }
    Ok((model, losses))
}
