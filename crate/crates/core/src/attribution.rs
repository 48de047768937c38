//! Integrated gradients from a baseline embedding to the actual input.
//!
//! For each attributed token embedding `x` with baseline `x'`, dimension `i`
//! receives
//!
//! ```text
//! (x_i − x'_i) · (1/J) Σ_{j=1..J} ∂F(x' + (j/J)(x − x'))/∂x_i
//! ```
//!
//! (a right-endpoint Riemann sum), and the token's score is the plain sum over
//! dimensions. All attributed tokens move along the path together; the query
//! (unless attributed), the forcing marker and the answer keep their true
//! embeddings at every step.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grad_oracle::{trace_layout, DumpHeader, DumpRecord, GradOracle, TokenId, DUMP_FORMAT_VERSION};
use crate::linalg::Matrix;
use crate::trace::ReasoningTrace;
use crate::{Error, Result};

pub const DEFAULT_STEPS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Baseline {
    #[default]
    Pad,
    Zero,
    Token(TokenId),
}

impl Baseline {
    pub fn id(&self) -> String {
        match self {
            Self::Pad => "pad".into(),
            Self::Zero => "zero".into(),
            Self::Token(t) => format!("token:{t}"),
        }
    }

    fn embedding(&self, oracle: &dyn GradOracle) -> Vec<f64> {
        match self {
            Self::Pad => oracle.pad_embedding(),
            Self::Zero => vec![0.0; oracle.embed_dim()],
            Self::Token(t) => oracle.embed(*t),
        }
    }
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pad" => Ok(Self::Pad),
            "zero" => Ok(Self::Zero),
            other => other
                .strip_prefix("token:")
                .and_then(|n| n.parse().ok())
                .map(Self::Token)
                .ok_or_else(|| Error::Config(format!("unknown baseline {other:?}"))),
        }
    }
}

impl Serialize for Baseline {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.id())
    }
}

impl<'de> Deserialize<'de> for Baseline {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributedRegion {
    #[default]
    CotOnly,
    QueryAndCot,
}

impl AttributedRegion {
    pub fn id(self) -> &'static str {
        match self {
            Self::CotOnly => "cot-only",
            Self::QueryAndCot => "query-and-cot",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionConfig {
    pub steps: usize,
    pub baseline: Baseline,
    pub attributed_region: AttributedRegion,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, baseline: Baseline::Pad, attributed_region: AttributedRegion::CotOnly }
    }
}

impl AttributionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("integration steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenAttribution {
    pub trace_id: String,
    /// One value per attributed token: query tokens first (if attributed),
    /// then every cot token.
    pub igs: Vec<f64>,
    pub completeness_gap: f64,
    pub config: AttributionConfig,
    /// Leading entries of `igs` that belong to the query.
    pub query_tokens: usize,
}

impl TokenAttribution {
    pub fn cot_igs(&self) -> &[f64] {
        &self.igs[self.query_tokens..]
    }

    pub fn to_dump_record(&self) -> DumpRecord {
        DumpRecord {
            trace_id: self.trace_id.clone(),
            token_igs: self.igs.clone(),
            completeness_gap: Some(self.completeness_gap),
            query_tokens: self.query_tokens,
            tokens: None,
            extra: Default::default(),
        }
    }

    /// Rebuilds an attribution from a joined dump record.
    pub fn from_dump(header: &DumpHeader, record: DumpRecord) -> Result<Self> {
        let config = AttributionConfig {
            steps: header.steps,
            baseline: header.baseline.parse()?,
            attributed_region: if record.query_tokens > 0 {
                AttributedRegion::QueryAndCot
            } else {
                AttributedRegion::CotOnly
            },
        };
        Ok(Self {
            trace_id: record.trace_id,
            igs: record.token_igs,
            completeness_gap: record.completeness_gap.unwrap_or(f64::NAN),
            config,
            query_tokens: record.query_tokens,
        })
    }
}

pub fn dump_header(oracle: &dyn GradOracle, cfg: &AttributionConfig, keyword_profile: &str) -> DumpHeader {
    DumpHeader {
        format_version: DUMP_FORMAT_VERSION,
        model_id: oracle.model_id().to_string(),
        baseline: cfg.baseline.id(),
        steps: cfg.steps,
        keyword_profile: keyword_profile.to_string(),
        score_target: "answer-logprob-sum".into(),
        attributed_region: cfg.attributed_region.id().into(),
        tokenizer: Some("byte".into()),
        extra: Default::default(),
    }
}

/// Per-dimension attributions plus the endpoint scores.
pub struct PathIntegral {
    /// Rows are attributed tokens, columns embedding dimensions.
    pub per_dim: Matrix,
    pub score_input: f64,
    pub score_baseline: f64,
    pub query_tokens: usize,
}

impl PathIntegral {
    pub fn token_igs(&self) -> Vec<f64> {
        (0..self.per_dim.rows()).map(|r| self.per_dim.row(r).iter().sum()).collect()
    }

    pub fn completeness_gap(&self) -> f64 {
        let total: f64 = self.token_igs().iter().sum();
        (total - (self.score_input - self.score_baseline)).abs()
    }
}

pub fn path_integral(oracle: &dyn GradOracle, trace: &ReasoningTrace, cfg: &AttributionConfig) -> Result<PathIntegral> {
    cfg.validate()?;
    let layout = trace_layout(oracle, trace)?;
    let context = layout.context();
    let target = layout.target();
    let region: Range<usize> = match cfg.attributed_region {
        AttributedRegion::CotOnly => layout.cot.clone(),
        AttributedRegion::QueryAndCot => layout.query.start..layout.cot.end,
    };
    let input = oracle.embeddings_of(context);
    let base_vec = cfg.baseline.embedding(oracle);
    let mut baseline = input.clone();
    for r in region.clone() {
        baseline.row_mut(r).copy_from_slice(&base_vec);
    }

    let steps = cfg.steps;
    let grads: Vec<Matrix> = (1..=steps)
        .into_par_iter()
        .map(|j| {
            let alpha = j as f64 / steps as f64;
            let mut point = input.clone();
            for r in region.clone() {
                for ((p, &x), &b) in point.row_mut(r).iter_mut().zip(input.row(r)).zip(baseline.row(r)) {
                    *p = b + alpha * (x - b);
                }
            }
            oracle.grad_wrt_embeddings(context, target, &point)
        })
        .collect::<Result<_>>()?;

    // index-ordered reduction keeps the result independent of scheduling
    let d = oracle.embed_dim();
    let mut per_dim = Matrix::zeros(region.len(), d);
    for g in &grads {
        for (out_r, r) in region.clone().enumerate() {
            for (acc, &v) in per_dim.row_mut(out_r).iter_mut().zip(g.row(r)) {
                *acc += v;
            }
        }
    }
    for (out_r, r) in region.clone().enumerate() {
        for (c, acc) in per_dim.row_mut(out_r).iter_mut().enumerate() {
            *acc = (input.get(r, c) - baseline.get(r, c)) * (*acc / steps as f64);
        }
    }

    Ok(PathIntegral {
        per_dim,
        score_input: oracle.score_target(context, target, Some(&input))?,
        score_baseline: oracle.score_target(context, target, Some(&baseline))?,
        query_tokens: if cfg.attributed_region == AttributedRegion::QueryAndCot { layout.query.len() } else { 0 },
    })
}

pub fn integrated_gradients(
    oracle: &dyn GradOracle,
    trace: &ReasoningTrace,
    cfg: &AttributionConfig,
) -> Result<TokenAttribution> {
    let pi = path_integral(oracle, trace, cfg)?;
    Ok(TokenAttribution {
        trace_id: trace.trace_id.clone(),
        igs: pi.token_igs(),
        completeness_gap: pi.completeness_gap(),
        config: *cfg,
        query_tokens: pi.query_tokens,
    })
}

/// Attributes every trace; parallel over traces, results in corpus order.
pub fn attribute_corpus(
    oracle: &dyn GradOracle,
    traces: &[ReasoningTrace],
    cfg: &AttributionConfig,
) -> Result<Vec<TokenAttribution>> {
    traces.par_iter().map(|t| integrated_gradients(oracle, t, cfg)).collect()
}

/// Completeness gap at each step count in `steps` (ascending).
pub fn convergence_probe(
    oracle: &dyn GradOracle,
    trace: &ReasoningTrace,
    steps: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if steps.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("step counts must be sorted ascending".into()));
    }
    steps
        .iter()
        .map(|&j| {
            let cfg = AttributionConfig { steps: j, ..Default::default() };
            Ok((j, path_integral(oracle, trace, &cfg)?.completeness_gap()))
        })
        .collect()
}
