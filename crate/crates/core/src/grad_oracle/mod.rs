//! The differentiable scorer behind attribution.
//!
//! [`GradOracle`] exposes input embeddings, the answer score `F` (summed
//! log-probability of the answer tokens after the forcing marker) and its
//! exact gradient with respect to the context embeddings. [`CausalLm`] adds
//! next-token distributions for losses, entropies and sampling.
//!
//! Every trace is laid out the same way for every consumer:
//!
//! ```text
//! [BOS] query… cot… forcing… answer…
//! ```
//!
//! `F` scores `answer` given everything before it.

mod dump;
pub mod hooks;
mod reference;
mod sampling;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::Matrix;
use crate::trace::ReasoningTrace;
use crate::{Error, Result};

pub use dump::{dump_warnings, join_dump, read_dump, write_dump, DumpHeader, DumpRecord, DUMP_FORMAT_VERSION};
pub use reference::{AdamConfig, ModelDims, Params, ReferenceModel, Trainer};
pub use sampling::{sample_answers, SamplingConfig};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const ANSWER_MARKER: TokenId = 3;
/// Byte `b` maps to token `BYTE_OFFSET + b`.
pub const BYTE_OFFSET: TokenId = 4;
pub const BYTE_VOCAB: usize = 256 + BYTE_OFFSET as usize;

pub const DEFAULT_FORCING: &str = "\nfinal answer: ";

/// Byte-level encoding shared by the reference model and the test hooks.
pub fn encode_bytes(text: &str) -> Vec<TokenId> {
    text.bytes().map(|b| BYTE_OFFSET + b as TokenId).collect()
}

/// Inverse of [`encode_bytes`]; special tokens are dropped.
pub fn decode_bytes(ids: &[TokenId]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|t| (BYTE_OFFSET..BYTE_OFFSET + 256).contains(*t))
        .map(|&t| (t - BYTE_OFFSET) as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

fn byte_token(piece: &[u8], vocab: usize) -> Result<TokenId> {
    match piece {
        [b] if (BYTE_OFFSET as usize + *b as usize) < vocab => Ok(BYTE_OFFSET + *b as TokenId),
        [_] => Err(Error::Config(format!("vocabulary of {vocab} cannot hold byte tokens"))),
        _ => Err(Error::Unsupported(format!("{}-byte token under a byte-level vocabulary", piece.len()))),
    }
}

pub trait GradOracle: Send + Sync {
    fn model_id(&self) -> &str;
    fn vocab_size(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn context_len(&self) -> usize;

    /// Id of one tokenized piece of text (the bytes under a token span).
    fn token_id(&self, piece: &[u8]) -> Result<TokenId>;
    fn encode(&self, text: &str) -> Vec<TokenId>;
    fn forcing_tokens(&self) -> Vec<TokenId>;

    fn embed(&self, token: TokenId) -> Vec<f64>;
    fn pad_embedding(&self) -> Vec<f64> {
        self.embed(PAD)
    }

    /// `Σ_t log P(target_t | context, target_<t)`. When `embeddings` is given
    /// it replaces the context token embeddings row for row.
    fn score_target(&self, context: &[TokenId], target: &[TokenId], embeddings: Option<&Matrix>) -> Result<f64>;

    /// Gradient of [`GradOracle::score_target`] with respect to the context
    /// embeddings, one row per context position.
    fn grad_wrt_embeddings(&self, context: &[TokenId], target: &[TokenId], embeddings: &Matrix) -> Result<Matrix>;

    fn embeddings_of(&self, ids: &[TokenId]) -> Matrix {
        let rows: Vec<Vec<f64>> = ids.iter().map(|&t| self.embed(t)).collect();
        if rows.is_empty() {
            return Matrix::zeros(0, self.embed_dim());
        }
        Matrix::from_rows(&rows)
    }
}

pub trait CausalLm: GradOracle {
    /// Log-softmax rows: row `p` is the distribution of the token after `ids[..=p]`.
    fn log_probs(&self, ids: &[TokenId]) -> Result<Matrix>;

    /// Log-distribution of the token following `ids`.
    fn next_log_probs(&self, ids: &[TokenId]) -> Result<Vec<f64>> {
        let lp = self.log_probs(ids)?;
        Ok(lp.row(lp.rows() - 1).to_vec())
    }
}

/// Token positions of one trace inside the shared sequence layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceLayout {
    pub ids: Vec<TokenId>,
    pub query: Range<usize>,
    pub cot: Range<usize>,
    pub forcing: Range<usize>,
    pub answer: Range<usize>,
}

impl TraceLayout {
    pub fn context(&self) -> &[TokenId] {
        &self.ids[..self.answer.start]
    }

    pub fn target(&self) -> &[TokenId] {
        &self.ids[self.answer.clone()]
    }
}

/// Encodes a trace as `[BOS] query cot forcing answer`.
pub fn trace_layout(oracle: &dyn GradOracle, trace: &ReasoningTrace) -> Result<TraceLayout> {
    let mut ids = vec![BOS];
    ids.extend(oracle.encode(&trace.query));
    let query = 1..ids.len();
    let cot_start = ids.len();
    let bytes = trace.cot.as_bytes();
    for t in &trace.tokens {
        ids.push(oracle.token_id(&bytes[t.start..t.end])?);
    }
    let cot = cot_start..ids.len();
    ids.extend(oracle.forcing_tokens());
    let forcing = cot.end..ids.len();
    let answer_start = ids.len();
    let off = trace.cot.len();
    let ans = trace.answer.as_bytes();
    for t in &trace.answer_tokens {
        ids.push(oracle.token_id(&ans[t.start - off..t.end - off])?);
    }
    let answer = answer_start..ids.len();
    if ids.len() > oracle.context_len() {
        return Err(Error::Capacity { needed: ids.len(), capacity: oracle.context_len() });
    }
    Ok(TraceLayout { ids, query, cot, forcing, answer })
}

/// Compares the analytic embedding gradient with central differences on a
/// random probe and returns `max_i |analytic_i − numeric_i| / scale`, where
/// `scale` is the largest magnitude seen in either gradient (0/0 counts as 0).
pub fn fd_check(oracle: &dyn GradOracle, seed: u64, eps: f64) -> Result<f64> {
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::Config(format!("finite-difference step {eps} outside [1e-6, 1e-2]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx_len = (oracle.context_len() / 2).clamp(1, 8);
    let tgt_len = (oracle.context_len() - ctx_len).clamp(1, 3);
    let vocab = oracle.vocab_size() as TokenId;
    let mut draw =
        |n: usize| -> Vec<TokenId> { (0..n).map(|_| rng.random_range(BYTE_OFFSET.min(vocab - 1)..vocab)).collect() };
    let context = draw(ctx_len);
    let target = draw(tgt_len);
    let emb = oracle.embeddings_of(&context);
    let analytic = oracle.grad_wrt_embeddings(&context, &target, &emb)?;

    let mut max_err: f64 = 0.0;
    let mut scale: f64 = 0.0;
    let mut probe = emb.clone();
    for r in 0..emb.rows() {
        for c in 0..emb.cols() {
            let x = emb.get(r, c);
            probe.set(r, c, x + eps);
            let up = oracle.score_target(&context, &target, Some(&probe))?;
            probe.set(r, c, x - eps);
            let down = oracle.score_target(&context, &target, Some(&probe))?;
            probe.set(r, c, x);
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(r, c);
            max_err = max_err.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
    }
    Ok(if scale == 0.0 { 0.0 } else { max_err / scale })
}

/// Mixes a run seed with stream indices into an independent seed.
pub fn derive_seed(seed: u64, streams: &[u64]) -> u64 {
    // splitmix64 over the sequence
    let mut z = seed;
    for &s in streams {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(s.wrapping_mul(0xBF58_476D_1CE4_E5B9));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip() {
        assert_eq!(decode_bytes(&encode_bytes("final answer: 42")), "final answer: 42");
        assert_eq!(decode_bytes(&[BOS, BYTE_OFFSET + b'7' as TokenId, EOS]), "7");
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(5, &[3]), derive_seed(5, &[3]));
    }
}
