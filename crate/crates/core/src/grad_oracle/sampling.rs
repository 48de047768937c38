use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, CausalLm, TokenId, EOS};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub repetition_penalty: f64,
    /// Zero-temperature limit: always take the most likely token.
    #[serde(default)]
    pub greedy: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { temperature: 0.6, top_p: 1.0, max_new_tokens: 16, seed: 0, repetition_penalty: 1.0, greedy: false }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.repetition_penalty.is_nan() || self.repetition_penalty < 1.0 {
            return Err(Error::Config(format!("repetition_penalty {} below 1", self.repetition_penalty)));
        }
        Ok(())
    }
}

/// Draws `k` continuations of `context`. Sample `i` uses its own RNG stream
/// derived from `(cfg.seed, i)`, so results do not depend on call order.
/// Generation stops at EOS, at `max_new_tokens`, or when the context window
/// is full. The repetition penalty applies to tokens generated so far.
pub fn sample_answers(
    lm: &dyn CausalLm,
    context: &[TokenId],
    cfg: &SamplingConfig,
    k: usize,
) -> Result<Vec<Vec<TokenId>>> {
    cfg.validate()?;
    if k == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    if context.len() > lm.context_len() {
        return Err(Error::Capacity { needed: context.len(), capacity: lm.context_len() });
    }
    (0..k).map(|i| sample_one(lm, context, cfg, derive_seed(cfg.seed, &[i as u64]))).collect()
}

fn sample_one(lm: &dyn CausalLm, context: &[TokenId], cfg: &SamplingConfig, seed: u64) -> Result<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = context.to_vec();
    let mut out = Vec::new();
    while out.len() < cfg.max_new_tokens && ids.len() < lm.context_len() {
        let mut logits = lm.next_log_probs(&ids)?;
        if cfg.repetition_penalty > 1.0 {
            for &t in &out {
                let l = &mut logits[t as usize];
                *l = if *l > 0.0 { *l / cfg.repetition_penalty } else { *l * cfg.repetition_penalty };
            }
        }
        let next = if cfg.greedy { argmax(&logits) } else { draw(&logits, cfg, &mut rng) };
        out.push(next);
        if next == EOS {
            break;
        }
        ids.push(next);
    }
    Ok(out)
}

fn argmax(xs: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best as TokenId
}

fn draw(logits: &[f64], cfg: &SamplingConfig, rng: &mut ChaCha8Rng) -> TokenId {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> =
        logits.iter().enumerate().map(|(i, &l)| (i, ((l - max) / cfg.temperature).exp())).collect();
    let total: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= total);
    if cfg.top_p < 1.0 {
        // nucleus: highest-probability prefix reaching top_p, ties by id
        probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut acc = 0.0;
        let mut keep = probs.len();
        for (n, p) in probs.iter().enumerate() {
            acc += p.1;
            if acc >= cfg.top_p {
                keep = n + 1;
                break;
            }
        }
        probs.truncate(keep);
        let kept: f64 = probs.iter().map(|p| p.1).sum();
        probs.iter_mut().for_each(|p| p.1 /= kept);
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(i, p) in &probs {
        acc += p;
        if u < acc {
            return i as TokenId;
        }
    }
    probs.last().expect("non-empty vocabulary").0 as TokenId
}
