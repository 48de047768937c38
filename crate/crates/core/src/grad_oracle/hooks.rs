//! Closed-form scorers for checking attribution and analytics against
//! hand-computed values. All use the byte vocabulary.

use super::{byte_token, encode_bytes, CausalLm, GradOracle, TokenId, BYTE_VOCAB, DEFAULT_FORCING, PAD};
use crate::linalg::{log_softmax, Matrix};
use crate::{Error, Result};

fn context_check(context: &[TokenId], embeddings: Option<&Matrix>, dim: usize) -> Result<()> {
    if let Some(m) = embeddings {
        if m.rows() != context.len() || m.cols() != dim {
            return Err(Error::Domain("embedding override shape mismatch".into()));
        }
    }
    Ok(())
}

/// `F(x) = Σ_rows w · x_row`, independent of the target. Token embeddings
/// are a fixed function of the id; the pad embedding is the zero vector.
#[derive(Clone, Debug)]
pub struct LinearScorer {
    weights: Vec<f64>,
}

impl LinearScorer {
    pub fn new(weights: Vec<f64>) -> Self {
        assert!(!weights.is_empty());
        Self { weights }
    }
}

impl GradOracle for LinearScorer {
    fn model_id(&self) -> &str {
        "hook:linear"
    }
    fn vocab_size(&self) -> usize {
        BYTE_VOCAB
    }
    fn embed_dim(&self) -> usize {
        self.weights.len()
    }
    fn context_len(&self) -> usize {
        4096
    }
    fn token_id(&self, piece: &[u8]) -> Result<TokenId> {
        byte_token(piece, BYTE_VOCAB)
    }
    fn encode(&self, text: &str) -> Vec<TokenId> {
        encode_bytes(text)
    }
    fn forcing_tokens(&self) -> Vec<TokenId> {
        encode_bytes(DEFAULT_FORCING)
    }
    fn embed(&self, token: TokenId) -> Vec<f64> {
        if token == PAD {
            return vec![0.0; self.weights.len()];
        }
        (0..self.weights.len()).map(|i| ((token as usize * 7 + i * 3) % 11) as f64 / 5.0 - 1.0).collect()
    }
    fn score_target(&self, context: &[TokenId], _target: &[TokenId], embeddings: Option<&Matrix>) -> Result<f64> {
        context_check(context, embeddings, self.weights.len())?;
        let emb = embeddings.cloned().unwrap_or_else(|| self.embeddings_of(context));
        Ok((0..emb.rows()).map(|r| crate::linalg::dot(emb.row(r), &self.weights)).sum())
    }
    fn grad_wrt_embeddings(&self, context: &[TokenId], _target: &[TokenId], embeddings: &Matrix) -> Result<Matrix> {
        context_check(context, Some(embeddings), self.weights.len())?;
        Ok(Matrix::from_rows(&vec![self.weights.clone(); context.len()]))
    }
}

/// One-dimensional `F(x) = Σ_rows x_row²`; every token embeds to `value`,
/// the pad baseline is 0.
#[derive(Clone, Debug)]
pub struct QuadraticScorer {
    value: f64,
}

impl QuadraticScorer {
    pub fn new(value: f64) -> Self {
        Self { value }
    }
}

impl GradOracle for QuadraticScorer {
    fn model_id(&self) -> &str {
        "hook:quadratic"
    }
    fn vocab_size(&self) -> usize {
        BYTE_VOCAB
    }
    fn embed_dim(&self) -> usize {
        1
    }
    fn context_len(&self) -> usize {
        4096
    }
    fn token_id(&self, piece: &[u8]) -> Result<TokenId> {
        byte_token(piece, BYTE_VOCAB)
    }
    fn encode(&self, text: &str) -> Vec<TokenId> {
        encode_bytes(text)
    }
    fn forcing_tokens(&self) -> Vec<TokenId> {
        encode_bytes(DEFAULT_FORCING)
    }
    fn embed(&self, token: TokenId) -> Vec<f64> {
        vec![if token == PAD { 0.0 } else { self.value }]
    }
    fn score_target(&self, context: &[TokenId], _target: &[TokenId], embeddings: Option<&Matrix>) -> Result<f64> {
        context_check(context, embeddings, 1)?;
        let emb = embeddings.cloned().unwrap_or_else(|| self.embeddings_of(context));
        Ok(emb.as_slice().iter().map(|x| x * x).sum())
    }
    fn grad_wrt_embeddings(&self, context: &[TokenId], _target: &[TokenId], embeddings: &Matrix) -> Result<Matrix> {
        context_check(context, Some(embeddings), 1)?;
        let g: Vec<f64> = embeddings.as_slice().iter().map(|x| 2.0 * x).collect();
        Ok(Matrix::from_vec(context.len(), 1, g))
    }
}

/// A language model that always puts almost all mass on one token, for the
/// zero-entropy limit. Its score has no input dependence.
#[derive(Clone, Debug)]
pub struct PeakedLm {
    token: TokenId,
    margin: f64,
}

impl PeakedLm {
    pub fn new(token: TokenId, margin: f64) -> Self {
        Self { token, margin }
    }

    fn row(&self) -> Vec<f64> {
        let mut logits = vec![0.0; BYTE_VOCAB];
        logits[self.token as usize] = self.margin;
        log_softmax(&logits)
    }
}

impl GradOracle for PeakedLm {
    fn model_id(&self) -> &str {
        "hook:peaked"
    }
    fn vocab_size(&self) -> usize {
        BYTE_VOCAB
    }
    fn embed_dim(&self) -> usize {
        2
    }
    fn context_len(&self) -> usize {
        4096
    }
    fn token_id(&self, piece: &[u8]) -> Result<TokenId> {
        byte_token(piece, BYTE_VOCAB)
    }
    fn encode(&self, text: &str) -> Vec<TokenId> {
        encode_bytes(text)
    }
    fn forcing_tokens(&self) -> Vec<TokenId> {
        encode_bytes(DEFAULT_FORCING)
    }
    fn embed(&self, _token: TokenId) -> Vec<f64> {
        vec![0.0; 2]
    }
    fn score_target(&self, _context: &[TokenId], target: &[TokenId], _e: Option<&Matrix>) -> Result<f64> {
        let row = self.row();
        Ok(target.iter().map(|&t| row[t as usize]).sum())
    }
    fn grad_wrt_embeddings(&self, context: &[TokenId], _target: &[TokenId], _e: &Matrix) -> Result<Matrix> {
        Ok(Matrix::zeros(context.len(), 2))
    }
}

impl CausalLm for PeakedLm {
    fn log_probs(&self, ids: &[TokenId]) -> Result<Matrix> {
        Ok(Matrix::from_rows(&vec![self.row(); ids.len()]))
    }
}
