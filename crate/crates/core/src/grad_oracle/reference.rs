//! A tiny byte-level causal transformer in `f64` with hand-written backprop.
//!
//! One pre-norm block: RMS-normalized single-head causal self-attention and a
//! GELU feed-forward layer, each with a residual connection, followed by a
//! final RMS norm and an affine output projection. Positions enter either as
//! learned embeddings added to the input or, with `rotary` set, as rotations
//! of queries and keys. Either way integrated gradients interpolate only the
//! token embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{byte_token, encode_bytes, CausalLm, GradOracle, TokenId, BYTE_VOCAB, DEFAULT_FORCING};
use crate::linalg::{dot, log_softmax, outer_acc, softmax_in_place, vec_mat_acc, vec_mat_t_acc, Matrix};
use crate::{Error, Result};

const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub context_len: usize,
    /// Hidden width of the feed-forward layer; 0 means `4 * embed_dim`.
    pub ffn_dim: usize,
    /// Rotary position encoding on queries and keys instead of learned
    /// absolute position embeddings.
    pub rotary: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { vocab_size: BYTE_VOCAB, embed_dim: 16, context_len: 256, ffn_dim: 0, rotary: false }
    }
}

const ROTARY_BASE: f64 = 100.0;

/// Rotates consecutive pairs of `row` by `pos · base^(−2i/d)`; `sign = −1`
/// applies the inverse rotation. An odd trailing dimension is left alone.
fn rotate(row: &mut [f64], pos: usize, sign: f64) {
    let d = row.len();
    for i in 0..d / 2 {
        let theta = pos as f64 * ROTARY_BASE.powf(-2.0 * i as f64 / d as f64);
        let (sin, cos) = (sign * theta).sin_cos();
        let (a, b) = (row[2 * i], row[2 * i + 1]);
        row[2 * i] = a * cos - b * sin;
        row[2 * i + 1] = a * sin + b * cos;
    }
}

impl ModelDims {
    fn validate(&self) -> Result<Self> {
        let mut d = *self;
        if d.ffn_dim == 0 {
            d.ffn_dim = 4 * d.embed_dim;
        }
        if !(4..=1 << 16).contains(&d.vocab_size) {
            return Err(Error::Config(format!("vocab_size {} outside [4, 65536]", d.vocab_size)));
        }
        if !(2..=512).contains(&d.embed_dim) {
            return Err(Error::Config(format!("embed_dim {} outside [2, 512]", d.embed_dim)));
        }
        if !(2..=8192).contains(&d.context_len) {
            return Err(Error::Config(format!("context_len {} outside [2, 8192]", d.context_len)));
        }
        if !(1..=4096).contains(&d.ffn_dim) {
            return Err(Error::Config(format!("ffn_dim {} outside [1, 4096]", d.ffn_dim)));
        }
        Ok(d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

impl Params {
    fn zeros(d: &ModelDims) -> Self {
        let (v, e, c, f) = (d.vocab_size, d.embed_dim, d.context_len, d.ffn_dim);
        Self {
            tok_emb: Matrix::zeros(v, e),
            pos_emb: Matrix::zeros(c, e),
            wq: Matrix::zeros(e, e),
            wk: Matrix::zeros(e, e),
            wv: Matrix::zeros(e, e),
            wo: Matrix::zeros(e, e),
            w1: Matrix::zeros(e, f),
            b1: vec![0.0; f],
            w2: Matrix::zeros(f, e),
            b2: vec![0.0; e],
            w_out: Matrix::zeros(e, v),
            b_out: vec![0.0; v],
        }
    }

    /// Every tensor in a fixed order.
    fn tensors(&self) -> [&[f64]; 12] {
        [
            self.tok_emb.as_slice(),
            self.pos_emb.as_slice(),
            self.wq.as_slice(),
            self.wk.as_slice(),
            self.wv.as_slice(),
            self.wo.as_slice(),
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
            self.w_out.as_slice(),
            &self.b_out,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 12] {
        [
            self.tok_emb.as_mut_slice(),
            self.pos_emb.as_mut_slice(),
            self.wq.as_mut_slice(),
            self.wk.as_mut_slice(),
            self.wv.as_mut_slice(),
            self.wo.as_mut_slice(),
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
            self.w_out.as_mut_slice(),
            &mut self.b_out,
        ]
    }

    fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReferenceModel {
    model_id: String,
    dims: ModelDims,
    forcing: Vec<TokenId>,
    params: Params,
}

/// Activations kept for the backward pass.
struct Forward {
    x0: Matrix,
    n1: Matrix,
    r1: Vec<f64>,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    att: Vec<Vec<f64>>,
    o: Matrix,
    n2: Matrix,
    r2: Vec<f64>,
    h: Matrix,
    g: Matrix,
    n3: Matrix,
    r3: Vec<f64>,
}

fn rms_rows(x: &Matrix) -> (Matrix, Vec<f64>) {
    let mut y = x.clone();
    let mut rs = Vec::with_capacity(x.rows());
    for p in 0..x.rows() {
        let row = y.row_mut(p);
        let r = (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64 + RMS_EPS).sqrt();
        row.iter_mut().for_each(|v| *v /= r);
        rs.push(r);
    }
    (y, rs)
}

/// Adds the input gradient of `y = x / rms(x)` to `dx`.
fn rms_back(y: &[f64], r: f64, dy: &[f64], dx: &mut [f64]) {
    let mean = dot(dy, y) / y.len() as f64;
    for ((d, &yy), &g) in dx.iter_mut().zip(y).zip(dy) {
        *d += (g - yy * mean) / r;
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl ReferenceModel {
    /// Seeded initialization; identical seed and dims give bit-identical parameters.
    pub fn init(seed: u64, dims: ModelDims) -> Result<Self> {
        let dims = dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::zeros(&dims);
        let e = dims.embed_dim as f64;
        let f = dims.ffn_dim as f64;
        let mut fill = |m: &mut [f64], std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            m.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        };
        fill(p.tok_emb.as_mut_slice(), 1.0);
        fill(p.pos_emb.as_mut_slice(), 0.3);
        for w in [&mut p.wq, &mut p.wk, &mut p.wv, &mut p.wo, &mut p.w1] {
            fill(w.as_mut_slice(), 1.0 / e.sqrt());
        }
        fill(p.w2.as_mut_slice(), 1.0 / f.sqrt());
        fill(p.w_out.as_mut_slice(), 1.0 / e.sqrt());
        Ok(Self::with_params(format!("reference-v1:seed={seed}"), dims, p))
    }

    /// All parameters zero: every logit is 0, so every distribution is uniform.
    pub fn zeroed(dims: ModelDims) -> Result<Self> {
        let dims = dims.validate()?;
        Ok(Self::with_params("reference-v1:zeroed".into(), dims, Params::zeros(&dims)))
    }

    fn with_params(model_id: String, dims: ModelDims, params: Params) -> Self {
        let forcing = if dims.vocab_size >= BYTE_VOCAB { encode_bytes(DEFAULT_FORCING) } else { Vec::new() };
        let model_id = format!(
            "{model_id}:V={}:d={}:C={}:F={}{}",
            dims.vocab_size,
            dims.embed_dim,
            dims.context_len,
            dims.ffn_dim,
            if dims.rotary { ":rotary" } else { "" }
        );
        Self { model_id, dims, forcing, params }
    }

    /// Replaces the answer-forcing marker appended after the chain of thought.
    pub fn with_forcing(mut self, text: &str) -> Self {
        self.forcing = encode_bytes(text);
        self
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// SHA-256 over the bit patterns of every parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.params.tensors() {
            for x in t {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let m: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        m.dims.validate()?;
        Ok(m)
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if ids.len() > self.dims.context_len {
            return Err(Error::Capacity { needed: ids.len(), capacity: self.dims.context_len });
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.dims.vocab_size) {
            return Err(Error::Domain(format!("token id {bad} outside vocabulary of {}", self.dims.vocab_size)));
        }
        Ok(())
    }

    fn forward(&self, ids: &[TokenId], overrides: Option<&Matrix>) -> Forward {
        let p = &self.params;
        let n = ids.len();
        let d = self.dims.embed_dim;
        let f = self.dims.ffn_dim;

        let mut x0 = Matrix::zeros(n, d);
        for (pos, &id) in ids.iter().enumerate() {
            let src = match overrides {
                Some(m) if pos < m.rows() => m.row(pos),
                _ => p.tok_emb.row(id as usize),
            };
            let row = x0.row_mut(pos);
            row.copy_from_slice(src);
            if !self.dims.rotary {
                row.iter_mut().zip(p.pos_emb.row(pos)).for_each(|(x, &pe)| *x += pe);
            }
        }

        let (n1, r1) = rms_rows(&x0);
        let mut q = Matrix::zeros(n, d);
        let mut k = Matrix::zeros(n, d);
        let mut v = Matrix::zeros(n, d);
        for pos in 0..n {
            vec_mat_acc(n1.row(pos), &p.wq, q.row_mut(pos));
            vec_mat_acc(n1.row(pos), &p.wk, k.row_mut(pos));
            vec_mat_acc(n1.row(pos), &p.wv, v.row_mut(pos));
            if self.dims.rotary {
                rotate(q.row_mut(pos), pos, 1.0);
                rotate(k.row_mut(pos), pos, 1.0);
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut att = Vec::with_capacity(n);
        let mut o = Matrix::zeros(n, d);
        for i in 0..n {
            let mut a: Vec<f64> = (0..=i).map(|j| dot(q.row(i), k.row(j)) * scale).collect();
            softmax_in_place(&mut a);
            let oi = o.row_mut(i);
            for (j, &aij) in a.iter().enumerate() {
                for (ov, &vv) in oi.iter_mut().zip(v.row(j)) {
                    *ov += aij * vv;
                }
            }
            att.push(a);
        }

        let mut x1 = x0.clone();
        for pos in 0..n {
            vec_mat_acc(o.row(pos), &p.wo, x1.row_mut(pos));
        }
        let (n2, r2) = rms_rows(&x1);
        let mut h = Matrix::zeros(n, f);
        let mut g = Matrix::zeros(n, f);
        let mut x2 = x1;
        for pos in 0..n {
            let hr = h.row_mut(pos);
            hr.copy_from_slice(&p.b1);
            vec_mat_acc(n2.row(pos), &p.w1, hr);
            for (gv, &hv) in g.row_mut(pos).iter_mut().zip(h.row(pos)) {
                *gv = gelu(hv);
            }
            let xr = x2.row_mut(pos);
            xr.iter_mut().zip(&p.b2).for_each(|(x, b)| *x += b);
            vec_mat_acc(g.row(pos), &p.w2, xr);
        }
        let (n3, r3) = rms_rows(&x2);
        Forward { x0, n1, r1, q, k, v, att, o, n2, r2, h, g, n3, r3 }
    }

    fn logits(&self, fw: &Forward, pos: usize) -> Vec<f64> {
        let mut out = self.params.b_out.clone();
        vec_mat_acc(fw.n3.row(pos), &self.params.w_out, &mut out);
        out
    }

    /// Backpropagates `dlogits` (sparse by position) to the block input.
    /// Returns `∂/∂x0` for every position and accumulates parameter
    /// gradients into `grads` when given.
    fn backward(
        &self,
        fw: &Forward,
        ids: &[TokenId],
        dlogits: &[(usize, Vec<f64>)],
        mut grads: Option<&mut Params>,
    ) -> Matrix {
        let p = &self.params;
        let n = fw.x0.rows();
        let d = self.dims.embed_dim;
        let f = self.dims.ffn_dim;
        let last = dlogits.iter().map(|(pos, _)| pos + 1).max().unwrap_or(0);

        let mut dx2 = Matrix::zeros(n, d);
        for (pos, dl) in dlogits {
            let mut dn3 = vec![0.0; d];
            vec_mat_t_acc(dl, &p.w_out, &mut dn3);
            if let Some(gr) = grads.as_deref_mut() {
                outer_acc(fw.n3.row(*pos), dl, &mut gr.w_out);
                gr.b_out.iter_mut().zip(dl).for_each(|(b, g)| *b += g);
            }
            rms_back(fw.n3.row(*pos), fw.r3[*pos], &dn3, dx2.row_mut(*pos));
        }

        // feed-forward
        let mut dx1 = dx2.clone();
        let mut dg = vec![0.0; f];
        let mut dn2 = vec![0.0; d];
        for pos in 0..last {
            let dxr = dx2.row(pos);
            dg.iter_mut().for_each(|x| *x = 0.0);
            vec_mat_t_acc(dxr, &p.w2, &mut dg);
            for (dgv, &hv) in dg.iter_mut().zip(fw.h.row(pos)) {
                *dgv *= gelu_grad(hv);
            }
            if let Some(gr) = grads.as_deref_mut() {
                outer_acc(fw.g.row(pos), dxr, &mut gr.w2);
                gr.b2.iter_mut().zip(dxr).for_each(|(b, g)| *b += g);
                outer_acc(fw.n2.row(pos), &dg, &mut gr.w1);
                gr.b1.iter_mut().zip(&dg).for_each(|(b, g)| *b += g);
            }
            dn2.iter_mut().for_each(|x| *x = 0.0);
            vec_mat_t_acc(&dg, &p.w1, &mut dn2);
            rms_back(fw.n2.row(pos), fw.r2[pos], &dn2, dx1.row_mut(pos));
        }

        // attention
        let scale = 1.0 / (d as f64).sqrt();
        let mut dox = Matrix::zeros(n, d);
        for pos in 0..last {
            vec_mat_t_acc(dx1.row(pos), &p.wo, dox.row_mut(pos));
            if let Some(gr) = grads.as_deref_mut() {
                outer_acc(fw.o.row(pos), dx1.row(pos), &mut gr.wo);
            }
        }
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        let mut ds = Vec::with_capacity(last);
        for i in 0..last {
            let a = &fw.att[i];
            let doi = dox.row(i);
            ds.clear();
            ds.extend((0..=i).map(|j| dot(doi, fw.v.row(j))));
            let s: f64 = a.iter().zip(&ds).map(|(x, y)| x * y).sum();
            for j in 0..=i {
                let aij = a[j];
                for (dvv, &g) in dv.row_mut(j).iter_mut().zip(doi) {
                    *dvv += aij * g;
                }
                let dsj = aij * (ds[j] - s) * scale;
                if dsj == 0.0 {
                    continue;
                }
                for (dqv, &kv) in dq.row_mut(i).iter_mut().zip(fw.k.row(j)) {
                    *dqv += dsj * kv;
                }
                for (dkv, &qv) in dk.row_mut(j).iter_mut().zip(fw.q.row(i)) {
                    *dkv += dsj * qv;
                }
            }
        }
        if self.dims.rotary {
            for pos in 0..last {
                rotate(dq.row_mut(pos), pos, -1.0);
                rotate(dk.row_mut(pos), pos, -1.0);
            }
        }
        let mut dx0 = dx1;
        let mut dn1 = vec![0.0; d];
        for pos in 0..last {
            dn1.iter_mut().for_each(|x| *x = 0.0);
            vec_mat_t_acc(dq.row(pos), &p.wq, &mut dn1);
            vec_mat_t_acc(dk.row(pos), &p.wk, &mut dn1);
            vec_mat_t_acc(dv.row(pos), &p.wv, &mut dn1);
            if let Some(gr) = grads.as_deref_mut() {
                outer_acc(fw.n1.row(pos), dq.row(pos), &mut gr.wq);
                outer_acc(fw.n1.row(pos), dk.row(pos), &mut gr.wk);
                outer_acc(fw.n1.row(pos), dv.row(pos), &mut gr.wv);
            }
            rms_back(fw.n1.row(pos), fw.r1[pos], &dn1, dx0.row_mut(pos));
        }

        if let Some(gr) = grads {
            for (pos, &id) in ids[..last].iter().enumerate() {
                let g = dx0.row(pos);
                if !self.dims.rotary {
                    gr.pos_emb.row_mut(pos).iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                gr.tok_emb.row_mut(id as usize).iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        dx0
    }

    fn check_overrides(&self, context: &[TokenId], m: Option<&Matrix>) -> Result<()> {
        if let Some(m) = m {
            if m.rows() != context.len() || m.cols() != self.dims.embed_dim {
                return Err(Error::Domain(format!(
                    "embedding override is {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    context.len(),
                    self.dims.embed_dim
                )));
            }
        }
        Ok(())
    }

    fn joined(&self, context: &[TokenId], target: &[TokenId]) -> Result<Vec<TokenId>> {
        let ids: Vec<TokenId> = context.iter().chain(target).copied().collect();
        self.check_ids(&ids)?;
        if context.is_empty() && !target.is_empty() {
            return Err(Error::Domain("cannot score a target without context".into()));
        }
        Ok(ids)
    }

    /// Mean next-token NLL over `positions` (each predicts `ids[pos + 1]`) and
    /// its parameter gradient.
    pub fn loss_and_grad(&self, ids: &[TokenId], positions: &[usize]) -> Result<(f64, Params)> {
        self.check_ids(ids)?;
        if positions.is_empty() {
            return Err(Error::EmptySupport);
        }
        let fw = self.forward(ids, None);
        let w = 1.0 / positions.len() as f64;
        let mut loss = 0.0;
        let mut dlogits = Vec::with_capacity(positions.len());
        for &pos in positions {
            let mut probs = self.logits(&fw, pos);
            softmax_in_place(&mut probs);
            let target = ids[pos + 1] as usize;
            loss -= w * probs[target].ln();
            for v in probs.iter_mut() {
                *v *= w;
            }
            probs[target] -= w;
            dlogits.push((pos, probs));
        }
        let mut grads = Params::zeros(&self.dims);
        self.backward(&fw, ids, &dlogits, Some(&mut grads));
        Ok((loss, grads))
    }
}

impl GradOracle for ReferenceModel {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn vocab_size(&self) -> usize {
        self.dims.vocab_size
    }

    fn embed_dim(&self) -> usize {
        self.dims.embed_dim
    }

    fn context_len(&self) -> usize {
        self.dims.context_len
    }

    fn token_id(&self, piece: &[u8]) -> Result<TokenId> {
        byte_token(piece, self.dims.vocab_size)
    }

    fn encode(&self, text: &str) -> Vec<TokenId> {
        encode_bytes(text)
    }

    fn forcing_tokens(&self) -> Vec<TokenId> {
        self.forcing.clone()
    }

    fn embed(&self, token: TokenId) -> Vec<f64> {
        self.params.tok_emb.row(token as usize).to_vec()
    }

    fn score_target(&self, context: &[TokenId], target: &[TokenId], embeddings: Option<&Matrix>) -> Result<f64> {
        let ids = self.joined(context, target)?;
        self.check_overrides(context, embeddings)?;
        if target.is_empty() {
            return Ok(0.0);
        }
        let fw = self.forward(&ids, embeddings);
        let mut total = 0.0;
        for (t, &tok) in target.iter().enumerate() {
            let lp = log_softmax(&self.logits(&fw, context.len() - 1 + t));
            total += lp[tok as usize];
        }
        Ok(total)
    }

    fn grad_wrt_embeddings(&self, context: &[TokenId], target: &[TokenId], embeddings: &Matrix) -> Result<Matrix> {
        let ids = self.joined(context, target)?;
        self.check_overrides(context, Some(embeddings))?;
        let d = self.dims.embed_dim;
        if target.is_empty() {
            return Ok(Matrix::zeros(context.len(), d));
        }
        let fw = self.forward(&ids, Some(embeddings));
        let dlogits: Vec<(usize, Vec<f64>)> = target
            .iter()
            .enumerate()
            .map(|(t, &tok)| {
                let pos = context.len() - 1 + t;
                let mut g = self.logits(&fw, pos);
                softmax_in_place(&mut g);
                g.iter_mut().for_each(|x| *x = -*x);
                g[tok as usize] += 1.0;
                (pos, g)
            })
            .collect();
        let dx0 = self.backward(&fw, &ids, &dlogits, None);
        let mut out = Matrix::zeros(context.len(), d);
        for pos in 0..context.len() {
            out.row_mut(pos).copy_from_slice(dx0.row(pos));
        }
        Ok(out)
    }
}

impl CausalLm for ReferenceModel {
    fn log_probs(&self, ids: &[TokenId]) -> Result<Matrix> {
        self.check_ids(ids)?;
        let fw = self.forward(ids, None);
        let mut out = Matrix::zeros(ids.len(), self.dims.vocab_size);
        for pos in 0..ids.len() {
            out.row_mut(pos).copy_from_slice(&log_softmax(&self.logits(&fw, pos)));
        }
        Ok(out)
    }

    fn next_log_probs(&self, ids: &[TokenId]) -> Result<Vec<f64>> {
        self.check_ids(ids)?;
        if ids.is_empty() {
            return Err(Error::Domain("cannot predict without context".into()));
        }
        let fw = self.forward(ids, None);
        Ok(log_softmax(&self.logits(&fw, ids.len() - 1)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam over mean next-token NLL. Used to give the reference model enough
/// structure for attribution experiments; batches are reduced in index order
/// so training is deterministic regardless of thread count.
pub struct Trainer {
    cfg: AdamConfig,
    m: Params,
    v: Params,
    step: u64,
}

impl Trainer {
    pub fn new(model: &ReferenceModel, cfg: AdamConfig) -> Self {
        Self { cfg, m: Params::zeros(&model.dims), v: Params::zeros(&model.dims), step: 0 }
    }

    /// One update on a batch of `(ids, loss positions)` examples; returns the
    /// mean batch loss before the update.
    pub fn step(&mut self, model: &mut ReferenceModel, batch: &[(Vec<TokenId>, Vec<usize>)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptySupport);
        }
        let results: Vec<(f64, Params)> =
            batch.par_iter().map(|(ids, pos)| model.loss_and_grad(ids, pos)).collect::<Result<_>>()?;
        let mut iter = results.into_iter();
        let (mut loss, mut grad) = iter.next().expect("non-empty batch");
        for (l, g) in iter {
            loss += l;
            grad.add_assign(&g);
        }
        let scale = 1.0 / batch.len() as f64;
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((w, g), m), v) in model
            .params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..w.len() {
                let gi = g[i] * scale;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                w[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        }
        if !model.model_id.contains(":trained") {
            model.model_id.push_str(":trained");
        }
        Ok(loss * scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad_oracle::{fd_check, BOS, BYTE_OFFSET};

    fn small() -> ModelDims {
        ModelDims { vocab_size: BYTE_VOCAB, embed_dim: 8, context_len: 32, ffn_dim: 16, rotary: false }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ReferenceModel::init(7, small()).unwrap();
        let b = ReferenceModel::init(7, small()).unwrap();
        let c = ReferenceModel::init(8, small()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn dims_out_of_range_rejected() {
        let bad = ModelDims { vocab_size: 3, ..small() };
        assert!(matches!(ReferenceModel::init(1, bad), Err(Error::Config(_))));
        let bad = ModelDims { embed_dim: 1, ..small() };
        assert!(matches!(ReferenceModel::init(1, bad), Err(Error::Config(_))));
    }

    #[test]
    fn zeroed_model_is_uniform() {
        let m = ReferenceModel::zeroed(small()).unwrap();
        let lp = m.log_probs(&[BOS, 10, 11, 12]).unwrap();
        for r in 0..lp.rows() {
            assert!(lp.row(r).iter().all(|&v| v == lp.get(r, 0)));
        }
        let s = m.score_target(&[BOS, 10], &[20, 21, 22], None).unwrap();
        assert!((s - 3.0 * -(BYTE_VOCAB as f64).ln()).abs() < 1e-12);
        let g = m.grad_wrt_embeddings(&[BOS, 10], &[20], &m.embeddings_of(&[BOS, 10])).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn empty_target_scores_zero() {
        let m = ReferenceModel::init(3, small()).unwrap();
        assert_eq!(m.score_target(&[BOS, 30], &[], None).unwrap(), 0.0);
    }

    #[test]
    fn capacity_enforced() {
        let m = ReferenceModel::init(3, small()).unwrap();
        let ctx = vec![BYTE_OFFSET; 31];
        assert!(matches!(m.score_target(&ctx, &[5, 6], None), Err(Error::Capacity { needed: 33, capacity: 32 })));
    }

    #[test]
    fn scoring_is_bit_deterministic() {
        let m = ReferenceModel::init(11, small()).unwrap();
        let a = m.score_target(&[BOS, 40, 50, 60], &[70, 80], None).unwrap();
        let b = m.score_target(&[BOS, 40, 50, 60], &[70, 80], None).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        for rotary in [false, true] {
            let m = ReferenceModel::init(5, ModelDims { rotary, ..small() }).unwrap();
            for seed in 0..3 {
                let err = fd_check(&m, seed, 1e-3).unwrap();
                assert!(err <= 1e-4, "rotary {rotary} seed {seed}: {err}");
            }
        }
        let m = ReferenceModel::init(5, small()).unwrap();
        assert_eq!(fd_check(&ReferenceModel::zeroed(small()).unwrap(), 0, 1e-3).unwrap(), 0.0);
        assert!(fd_check(&m, 0, 1e-8).is_err());
    }

    #[test]
    fn duplicated_context_token_gets_per_position_gradient() {
        let m = ReferenceModel::init(2, small()).unwrap();
        let ctx = [BOS, 50, 50];
        let g = m.grad_wrt_embeddings(&ctx, &[60], &m.embeddings_of(&ctx)).unwrap();
        assert_eq!(g.rows(), 3);
        assert_ne!(g.row(1), g.row(2));
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        check_parameter_gradients(small());
    }

    #[test]
    fn rotary_parameter_gradient_matches_finite_differences() {
        check_parameter_gradients(ModelDims { rotary: true, ..small() });
    }

    #[test]
    fn rotary_scores_depend_on_relative_order() {
        let m = ReferenceModel::init(4, ModelDims { rotary: true, ..small() }).unwrap();
        let a = m.score_target(&[BOS, 40, 50], &[60], None).unwrap();
        let b = m.score_target(&[BOS, 50, 40], &[60], None).unwrap();
        assert_ne!(a, b);
        assert!(m.model_id().contains(":rotary"));
    }

    fn check_parameter_gradients(dims: ModelDims) {
        let mut m = ReferenceModel::init(9, dims).unwrap();
        let ids = vec![BOS, 40, 41, 42, 43, 44];
        let positions = vec![1, 2, 3, 4];
        let (_, grads) = m.loss_and_grad(&ids, &positions).unwrap();
        let eps = 1e-5;
        let mut checked = 0;
        for t in 0..12 {
            let len = grads.tensors()[t].len();
            for i in [0, len / 2, len - 1] {
                let analytic = grads.tensors()[t][i];
                let orig = m.params.tensors()[t][i];
                m.params.tensors_mut()[t][i] = orig + eps;
                let up = m.loss_and_grad(&ids, &positions).unwrap().0;
                m.params.tensors_mut()[t][i] = orig - eps;
                let down = m.loss_and_grad(&ids, &positions).unwrap().0;
                m.params.tensors_mut()[t][i] = orig;
                let numeric = (up - down) / (2.0 * eps);
                assert!(
                    (analytic - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "tensor {t}[{i}]: {analytic} vs {numeric}"
                );
                checked += 1;
            }
        }
        assert_eq!(checked, 36);
    }

    #[test]
    fn training_reduces_loss() {
        let mut m = ReferenceModel::init(1, small()).unwrap();
        let ids: Vec<TokenId> = std::iter::once(BOS).chain(encode_bytes("abcabcabcabc")).collect();
        let positions: Vec<usize> = (0..ids.len() - 1).collect();
        let mut tr = Trainer::new(&m, AdamConfig { lr: 1e-2, ..Default::default() });
        let batch = vec![(ids, positions)];
        let first = tr.step(&mut m, &batch).unwrap();
        let mut last = first;
        for _ in 0..60 {
            last = tr.step(&mut m, &batch).unwrap();
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
        assert!(m.model_id().ends_with(":trained"));
    }

    #[test]
    fn save_load_round_trip() {
        let m = ReferenceModel::init(4, small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        let back = ReferenceModel::load(&p).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert_eq!(back.model_id(), m.model_id());
    }
}
