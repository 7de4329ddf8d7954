//! Deterministic trainable encoder: token embeddings -> mean-mixing
//! contextualizer -> linear+GeLU+LayerNorm transform -> vocabulary
//! projection -> saturated max pooling into a sparse lexical vector.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vector::SparseVector;

pub const MAX_SEQUENCE_LEN: usize = 64;
const LAYER_NORM_EPS: f64 = 1e-12;

/// Dense row-major matrix; just enough linear algebra for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Pre-tokenized input sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() || ids.len() > MAX_SEQUENCE_LEN {
            return Err(Error::InvalidArgument(format!(
                "sequence length must be in 1..={MAX_SEQUENCE_LEN}, got {}",
                ids.len()
            )));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// All trainable parameters of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub vocab_size: usize,
    pub hidden: usize,
    pub seed: u64,
    /// |V| x h token embeddings standing in for contextualized inputs.
    pub embedding: Matrix,
    /// h x h linear layer inside psi.
    pub psi_weight: Matrix,
    pub psi_bias: Vec<f64>,
    pub psi_norm_gain: Vec<f64>,
    pub psi_norm_bias: Vec<f64>,
    /// |V| x h vocabulary projection; row j is e_j.
    pub projection: Matrix,
    pub projection_bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Embedding,
    PsiWeight,
    PsiBias,
    PsiNormGain,
    PsiNormBias,
    Projection,
    ProjectionBias,
}

pub const ALL_GROUPS: [ParamGroup; 7] = [
    ParamGroup::Embedding,
    ParamGroup::PsiWeight,
    ParamGroup::PsiBias,
    ParamGroup::PsiNormGain,
    ParamGroup::PsiNormBias,
    ParamGroup::Projection,
    ParamGroup::ProjectionBias,
];

impl EncoderParams {
    /// Seeded Gaussian init (mean 0, std 0.02); LayerNorm gain 1 and bias 0.
    pub fn init(vocab_size: usize, hidden: usize, seed: u64) -> Result<Self> {
        if vocab_size < 2 || hidden == 0 {
            return Err(Error::InvalidArgument(
                "need vocab_size >= 2 and hidden >= 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = move || {
            // Box-Muller
            let u1: f64 = 1.0 - rng.gen::<f64>();
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let mut fill = |m: &mut [f64]| {
            for v in m.iter_mut() {
                *v = 0.02 * normal();
            }
        };
        let mut embedding = Matrix::zeros(vocab_size, hidden);
        fill(embedding.as_mut_slice());
        let mut psi_weight = Matrix::zeros(hidden, hidden);
        fill(psi_weight.as_mut_slice());
        let mut psi_bias = vec![0.0; hidden];
        fill(&mut psi_bias);
        let mut projection = Matrix::zeros(vocab_size, hidden);
        fill(projection.as_mut_slice());
        let mut projection_bias = vec![0.0; vocab_size];
        fill(&mut projection_bias);
        Ok(Self {
            vocab_size,
            hidden,
            seed,
            embedding,
            psi_weight,
            psi_bias,
            psi_norm_gain: vec![1.0; hidden],
            psi_norm_bias: vec![0.0; hidden],
            projection,
            projection_bias,
        })
    }

    pub fn group(&self, g: ParamGroup) -> &[f64] {
        match g {
            ParamGroup::Embedding => self.embedding.as_slice(),
            ParamGroup::PsiWeight => self.psi_weight.as_slice(),
            ParamGroup::PsiBias => &self.psi_bias,
            ParamGroup::PsiNormGain => &self.psi_norm_gain,
            ParamGroup::PsiNormBias => &self.psi_norm_bias,
            ParamGroup::Projection => self.projection.as_slice(),
            ParamGroup::ProjectionBias => &self.projection_bias,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut [f64] {
        match g {
            ParamGroup::Embedding => self.embedding.as_mut_slice(),
            ParamGroup::PsiWeight => self.psi_weight.as_mut_slice(),
            ParamGroup::PsiBias => &mut self.psi_bias,
            ParamGroup::PsiNormGain => &mut self.psi_norm_gain,
            ParamGroup::PsiNormBias => &mut self.psi_norm_bias,
            ParamGroup::Projection => self.projection.as_mut_slice(),
            ParamGroup::ProjectionBias => &mut self.projection_bias,
        }
    }

    fn check_sequence(&self, seq: &TokenSequence) -> Result<()> {
        for &t in seq.ids() {
            if t as usize >= self.vocab_size {
                return Err(Error::InvalidToken {
                    token: t,
                    vocab_size: self.vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// Exact Gaussian-CDF GeLU: x * Phi(x).
pub fn gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// d/dx gelu(x) = Phi(x) + x * phi(x).
pub fn gelu_prime(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

/// c_i = (emb_i + mean(emb)) / 2, so every position sees the whole sequence.
pub fn contextualize(params: &EncoderParams, seq: &TokenSequence) -> Result<Vec<Vec<f64>>> {
    params.check_sequence(seq)?;
    let h = params.hidden;
    let n = seq.len();
    let mut mean = vec![0.0; h];
    for &t in seq.ids() {
        for (m, &e) in mean.iter_mut().zip(params.embedding.row(t as usize)) {
            *m += e;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    Ok(seq
        .ids()
        .iter()
        .map(|&t| {
            params
                .embedding
                .row(t as usize)
                .iter()
                .zip(&mean)
                .map(|(&e, &m)| 0.5 * (e + m))
                .collect()
        })
        .collect())
}

/// LayerNorm(GeLU(W c + b)) with learned gain/bias.
pub fn psi(params: &EncoderParams, c: &[f64]) -> Vec<f64> {
    let (_, _, _, _, normalized) = psi_forward(params, c);
    normalized
        .iter()
        .zip(&params.psi_norm_gain)
        .zip(&params.psi_norm_bias)
        .map(|((&x, &g), &b)| g * x + b)
        .collect()
}

/// Returns (pre_activation, gelu_out, mean, inv_std, normalized).
fn psi_forward(params: &EncoderParams, c: &[f64]) -> (Vec<f64>, Vec<f64>, f64, f64, Vec<f64>) {
    let h = params.hidden;
    let mut pre = params.psi_bias.clone();
    for (i, p) in pre.iter_mut().enumerate() {
        let row = params.psi_weight.row(i);
        *p += row.iter().zip(c).map(|(&w, &x)| w * x).sum::<f64>();
    }
    let gelu_out: Vec<f64> = pre.iter().map(|&x| gelu(x)).collect();
    let mean = gelu_out.iter().sum::<f64>() / h as f64;
    let var = gelu_out.iter().map(|&g| (g - mean) * (g - mean)).sum::<f64>() / h as f64;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    let normalized = gelu_out.iter().map(|&g| (g - mean) * inv_std).collect();
    (pre, gelu_out, mean, inv_std, normalized)
}

/// Token scores w_j = e_j . p + b_j for every vocabulary dimension.
pub fn project_vocab(params: &EncoderParams, p: &[f64]) -> Vec<f64> {
    (0..params.vocab_size)
        .map(|j| {
            params
                .projection
                .row(j)
                .iter()
                .zip(p)
                .map(|(&e, &x)| e * x)
                .sum::<f64>()
                + params.projection_bias[j]
        })
        .collect()
}

/// Per-dimension max over positions of log(1 + ReLU(score)); zeros omitted.
pub fn pool_max_saturate(scores: &[Vec<f64>]) -> SparseVector {
    assert!(!scores.is_empty());
    let vocab = scores[0].len();
    let mut entries = Vec::new();
    for j in 0..vocab {
        let mut best = f64::NEG_INFINITY;
        for row in scores {
            if row[j] > best {
                best = row[j];
            }
        }
        if best > 0.0 {
            entries.push((j as u32, best.ln_1p()));
        }
    }
    SparseVector::from_entries(entries).expect("pooled entries are sorted and positive")
}

/// Everything the backward pass needs from one forward encode.
pub struct EncodeCache {
    token_ids: Vec<u32>,
    contexts: Vec<Vec<f64>>,
    pre_act: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
    normalized: Vec<Vec<f64>>,
    psi_out: Vec<Vec<f64>>,
    /// (term_id, argmax position, raw pre-log1p score) for each output entry.
    support: Vec<(u32, usize, f64)>,
}

/// Full pipeline: contextualize -> psi -> project -> pool.
pub fn encode(params: &EncoderParams, seq: &TokenSequence) -> Result<SparseVector> {
    Ok(encode_with_cache(params, seq)?.0)
}

pub fn encode_with_cache(
    params: &EncoderParams,
    seq: &TokenSequence,
) -> Result<(SparseVector, EncodeCache)> {
    let contexts = contextualize(params, seq)?;
    let n = contexts.len();
    let mut pre_act = Vec::with_capacity(n);
    let mut inv_std = Vec::with_capacity(n);
    let mut normalized = Vec::with_capacity(n);
    let mut psi_out = Vec::with_capacity(n);
    for c in &contexts {
        let (pre, _, _, istd, norm) = psi_forward(params, c);
        let p: Vec<f64> = norm
            .iter()
            .zip(&params.psi_norm_gain)
            .zip(&params.psi_norm_bias)
            .map(|((&x, &g), &b)| g * x + b)
            .collect();
        pre_act.push(pre);
        inv_std.push(istd);
        normalized.push(norm);
        psi_out.push(p);
    }
    // max over positions per vocabulary dimension; first position wins ties
    let mut best_score = vec![f64::NEG_INFINITY; params.vocab_size];
    let mut best_pos = vec![0usize; params.vocab_size];
    for (i, p) in psi_out.iter().enumerate() {
        let scores = project_vocab(params, p);
        for (j, &s) in scores.iter().enumerate() {
            if s > best_score[j] {
                best_score[j] = s;
                best_pos[j] = i;
            }
        }
    }
    let mut entries = Vec::new();
    let mut support = Vec::new();
    for j in 0..params.vocab_size {
        if best_score[j] > 0.0 {
            entries.push((j as u32, best_score[j].ln_1p()));
            support.push((j as u32, best_pos[j], best_score[j]));
        }
    }
    let vector = SparseVector::from_entries(entries).expect("sorted positive entries");
    Ok((
        vector,
        EncodeCache {
            token_ids: seq.ids().to_vec(),
            contexts,
            pre_act,
            inv_std,
            normalized,
            psi_out,
            support,
        },
    ))
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub embedding: Matrix,
    pub psi_weight: Matrix,
    pub psi_bias: Vec<f64>,
    pub psi_norm_gain: Vec<f64>,
    pub psi_norm_bias: Vec<f64>,
    pub projection: Matrix,
    pub projection_bias: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Self {
            embedding: Matrix::zeros(params.vocab_size, params.hidden),
            psi_weight: Matrix::zeros(params.hidden, params.hidden),
            psi_bias: vec![0.0; params.hidden],
            psi_norm_gain: vec![0.0; params.hidden],
            psi_norm_bias: vec![0.0; params.hidden],
            projection: Matrix::zeros(params.vocab_size, params.hidden),
            projection_bias: vec![0.0; params.vocab_size],
        }
    }

    pub fn group(&self, g: ParamGroup) -> &[f64] {
        match g {
            ParamGroup::Embedding => self.embedding.as_slice(),
            ParamGroup::PsiWeight => self.psi_weight.as_slice(),
            ParamGroup::PsiBias => &self.psi_bias,
            ParamGroup::PsiNormGain => &self.psi_norm_gain,
            ParamGroup::PsiNormBias => &self.psi_norm_bias,
            ParamGroup::Projection => self.projection.as_slice(),
            ParamGroup::ProjectionBias => &self.projection_bias,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut [f64] {
        match g {
            ParamGroup::Embedding => self.embedding.as_mut_slice(),
            ParamGroup::PsiWeight => self.psi_weight.as_mut_slice(),
            ParamGroup::PsiBias => &mut self.psi_bias,
            ParamGroup::PsiNormGain => &mut self.psi_norm_gain,
            ParamGroup::PsiNormBias => &mut self.psi_norm_bias,
            ParamGroup::Projection => self.projection.as_mut_slice(),
            ParamGroup::ProjectionBias => &mut self.projection_bias,
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in ALL_GROUPS {
            for v in self.group_mut(g) {
                *v *= factor;
            }
        }
    }
}

/// Backpropagate gradients on the pooled output weights into parameter
/// gradients. `output_grads` pairs term ids (a subset of the encode support)
/// with dL/dw for the pooled weight of that dimension; gradients accumulate
/// into `grads`.
pub fn encode_backward(
    params: &EncoderParams,
    cache: &EncodeCache,
    output_grads: &[(u32, f64)],
    grads: &mut ParamGrads,
) {
    let h = params.hidden;
    let n = cache.contexts.len();
    let mut d_psi_out = vec![vec![0.0; h]; n];

    // pooled -> projection layer, routed through the argmax position
    for &(term, grad) in output_grads {
        if grad == 0.0 {
            continue;
        }
        let idx = cache
            .support
            .binary_search_by_key(&term, |&(t, _, _)| t)
            .expect("gradient term must be in the encode support");
        let (_, pos, raw) = cache.support[idx];
        let du = grad / (1.0 + raw); // d log1p(relu(u))/du for u > 0
        let p = &cache.psi_out[pos];
        let proj_row = params.projection.row(term as usize);
        let gproj = grads.projection.row_mut(term as usize);
        for k in 0..h {
            gproj[k] += du * p[k];
            d_psi_out[pos][k] += du * proj_row[k];
        }
        grads.projection_bias[term as usize] += du;
    }

    // psi -> contextualizer, per position
    let mut d_contexts = vec![vec![0.0; h]; n];
    for i in 0..n {
        let dp = &d_psi_out[i];
        if dp.iter().all(|&v| v == 0.0) {
            continue;
        }
        let xhat = &cache.normalized[i];
        let mut d_xhat = vec![0.0; h];
        for k in 0..h {
            grads.psi_norm_gain[k] += dp[k] * xhat[k];
            grads.psi_norm_bias[k] += dp[k];
            d_xhat[k] = dp[k] * params.psi_norm_gain[k];
        }
        // LayerNorm backward
        let inv_std = cache.inv_std[i];
        let mean_dx = d_xhat.iter().sum::<f64>() / h as f64;
        let mean_dx_xhat = d_xhat
            .iter()
            .zip(xhat)
            .map(|(&d, &x)| d * x)
            .sum::<f64>()
            / h as f64;
        let mut d_gelu = vec![0.0; h];
        for k in 0..h {
            d_gelu[k] = inv_std * (d_xhat[k] - mean_dx - xhat[k] * mean_dx_xhat);
        }
        // GeLU backward
        let d_pre: Vec<f64> = (0..h)
            .map(|k| d_gelu[k] * gelu_prime(cache.pre_act[i][k]))
            .collect();
        // linear backward
        let c = &cache.contexts[i];
        for (k, &dp) in d_pre.iter().enumerate() {
            let row = grads.psi_weight.row_mut(k);
            for (r, &cv) in row.iter_mut().zip(c) {
                *r += dp * cv;
            }
            grads.psi_bias[k] += dp;
        }
        for (k, &dp) in d_pre.iter().enumerate() {
            let w_row = params.psi_weight.row(k);
            for (dc, &w) in d_contexts[i].iter_mut().zip(w_row) {
                *dc += dp * w;
            }
        }
    }

    // c_i = (emb_i + mean)/2: demb_i = dc_i/2 + (1/2N) sum_k dc_k
    let mut dc_sum = vec![0.0; h];
    for dc in &d_contexts {
        for (s, &v) in dc_sum.iter_mut().zip(dc) {
            *s += v;
        }
    }
    for (i, &t) in cache.token_ids.iter().enumerate() {
        let row = grads.embedding.row_mut(t as usize);
        for k in 0..h {
            row[k] += 0.5 * d_contexts[i][k] + 0.5 * dc_sum[k] / n as f64;
        }
    }
}

const PARAMS_MAGIC: &[u8; 4] = b"SLEP";
const PARAMS_VERSION: u32 = 1;

impl EncoderParams {
    /// Versioned binary blob: header (magic, version, |V|, h, seed) then
    /// row-major little-endian doubles in field declaration order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(PARAMS_MAGIC);
        buf.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        buf.extend_from_slice(&(self.hidden as u32).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        for g in ALL_GROUPS {
            for &v in self.group(g) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut header = [0u8; 24];
        file.read_exact(&mut header)
            .map_err(|_| Error::CorruptIndex("encoder params file truncated".into()))?;
        if &header[0..4] != PARAMS_MAGIC {
            return Err(Error::CorruptIndex("bad encoder params magic".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != PARAMS_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: PARAMS_VERSION,
            });
        }
        let vocab_size = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let hidden = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let seed = u64::from_le_bytes(header[16..24].try_into().unwrap());
        let mut params = EncoderParams::init(vocab_size, hidden, 0)?;
        params.seed = seed;
        let mut rest = Vec::new();
        file.read_to_end(&mut rest)?;
        let mut offset = 0;
        for g in ALL_GROUPS {
            let slice = params.group_mut(g);
            let needed = slice.len() * 8;
            if rest.len() < offset + needed {
                return Err(Error::CorruptIndex("encoder params file truncated".into()));
            }
            for v in slice.iter_mut() {
                *v = f64::from_le_bytes(rest[offset..offset + 8].try_into().unwrap());
                offset += 8;
            }
        }
        if offset != rest.len() {
            return Err(Error::CorruptIndex(
                "trailing bytes in encoder params file".into(),
            ));
        }
        Ok(params)
    }
}
