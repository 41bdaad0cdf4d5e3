//! The policy language model: a small decoder-only transformer with exact
//! conditional log-probabilities over response positions, SFT training, and
//! seeded autoregressive sampling.
//!
//! Scalar losses are accumulated in f64 regardless of the parameter dtype;
//! verification harnesses instantiate the whole model in f64.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode_pair_relaxed, Dataset, EncodedPair, PromptResponsePair, SpecialTokens, TokenId};
use crate::error::{Error, Result};
use crate::metrics::MetricsSink;
use crate::nn::adam::AdamState;
use crate::nn::mat::{vec_matmul, Mat};
use crate::nn::params::{stack_arrays, stack_arrays_mut, ArrayMut, ArrayRef, ParamContainer};
use crate::nn::transformer::{self, Dims, IncrementalState, StackWeights};
use crate::rng::{self, Purpose};
use crate::scalar::{r, Real};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LMConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub context_len: usize,
    pub vocab_size: usize,
}

impl Default for LMConfig {
    fn default() -> Self {
        LMConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            context_len: 256,
            vocab_size: crate::corpus::Tokenizer::VOCAB_SIZE,
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return Err(Error::config("layers, heads, and d_model must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 5 {
            return Err(Error::config("vocab must hold 4 specials plus a symbol"));
        }
        if self.context_len < 5 {
            return Err(Error::config("context window too small"));
        }
        Ok(())
    }

    /// Check that every pair of `dataset` fits the context window.
    pub fn validate_for_dataset(&self, dataset: &Dataset) -> Result<()> {
        for pair in &dataset.pairs {
            let len = pair.prompt_tokens.len() + pair.response_tokens.len() + 2;
            if len > self.context_len {
                return Err(Error::Length {
                    len,
                    max: self.context_len,
                });
            }
        }
        Ok(())
    }

    pub fn specials(&self) -> SpecialTokens {
        SpecialTokens::for_vocab(self.vocab_size)
    }

    pub fn dims(&self) -> Dims {
        Dims {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            context_len: self.context_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParams<T> {
    pub config: LMConfig,
    pub wte: Mat<T>,
    pub wpe: Mat<T>,
    pub stack: StackWeights<T>,
    pub head: Mat<T>,
}

impl<T: Real> LmParams<T> {
    pub fn init(config: LMConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Purpose::LmInit, 0, 0);
        let d = config.d_model;
        Ok(LmParams {
            wte: Mat::gaussian(config.vocab_size, d, INIT_STD, &mut rng),
            wpe: Mat::gaussian(config.context_len, d, INIT_STD, &mut rng),
            stack: StackWeights::init(config.dims(), INIT_STD, &mut rng),
            head: Mat::gaussian(d, config.vocab_size, INIT_STD, &mut rng),
            config,
        })
    }

    pub fn zeros(config: LMConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(LmParams {
            wte: Mat::zeros(config.vocab_size, d),
            wpe: Mat::zeros(config.context_len, d),
            stack: StackWeights::init(config.dims(), 0.0, &mut rng::stream(0, Purpose::LmInit, 0, 0)),
            head: Mat::zeros(d, config.vocab_size),
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        LmParams {
            config: self.config,
            wte: self.wte.zeros_like(),
            wpe: self.wpe.zeros_like(),
            stack: self.stack.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn cast<U: Real>(&self) -> LmParams<U> {
        LmParams {
            config: self.config,
            wte: self.wte.cast(),
            wpe: self.wpe.cast(),
            stack: self.stack.cast(),
            head: self.head.cast(),
        }
    }

    fn embed(&self, tokens: &[TokenId]) -> Result<Mat<T>> {
        if tokens.len() > self.config.context_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.config.context_len,
            });
        }
        let d = self.config.d_model;
        let mut emb = Mat::zeros(tokens.len(), d);
        for (t, &tok) in tokens.iter().enumerate() {
            debug_assert!((tok as usize) < self.config.vocab_size);
            let te = self.wte.row(tok as usize);
            let pe = self.wpe.row(t);
            let row = emb.row_mut(t);
            for ((o, &a), &b) in row.iter_mut().zip(te.iter()).zip(pe.iter()) {
                *o = a + b;
            }
        }
        Ok(emb)
    }
}

impl<T: Real> ParamContainer<T> for LmParams<T> {
    fn arrays(&self) -> Vec<ArrayRef<'_, T>> {
        let mut out = Vec::new();
        out.push(ArrayRef {
            name: "wte".into(),
            shape: vec![self.wte.rows, self.wte.cols],
            data: &self.wte.data,
        });
        out.push(ArrayRef {
            name: "wpe".into(),
            shape: vec![self.wpe.rows, self.wpe.cols],
            data: &self.wpe.data,
        });
        stack_arrays("", &self.stack, &mut out);
        out.push(ArrayRef {
            name: "head".into(),
            shape: vec![self.head.rows, self.head.cols],
            data: &self.head.data,
        });
        out
    }

    fn arrays_mut(&mut self) -> Vec<ArrayMut<'_, T>> {
        let mut out = Vec::new();
        out.push(ArrayMut {
            name: "wte".into(),
            shape: vec![self.wte.rows, self.wte.cols],
            data: &mut self.wte.data,
        });
        out.push(ArrayMut {
            name: "wpe".into(),
            shape: vec![self.wpe.rows, self.wpe.cols],
            data: &mut self.wpe.data,
        });
        stack_arrays_mut("", &mut self.stack, &mut out);
        out.push(ArrayMut {
            name: "head".into(),
            shape: vec![self.head.rows, self.head.cols],
            data: &mut self.head.data,
        });
        out
    }
}

/// Stable log-sum-exp and f64 softmax probabilities for one logits row.
pub(crate) fn softmax_stats<T: Real>(logits: &[T]) -> (Vec<f64>, f64) {
    let mut max = f64::NEG_INFINITY;
    for &l in logits {
        max = max.max(l.to_f64_c());
    }
    let mut sum = 0.0;
    let mut probs: Vec<f64> = logits
        .iter()
        .map(|&l| {
            let e = (l.to_f64_c() - max).exp();
            sum += e;
            e
        })
        .collect();
    for p in probs.iter_mut() {
        *p /= sum;
    }
    (probs, max + sum.ln())
}

/// Per-position logits for a raw token sequence.
pub fn forward_logits<T: Real>(params: &LmParams<T>, tokens: &[TokenId]) -> Result<Mat<T>> {
    let emb = params.embed(tokens)?;
    let cache = transformer::forward(&params.stack, emb);
    let mut logits = Mat::zeros(tokens.len(), params.config.vocab_size);
    crate::nn::mat::matmul_acc(&mut logits, &cache.hidden, &params.head);
    Ok(logits)
}

/// Truncate a response at its first EOS so trailing PAD/EOS noise cannot
/// affect the score; the terminal EOS is appended by the encoder layout.
fn response_effective<'a, T: Real>(params: &LmParams<T>, y: &'a [TokenId]) -> &'a [TokenId] {
    let eos = params.config.specials().eos;
    match y.iter().position(|&t| t == eos) {
        Some(i) => &y[..i],
        None => y,
    }
}

pub(crate) fn encode_for_scoring<T: Real>(
    params: &LmParams<T>,
    x: &[TokenId],
    y: &[TokenId],
) -> Result<EncodedPair> {
    let body = response_effective(params, y);
    encode_pair_relaxed(x, body, params.config.specials(), params.config.context_len)
}

/// Σ_j log p(y_j | x, y_<j) over the response positions (y plus EOS).
pub fn conditional_log_prob<T: Real>(
    params: &LmParams<T>,
    x: &[TokenId],
    y: &[TokenId],
) -> Result<f64> {
    let enc = encode_for_scoring(params, x, y)?;
    Ok(scored_forward(params, &enc))
}

/// Forward-only response log-probability of an encoded pair.
pub(crate) fn scored_forward<T: Real>(params: &LmParams<T>, enc: &EncodedPair) -> f64 {
    let emb = params.embed(&enc.tokens).expect("length checked by encoder");
    let cache = transformer::forward(&params.stack, emb);
    let mut lp = 0.0;
    for t in enc.response_range() {
        let logits = vec_matmul(cache.hidden.row(t - 1), &params.head);
        let (_, lse) = softmax_stats(&logits);
        lp += logits[enc.tokens[t] as usize].to_f64_c() - lse;
    }
    lp
}

/// Response log-probability plus gradient accumulation.
///
/// Accumulates `coeff · (softmax − onehot)` at each prediction position —
/// the gradient of `coeff · (−log p)` — into `grads`. A `coeff` of exactly
/// zero skips the backward pass, so zero-weight pairs contribute nothing.
pub(crate) fn scored_backward<T: Real>(
    params: &LmParams<T>,
    enc: &EncodedPair,
    coeff: f64,
    grads: &mut LmParams<T>,
) -> f64 {
    let emb = params.embed(&enc.tokens).expect("length checked by encoder");
    let cache = transformer::forward(&params.stack, emb);
    let seq = enc.tokens.len();
    let d = params.config.d_model;

    let mut lp = 0.0;
    let mut d_hidden = Mat::zeros(seq, d);
    let run_backward = coeff != 0.0;
    for t in enc.response_range() {
        let pos = t - 1;
        let logits = vec_matmul(cache.hidden.row(pos), &params.head);
        let (probs, lse) = softmax_stats(&logits);
        let target = enc.tokens[t] as usize;
        lp += logits[target].to_f64_c() - lse;
        if !run_backward {
            continue;
        }
        let mut d_logits: Vec<T> = probs.iter().map(|&p| r::<T>(coeff * p)).collect();
        d_logits[target] = d_logits[target] - r::<T>(coeff);
        // head grad and hidden grad for this position
        let hrow = cache.hidden.row(pos);
        for (k, &h) in hrow.iter().enumerate() {
            let grow = grads.head.row_mut(k);
            for (g, &dl) in grow.iter_mut().zip(d_logits.iter()) {
                *g = *g + h * dl;
            }
        }
        let dh = d_hidden.row_mut(pos);
        for (k, dv) in dh.iter_mut().enumerate() {
            let wrow = params.head.row(k);
            let mut acc = T::zero();
            for (&dl, &w) in d_logits.iter().zip(wrow.iter()) {
                acc = acc + dl * w;
            }
            *dv = *dv + acc;
        }
    }

    if run_backward {
        let d_emb = transformer::backward(&params.stack, &cache, &d_hidden, &mut grads.stack);
        for (t, &tok) in enc.tokens.iter().enumerate() {
            let src = d_emb.row(t);
            let wte_row = grads.wte.row_mut(tok as usize);
            for (g, &v) in wte_row.iter_mut().zip(src.iter()) {
                *g = *g + v;
            }
            let wpe_row = grads.wpe.row_mut(t);
            for (g, &v) in wpe_row.iter_mut().zip(src.iter()) {
                *g = *g + v;
            }
        }
    }
    lp
}

/// Mean negative conditional log-probability over a batch.
pub fn sft_loss<T: Real>(params: &LmParams<T>, batch: &[PromptResponsePair]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let mut total = 0.0;
    for pair in batch {
        total -= conditional_log_prob(params, &pair.prompt_tokens, pair.response_body())?;
    }
    Ok(total / batch.len() as f64)
}

/// SFT loss plus its gradient.
pub fn sft_grad<T: Real>(
    params: &LmParams<T>,
    batch: &[PromptResponsePair],
) -> Result<(f64, LmParams<T>)> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let mut grads = params.zeros_like();
    let coeff = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for pair in batch {
        let enc = encode_for_scoring(params, &pair.prompt_tokens, pair.response_body())?;
        total -= scored_backward(params, &enc, coeff, &mut grads);
    }
    Ok((total / batch.len() as f64, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 3e-4,
            steps: 500,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Adam training on shuffled minibatch epochs. Deterministic for a given
/// (params, dataset, hyper); `steps == 0` returns the input unchanged.
pub fn train_sft<T: Real>(
    params: &LmParams<T>,
    dataset: &Dataset,
    hyper: &TrainHyper,
    sink: &mut dyn MetricsSink,
) -> Result<LmParams<T>> {
    params.config.validate_for_dataset(dataset)?;
    if hyper.batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let mut current = params.clone();
    if hyper.steps == 0 {
        return Ok(current);
    }
    let mut adam = AdamState::new(&current);
    let mut rng = rng::stream(hyper.seed, Purpose::SftBatch, 0, 0);
    let mut step = 0;
    'outer: loop {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<PromptResponsePair> =
                chunk.iter().map(|&i| dataset.pairs[i].clone()).collect();
            let (loss, grads) = sft_grad(&current, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, loss });
            }
            adam.step(&mut current, &grads, hyper.lr);
            sink.record(step, loss);
            step += 1;
            if step >= hyper.steps {
                break 'outer;
            }
        }
    }
    Ok(current)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// 0 means greedy decoding with lowest-token-id tie-break.
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            temperature: 1.0,
            max_new_tokens: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleOutput {
    /// Sampled response body (terminal EOS not included).
    pub tokens: Vec<TokenId>,
    /// True when the length cap stopped generation before EOS.
    pub truncated: bool,
}

/// Autoregressive sampling from softmax(logits / temperature).
pub fn sample_response<T: Real>(
    params: &LmParams<T>,
    x: &[TokenId],
    decode: &DecodeConfig,
) -> Result<SampleOutput> {
    if decode.temperature < 0.0 {
        return Err(Error::config(format!(
            "temperature must be >= 0, got {}",
            decode.temperature
        )));
    }
    if decode.max_new_tokens == 0 {
        return Err(Error::config("max_new_tokens must be >= 1"));
    }
    let sp = params.config.specials();
    let prefix_len = x.len() + 2; // BOS x SEP
    if prefix_len >= params.config.context_len {
        return Err(Error::Length {
            len: prefix_len + 1,
            max: params.config.context_len,
        });
    }
    let budget = decode
        .max_new_tokens
        .min(params.config.context_len - prefix_len);

    let mut prefix = Vec::with_capacity(prefix_len);
    prefix.push(sp.bos);
    prefix.extend_from_slice(x);
    prefix.push(sp.sep);

    let mut state = IncrementalState::new(&params.stack);
    let mut hidden = Vec::new();
    for (t, &tok) in prefix.iter().enumerate() {
        let emb = token_embedding(params, tok, t);
        hidden = state.step(&params.stack, &emb);
    }

    let mut rng = rng::stream(decode.seed, Purpose::Generation, 0, 0);
    let mut out = Vec::new();
    loop {
        let logits = vec_matmul(&hidden, &params.head);
        let next = if decode.temperature == 0.0 {
            argmax_lowest_id(&logits)
        } else {
            sample_categorical(&logits, decode.temperature, &mut rng)
        };
        if next == sp.eos {
            return Ok(SampleOutput {
                tokens: out,
                truncated: false,
            });
        }
        out.push(next);
        if out.len() >= budget {
            return Ok(SampleOutput {
                tokens: out,
                truncated: true,
            });
        }
        let pos = prefix.len() + out.len() - 1;
        let emb = token_embedding(params, next, pos);
        hidden = state.step(&params.stack, &emb);
    }
}

fn token_embedding<T: Real>(params: &LmParams<T>, tok: TokenId, pos: usize) -> Vec<T> {
    params
        .wte
        .row(tok as usize)
        .iter()
        .zip(params.wpe.row(pos).iter())
        .map(|(&a, &b)| a + b)
        .collect()
}

fn argmax_lowest_id<T: Real>(logits: &[T]) -> TokenId {
    let mut best = 0usize;
    let mut best_v = logits[0].to_f64_c();
    for (i, &l) in logits.iter().enumerate().skip(1) {
        let v = l.to_f64_c();
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best as TokenId
}

fn sample_categorical<T: Real>(
    logits: &[T],
    temperature: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> TokenId {
    let mut max = f64::NEG_INFINITY;
    for &l in logits {
        max = max.max(l.to_f64_c() / temperature);
    }
    let weights: Vec<f64> = logits
        .iter()
        .map(|&l| (l.to_f64_c() / temperature - max).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut dart = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        dart -= w;
        if dart <= 0.0 {
            return i as TokenId;
        }
    }
    (weights.len() - 1) as TokenId
}

/// Generate one response per dataset pair with per-pair derived streams, so
/// results do not depend on traversal order. `iteration` labels the records
/// with the generating policy's index; `stream_tag` distinguishes sampling
/// events (two cohorts drawn from the same policy stay independent).
pub fn generate_for_dataset<T: Real>(
    params: &LmParams<T>,
    dataset: &Dataset,
    decode: &DecodeConfig,
    iteration: usize,
    stream_tag: u64,
) -> Result<Vec<crate::corpus::GenerationRecord>> {
    let mut records = Vec::with_capacity(dataset.len());
    for (i, pair) in dataset.pairs.iter().enumerate() {
        let seed = rng::derive_seed(decode.seed, Purpose::Generation, i as u64, stream_tag);
        let per_pair = DecodeConfig {
            seed,
            ..decode.clone()
        };
        let sample = sample_response(params, &pair.prompt_tokens, &per_pair)?;
        let mut generated = sample.tokens;
        if !sample.truncated {
            generated.push(params.config.specials().eos);
        }
        records.push(crate::corpus::GenerationRecord {
            pair_index: i,
            generated,
            iteration,
            seed,
            truncated: sample.truncated,
        });
    }
    Ok(records)
}
