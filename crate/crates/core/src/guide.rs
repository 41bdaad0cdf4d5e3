//! The guiding model: an encoder mapping (prompt, response) to a d-dimensional
//! latent and a decoder reconstructing the response from (prompt, latent).
//! Trained once by reconstruction over gold and generated responses, then
//! frozen; latent distances between gold and generated responses supply the
//! per-instance alignment weights.

use serde::{Deserialize, Serialize};

use crate::corpus::{encode_pair_relaxed, Dataset, GenerationRecord, SpecialTokens, TokenId};
use crate::error::{Error, Result};
use crate::lm::{softmax_stats, LMConfig, TrainHyper, INIT_STD};
use crate::metrics::MetricsSink;
use crate::nn::adam::AdamState;
use crate::nn::mat::{vec_matmul, Mat};
use crate::nn::params::{stack_arrays, stack_arrays_mut, ArrayMut, ArrayRef, ParamContainer};
use crate::nn::transformer::{self, StackWeights};
use crate::rng::{self, Purpose};
use crate::scalar::{r, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuideConfig {
    pub latent_dim: usize,
    pub encoder: LMConfig,
    pub decoder: LMConfig,
}

impl Default for GuideConfig {
    fn default() -> Self {
        let shape = LMConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 128,
            context_len: 256,
            vocab_size: crate::corpus::Tokenizer::VOCAB_SIZE,
        };
        GuideConfig {
            latent_dim: 16,
            encoder: shape,
            decoder: shape,
        }
    }
}

impl GuideConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be >= 1"));
        }
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.vocab_size != self.decoder.vocab_size {
            return Err(Error::config("encoder/decoder vocab mismatch"));
        }
        Ok(())
    }

    pub fn specials(&self) -> SpecialTokens {
        self.encoder.specials()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector<T> {
    pub values: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuideParams<T> {
    pub config: GuideConfig,
    pub enc_wte: Mat<T>,
    pub enc_wpe: Mat<T>,
    pub enc_stack: StackWeights<T>,
    /// Pooling head: d_model × latent_dim.
    pub pool: Mat<T>,
    pub dec_wte: Mat<T>,
    pub dec_wpe: Mat<T>,
    pub dec_stack: StackWeights<T>,
    pub dec_head: Mat<T>,
    /// Latent injection: latent_dim × d_model, one prefix embedding.
    pub inj: Mat<T>,
}

impl<T: Real> GuideParams<T> {
    pub fn init(config: GuideConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Purpose::GuideInit, 0, 0);
        let enc = &config.encoder;
        let dec = &config.decoder;
        Ok(GuideParams {
            enc_wte: Mat::gaussian(enc.vocab_size, enc.d_model, INIT_STD, &mut rng),
            enc_wpe: Mat::gaussian(enc.context_len, enc.d_model, INIT_STD, &mut rng),
            enc_stack: StackWeights::init(enc.dims(), INIT_STD, &mut rng),
            pool: Mat::gaussian(enc.d_model, config.latent_dim, INIT_STD, &mut rng),
            dec_wte: Mat::gaussian(dec.vocab_size, dec.d_model, INIT_STD, &mut rng),
            dec_wpe: Mat::gaussian(dec.context_len, dec.d_model, INIT_STD, &mut rng),
            dec_stack: StackWeights::init(dec.dims(), INIT_STD, &mut rng),
            dec_head: Mat::gaussian(dec.d_model, dec.vocab_size, INIT_STD, &mut rng),
            inj: Mat::gaussian(config.latent_dim, dec.d_model, INIT_STD, &mut rng),
            config,
        })
    }

    pub fn zeros(config: GuideConfig) -> Result<Self> {
        let mut p = Self::init(config, 0)?;
        for a in p.arrays_mut() {
            for v in a.data.iter_mut() {
                *v = T::zero();
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        GuideParams {
            config: self.config,
            enc_wte: self.enc_wte.zeros_like(),
            enc_wpe: self.enc_wpe.zeros_like(),
            enc_stack: self.enc_stack.zeros_like(),
            pool: self.pool.zeros_like(),
            dec_wte: self.dec_wte.zeros_like(),
            dec_wpe: self.dec_wpe.zeros_like(),
            dec_stack: self.dec_stack.zeros_like(),
            dec_head: self.dec_head.zeros_like(),
            inj: self.inj.zeros_like(),
        }
    }

    pub fn cast<U: Real>(&self) -> GuideParams<U> {
        GuideParams {
            config: self.config,
            enc_wte: self.enc_wte.cast(),
            enc_wpe: self.enc_wpe.cast(),
            enc_stack: self.enc_stack.cast(),
            pool: self.pool.cast(),
            dec_wte: self.dec_wte.cast(),
            dec_wpe: self.dec_wpe.cast(),
            dec_stack: self.dec_stack.cast(),
            dec_head: self.dec_head.cast(),
            inj: self.inj.cast(),
        }
    }
}

impl<T: Real> ParamContainer<T> for GuideParams<T> {
    fn arrays(&self) -> Vec<ArrayRef<'_, T>> {
        let mut out = Vec::new();
        for (name, m) in [("enc.wte", &self.enc_wte), ("enc.wpe", &self.enc_wpe)] {
            out.push(ArrayRef {
                name: name.into(),
                shape: vec![m.rows, m.cols],
                data: &m.data,
            });
        }
        stack_arrays("enc.", &self.enc_stack, &mut out);
        out.push(ArrayRef {
            name: "enc.pool".into(),
            shape: vec![self.pool.rows, self.pool.cols],
            data: &self.pool.data,
        });
        for (name, m) in [("dec.wte", &self.dec_wte), ("dec.wpe", &self.dec_wpe)] {
            out.push(ArrayRef {
                name: name.into(),
                shape: vec![m.rows, m.cols],
                data: &m.data,
            });
        }
        stack_arrays("dec.", &self.dec_stack, &mut out);
        out.push(ArrayRef {
            name: "dec.head".into(),
            shape: vec![self.dec_head.rows, self.dec_head.cols],
            data: &self.dec_head.data,
        });
        out.push(ArrayRef {
            name: "dec.inj".into(),
            shape: vec![self.inj.rows, self.inj.cols],
            data: &self.inj.data,
        });
        out
    }

    fn arrays_mut(&mut self) -> Vec<ArrayMut<'_, T>> {
        let mut out = Vec::new();
        for (name, m) in [("enc.wte", &mut self.enc_wte), ("enc.wpe", &mut self.enc_wpe)] {
            out.push(ArrayMut {
                name: name.into(),
                shape: vec![m.rows, m.cols],
                data: &mut m.data,
            });
        }
        stack_arrays_mut("enc.", &mut self.enc_stack, &mut out);
        out.push(ArrayMut {
            name: "enc.pool".into(),
            shape: vec![self.pool.rows, self.pool.cols],
            data: &mut self.pool.data,
        });
        for (name, m) in [("dec.wte", &mut self.dec_wte), ("dec.wpe", &mut self.dec_wpe)] {
            out.push(ArrayMut {
                name: name.into(),
                shape: vec![m.rows, m.cols],
                data: &mut m.data,
            });
        }
        stack_arrays_mut("dec.", &mut self.dec_stack, &mut out);
        out.push(ArrayMut {
            name: "dec.head".into(),
            shape: vec![self.dec_head.rows, self.dec_head.cols],
            data: &mut self.dec_head.data,
        });
        out.push(ArrayMut {
            name: "dec.inj".into(),
            shape: vec![self.inj.rows, self.inj.cols],
            data: &mut self.inj.data,
        });
        out
    }
}

fn truncate_at_eos<'a>(y: &'a [TokenId], sp: &SpecialTokens) -> &'a [TokenId] {
    match y.iter().position(|&t| t == sp.eos) {
        Some(i) => &y[..i],
        None => y,
    }
}

struct EncoderPass<T> {
    cache: transformer::StackCache<T>,
    tokens: Vec<TokenId>,
    response_range: std::ops::Range<usize>,
    pooled: Vec<T>,
    latent: Vec<T>,
}

fn encoder_forward<T: Real>(
    guide: &GuideParams<T>,
    x: &[TokenId],
    y: &[TokenId],
) -> Result<EncoderPass<T>> {
    let cfg = &guide.config.encoder;
    let sp = guide.config.specials();
    let body = truncate_at_eos(y, &sp);
    let enc = encode_pair_relaxed(x, body, sp, cfg.context_len)?;
    let d = cfg.d_model;
    let mut emb = Mat::zeros(enc.tokens.len(), d);
    for (t, &tok) in enc.tokens.iter().enumerate() {
        let te = guide.enc_wte.row(tok as usize);
        let pe = guide.enc_wpe.row(t);
        for ((o, &a), &b) in emb.row_mut(t).iter_mut().zip(te.iter()).zip(pe.iter()) {
            *o = a + b;
        }
    }
    let cache = transformer::forward(&guide.enc_stack, emb);
    let range = enc.response_range();
    let count = r::<T>(range.len() as f64);
    let mut pooled = vec![T::zero(); d];
    for t in range.clone() {
        for (p, &h) in pooled.iter_mut().zip(cache.hidden.row(t).iter()) {
            *p = *p + h;
        }
    }
    for p in pooled.iter_mut() {
        *p = *p / count;
    }
    let latent = vec_matmul(&pooled, &guide.pool);
    Ok(EncoderPass {
        cache,
        tokens: enc.tokens,
        response_range: range,
        pooled,
        latent,
    })
}

/// h = φ(x, y): mean-pooled final hidden states over the response positions,
/// projected to the latent dimension.
pub fn encode<T: Real>(guide: &GuideParams<T>, x: &[TokenId], y: &[TokenId]) -> Result<LatentVector<T>> {
    Ok(LatentVector {
        values: encoder_forward(guide, x, y)?.latent,
    })
}

struct DecoderLayout {
    tokens: Vec<TokenId>,
    /// Index of the latent prefix slot.
    latent_pos: usize,
    /// Targets (y_1..y_m, EOS) paired with the positions that predict them.
    targets: Vec<(usize, TokenId)>,
}

fn decoder_layout<T: Real>(
    guide: &GuideParams<T>,
    x: &[TokenId],
    y: &[TokenId],
) -> Result<DecoderLayout> {
    let cfg = &guide.config.decoder;
    let sp = guide.config.specials();
    let body = truncate_at_eos(y, &sp);
    let len = x.len() + body.len() + 3;
    if len > cfg.context_len {
        return Err(Error::Length {
            len,
            max: cfg.context_len,
        });
    }
    // [BOS] x [SEP] <latent> y_1..y_m ; position of y_j predicts y_{j+1},
    // the latent slot predicts y_1, the last position predicts EOS.
    let mut tokens = Vec::with_capacity(len);
    tokens.push(sp.bos);
    tokens.extend_from_slice(x);
    tokens.push(sp.sep);
    let latent_pos = tokens.len();
    tokens.push(sp.pad); // placeholder id; the embedding row is the injected latent
    tokens.extend_from_slice(body);

    let mut targets = Vec::with_capacity(body.len() + 1);
    for (j, &tok) in body.iter().enumerate() {
        targets.push((latent_pos + j, tok));
    }
    targets.push((latent_pos + body.len(), sp.eos));
    Ok(DecoderLayout {
        tokens,
        latent_pos,
        targets,
    })
}

fn decoder_embed<T: Real>(guide: &GuideParams<T>, layout: &DecoderLayout, h: &[T]) -> Mat<T> {
    let d = guide.config.decoder.d_model;
    let mut emb = Mat::zeros(layout.tokens.len(), d);
    for (t, &tok) in layout.tokens.iter().enumerate() {
        let pe = guide.dec_wpe.row(t);
        let row = emb.row_mut(t);
        if t == layout.latent_pos {
            let injected = vec_matmul(h, &guide.inj);
            for ((o, &a), &b) in row.iter_mut().zip(injected.iter()).zip(pe.iter()) {
                *o = a + b;
            }
        } else {
            let te = guide.dec_wte.row(tok as usize);
            for ((o, &a), &b) in row.iter_mut().zip(te.iter()).zip(pe.iter()) {
                *o = a + b;
            }
        }
    }
    emb
}

/// log p_ψ(y | x, h): autoregressive over the response positions with the
/// latent injected as one learned prefix embedding.
pub fn decode_log_prob<T: Real>(
    guide: &GuideParams<T>,
    x: &[TokenId],
    h: &LatentVector<T>,
    y: &[TokenId],
) -> Result<f64> {
    if h.values.len() != guide.config.latent_dim {
        return Err(Error::config(format!(
            "latent has {} dims, expected {}",
            h.values.len(),
            guide.config.latent_dim
        )));
    }
    let layout = decoder_layout(guide, x, y)?;
    let emb = decoder_embed(guide, &layout, &h.values);
    let cache = transformer::forward(&guide.dec_stack, emb);
    let mut lp = 0.0;
    for &(pos, target) in &layout.targets {
        let logits = vec_matmul(cache.hidden.row(pos), &guide.dec_head);
        let (_, lse) = softmax_stats(&logits);
        lp += logits[target as usize].to_f64_c() - lse;
    }
    Ok(lp)
}

/// One reconstruction term's backward pass: accumulates decoder + injection
/// gradients and returns (log-prob, gradient wrt the latent vector).
fn decode_backward<T: Real>(
    guide: &GuideParams<T>,
    x: &[TokenId],
    h: &[T],
    y: &[TokenId],
    coeff: f64,
    grads: &mut GuideParams<T>,
) -> Result<(f64, Vec<T>)> {
    let layout = decoder_layout(guide, x, y)?;
    let emb = decoder_embed(guide, &layout, h);
    let cache = transformer::forward(&guide.dec_stack, emb);
    let d = guide.config.decoder.d_model;
    let seq = layout.tokens.len();

    let mut lp = 0.0;
    let mut d_hidden = Mat::zeros(seq, d);
    for &(pos, target) in &layout.targets {
        let logits = vec_matmul(cache.hidden.row(pos), &guide.dec_head);
        let (probs, lse) = softmax_stats(&logits);
        lp += logits[target as usize].to_f64_c() - lse;
        let mut d_logits: Vec<T> = probs.iter().map(|&p| r::<T>(coeff * p)).collect();
        d_logits[target as usize] = d_logits[target as usize] - r::<T>(coeff);
        let hrow = cache.hidden.row(pos);
        for (k, &hv) in hrow.iter().enumerate() {
            let grow = grads.dec_head.row_mut(k);
            for (g, &dl) in grow.iter_mut().zip(d_logits.iter()) {
                *g = *g + hv * dl;
            }
        }
        let dh = d_hidden.row_mut(pos);
        for (k, dv) in dh.iter_mut().enumerate() {
            let wrow = guide.dec_head.row(k);
            let mut acc = T::zero();
            for (&dl, &w) in d_logits.iter().zip(wrow.iter()) {
                acc = acc + dl * w;
            }
            *dv = *dv + acc;
        }
    }

    let d_emb = transformer::backward(&guide.dec_stack, &cache, &d_hidden, &mut grads.dec_stack);
    let mut d_latent = vec![T::zero(); guide.config.latent_dim];
    for (t, &tok) in layout.tokens.iter().enumerate() {
        let src = d_emb.row(t);
        if t == layout.latent_pos {
            // e_slot = h · inj  =>  d_inj += h ⊗ d_slot, d_h = inj · d_slot
            for (k, &hk) in h.iter().enumerate() {
                let irow = grads.inj.row_mut(k);
                for (g, &v) in irow.iter_mut().zip(src.iter()) {
                    *g = *g + hk * v;
                }
                d_latent[k] = d_latent[k] + crate::nn::mat::dot(guide.inj.row(k), src);
            }
        } else {
            let wte_row = grads.dec_wte.row_mut(tok as usize);
            for (g, &v) in wte_row.iter_mut().zip(src.iter()) {
                *g = *g + v;
            }
        }
        let wpe_row = grads.dec_wpe.row_mut(t);
        for (g, &v) in wpe_row.iter_mut().zip(src.iter()) {
            *g = *g + v;
        }
    }
    Ok((lp, d_latent))
}

/// Backward through the encoder given a gradient on the latent vector.
fn encoder_backward<T: Real>(
    guide: &GuideParams<T>,
    pass: &EncoderPass<T>,
    d_latent: &[T],
    grads: &mut GuideParams<T>,
) {
    let d = guide.config.encoder.d_model;
    // latent = pooled · pool
    for (c, &pv) in pass.pooled.iter().enumerate() {
        let prow = grads.pool.row_mut(c);
        for (g, &dl) in prow.iter_mut().zip(d_latent.iter()) {
            *g = *g + pv * dl;
        }
    }
    let mut d_pooled = vec![T::zero(); d];
    for (c, dp) in d_pooled.iter_mut().enumerate() {
        *dp = crate::nn::mat::dot(guide.pool.row(c), d_latent);
    }
    let count = r::<T>(pass.response_range.len() as f64);
    let mut d_hidden = Mat::zeros(pass.tokens.len(), d);
    for t in pass.response_range.clone() {
        for (dh, &dp) in d_hidden.row_mut(t).iter_mut().zip(d_pooled.iter()) {
            *dh = dp / count;
        }
    }
    let d_emb = transformer::backward(&guide.enc_stack, &pass.cache, &d_hidden, &mut grads.enc_stack);
    for (t, &tok) in pass.tokens.iter().enumerate() {
        let src = d_emb.row(t);
        let wte_row = grads.enc_wte.row_mut(tok as usize);
        for (g, &v) in wte_row.iter_mut().zip(src.iter()) {
            *g = *g + v;
        }
        let wpe_row = grads.enc_wpe.row_mut(t);
        for (g, &v) in wpe_row.iter_mut().zip(src.iter()) {
            *g = *g + v;
        }
    }
}

/// One guide training example: a prompt with its gold and generated responses
/// (bodies, no terminal EOS required).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuideExample {
    pub prompt: Vec<TokenId>,
    pub gold: Vec<TokenId>,
    pub generated: Vec<TokenId>,
}

/// Reconstruction loss: mean over the batch of
/// −[log p(y | x, φ(x,y)) + log p(y′ | x, φ(x,y′))].
pub fn guide_loss<T: Real>(guide: &GuideParams<T>, batch: &[GuideExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let mut total = 0.0;
    for ex in batch {
        for y in [&ex.gold, &ex.generated] {
            let h = encode(guide, &ex.prompt, y)?;
            total -= decode_log_prob(guide, &ex.prompt, &h, y)?;
        }
    }
    Ok(total / batch.len() as f64)
}

/// Reconstruction loss plus its gradient (through both decoder and encoder).
pub fn guide_grad<T: Real>(
    guide: &GuideParams<T>,
    batch: &[GuideExample],
) -> Result<(f64, GuideParams<T>)> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let coeff = 1.0 / batch.len() as f64;
    let mut grads = guide.zeros_like();
    let mut total = 0.0;
    for ex in batch {
        for y in [&ex.gold, &ex.generated] {
            let pass = encoder_forward(guide, &ex.prompt, y)?;
            let (lp, d_latent) =
                decode_backward(guide, &ex.prompt, &pass.latent, y, coeff, &mut grads)?;
            encoder_backward(guide, &pass, &d_latent, &mut grads);
            total -= lp;
        }
    }
    Ok((total / batch.len() as f64, grads))
}

/// Assemble training examples by joining a dataset with its generation records.
pub fn build_examples(dataset: &Dataset, generations: &[GenerationRecord]) -> Result<Vec<GuideExample>> {
    if generations.len() != dataset.len() {
        return Err(Error::config(format!(
            "need one generation per pair: {} generations for {} pairs",
            generations.len(),
            dataset.len()
        )));
    }
    let mut examples = Vec::with_capacity(dataset.len());
    for (i, pair) in dataset.pairs.iter().enumerate() {
        let rec = generations
            .iter()
            .find(|g| g.pair_index == i)
            .ok_or_else(|| Error::config(format!("missing generation for pair {i}")))?;
        examples.push(GuideExample {
            prompt: pair.prompt_tokens.clone(),
            gold: pair.response_body().to_vec(),
            generated: rec.body().to_vec(),
        });
    }
    Ok(examples)
}

/// Reconstruction training. The guide is trained once, before the alignment
/// loop, on generations from the initial fine-tuned model, and frozen after.
pub fn train_guide<T: Real>(
    guide: &GuideParams<T>,
    dataset: &Dataset,
    generations: &[GenerationRecord],
    hyper: &TrainHyper,
    sink: &mut dyn MetricsSink,
) -> Result<GuideParams<T>> {
    let examples = build_examples(dataset, generations)?;
    if hyper.batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let mut current = guide.clone();
    if hyper.steps == 0 {
        return Ok(current);
    }
    let mut adam = AdamState::new(&current);
    let mut rng = rng::stream(hyper.seed, Purpose::GuideBatch, 0, 0);
    let mut step = 0;
    'outer: loop {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<GuideExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grads) = guide_grad(&current, &batch)?;
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

/// Euclidean distance between two latent vectors (f64 accumulation).
pub fn latent_distance_between<T: Real>(a: &LatentVector<T>, b: &LatentVector<T>) -> f64 {
    debug_assert_eq!(a.values.len(), b.values.len());
    a.values
        .iter()
        .zip(b.values.iter())
        .map(|(&x, &y)| {
            let d = x.to_f64_c() - y.to_f64_c();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// s_φ(x, y, y′) = ‖φ(x,y) − φ(x,y′)‖₂
pub fn latent_distance<T: Real>(
    guide: &GuideParams<T>,
    x: &[TokenId],
    y: &[TokenId],
    y_alt: &[TokenId],
) -> Result<f64> {
    let h1 = encode(guide, x, y)?;
    let h2 = encode(guide, x, y_alt)?;
    Ok(latent_distance_between(&h1, &h2))
}

/// S_φ: arithmetic mean of a cohort's distances. All-zero cohorts are an
/// error: the policy already coincides with the gold data in latent space
/// and the normalized weights s/S would be undefined.
pub fn distance_expectation(distances: &[f64]) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::config("empty distance cohort"));
    }
    if let Some(&bad) = distances.iter().find(|d| !d.is_finite() || **d < 0.0) {
        return Err(Error::config(format!("invalid distance {bad}")));
    }
    let mean = distances.iter().sum::<f64>() / distances.len() as f64;
    if mean == 0.0 {
        return Err(Error::DegenerateCohort(distances.len()));
    }
    Ok(mean)
}

/// One row of the per-iteration distance log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRecord {
    pub iteration: usize,
    pub pair_index: usize,
    pub s: f64,
    pub weight: f64,
}

impl crate::metrics::CsvRecord for DistanceRecord {
    fn headers() -> &'static [&'static str] {
        &["iteration", "pair_index", "s", "weight"]
    }
}

/// Compute per-pair distances and their normalized weights (mean weight 1).
pub fn distance_records<T: Real>(
    guide: &GuideParams<T>,
    dataset: &Dataset,
    generations: &[GenerationRecord],
    iteration: usize,
) -> Result<Vec<DistanceRecord>> {
    let examples = build_examples(dataset, generations)?;
    let distances: Vec<f64> = examples
        .iter()
        .map(|ex| latent_distance(guide, &ex.prompt, &ex.gold, &ex.generated))
        .collect::<Result<_>>()?;
    let expectation = distance_expectation(&distances)?;
    Ok(distances
        .into_iter()
        .enumerate()
        .map(|(i, s)| DistanceRecord {
            iteration,
            pair_index: i,
            s,
            weight: s / expectation,
        })
        .collect())
}
