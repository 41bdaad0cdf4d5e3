//! Decoder-only transformer stack: pre-norm blocks (causal multi-head
//! attention + squared-ReLU MLP), RMSNorm without learnable scale, and a
//! final RMSNorm. Embeddings and output heads live with the callers; the
//! stack maps input embeddings to final hidden states and backpropagates
//! arbitrary hidden-state gradients, which is what both the language model
//! (logits head) and the guide encoder (pooling head) need.

use crate::nn::mat::{dot, matmul_acc, matmul_dw, matmul_dx, Mat};
use crate::scalar::{r, Real};

const RMS_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub context_len: usize,
}

impl Dims {
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub wq: Mat<T>,
    pub wk: Mat<T>,
    pub wv: Mat<T>,
    pub wo: Mat<T>,
    pub w1: Mat<T>,
    pub w2: Mat<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackWeights<T> {
    pub dims: Dims,
    pub blocks: Vec<BlockWeights<T>>,
}

impl<T: Real> StackWeights<T> {
    /// Gaussian init for inputs of each sublayer, zero init for the residual
    /// write-back projections (wo, w2).
    pub fn init(dims: Dims, std: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let d = dims.d_model;
        let f = dims.d_ff();
        let blocks = (0..dims.n_layers)
            .map(|_| BlockWeights {
                wq: Mat::gaussian(d, d, std, rng),
                wk: Mat::gaussian(d, d, std, rng),
                wv: Mat::gaussian(d, d, std, rng),
                wo: Mat::zeros(d, d),
                w1: Mat::gaussian(d, f, std, rng),
                w2: Mat::zeros(f, d),
            })
            .collect();
        StackWeights { dims, blocks }
    }

    pub fn zeros_like(&self) -> Self {
        StackWeights {
            dims: self.dims,
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    wq: b.wq.zeros_like(),
                    wk: b.wk.zeros_like(),
                    wv: b.wv.zeros_like(),
                    wo: b.wo.zeros_like(),
                    w1: b.w1.zeros_like(),
                    w2: b.w2.zeros_like(),
                })
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> StackWeights<U> {
        StackWeights {
            dims: self.dims,
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    wq: b.wq.cast(),
                    wk: b.wk.cast(),
                    wv: b.wv.cast(),
                    wo: b.wo.cast(),
                    w1: b.w1.cast(),
                    w2: b.w2.cast(),
                })
                .collect(),
        }
    }
}

/// rmsnorm over one row; returns the inverse rms so backward can reuse it.
fn rmsnorm_row<T: Real>(x: &[T], out: &mut [T]) -> T {
    let d = x.len();
    let ms = dot(x, x).to_f64_c() / d as f64;
    let inv = r::<T>(1.0 / (ms + RMS_EPS).sqrt());
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = v * inv;
    }
    inv
}

/// dx += inv·dy − (inv³/d)·(dy·x)·x
fn rmsnorm_backward_row<T: Real>(dy: &[T], x: &[T], inv: T, dx: &mut [T]) {
    let d = x.len();
    let g = dot(dy, x);
    let coef = inv * inv * inv * g / r::<T>(d as f64);
    for ((d_out, &dy_v), &x_v) in dx.iter_mut().zip(dy.iter()).zip(x.iter()) {
        *d_out = *d_out + inv * dy_v - coef * x_v;
    }
}

fn rmsnorm_mat<T: Real>(x: &Mat<T>) -> (Mat<T>, Vec<T>) {
    let mut out = x.zeros_like();
    let mut invs = Vec::with_capacity(x.rows);
    for t in 0..x.rows {
        let inv = rmsnorm_row(x.row(t), out.row_mut(t));
        invs.push(inv);
    }
    (out, invs)
}

pub struct BlockCache<T> {
    x_pre_attn: Mat<T>,
    a_norm: Mat<T>,
    inv_a: Vec<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    /// Per head, row t holds softmax weights over positions 0..=t.
    aw: Vec<Mat<T>>,
    ctx: Mat<T>,
    x_post_attn: Mat<T>,
    b_norm: Mat<T>,
    inv_b: Vec<T>,
    h1: Mat<T>,
    act: Mat<T>,
}

pub struct StackCache<T> {
    pub blocks: Vec<BlockCache<T>>,
    pub pre_final: Mat<T>,
    pub final_inv: Vec<T>,
    /// Final hidden states after the last RMSNorm, one row per position.
    pub hidden: Mat<T>,
}

/// Full-sequence forward. `emb` rows are the input embeddings per position.
pub fn forward<T: Real>(w: &StackWeights<T>, emb: Mat<T>) -> StackCache<T> {
    let dims = w.dims;
    let seq = emb.rows;
    let d = dims.d_model;
    let hd = dims.head_dim();
    let scale = r::<T>(1.0 / (hd as f64).sqrt());

    let mut x = emb;
    let mut blocks = Vec::with_capacity(dims.n_layers);

    for bw in &w.blocks {
        let x_pre_attn = x;
        let (a_norm, inv_a) = rmsnorm_mat(&x_pre_attn);

        let mut q = Mat::zeros(seq, d);
        let mut k = Mat::zeros(seq, d);
        let mut v = Mat::zeros(seq, d);
        matmul_acc(&mut q, &a_norm, &bw.wq);
        matmul_acc(&mut k, &a_norm, &bw.wk);
        matmul_acc(&mut v, &a_norm, &bw.wv);

        let mut aw = Vec::with_capacity(dims.n_heads);
        let mut ctx = Mat::zeros(seq, d);
        for h in 0..dims.n_heads {
            let lo = h * hd;
            let hi = lo + hd;
            let mut aw_h = Mat::zeros(seq, seq);
            for t in 0..seq {
                let qs = &q.row(t)[lo..hi];
                // causal scores over s <= t
                let mut max = f64::NEG_INFINITY;
                let mut scores = vec![T::zero(); t + 1];
                for (s, sc) in scores.iter_mut().enumerate() {
                    let ks = &k.row(s)[lo..hi];
                    *sc = dot(qs, ks) * scale;
                    max = max.max(sc.to_f64_c());
                }
                let maxt = r::<T>(max);
                let mut denom = T::zero();
                for sc in scores.iter_mut() {
                    *sc = (*sc - maxt).exp();
                    denom = denom + *sc;
                }
                let row = aw_h.row_mut(t);
                for (s, &sc) in scores.iter().enumerate() {
                    row[s] = sc / denom;
                }
                // context = attention-weighted sum of values
                let ctx_row = &mut ctx.row_mut(t)[lo..hi];
                for (s, &wgt) in row[..=t].iter().enumerate() {
                    let vs = &v.row(s)[lo..hi];
                    for (c, &vv) in ctx_row.iter_mut().zip(vs.iter()) {
                        *c = *c + wgt * vv;
                    }
                }
            }
            aw.push(aw_h);
        }

        let mut attn_out = Mat::zeros(seq, d);
        matmul_acc(&mut attn_out, &ctx, &bw.wo);
        let mut x_post_attn = x_pre_attn.clone();
        for (xv, &av) in x_post_attn.data.iter_mut().zip(attn_out.data.iter()) {
            *xv = *xv + av;
        }

        let (b_norm, inv_b) = rmsnorm_mat(&x_post_attn);
        let mut h1 = Mat::zeros(seq, dims.d_ff());
        matmul_acc(&mut h1, &b_norm, &bw.w1);
        let mut act = h1.clone();
        for a in act.data.iter_mut() {
            let z = if *a > T::zero() { *a } else { T::zero() };
            *a = z * z;
        }
        let mut mlp_out = Mat::zeros(seq, d);
        matmul_acc(&mut mlp_out, &act, &bw.w2);
        let mut x_post_mlp = x_post_attn.clone();
        for (xv, &mv) in x_post_mlp.data.iter_mut().zip(mlp_out.data.iter()) {
            *xv = *xv + mv;
        }

        blocks.push(BlockCache {
            x_pre_attn,
            a_norm,
            inv_a,
            q,
            k,
            v,
            aw,
            ctx,
            x_post_attn,
            b_norm,
            inv_b,
            h1,
            act,
        });
        x = x_post_mlp;
    }

    let pre_final = x;
    let (hidden, final_inv) = rmsnorm_mat(&pre_final);
    StackCache {
        blocks,
        pre_final,
        final_inv,
        hidden,
    }
}

/// Backward from a gradient on the final hidden states. Accumulates weight
/// gradients into `grads` and returns the gradient on the input embeddings.
pub fn backward<T: Real>(
    w: &StackWeights<T>,
    cache: &StackCache<T>,
    d_hidden: &Mat<T>,
    grads: &mut StackWeights<T>,
) -> Mat<T> {
    let dims = w.dims;
    let seq = d_hidden.rows;
    let d = dims.d_model;
    let hd = dims.head_dim();
    let scale = r::<T>(1.0 / (hd as f64).sqrt());

    // final rmsnorm
    let mut dx = Mat::zeros(seq, d);
    for t in 0..seq {
        rmsnorm_backward_row(
            d_hidden.row(t),
            cache.pre_final.row(t),
            cache.final_inv[t],
            dx.row_mut(t),
        );
    }

    for (bw, (bc, bg)) in w
        .blocks
        .iter()
        .zip(cache.blocks.iter().zip(grads.blocks.iter_mut()))
        .rev()
    {
        // ---- MLP sublayer ----
        // dx carries the gradient on x_post_mlp = x_post_attn + mlp_out.
        matmul_dw(&mut bg.w2, &bc.act, &dx);
        let mut d_act = Mat::zeros(seq, dims.d_ff());
        matmul_dx(&mut d_act, &dx, &bw.w2);
        // act = relu(h1)^2  =>  d_h1 = 2·relu(h1)·d_act
        let mut d_h1 = d_act;
        for (dh, &h) in d_h1.data.iter_mut().zip(bc.h1.data.iter()) {
            *dh = if h > T::zero() {
                *dh * r::<T>(2.0) * h
            } else {
                T::zero()
            };
        }
        matmul_dw(&mut bg.w1, &bc.b_norm, &d_h1);
        let mut d_b_norm = Mat::zeros(seq, d);
        matmul_dx(&mut d_b_norm, &d_h1, &bw.w1);
        for t in 0..seq {
            rmsnorm_backward_row(
                d_b_norm.row(t),
                bc.x_post_attn.row(t),
                bc.inv_b[t],
                dx.row_mut(t),
            );
        }

        // ---- attention sublayer ----
        // dx now carries the gradient on x_post_attn = x_pre_attn + attn_out.
        matmul_dw(&mut bg.wo, &bc.ctx, &dx);
        let mut d_ctx = Mat::zeros(seq, d);
        matmul_dx(&mut d_ctx, &dx, &bw.wo);

        let mut d_q = Mat::zeros(seq, d);
        let mut d_k = Mat::zeros(seq, d);
        let mut d_v = Mat::zeros(seq, d);
        for h in 0..dims.n_heads {
            let lo = h * hd;
            let hi = lo + hd;
            let aw_h = &bc.aw[h];
            for t in 0..seq {
                let d_ctx_h = &d_ctx.row(t)[lo..hi];
                let aw_row = &aw_h.row(t)[..=t];
                // d_aw[s] = d_ctx · v[s]; d_v[s] += aw[s] · d_ctx
                let mut d_aw = vec![T::zero(); t + 1];
                for (s, (da, &wgt)) in d_aw.iter_mut().zip(aw_row.iter()).enumerate() {
                    let vs = &bc.v.row(s)[lo..hi];
                    *da = dot(d_ctx_h, vs);
                    let dvs = &mut d_v.row_mut(s)[lo..hi];
                    for (dv, &dc) in dvs.iter_mut().zip(d_ctx_h.iter()) {
                        *dv = *dv + wgt * dc;
                    }
                }
                // softmax backward
                let mut inner = T::zero();
                for (&wgt, &da) in aw_row.iter().zip(d_aw.iter()) {
                    inner = inner + wgt * da;
                }
                let qs = &bc.q.row(t)[lo..hi];
                let mut d_q_h = vec![T::zero(); hd];
                for s in 0..=t {
                    let d_score = aw_row[s] * (d_aw[s] - inner) * scale;
                    let ks = &bc.k.row(s)[lo..hi];
                    for (dq, &kv) in d_q_h.iter_mut().zip(ks.iter()) {
                        *dq = *dq + d_score * kv;
                    }
                    let dks = &mut d_k.row_mut(s)[lo..hi];
                    for (dk, &qv) in dks.iter_mut().zip(qs.iter()) {
                        *dk = *dk + d_score * qv;
                    }
                }
                let dqs = &mut d_q.row_mut(t)[lo..hi];
                for (dq, &v) in dqs.iter_mut().zip(d_q_h.iter()) {
                    *dq = *dq + v;
                }
            }
        }

        matmul_dw(&mut bg.wq, &bc.a_norm, &d_q);
        matmul_dw(&mut bg.wk, &bc.a_norm, &d_k);
        matmul_dw(&mut bg.wv, &bc.a_norm, &d_v);
        let mut d_a_norm = Mat::zeros(seq, d);
        matmul_dx(&mut d_a_norm, &d_q, &bw.wq);
        matmul_dx(&mut d_a_norm, &d_k, &bw.wk);
        matmul_dx(&mut d_a_norm, &d_v, &bw.wv);
        for t in 0..seq {
            rmsnorm_backward_row(
                d_a_norm.row(t),
                bc.x_pre_attn.row(t),
                bc.inv_a[t],
                dx.row_mut(t),
            );
        }
    }

    dx
}

/// Growing KV cache for incremental decoding.
pub struct IncrementalState<T> {
    k: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
    pub pos: usize,
}

impl<T: Real> IncrementalState<T> {
    pub fn new(w: &StackWeights<T>) -> Self {
        let d = w.dims.d_model;
        IncrementalState {
            k: (0..w.dims.n_layers).map(|_| Mat::zeros(0, d)).collect(),
            v: (0..w.dims.n_layers).map(|_| Mat::zeros(0, d)).collect(),
            pos: 0,
        }
    }

    /// Process one position's input embedding, returning its final hidden state.
    pub fn step(&mut self, w: &StackWeights<T>, emb: &[T]) -> Vec<T> {
        let dims = w.dims;
        let d = dims.d_model;
        let hd = dims.head_dim();
        let scale = r::<T>(1.0 / (hd as f64).sqrt());

        let mut x = emb.to_vec();
        for (l, bw) in w.blocks.iter().enumerate() {
            let mut a = vec![T::zero(); d];
            rmsnorm_row(&x, &mut a);
            let q = crate::nn::mat::vec_matmul(&a, &bw.wq);
            let k_new = crate::nn::mat::vec_matmul(&a, &bw.wk);
            let v_new = crate::nn::mat::vec_matmul(&a, &bw.wv);
            self.k[l].data.extend_from_slice(&k_new);
            self.k[l].rows += 1;
            self.v[l].data.extend_from_slice(&v_new);
            self.v[l].rows += 1;

            let t_len = self.k[l].rows;
            let mut ctx = vec![T::zero(); d];
            for h in 0..dims.n_heads {
                let lo = h * hd;
                let hi = lo + hd;
                let qs = &q[lo..hi];
                let mut scores = Vec::with_capacity(t_len);
                let mut max = f64::NEG_INFINITY;
                for s in 0..t_len {
                    let sc = dot(qs, &self.k[l].row(s)[lo..hi]) * scale;
                    max = max.max(sc.to_f64_c());
                    scores.push(sc);
                }
                let maxt = r::<T>(max);
                let mut denom = T::zero();
                for sc in scores.iter_mut() {
                    *sc = (*sc - maxt).exp();
                    denom = denom + *sc;
                }
                for (s, &sc) in scores.iter().enumerate() {
                    let wgt = sc / denom;
                    let vs = &self.v[l].row(s)[lo..hi];
                    let cs = &mut ctx[lo..hi];
                    for (c, &vv) in cs.iter_mut().zip(vs.iter()) {
                        *c = *c + wgt * vv;
                    }
                }
            }
            let attn_out = crate::nn::mat::vec_matmul(&ctx, &bw.wo);
            for (xv, &av) in x.iter_mut().zip(attn_out.iter()) {
                *xv = *xv + av;
            }

            let mut b = vec![T::zero(); d];
            rmsnorm_row(&x, &mut b);
            let mut h1 = crate::nn::mat::vec_matmul(&b, &bw.w1);
            for a in h1.iter_mut() {
                let z = if *a > T::zero() { *a } else { T::zero() };
                *a = z * z;
            }
            let mlp_out = crate::nn::mat::vec_matmul(&h1, &bw.w2);
            for (xv, &mv) in x.iter_mut().zip(mlp_out.iter()) {
                *xv = *xv + mv;
            }
        }
        let mut hidden = vec![T::zero(); d];
        rmsnorm_row(&x, &mut hidden);
        self.pos += 1;
        hidden
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn small_stack(seed: u64) -> StackWeights<f64> {
        let dims = Dims {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            context_len: 16,
        };
        let mut rng = stream(seed, Purpose::LmInit, 0, 0);
        let mut w = StackWeights::init(dims, 0.2, &mut rng);
        // fill the zero-initialized projections so the test exercises them
        for b in w.blocks.iter_mut() {
            b.wo = Mat::gaussian(8, 8, 0.2, &mut rng);
            b.w2 = Mat::gaussian(32, 8, 0.2, &mut rng);
        }
        w
    }

    fn random_emb(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        let mut rng = stream(seed, Purpose::Probe, 1, 1);
        Mat::gaussian(rows, cols, 1.0, &mut rng)
    }

    #[test]
    fn incremental_matches_full_forward() {
        let w = small_stack(3);
        let emb = random_emb(5, 8, 4);
        let cache = forward(&w, emb.clone());
        let mut inc = IncrementalState::new(&w);
        for t in 0..5 {
            let h = inc.step(&w, emb.row(t));
            for (a, b) in h.iter().zip(cache.hidden.row(t)) {
                assert!((a - b).abs() < 1e-12, "pos {t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn causality_prefix_hidden_states_unchanged_by_suffix_edit() {
        let w = small_stack(5);
        let mut emb = random_emb(6, 8, 6);
        let base = forward(&w, emb.clone());
        for x in emb.row_mut(5).iter_mut() {
            *x += 3.0;
        }
        let edited = forward(&w, emb);
        for t in 0..5 {
            assert_eq!(base.hidden.row(t), edited.hidden.row(t), "pos {t}");
        }
    }

    /// Finite-difference check of the full stack backward: scalar loss is a
    /// fixed random projection of all hidden states.
    #[test]
    fn stack_backward_matches_finite_differences() {
        let w = small_stack(7);
        let emb = random_emb(4, 8, 8);
        let probe = random_emb(4, 8, 9);

        let loss = |w: &StackWeights<f64>, emb: &Mat<f64>| -> f64 {
            let cache = forward(w, emb.clone());
            cache
                .hidden
                .data
                .iter()
                .zip(probe.data.iter())
                .map(|(h, p)| h * p)
                .sum()
        };

        let mut grads = w.zeros_like();
        let cache = forward(&w, emb.clone());
        let d_emb = backward(&w, &cache, &probe, &mut grads);

        fn arr_mut(bw: &mut BlockWeights<f64>, arr: usize) -> &mut Vec<f64> {
            match arr {
                0 => &mut bw.wq.data,
                1 => &mut bw.wk.data,
                2 => &mut bw.wv.data,
                3 => &mut bw.wo.data,
                4 => &mut bw.w1.data,
                _ => &mut bw.w2.data,
            }
        }

        let h = 1e-6;
        // probe a selection of weight entries across all arrays
        let mut w_mut = w.clone();
        for (bi, picks) in [(0usize, [0usize, 17, 31]), (1usize, [3usize, 9, 25])] {
            for arr in 0..6 {
                for &idx in &picks {
                    let orig = arr_mut(&mut w_mut.blocks[bi], arr)[idx];
                    arr_mut(&mut w_mut.blocks[bi], arr)[idx] = orig + h;
                    let up = loss(&w_mut, &emb);
                    arr_mut(&mut w_mut.blocks[bi], arr)[idx] = orig - h;
                    let down = loss(&w_mut, &emb);
                    arr_mut(&mut w_mut.blocks[bi], arr)[idx] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let got = match arr {
                        0 => grads.blocks[bi].wq.data[idx],
                        1 => grads.blocks[bi].wk.data[idx],
                        2 => grads.blocks[bi].wv.data[idx],
                        3 => grads.blocks[bi].wo.data[idx],
                        4 => grads.blocks[bi].w1.data[idx],
                        _ => grads.blocks[bi].w2.data[idx],
                    };
                    assert!(
                        (fd - got).abs() / fd.abs().max(got.abs()).max(1e-6) < 1e-6,
                        "block {bi} arr {arr} idx {idx}: fd {fd} vs analytic {got}"
                    );
                }
            }
        }

        // and the embedding gradient
        let mut emb_mut = emb.clone();
        for idx in [0usize, 7, 13, 31] {
            let orig = emb_mut.data[idx];
            emb_mut.data[idx] = orig + h;
            let up = loss(&w, &emb_mut);
            emb_mut.data[idx] = orig - h;
            let down = loss(&w, &emb_mut);
            emb_mut.data[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let got = d_emb.data[idx];
            assert!(
                (fd - got).abs() / fd.abs().max(got.abs()).max(1e-6) < 1e-6,
                "emb idx {idx}: fd {fd} vs analytic {got}"
            );
        }
    }
}
