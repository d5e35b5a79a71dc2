//! Attention-based GRU decoder, held constant across all encoders. No
//! maxout anywhere: the output projection reads (state, context, previous
//! embedding) directly.

use crate::data::{BOS, EOS};
use crate::error::{Result, SgcnError};
use crate::tensor::{Graph, Param, ParamStore, Real, TensorId};
use crate::encoders::gru_step;
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.emb_dim == 0 || self.hidden_dim == 0 || self.attn_dim == 0 {
            return Err(SgcnError::Config("decoder dims must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_decoder_params<F: Real>(
    store: &mut ParamStore<F>,
    cfg: &DecoderConfig,
    tgt_vocab_size: usize,
    enc_dim: usize,
    rng: &mut Rng,
) -> Result<()> {
    cfg.validate()?;
    let u = |shape: Vec<usize>, rng: &mut Rng| Param::<F>::uniform(shape, -0.08, 0.08, rng);
    store.insert("decoder.emb", u(vec![tgt_vocab_size, cfg.emb_dim], rng));
    let in_dim = cfg.emb_dim + enc_dim;
    for gate in ["z", "r", "h"] {
        store.insert(&format!("decoder.gru.W{gate}"), u(vec![in_dim, cfg.hidden_dim], rng));
        store.insert(&format!("decoder.gru.U{gate}"), u(vec![cfg.hidden_dim, cfg.hidden_dim], rng));
        store.insert(&format!("decoder.gru.b{gate}"), Param::zeros(vec![1, cfg.hidden_dim]));
    }
    store.insert("decoder.init.W", u(vec![enc_dim, cfg.hidden_dim], rng));
    store.insert("decoder.init.b", Param::zeros(vec![1, cfg.hidden_dim]));
    store.insert("decoder.attn.W_q", u(vec![cfg.hidden_dim, cfg.attn_dim], rng));
    store.insert("decoder.attn.W_k", u(vec![enc_dim, cfg.attn_dim], rng));
    store.insert("decoder.attn.v", u(vec![cfg.attn_dim], rng));
    let out_in = cfg.hidden_dim + enc_dim + cfg.emb_dim;
    store.insert("decoder.out.W", u(vec![out_in, tgt_vocab_size], rng));
    store.insert("decoder.out.b", Param::zeros(vec![1, tgt_vocab_size]));
    Ok(())
}

/// Initial decoder state: tanh-affine of the mean of unmasked encoder
/// states (one uniform rule for all encoder kinds).
pub fn init_state<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    enc_states: TensorId,
    src_mask: &[bool],
) -> Result<TensorId> {
    let summary = g.mean_rows_masked(enc_states, src_mask)?;
    let w = g.param(store, "decoder.init.W")?;
    let b = g.param(store, "decoder.init.b")?;
    let affine = g.matmul(summary, w)?;
    let affine = g.add(affine, b)?;
    g.tanh(affine)
}

/// Bahdanau-style additive attention: e_t = v . tanh(W_q s + W_k h_t),
/// masked softmax over real source positions, context as the weighted sum.
pub fn attend<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    dec_state: TensorId,
    enc_states: TensorId,
    src_mask: &[bool],
) -> Result<(TensorId, TensorId)> {
    let w_k = g.param(store, "decoder.attn.W_k")?;
    let keys = g.matmul(enc_states, w_k)?;
    attend_with_keys(g, store, dec_state, enc_states, keys, src_mask)
}

/// Same as [`attend`] with the key projection precomputed (it is constant
/// per sentence, while attention runs every decoder step).
pub fn attend_with_keys<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    dec_state: TensorId,
    enc_states: TensorId,
    keys: TensorId,
    src_mask: &[bool],
) -> Result<(TensorId, TensorId)> {
    if !src_mask.iter().any(|&m| m) {
        return Err(SgcnError::Data("attention over a fully masked source".into()));
    }
    let w_q = g.param(store, "decoder.attn.W_q")?;
    let v = g.param(store, "decoder.attn.v")?;
    let query = g.matmul(dec_state, w_q)?;
    let pre = g.add(keys, query)?; // broadcast the 1 x a query over rows
    let act = g.tanh(pre)?;
    let energies = g.matmul(act, v)?; // T x 1
    let weights = g.masked_softmax_col(energies, src_mask)?;
    let wt = g.transpose(weights)?;
    let context = g.matmul(wt, enc_states)?;
    Ok((context, weights))
}

/// Teacher-forced decoding loss: masked mean token cross-entropy over the
/// target (framed BOS ... EOS). Returns (loss, number of predicted tokens).
pub fn decode_train<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    enc_states: TensorId,
    src_mask: &[bool],
    tgt_ids: &[usize],
    tgt_mask: &[bool],
) -> Result<(TensorId, usize)> {
    let t_real = tgt_mask.iter().take_while(|&&m| m).count();
    if tgt_mask[t_real..].iter().any(|&m| m) {
        return Err(SgcnError::Data("target padding mask is not a suffix".into()));
    }
    if t_real < 2 {
        return Err(SgcnError::Data(
            "target must contain at least BOS and one token to predict".into(),
        ));
    }
    let emb_table = g.param(store, "decoder.emb")?;
    let w_k = g.param(store, "decoder.attn.W_k")?;
    let keys = g.matmul(enc_states, w_k)?;
    let w_out = g.param(store, "decoder.out.W")?;
    let b_out = g.param(store, "decoder.out.b")?;

    let mut state = init_state(g, store, enc_states, src_mask)?;
    let mut logit_rows = Vec::with_capacity(t_real - 1);
    for i in 1..t_real {
        let prev = g.embed(emb_table, &[tgt_ids[i - 1]])?;
        let (context, _) = attend_with_keys(g, store, state, enc_states, keys, src_mask)?;
        let x = g.concat_cols(&[prev, context])?;
        state = gru_step(g, store, "decoder.gru", x, state)?;
        let readout = g.concat_cols(&[state, context, prev])?;
        let logits = g.matmul(readout, w_out)?;
        logit_rows.push(g.add(logits, b_out)?);
    }
    let logits = g.stack_rows(&logit_rows)?;
    let targets: Vec<usize> = tgt_ids[1..t_real].to_vec();
    let loss = g.softmax_xent(logits, &targets, &vec![true; t_real - 1])?;
    Ok((loss, t_real - 1))
}

/// Greedy decoding: argmax token per step (ties to the lowest id), feeding
/// the prediction back, stopping at EOS or `max_len`.
pub fn greedy_decode<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    enc_states: TensorId,
    src_mask: &[bool],
    max_len: usize,
) -> Result<Vec<usize>> {
    let emb_table = g.param(store, "decoder.emb")?;
    let w_k = g.param(store, "decoder.attn.W_k")?;
    let keys = g.matmul(enc_states, w_k)?;
    let w_out = g.param(store, "decoder.out.W")?;
    let b_out = g.param(store, "decoder.out.b")?;

    let mut state = init_state(g, store, enc_states, src_mask)?;
    let mut prev_id = BOS;
    let mut out = Vec::new();
    for _ in 0..max_len {
        let prev = g.embed(emb_table, &[prev_id])?;
        let (context, _) = attend_with_keys(g, store, state, enc_states, keys, src_mask)?;
        let x = g.concat_cols(&[prev, context])?;
        state = gru_step(g, store, "decoder.gru", x, state)?;
        let readout = g.concat_cols(&[state, context, prev])?;
        let logits = g.matmul(readout, w_out)?;
        let logits = g.add(logits, b_out)?;
        let row = g.value(logits);
        let mut best = 0;
        for (j, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = j;
            }
        }
        if best == EOS {
            break;
        }
        out.push(best);
        prev_id = best;
    }
    Ok(out)
}

/// Default decoding length cap for untrained or degenerate models.
pub fn default_max_len(src_len: usize) -> usize {
    2 * src_len + 5
}
