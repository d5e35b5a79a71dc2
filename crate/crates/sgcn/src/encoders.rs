//! Source-side encoders: bag-of-words with position embeddings, a one-layer
//! CNN, a bidirectional GRU, and syntactic GCN layers stacked on any of
//! them. All forward code records onto a [`Graph`].

use crate::data::{directed_id, DepGraph, Dir, SELF_DIRECTED};
use crate::error::{Result, SgcnError};
use crate::rng::Rng;
use crate::tensor::{Graph, Param, ParamStore, Real, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Bow,
    Cnn,
    Birnn,
}

impl EncoderKind {
    pub fn parse(s: &str) -> Result<EncoderKind> {
        match s {
            "bow" => Ok(EncoderKind::Bow),
            "cnn" => Ok(EncoderKind::Cnn),
            "birnn" => Ok(EncoderKind::Birnn),
            other => Err(SgcnError::Config(format!(
                "unknown encoder kind {other:?} (expected bow, cnn or birnn)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EncoderKind::Bow => "bow",
            EncoderKind::Cnn => "cnn",
            EncoderKind::Birnn => "birnn",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub emb_dim: usize,
    /// GRU units per direction, or CNN output channels.
    pub hidden_dim: usize,
    pub cnn_window: usize,
    pub gcn_layers: usize,
    pub dropout: f64,
    pub edge_dropout: f64,
    /// Position-embedding table size (BoW only).
    pub max_pos: usize,
}

impl EncoderConfig {
    /// Width of the encoder states; GCN layers keep this width.
    pub fn output_dim(&self) -> usize {
        match self.kind {
            EncoderKind::Bow => self.emb_dim,
            EncoderKind::Cnn => self.hidden_dim,
            EncoderKind::Birnn => 2 * self.hidden_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == EncoderKind::Cnn && self.cnn_window % 2 == 0 {
            return Err(SgcnError::Config(format!(
                "cnn window must be odd, got {}",
                self.cnn_window
            )));
        }
        if self.emb_dim == 0 || self.hidden_dim == 0 {
            return Err(SgcnError::Config("encoder dims must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.edge_dropout) {
            return Err(SgcnError::Config("dropout probabilities must be in [0, 1)".into()));
        }
        Ok(())
    }
}

const INIT_RANGE: f64 = 0.08;

fn uniform<F: Real>(shape: Vec<usize>, rng: &mut Rng) -> Param<F> {
    Param::uniform(shape, -INIT_RANGE, INIT_RANGE, rng)
}

fn init_gru<F: Real>(store: &mut ParamStore<F>, prefix: &str, in_dim: usize, h_dim: usize, rng: &mut Rng) {
    for gate in ["z", "r", "h"] {
        store.insert(&format!("{prefix}.W{gate}"), uniform(vec![in_dim, h_dim], rng));
        store.insert(&format!("{prefix}.U{gate}"), uniform(vec![h_dim, h_dim], rng));
        store.insert(&format!("{prefix}.b{gate}"), Param::zeros(vec![1, h_dim]));
    }
}

fn init_gcn_layer<F: Real>(store: &mut ParamStore<F>, prefix: &str, d: usize, n_directed: usize, rng: &mut Rng) {
    store.insert(&format!("{prefix}.W_in"), uniform(vec![d, d], rng));
    store.insert(&format!("{prefix}.W_out"), uniform(vec![d, d], rng));
    store.insert(&format!("{prefix}.W_loop"), uniform(vec![d, d], rng));
    store.insert(&format!("{prefix}.b"), Param::zeros(vec![n_directed, d]));
    store.insert(&format!("{prefix}.gate_w_in"), uniform(vec![d, 1], rng));
    store.insert(&format!("{prefix}.gate_w_out"), uniform(vec![d, 1], rng));
    store.insert(&format!("{prefix}.gate_w_loop"), uniform(vec![d, 1], rng));
    store.insert(&format!("{prefix}.gate_b"), Param::zeros(vec![n_directed]));
}

/// Scalar count of one GCN layer with width d over l directed labels
/// (weights are direction-tied, only biases are label-specific).
pub fn gcn_layer_param_count(d: usize, l: usize) -> usize {
    3 * d * d + l * d + 3 * d + l
}

/// Create all encoder parameters under the `encoder.` prefix.
pub fn init_encoder_params<F: Real>(
    store: &mut ParamStore<F>,
    cfg: &EncoderConfig,
    src_vocab_size: usize,
    n_directed: usize,
    rng: &mut Rng,
) -> Result<()> {
    cfg.validate()?;
    store.insert("encoder.emb", uniform(vec![src_vocab_size, cfg.emb_dim], rng));
    match cfg.kind {
        EncoderKind::Bow => {
            store.insert("encoder.pos", uniform(vec![cfg.max_pos, cfg.emb_dim], rng));
        }
        EncoderKind::Cnn => {
            store.insert(
                "encoder.cnn.W",
                uniform(vec![cfg.cnn_window * cfg.emb_dim, cfg.hidden_dim], rng),
            );
            store.insert("encoder.cnn.b", Param::zeros(vec![1, cfg.hidden_dim]));
        }
        EncoderKind::Birnn => {
            init_gru(store, "encoder.gru_fwd", cfg.emb_dim, cfg.hidden_dim, rng);
            init_gru(store, "encoder.gru_bwd", cfg.emb_dim, cfg.hidden_dim, rng);
        }
    }
    let d = cfg.output_dim();
    for j in 0..cfg.gcn_layers {
        init_gcn_layer(store, &format!("encoder.gcn.{j}"), d, n_directed, rng);
    }
    Ok(())
}

/// Word embeddings with padded rows zeroed.
fn embed_masked<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    ids: &[usize],
    mask: &[bool],
) -> Result<TensorId> {
    let table = g.param(store, "encoder.emb")?;
    let emb = g.embed(table, ids)?;
    zero_masked_rows(g, emb, mask)
}

fn zero_masked_rows<F: Real>(g: &mut Graph<F>, x: TensorId, mask: &[bool]) -> Result<TensorId> {
    if mask.iter().all(|&m| m) {
        return Ok(x);
    }
    let (t, d) = g.shape(x);
    let mut m = Vec::with_capacity(t * d);
    for &keep in mask {
        let v = if keep { F::one() } else { F::zero() };
        m.extend(std::iter::repeat(v).take(d));
    }
    let mc = g.constant(t, d, m);
    g.mul(x, mc)
}

/// state_t = word_emb(id_t) + pos_emb(t); padded positions emit zeros.
pub fn bow_encode<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    cfg: &EncoderConfig,
    ids: &[usize],
    mask: &[bool],
) -> Result<TensorId> {
    let t = ids.len();
    for (pos, &m) in mask.iter().enumerate() {
        if m && pos >= cfg.max_pos {
            return Err(SgcnError::Config(format!(
                "position {pos} exceeds the position-embedding table ({}); increase max_pos",
                cfg.max_pos
            )));
        }
    }
    let emb = embed_masked(g, store, ids, mask)?;
    let pos_table = g.param(store, "encoder.pos")?;
    let positions: Vec<usize> = (0..t).map(|p| p.min(cfg.max_pos - 1)).collect();
    let pos = g.embed(pos_table, &positions)?;
    let pos = zero_masked_rows(g, pos, mask)?;
    g.add(emb, pos)
}

/// One CNN layer: state_t = relu(affine(window of embeddings around t)).
/// Out-of-range or padded neighbors contribute zero vectors.
pub fn cnn_encode<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    cfg: &EncoderConfig,
    ids: &[usize],
    mask: &[bool],
) -> Result<TensorId> {
    if cfg.cnn_window % 2 == 0 {
        return Err(SgcnError::Config(format!(
            "cnn window must be odd, got {}",
            cfg.cnn_window
        )));
    }
    let half = (cfg.cnn_window / 2) as isize;
    let t = ids.len();
    let emb = embed_masked(g, store, ids, mask)?;
    let w = g.param(store, "encoder.cnn.W")?;
    let b = g.param(store, "encoder.cnn.b")?;
    let mut rows = Vec::with_capacity(t);
    for pos in 0..t {
        if !mask[pos] {
            rows.push(g.zeros(1, cfg.hidden_dim));
            continue;
        }
        let mut parts = Vec::with_capacity(cfg.cnn_window);
        for dt in -half..=half {
            let idx = pos as isize + dt;
            if idx >= 0 && (idx as usize) < t && mask[idx as usize] {
                parts.push(g.row(emb, idx as usize)?);
            } else {
                parts.push(g.zeros(1, cfg.emb_dim));
            }
        }
        let window = g.concat_cols(&parts)?;
        let affine = g.matmul(window, w)?;
        let affine = g.add(affine, b)?;
        rows.push(g.relu(affine)?);
    }
    g.stack_rows(&rows)
}

/// One GRU update: z and r gates, candidate state, convex combination.
pub fn gru_step<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    prefix: &str,
    x: TensorId,
    h_prev: TensorId,
) -> Result<TensorId> {
    let fetch = |g: &mut Graph<F>, n: &str| g.param(store, &format!("{prefix}.{n}"));
    let wz = fetch(g, "Wz")?;
    let uz = fetch(g, "Uz")?;
    let bz = fetch(g, "bz")?;
    let wr = fetch(g, "Wr")?;
    let ur = fetch(g, "Ur")?;
    let br = fetch(g, "br")?;
    let wh = fetch(g, "Wh")?;
    let uh = fetch(g, "Uh")?;
    let bh = fetch(g, "bh")?;

    let xz = g.matmul(x, wz)?;
    let hz = g.matmul(h_prev, uz)?;
    let zsum = g.add(xz, hz)?;
    let zsum = g.add(zsum, bz)?;
    let z = g.sigmoid(zsum)?;

    let xr = g.matmul(x, wr)?;
    let hr = g.matmul(h_prev, ur)?;
    let rsum = g.add(xr, hr)?;
    let rsum = g.add(rsum, br)?;
    let r = g.sigmoid(rsum)?;

    let rh = g.mul(r, h_prev)?;
    let xh = g.matmul(x, wh)?;
    let hh = g.matmul(rh, uh)?;
    let hsum = g.add(xh, hh)?;
    let hsum = g.add(hsum, bh)?;
    let h_cand = g.tanh(hsum)?;

    let one_minus_z = g.affine_const(z, -F::one(), F::one())?;
    let keep = g.mul(one_minus_z, h_prev)?;
    let write = g.mul(z, h_cand)?;
    g.add(keep, write)
}

fn prefix_len(mask: &[bool]) -> Result<usize> {
    let t_real = mask.iter().take_while(|&&m| m).count();
    if mask[t_real..].iter().any(|&m| m) {
        return Err(SgcnError::Data("padding mask is not a suffix".into()));
    }
    Ok(t_real)
}

/// state_t = forward GRU up to t concatenated with backward GRU down to t;
/// padded positions emit zeros and are invisible to both directions.
pub fn birnn_encode<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    cfg: &EncoderConfig,
    ids: &[usize],
    mask: &[bool],
) -> Result<TensorId> {
    let t = ids.len();
    let t_real = prefix_len(mask)?;
    if t_real == 0 {
        return Err(SgcnError::Data("cannot encode an empty sentence".into()));
    }
    let emb = embed_masked(g, store, ids, mask)?;
    let h = cfg.hidden_dim;

    let mut fwd = Vec::with_capacity(t_real);
    let mut state = g.zeros(1, h);
    for pos in 0..t_real {
        let x = g.row(emb, pos)?;
        state = gru_step(g, store, "encoder.gru_fwd", x, state)?;
        fwd.push(state);
    }
    let mut bwd = vec![None; t_real];
    let mut state = g.zeros(1, h);
    for pos in (0..t_real).rev() {
        let x = g.row(emb, pos)?;
        state = gru_step(g, store, "encoder.gru_bwd", x, state)?;
        bwd[pos] = Some(state);
    }
    let mut rows = Vec::with_capacity(t);
    for pos in 0..t {
        if pos < t_real {
            rows.push(g.concat_cols(&[fwd[pos], bwd[pos].unwrap()])?);
        } else {
            rows.push(g.zeros(1, 2 * h));
        }
    }
    g.stack_rows(&rows)
}

/// Activation of a GCN layer; identity exists for unit tests only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GcnActivation {
    Relu,
    Identity,
}

/// One gated syntactic GCN layer. For each node the self loop, incoming
/// messages (from its heads) and outgoing messages (from its dependents)
/// are summed, each scaled by a scalar sigmoid gate computed from the
/// sender state. During training each non-self message is dropped whole
/// with probability `edge_dropout`, without rescaling.
pub fn gcn_layer<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    prefix: &str,
    h: TensorId,
    graph: &DepGraph,
    mask: &[bool],
    edge_dropout: f64,
    act: GcnActivation,
    rng: &mut Rng,
) -> Result<TensorId> {
    let (t, d) = g.shape(h);
    let w_in = g.param(store, &format!("{prefix}.W_in"))?;
    let w_out = g.param(store, &format!("{prefix}.W_out"))?;
    let w_loop = g.param(store, &format!("{prefix}.W_loop"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let gw_in = g.param(store, &format!("{prefix}.gate_w_in"))?;
    let gw_out = g.param(store, &format!("{prefix}.gate_w_out"))?;
    let gw_loop = g.param(store, &format!("{prefix}.gate_w_loop"))?;
    let gb = g.param(store, &format!("{prefix}.gate_b"))?;

    for a in &graph.arcs {
        let bad = a.head >= t || a.dep >= t || !mask[a.head] || !mask[a.dep];
        if bad {
            return Err(SgcnError::Data(format!(
                "arc ({}, {}) references a padded or out-of-range position",
                a.head, a.dep
            )));
        }
    }

    // Direction-tied transforms and gate energies, computed once for all
    // senders.
    let x_in = g.matmul(h, w_in)?;
    let x_out = g.matmul(h, w_out)?;
    let x_loop = g.matmul(h, w_loop)?;
    let e_in = g.matmul(h, gw_in)?;
    let e_out = g.matmul(h, gw_out)?;
    let e_loop = g.matmul(h, gw_loop)?;

    let drop_edges = g.training && edge_dropout > 0.0;
    let message = |g: &mut Graph<F>,
                       x_dir: TensorId,
                       e_dir: TensorId,
                       sender: usize,
                       dlab: usize|
     -> Result<TensorId> {
        let m0 = g.row(x_dir, sender)?;
        let bl = g.row(b, dlab)?;
        let m = g.add(m0, bl)?;
        let ge = g.row(e_dir, sender)?;
        let gbl = g.row(gb, dlab)?;
        let esum = g.add(ge, gbl)?;
        let gate = g.sigmoid(esum)?;
        g.scale_by(m, gate)
    };

    let mut rows = Vec::with_capacity(t);
    for v in 0..t {
        if !mask[v] {
            rows.push(g.zeros(1, d));
            continue;
        }
        let mut total = message(g, x_loop, e_loop, v, SELF_DIRECTED)?;
        for a in &graph.arcs {
            let (sender, x_dir, e_dir, dlab) = if a.dep == v {
                (a.head, x_in, e_in, directed_id(a.label, Dir::In))
            } else if a.head == v {
                (a.dep, x_out, e_out, directed_id(a.label, Dir::Out))
            } else {
                continue;
            };
            if drop_edges && rng.uniform() < edge_dropout {
                continue;
            }
            let m = message(g, x_dir, e_dir, sender, dlab)?;
            total = g.add(total, m)?;
        }
        let out = match act {
            GcnActivation::Relu => g.relu(total)?,
            GcnActivation::Identity => total,
        };
        rows.push(out);
    }
    g.stack_rows(&rows)
}

/// Full encoder stack: base encoder, dropout, then k GCN layers with a
/// residual shortcut around every layer after the first.
pub fn encode<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    cfg: &EncoderConfig,
    ids: &[usize],
    mask: &[bool],
    graph: Option<&DepGraph>,
    rng: &mut Rng,
) -> Result<TensorId> {
    let base = match cfg.kind {
        EncoderKind::Bow => bow_encode(g, store, cfg, ids, mask)?,
        EncoderKind::Cnn => cnn_encode(g, store, cfg, ids, mask)?,
        EncoderKind::Birnn => birnn_encode(g, store, cfg, ids, mask)?,
    };
    if cfg.gcn_layers == 0 {
        return g.dropout(base, cfg.dropout, rng);
    }
    let dep = graph.ok_or_else(|| {
        SgcnError::Data("encoder has GCN layers but no dependency graph was provided".into())
    })?;
    let mut state = g.dropout(base, cfg.dropout, rng)?;
    for j in 0..cfg.gcn_layers {
        let prefix = format!("encoder.gcn.{j}");
        if j == 0 {
            state = gcn_layer(
                g,
                store,
                &prefix,
                state,
                dep,
                mask,
                cfg.edge_dropout,
                GcnActivation::Relu,
                rng,
            )?;
        } else {
            let input = g.dropout(state, cfg.dropout, rng)?;
            let out = gcn_layer(
                g,
                store,
                &prefix,
                input,
                dep,
                mask,
                cfg.edge_dropout,
                GcnActivation::Relu,
                rng,
            )?;
            state = g.add(out, state)?;
        }
    }
    Ok(state)
}
