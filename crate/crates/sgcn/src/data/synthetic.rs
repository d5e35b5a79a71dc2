//! Synthetic reordering task: random token sequences are permuted, and the
//! original order is recoverable only through labeled arcs. Each token
//! points to its original predecessor with a "real" label (r0..r4) and to an
//! arbitrary other position with a "fake" label (f0..f4).

use crate::error::{Result, SgcnError};
use crate::rng::{Rng, Stream};

use super::RawSentence;

#[derive(Debug, Clone)]
pub struct ReorderConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub vocab_size: usize,
    pub n_real_labels: usize,
    pub n_fake_labels: usize,
}

impl Default for ReorderConfig {
    fn default() -> Self {
        ReorderConfig {
            n_train: 25_000,
            n_val: 1_000,
            len_min: 3,
            len_max: 10,
            vocab_size: 26,
            n_real_labels: 5,
            n_fake_labels: 5,
        }
    }
}

fn token_name(i: usize) -> String {
    if i < 26 {
        ((b'a' + i as u8) as char).to_string()
    } else {
        format!("t{i}")
    }
}

fn generate_one(cfg: &ReorderConfig, rng: &mut Rng) -> RawSentence {
    let len = cfg.len_min + rng.below(cfg.len_max - cfg.len_min + 1);
    // Target: tokens sampled with replacement.
    let tgt_ids: Vec<usize> = (0..len).map(|_| rng.below(cfg.vocab_size)).collect();
    // Source: a uniform random permutation of the target.
    // perm[i] = original (target) position of the token at source position i.
    let mut perm: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut perm);
    let mut inv = vec![0usize; len];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let src: Vec<String> = perm.iter().map(|&p| token_name(tgt_ids[p])).collect();
    let tgt: Vec<String> = tgt_ids.iter().map(|&t| token_name(t)).collect();

    let mut arcs = Vec::with_capacity(2 * len - 1);
    // Real arc: each token (except the originally-first) points to the
    // source position holding its original predecessor.
    for i in 0..len {
        let orig = perm[i];
        if orig == 0 {
            continue;
        }
        let pred = inv[orig - 1];
        let label = format!("r{}", rng.below(cfg.n_real_labels));
        arcs.push((i, pred, label));
    }
    // Fake arc: each token points to a uniformly random other position.
    for i in 0..len {
        let mut j = rng.below(len - 1);
        if j >= i {
            j += 1;
        }
        let label = format!("f{}", rng.below(cfg.n_fake_labels));
        arcs.push((i, j, label));
    }
    RawSentence { src, tgt, arcs }
}

/// Generate (train, validation) corpora deterministically from the seed.
pub fn generate_reorder_dataset(
    cfg: &ReorderConfig,
    seed: u64,
) -> Result<(Vec<RawSentence>, Vec<RawSentence>)> {
    if cfg.len_min < 2 {
        return Err(SgcnError::Config(
            "reorder length range must start at 2 or more".into(),
        ));
    }
    if cfg.len_max < cfg.len_min || cfg.vocab_size == 0 || cfg.n_real_labels == 0 || cfg.n_fake_labels == 0
    {
        return Err(SgcnError::Config("invalid reorder generator configuration".into()));
    }
    let mut rng = Rng::with_stream(seed, Stream::DataGen, 0);
    let train = (0..cfg.n_train).map(|_| generate_one(cfg, &mut rng)).collect();
    let val = (0..cfg.n_val).map(|_| generate_one(cfg, &mut rng)).collect();
    Ok((train, val))
}

const TOY_LABELS: [&str; 5] = ["nsubj", "obj", "det", "amod", "advmod"];

/// Tiny word-for-word parallel corpus with dependency parses, for overfit
/// smoke tests and the toy presets. Source word `x<i>` always translates to
/// `y<i>` in the same position, so every encoder can learn it; each sentence
/// carries a random dependency tree so graph-convolutional layers get
/// realistic input without the task depending on it.
pub fn toy_translation_dataset(
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> (Vec<RawSentence>, Vec<RawSentence>) {
    let mut rng = Rng::with_stream(seed, Stream::DataGen, 1);
    let mut gen = |n: usize| -> Vec<RawSentence> {
        (0..n)
            .map(|_| {
                let len = 4 + rng.below(4); // 4..=7
                let ids: Vec<usize> = (0..len).map(|_| rng.below(20)).collect();
                let src = ids.iter().map(|i| format!("x{i}")).collect();
                let tgt = ids.iter().map(|i| format!("y{i}")).collect();
                // Random projective-ish tree: token i attaches to an earlier head.
                let arcs = (1..len)
                    .map(|i| {
                        let head = rng.below(i);
                        (head, i, TOY_LABELS[rng.below(TOY_LABELS.len())].to_string())
                    })
                    .collect();
                RawSentence { src, tgt, arcs }
            })
            .collect()
    };
    let train = gen(n_train);
    let val = gen(n_val);
    (train, val)
}

/// Reconstruct the original order by walking the real-arc chain starting
/// from the token without a real outgoing arc. Returns the source positions
/// in original order, or None if the real arcs do not form a chain.
pub fn walk_real_chain(sent: &RawSentence) -> Option<Vec<usize>> {
    let n = sent.src.len();
    // predecessor[i] = source position of token i's original predecessor
    let mut pred = vec![None; n];
    for (h, d, l) in &sent.arcs {
        if l.starts_with('r') {
            if pred[*h].is_some() {
                return None;
            }
            pred[*h] = Some(*d);
        }
    }
    let mut successor = vec![None; n];
    let mut start = None;
    for i in 0..n {
        match pred[i] {
            Some(p) => {
                if successor[p].is_some() {
                    return None;
                }
                successor[p] = Some(i);
            }
            None => {
                if start.is_some() {
                    return None;
                }
                start = Some(i);
            }
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut cur = start?;
    loop {
        order.push(cur);
        match successor[cur] {
            Some(next) => cur = next,
            None => break,
        }
    }
    if order.len() == n {
        Some(order)
    } else {
        None
    }
}
