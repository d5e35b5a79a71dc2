//! Length filtering, epoch shuffling and padding.

use crate::rng::Rng;

use super::{DepGraph, Sentence, BOS, EOS, PAD};

/// A padded batch. Masks are true exactly on real tokens; targets are
/// framed as BOS ... EOS before padding.
#[derive(Debug, Clone)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub src_mask: Vec<Vec<bool>>,
    pub graphs: Vec<DepGraph>,
    pub tgt: Vec<Vec<usize>>,
    pub tgt_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

fn pad_to(ids: &[usize], t: usize) -> (Vec<usize>, Vec<bool>) {
    let mut row = ids.to_vec();
    let mut mask = vec![true; ids.len()];
    row.resize(t, PAD);
    mask.resize(t, false);
    (row, mask)
}

fn build_batch(sentences: &[&Sentence]) -> Batch {
    let t_src = sentences.iter().map(|s| s.src.len()).max().unwrap();
    let t_tgt = sentences.iter().map(|s| s.tgt.len() + 2).max().unwrap();
    let mut batch = Batch {
        src: Vec::new(),
        src_mask: Vec::new(),
        graphs: Vec::new(),
        tgt: Vec::new(),
        tgt_mask: Vec::new(),
    };
    for s in sentences {
        let (src, src_mask) = pad_to(&s.src, t_src);
        let mut framed = Vec::with_capacity(s.tgt.len() + 2);
        framed.push(BOS);
        framed.extend_from_slice(&s.tgt);
        framed.push(EOS);
        let (tgt, tgt_mask) = pad_to(&framed, t_tgt);
        batch.src.push(src);
        batch.src_mask.push(src_mask);
        batch.graphs.push(s.graph.clone());
        batch.tgt.push(tgt);
        batch.tgt_mask.push(tgt_mask);
    }
    batch
}

/// Filter out sentences longer than `max_len` on either side, shuffle with
/// the provided (epoch-derived) rng, and emit fixed-size batches with a
/// final short batch. Pass `shuffle: None` for deterministic corpus order.
pub fn make_batches(
    corpus: &[Sentence],
    batch_size: usize,
    max_len: usize,
    mut shuffle: Option<&mut Rng>,
) -> Vec<Batch> {
    assert!(batch_size > 0);
    let mut keep: Vec<&Sentence> = corpus
        .iter()
        .filter(|s| s.src.len() <= max_len && s.tgt.len() <= max_len)
        .collect();
    if keep.is_empty() {
        if !corpus.is_empty() {
            eprintln!("warning: every sentence exceeds the length filter ({max_len}); no batches");
        }
        return Vec::new();
    }
    if let Some(rng) = shuffle.as_deref_mut() {
        rng.shuffle(&mut keep);
    }
    keep.chunks(batch_size).map(build_batch).collect()
}
