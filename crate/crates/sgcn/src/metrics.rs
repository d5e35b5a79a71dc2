//! Corpus-level BLEU, Kendall τ word-order correlation, and the
//! per-length-bucket BLEU breakdown.

use std::collections::HashMap;

use crate::error::{Result, SgcnError};

/// Clipped n-gram match and total counts for one corpus, per order 1..=max_n,
/// plus hypothesis/reference length totals. Additive across corpora, which
/// is what makes bucketed scores recombine into the overall score.
#[derive(Debug, Clone, Default)]
pub struct BleuCounts {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuCounts {
    pub fn new(max_n: usize) -> Self {
        BleuCounts {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            hyp_len: 0,
            ref_len: 0,
        }
    }

    pub fn add(&mut self, other: &BleuCounts) {
        for n in 0..self.matches.len() {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut map: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

/// Accumulate clipped match statistics for one hypothesis/reference pair.
pub fn bleu_counts(hyp: &[String], reference: &[String], max_n: usize) -> BleuCounts {
    let mut c = BleuCounts::new(max_n);
    c.hyp_len = hyp.len();
    c.ref_len = reference.len();
    for n in 1..=max_n {
        if hyp.len() < n {
            continue;
        }
        let ref_grams = ngram_counts(reference, n);
        let hyp_grams = ngram_counts(hyp, n);
        let total = hyp.len() - n + 1;
        let mut matched = 0;
        for (gram, &count) in &hyp_grams {
            let cap = ref_grams.get(gram).copied().unwrap_or(0);
            matched += count.min(cap);
        }
        c.matches[n - 1] += matched;
        c.totals[n - 1] += total;
    }
    c
}

/// Turn accumulated counts into (BLEU₁, BLEU₄)-style scores on [0, 100]:
/// geometric mean of the first `max_n` precisions times the brevity penalty,
/// and the unigram precision times the same penalty.
pub fn bleu_from_counts(counts: &BleuCounts) -> (f64, f64) {
    let max_n = counts.matches.len();
    let bp = if counts.hyp_len == 0 {
        0.0
    } else {
        (1.0 - counts.ref_len as f64 / counts.hyp_len as f64).exp().min(1.0)
    };
    let p1 = if counts.totals[0] == 0 {
        0.0
    } else {
        counts.matches[0] as f64 / counts.totals[0] as f64
    };
    let mut log_sum = 0.0;
    let mut any_zero = false;
    for n in 0..max_n {
        if counts.totals[n] == 0 || counts.matches[n] == 0 {
            any_zero = true;
            break;
        }
        log_sum += (counts.matches[n] as f64 / counts.totals[n] as f64).ln();
    }
    let bleu_full = if any_zero {
        0.0
    } else {
        bp * (log_sum / max_n as f64).exp()
    };
    (100.0 * bp * p1, 100.0 * bleu_full)
}

/// Corpus-level (BLEU₁, BLEU₄) with modified n-gram precision and brevity
/// penalty min(1, e^{1−r/c}). Any zero precision up to `max_n` zeroes the
/// full score. Errors on an empty or length-mismatched corpus.
pub fn bleu(hyps: &[Vec<String>], refs: &[Vec<String>], max_n: usize) -> Result<(f64, f64)> {
    if hyps.is_empty() {
        return Err(SgcnError::Data("empty hypothesis corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(SgcnError::Data(format!(
            "hypothesis/reference count mismatch: {} vs {}",
            hyps.len(),
            refs.len()
        )));
    }
    let mut counts = BleuCounts::new(max_n);
    for (h, r) in hyps.iter().zip(refs) {
        counts.add(&bleu_counts(h, r, max_n));
    }
    Ok(bleu_from_counts(&counts))
}

/// Kendall τ between a hypothesis and reference sharing (most of) a token
/// multiset. A permutation is built by greedy first-occurrence matching:
/// each hypothesis token is aligned to the earliest unused reference
/// position holding the same token; unmatched tokens are dropped. Over the
/// matched reference positions in hypothesis order,
/// τ = 1 − 2·inversions / C(n, 2). Returns None when fewer than two tokens
/// match (such sentences are skipped at the corpus level).
pub fn kendall_tau(hyp: &[String], reference: &[String]) -> Option<f64> {
    let mut used = vec![false; reference.len()];
    let mut positions: Vec<usize> = Vec::new();
    for tok in hyp {
        for (j, r) in reference.iter().enumerate() {
            if !used[j] && r == tok {
                used[j] = true;
                positions.push(j);
                break;
            }
        }
    }
    let n = positions.len();
    if n < 2 {
        return None;
    }
    let mut inversions = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if positions[i] > positions[j] {
                inversions += 1;
            }
        }
    }
    let pairs = n * (n - 1) / 2;
    Some(1.0 - 2.0 * inversions as f64 / pairs as f64)
}

/// Mean Kendall τ over all sentence pairs with at least two matched tokens.
/// Returns None if every sentence was skipped.
pub fn corpus_kendall_tau(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        if let Some(tau) = kendall_tau(h, r) {
            sum += tau;
            count += 1;
        }
    }
    if count == 0 {
        None
    } else {
        Some(sum / count as f64)
    }
}

/// One row of the per-length breakdown.
#[derive(Debug, Clone)]
pub struct LengthBucket {
    pub min_len: usize,
    pub max_len: usize,
    pub count: usize,
    pub bleu1: f64,
    pub bleu4: f64,
    pub counts: BleuCounts,
}

/// Corpus BLEU per reference-length bucket. Sentences are sorted by
/// reference length and split into `buckets` equal-population bins
/// (populations differ by at most one); adjacent bins whose length ranges
/// collide (ties at the boundary) are merged.
pub fn bleu_by_length(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
    buckets: usize,
) -> Result<Vec<LengthBucket>> {
    if buckets == 0 {
        return Err(SgcnError::Config("bucket count must be positive".into()));
    }
    if hyps.len() != refs.len() {
        return Err(SgcnError::Data(format!(
            "hypothesis/reference count mismatch: {} vs {}",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.len() < buckets {
        return Err(SgcnError::Data(format!(
            "need at least {} sentences for {} buckets, have {}",
            buckets,
            buckets,
            hyps.len()
        )));
    }
    let mut order: Vec<usize> = (0..refs.len()).collect();
    order.sort_by_key(|&i| (refs[i].len(), i));

    let n = order.len();
    let base = n / buckets;
    let extra = n % buckets;
    let mut raw: Vec<Vec<usize>> = Vec::new();
    let mut cursor = 0;
    for b in 0..buckets {
        let size = base + usize::from(b < extra);
        raw.push(order[cursor..cursor + size].to_vec());
        cursor += size;
    }

    // Merge neighbours whose reference-length ranges overlap.
    let mut merged: Vec<Vec<usize>> = Vec::new();
    for group in raw {
        if group.is_empty() {
            continue;
        }
        let lo = refs[group[0]].len();
        if let Some(last) = merged.last_mut() {
            let prev_hi = refs[*last.last().unwrap()].len();
            if prev_hi >= lo {
                last.extend(group);
                continue;
            }
        }
        merged.push(group);
    }

    let mut out = Vec::new();
    for group in merged {
        let mut counts = BleuCounts::new(4);
        for &i in &group {
            counts.add(&bleu_counts(&hyps[i], &refs[i], 4));
        }
        let (bleu1, bleu4) = bleu_from_counts(&counts);
        out.push(LengthBucket {
            min_len: refs[group[0]].len(),
            max_len: refs[*group.last().unwrap()].len(),
            count: group.len(),
            bleu1,
            bleu4,
            counts,
        });
    }
    Ok(out)
}

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(|t| t.to_string()).collect()
}
