//! Sentences, dependency graphs, vocabularies and batching.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SgcnError};
use crate::rng::Rng;

pub mod batch;
pub mod conllu;
pub mod jsonl;
pub mod synthetic;

pub use batch::{make_batches, Batch};

/// Reserved token ids shared by every vocabulary.
pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Traversal direction of a dependency edge relative to the receiving node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dir {
    /// Along the stored arc (head to dependent); received by the dependent.
    In,
    /// Against the stored arc; received by the head.
    Out,
    /// The implicit self loop.
    Loop,
}

/// One labeled arc, stored head -> dependent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arc {
    pub head: usize,
    pub dep: usize,
    pub label: usize,
}

/// Per-sentence dependency structure. Self loops are implicit; arcs never
/// connect a node to itself.
#[derive(Debug, Clone, Default)]
pub struct DepGraph {
    pub n: usize,
    pub arcs: Vec<Arc>,
}

impl DepGraph {
    pub fn validate(&self, n_labels: usize) -> Result<()> {
        for a in &self.arcs {
            if a.head >= self.n || a.dep >= self.n {
                return Err(SgcnError::Data(format!(
                    "arc ({}, {}) out of range for sentence of length {}",
                    a.head, a.dep, self.n
                )));
            }
            if a.head == a.dep {
                return Err(SgcnError::Data(format!(
                    "self-referential arc at position {} (self loops are implicit)",
                    a.head
                )));
            }
            if a.label >= n_labels {
                return Err(SgcnError::Data(format!(
                    "arc label id {} out of range ({n_labels} labels)",
                    a.label
                )));
            }
        }
        Ok(())
    }
}

/// Token vocabulary with the four reserved ids prepended.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Keep tokens with frequency >= `min_freq`, ordered by (-freq, token)
    /// so the id assignment is deterministic. `max_size` caps the number of
    /// non-reserved entries.
    pub fn build<'a, I>(corpus: I, min_freq: usize, max_size: Option<usize>) -> Result<Vocabulary>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for sent in corpus {
            any = true;
            for tok in sent {
                *freq.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(SgcnError::Config("cannot build vocabulary from empty corpus".into()));
        }
        let mut items: Vec<(&str, usize)> =
            freq.into_iter().filter(|&(_, f)| f >= min_freq).collect();
        items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        if let Some(cap) = max_size {
            items.truncate(cap);
        }
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(items.into_iter().map(|(t, _)| t.to_string()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn from_tokens(tokens: Vec<String>) -> Vocabulary {
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token: tokens,
        }
    }
}

/// Dependency-label vocabulary plus the folded directed-label space of size
/// 2 * |labels| + 1. Label id 0 is the reserved unknown label; directed id 0
/// is the reserved self label.
#[derive(Debug, Clone)]
pub struct EdgeVocabulary {
    label_to_id: HashMap<String, usize>,
    id_to_label: Vec<String>,
}

pub const UNK_LABEL: usize = 0;
pub const SELF_DIRECTED: usize = 0;

impl EdgeVocabulary {
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(labels: I) -> EdgeVocabulary {
        let mut uniq: Vec<&str> = Vec::new();
        let mut seen: HashMap<&str, ()> = HashMap::new();
        for l in labels {
            if seen.insert(l, ()).is_none() {
                uniq.push(l);
            }
        }
        uniq.sort_unstable();
        let mut id_to_label = vec!["<unk-label>".to_string()];
        id_to_label.extend(uniq.into_iter().map(|s| s.to_string()));
        let label_to_id = id_to_label
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        EdgeVocabulary {
            label_to_id,
            id_to_label,
        }
    }

    pub fn from_labels(id_to_label: Vec<String>) -> EdgeVocabulary {
        let label_to_id = id_to_label
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        EdgeVocabulary {
            label_to_id,
            id_to_label,
        }
    }

    /// Unknown labels fold onto the reserved unknown-label id.
    pub fn id(&self, label: &str) -> usize {
        self.label_to_id.get(label).copied().unwrap_or(UNK_LABEL)
    }

    pub fn label(&self, id: usize) -> &str {
        &self.id_to_label[id]
    }

    pub fn n_labels(&self) -> usize {
        self.id_to_label.len()
    }

    pub fn n_directed(&self) -> usize {
        2 * self.n_labels() + 1
    }

    pub fn labels(&self) -> &[String] {
        &self.id_to_label
    }
}

/// Fold (label, direction) into a directed-label id. Pure and invertible;
/// the self label has the fixed id 0.
pub fn directed_id(label: usize, dir: Dir) -> usize {
    match dir {
        Dir::Loop => SELF_DIRECTED,
        Dir::In => 1 + 2 * label,
        Dir::Out => 2 + 2 * label,
    }
}

/// Inverse of [`directed_id`].
pub fn undirected(directed: usize) -> (Option<usize>, Dir) {
    if directed == SELF_DIRECTED {
        (None, Dir::Loop)
    } else if directed % 2 == 1 {
        (Some((directed - 1) / 2), Dir::In)
    } else {
        (Some((directed - 2) / 2), Dir::Out)
    }
}

/// A sentence as read from disk, labels still as strings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RawSentence {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    #[serde(default)]
    pub arcs: Vec<(usize, usize, String)>,
}

/// A numerized sentence ready for batching. Target ids carry no BOS/EOS
/// framing; the batcher adds it.
#[derive(Debug, Clone)]
pub struct Sentence {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub graph: DepGraph,
}

pub fn numerize(
    raw: &RawSentence,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    edge_vocab: &EdgeVocabulary,
) -> Result<Sentence> {
    let graph = DepGraph {
        n: raw.src.len(),
        arcs: raw
            .arcs
            .iter()
            .map(|(h, d, l)| Arc {
                head: *h,
                dep: *d,
                label: edge_vocab.id(l),
            })
            .collect(),
    };
    graph.validate(edge_vocab.n_labels())?;
    Ok(Sentence {
        src: raw.src.iter().map(|t| src_vocab.id(t)).collect(),
        tgt: raw.tgt.iter().map(|t| tgt_vocab.id(t)).collect(),
        graph,
    })
}

/// Derive per-epoch shuffle rngs and similar from a base seed.
pub fn epoch_rng(seed: u64, stream: crate::rng::Stream, epoch: u64) -> Rng {
    Rng::with_stream(seed, stream, epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sents(v: &[&[&str]]) -> Vec<Vec<String>> {
        v.iter()
            .map(|s| s.iter().map(|t| t.to_string()).collect())
            .collect()
    }

    #[test]
    fn vocab_min_freq_cutoff() {
        // freqs: a:5, b:2, c:3
        let corpus = sents(&[
            &["a", "a", "a", "a", "a"],
            &["b", "b", "c", "c", "c"],
        ]);
        let v =
            Vocabulary::build(corpus.iter().map(|s| s.as_slice()), 3, None).unwrap();
        assert_eq!(v.len(), 4 + 2);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("c"), 5);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn vocab_max_size_keeps_most_frequent() {
        let corpus = sents(&[&["a", "a", "b"]]);
        let v =
            Vocabulary::build(corpus.iter().map(|s| s.as_slice()), 1, Some(1)).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn vocab_build_is_deterministic() {
        let corpus = sents(&[&["x", "y", "z", "y", "x", "w"]]);
        let a = Vocabulary::build(corpus.iter().map(|s| s.as_slice()), 1, None).unwrap();
        let b = Vocabulary::build(corpus.iter().map(|s| s.as_slice()), 1, None).unwrap();
        assert_eq!(a.tokens(), b.tokens());
    }

    #[test]
    fn vocab_empty_corpus_is_error() {
        let corpus: Vec<Vec<String>> = Vec::new();
        assert!(matches!(
            Vocabulary::build(corpus.iter().map(|s| s.as_slice()), 1, None),
            Err(SgcnError::Config(_))
        ));
    }

    #[test]
    fn directed_label_roundtrip() {
        for label in 0..10 {
            for dir in [Dir::In, Dir::Out] {
                let d = directed_id(label, dir);
                assert_eq!(undirected(d), (Some(label), dir));
            }
        }
        assert_eq!(undirected(directed_id(0, Dir::Loop)), (None, Dir::Loop));
    }

    #[test]
    fn directed_space_size() {
        let ev = EdgeVocabulary::build(["nsubj", "dobj", "det"]);
        assert_eq!(ev.n_labels(), 4); // 3 + unknown
        assert_eq!(ev.n_directed(), 9);
        let max = (0..ev.n_labels())
            .flat_map(|l| [directed_id(l, Dir::In), directed_id(l, Dir::Out)])
            .max()
            .unwrap();
        assert_eq!(max, ev.n_directed() - 1);
    }

    #[test]
    fn unknown_label_maps_to_reserved_id() {
        let ev = EdgeVocabulary::build(["nsubj"]);
        assert_eq!(ev.id("xcomp"), UNK_LABEL);
    }

    #[test]
    fn graph_rejects_self_loop_arc() {
        let g = DepGraph {
            n: 3,
            arcs: vec![Arc {
                head: 1,
                dep: 1,
                label: 0,
            }],
        };
        assert!(g.validate(5).is_err());
    }
}
