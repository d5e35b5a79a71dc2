//! End-to-end acceptance checks. Every numbered check prints exactly one
//! pass/fail line with its measured value and pinned threshold; the test
//! fails only after all checks have run, so the full scoreboard is always
//! visible.
//!
//! The heavyweight full-scale reordering run (25k sequences) is behind
//! `--ignored`; everything else runs in `cargo test`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use sgcn::checks::grad_check_suite;
use sgcn::config::RunConfig;
use sgcn::data::jsonl::read_jsonl;
use sgcn::data::synthetic::{generate_reorder_dataset, toy_translation_dataset, ReorderConfig};
use sgcn::data::{
    make_batches, numerize, Arc, DepGraph, EdgeVocabulary, RawSentence, Sentence, Vocabulary,
};
use sgcn::encoders::{encode, gcn_layer_param_count, init_encoder_params, EncoderConfig, EncoderKind};
use sgcn::metrics::{bleu, kendall_tau};
use sgcn::model::{ModelConfig, Seq2SeqModel};
use sgcn::rng::Rng;
use sgcn::tensor::adam::AdamState;
use sgcn::tensor::{Graph, ParamStore};
use sgcn::train::{gate_bias_mean, synthetic_label_groups, train, RunLog, TrainConfig};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

struct Scoreboard {
    lines: Vec<(bool, String)>,
}

impl Scoreboard {
    fn new() -> Self {
        Scoreboard { lines: Vec::new() }
    }

    fn record(&mut self, pass: bool, line: String) {
        println!("[{}] {line}", if pass { "pass" } else { "FAIL" });
        self.lines.push((pass, line));
    }

    fn finish(self) {
        let failures: Vec<&String> = self
            .lines
            .iter()
            .filter(|(p, _)| !p)
            .map(|(_, l)| l)
            .collect();
        assert!(failures.is_empty(), "failed checks: {failures:#?}");
    }
}

/// Build vocabularies from the training half and numerize both halves,
/// mirroring what the training command does.
fn prepare(
    train_raw: &[RawSentence],
    val_raw: &[RawSentence],
) -> (Vocabulary, Vocabulary, EdgeVocabulary, Vec<Sentence>, Vec<Sentence>) {
    let src_sents: Vec<&[String]> = train_raw.iter().map(|r| r.src.as_slice()).collect();
    let tgt_sents: Vec<&[String]> = train_raw.iter().map(|r| r.tgt.as_slice()).collect();
    let src_vocab = Vocabulary::build(src_sents.iter().copied(), 1, None).unwrap();
    let tgt_vocab = Vocabulary::build(tgt_sents.iter().copied(), 1, None).unwrap();
    let edge_vocab = EdgeVocabulary::build(
        train_raw
            .iter()
            .flat_map(|r| r.arcs.iter().map(|(_, _, l)| l.as_str())),
    );
    let num = |raw: &[RawSentence]| -> Vec<Sentence> {
        raw.iter()
            .map(|r| numerize(r, &src_vocab, &tgt_vocab, &edge_vocab).unwrap())
            .collect()
    };
    let train_set = num(train_raw);
    let val_set = num(val_raw);
    (src_vocab, tgt_vocab, edge_vocab, train_set, val_set)
}

/// Train a fresh model with the given run configuration, stopping early
/// once `stop` returns true (evaluated every `chunk` epochs). Returns the
/// model and the run log.
fn train_to_target(
    cfg: &RunConfig,
    train_raw: &[RawSentence],
    val_raw: &[RawSentence],
    stop: impl Fn(&Seq2SeqModel<f32>, &RunLog) -> bool,
    chunk: usize,
) -> (Seq2SeqModel<f32>, RunLog) {
    let (src_vocab, tgt_vocab, edge_vocab, train_set, val_set) = prepare(train_raw, val_raw);
    let mut model = Seq2SeqModel::<f32>::init(
        ModelConfig {
            encoder: cfg.encoder_config(),
            decoder: cfg.decoder_config(),
        },
        src_vocab,
        tgt_vocab,
        edge_vocab,
        cfg.seed,
    )
    .unwrap();
    let base = cfg.train_config();
    let mut adam = AdamState::new(base.adam.clone());
    let mut log = RunLog::default();
    let mut done = 0usize;
    while done < cfg.epochs {
        let step = chunk.min(cfg.epochs - done);
        let tcfg = TrainConfig {
            epochs: step,
            ..base.clone()
        };
        train(&mut model, &train_set, &val_set, &tcfg, None, done, &mut adam, &mut log).unwrap();
        done += step;
        if stop(&model, &log) {
            break;
        }
    }
    (model, log)
}

// ---------------------------------------------------------------------------
// 1-3, 9a: synthetic reordering suite (reduced size).
// ---------------------------------------------------------------------------

fn check_reordering_suite(board: &mut Scoreboard) {
    let cfg = RunConfig::load(&root().join("configs/synthetic-birnn-gcn1-reduced.conf")).unwrap();
    assert_eq!(cfg.epochs, 15, "reduced preset is budgeted at 15 epochs");
    let data_cfg = ReorderConfig {
        n_train: 5000,
        n_val: 500,
        ..ReorderConfig::default()
    };
    let (train_raw, val_raw) = generate_reorder_dataset(&data_cfg, cfg.seed).unwrap();

    let clock = Instant::now();
    let (model, log) = train_to_target(&cfg, &train_raw, &val_raw, |_, log| log.best_bleu4 >= 90.0, 3);
    let secs = clock.elapsed().as_secs_f64();
    board.record(
        log.best_bleu4 >= 90.0 && secs <= 600.0,
        format!(
            "1: reduced reordering preset reaches BLEU4 {:.2} (>= 90.0) within {} epochs \
             (<= 15) in {:.0}s (<= 600s)",
            log.best_bleu4,
            log.epochs.len(),
            secs
        ),
    );

    // Identical model minus the graph-convolutional layers, same data.
    let mut plain_cfg = cfg.clone();
    plain_cfg.gcn_layers = 0;
    let (_, plain_log) = train_to_target(&plain_cfg, &train_raw, &val_raw, |_, _| false, 15);
    board.record(
        plain_log.best_bleu4 < 40.0,
        format!(
            "2: same BiGRU without GCN layers stays at BLEU4 {:.2} (< 40.0)",
            plain_log.best_bleu4
        ),
    );

    let (real, fake) = synthetic_label_groups(&model.edge_vocab);
    let sep = gate_bias_mean(&model.params, model.config.encoder.gcn_layers, &real).unwrap()
        - gate_bias_mean(&model.params, model.config.encoder.gcn_layers, &fake).unwrap();
    board.record(
        sep >= 0.5,
        format!("3: gate-bias separation real-minus-fake = {sep:.3} (>= 0.5)"),
    );

    board.record(
        log.best_bleu4 >= plain_log.best_bleu4,
        format!(
            "9a: reordering ordering BiGRU+GCN {:.2} >= BiGRU {:.2}",
            log.best_bleu4, plain_log.best_bleu4
        ),
    );
}

// ---------------------------------------------------------------------------
// 4: gradient correctness on every encoder variant + decoder.
// ---------------------------------------------------------------------------

fn check_gradients(board: &mut Scoreboard) {
    let reports = grad_check_suite(11).unwrap();
    let mut worst = 0.0f64;
    let mut all_pass = true;
    let mut names = Vec::new();
    for (name, report) in &reports {
        all_pass &= report.passed();
        worst = worst.max(report.max_rel_err);
        names.push(name.as_str());
    }
    board.record(
        all_pass,
        format!(
            "4: gradient check [{}] max rel err {worst:.2e} (<= 1e-3, eps 1e-5, 64-bit)",
            names.join(", ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 5: parameter-count audit of one GCN layer.
// ---------------------------------------------------------------------------

fn check_param_count(board: &mut Scoreboard) {
    let mut ok = true;
    let mut parts = Vec::new();
    for (d, l) in [(8usize, 7usize), (128, 11)] {
        let mut params: ParamStore<f64> = ParamStore::new();
        let cfg = EncoderConfig {
            kind: EncoderKind::Bow,
            emb_dim: d,
            hidden_dim: d,
            cnn_window: 5,
            gcn_layers: 1,
            dropout: 0.0,
            edge_dropout: 0.0,
            max_pos: 16,
        };
        let mut rng = Rng::new(5);
        init_encoder_params(&mut params, &cfg, 10, l, &mut rng).unwrap();
        let actual: usize = params
            .iter()
            .filter(|(name, _)| name.starts_with("encoder.gcn.0."))
            .map(|(_, p)| p.data.len())
            .sum();
        let formula = 3 * d * d + l * d + 3 * d + l;
        ok &= actual == formula && gcn_layer_param_count(d, l) == formula;
        parts.push(format!("(d={d}, L={l}): {actual} == {formula}"));
    }
    board.record(ok, format!("5: GCN layer scalar counts {}", parts.join("; ")));
}

// ---------------------------------------------------------------------------
// 6: k-layer locality on random 8-node graphs.
// ---------------------------------------------------------------------------

/// Undirected hop distances from `start` (messages flow along arcs in both
/// directions, so locality is over the undirected graph).
fn hop_distances(n: usize, arcs: &[Arc], start: usize) -> Vec<usize> {
    let mut adj = vec![Vec::new(); n];
    for a in arcs {
        adj[a.head].push(a.dep);
        adj[a.dep].push(a.head);
    }
    let mut dist = vec![usize::MAX; n];
    dist[start] = 0;
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

fn encode_rows(cfg: &EncoderConfig, params: &ParamStore<f64>, graph: &DepGraph) -> Vec<f64> {
    let src: Vec<usize> = (1..=graph.n).collect(); // distinct token per node
    let mask = vec![true; graph.n];
    let mut g: Graph<f64> = Graph::new(false);
    let mut rng = Rng::new(0); // eval mode: never consulted
    let enc = encode(&mut g, params, cfg, &src, &mask, Some(graph), &mut rng).unwrap();
    g.value(enc).to_vec()
}

fn check_locality(board: &mut Scoreboard) {
    let n = 8usize;
    let d = 4usize;
    let mut rng = Rng::new(17);
    let mut ok = true;
    let mut trials_run = 0usize;
    for k in [1usize, 2] {
        let cfg = EncoderConfig {
            kind: EncoderKind::Bow,
            emb_dim: d,
            hidden_dim: d,
            cnn_window: 3,
            gcn_layers: k,
            dropout: 0.0,
            edge_dropout: 0.0,
            max_pos: 16,
        };
        let mut done = 0usize;
        while done < 100 {
            // Random tree: node i attaches to an earlier node.
            let arcs: Vec<Arc> = (1..n)
                .map(|i| Arc {
                    head: rng.below(i),
                    dep: i,
                    label: 1 + rng.below(2),
                })
                .collect();
            let graph = DepGraph { n, arcs };
            let v = rng.below(n);
            let dist = hop_distances(n, &graph.arcs, v);
            let far: Vec<usize> = (0..n).filter(|&u| dist[u] > k && dist[u] != usize::MAX).collect();
            if far.is_empty() {
                continue; // graph too shallow for this k; draw another
            }
            let u = far[rng.below(far.len())];

            let mut params: ParamStore<f64> = ParamStore::new();
            let mut init_rng = Rng::new(100 + done as u64);
            init_encoder_params(&mut params, &cfg, n + 2, 7, &mut init_rng).unwrap();
            let before = encode_rows(&cfg, &params, &graph);
            // Perturb the embedding of the token sitting at node u
            // (token id u+1), then re-encode.
            let emb = params.get_mut("encoder.emb").unwrap();
            for c in 0..d {
                emb.data[(u + 1) * d + c] += 0.25;
            }
            let after = encode_rows(&cfg, &params, &graph);
            let row = |x: &[f64]| x[v * d..(v + 1) * d].to_vec();
            ok &= row(&before) == row(&after);
            done += 1;
            trials_run += 1;
        }
    }
    board.record(
        ok,
        format!(
            "6: h_v invariant to embedding perturbations > k hops away \
             (k in {{1, 2}}, {trials_run} trials, exact equality)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 7: metric oracles (brute-force BLEU counter, exhaustive Kendall tau).
// ---------------------------------------------------------------------------

/// Quadratic-scan BLEU: no hash maps, matches counted per first occurrence.
fn brute_bleu4(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let count_in = |hay: &[String], needle: &[String]| -> usize {
        if hay.len() < needle.len() {
            return 0;
        }
        (0..=hay.len() - needle.len())
            .filter(|&i| &hay[i..i + needle.len()] == needle)
            .count()
    };
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            if h.len() < n {
                continue;
            }
            totals[n - 1] += h.len() - n + 1;
            for i in 0..=h.len() - n {
                let gram = &h[i..i + n];
                let first = (0..i).all(|j| j + n > h.len() || &h[j..j + n] != gram);
                if first {
                    matches[n - 1] += count_in(h, gram).min(count_in(r, gram));
                }
            }
        }
    }
    if hyp_len == 0 || matches.iter().zip(&totals).any(|(&m, &t)| m == 0 || t == 0) {
        return 0.0;
    }
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0);
    let log_mean: f64 = (0..4)
        .map(|n| (matches[n] as f64 / totals[n] as f64).ln())
        .sum::<f64>()
        / 4.0;
    100.0 * bp * log_mean.exp()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 1 {
        return vec![vec![0]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for slot in 0..n {
            let mut q = p.clone();
            q.insert(slot, n - 1);
            out.push(q);
        }
    }
    out
}

fn check_metric_oracles(board: &mut Scoreboard) {
    let mut rng = Rng::new(23);
    let vocab = ["a", "b", "c", "d", "e", "f"];
    let mut max_diff = 0.0f64;
    for _ in 0..100 {
        let n_sents = 2 + rng.below(7);
        let mut hyps = Vec::new();
        let mut refs = Vec::new();
        for _ in 0..n_sents {
            let sent = |rng: &mut Rng| -> Vec<String> {
                (0..1 + rng.below(12))
                    .map(|_| vocab[rng.below(vocab.len())].to_string())
                    .collect()
            };
            hyps.push(sent(&mut rng));
            refs.push(sent(&mut rng));
        }
        let (_, b4) = bleu(&hyps, &refs, 4).unwrap();
        max_diff = max_diff.max((b4 - brute_bleu4(&hyps, &refs)).abs());
    }
    board.record(
        max_diff <= 0.01,
        format!("7a: BLEU4 vs brute-force counter, max |diff| {max_diff:.2e} (<= 0.01) over 100 corpora"),
    );

    // Exhaustive tau check: hypotheses are all permutations of distinct
    // tokens, the reference is sorted order; the oracle counts concordant
    // minus discordant pairs directly.
    let names = ["a", "b", "c", "d", "e", "f"];
    let mut max_tau_diff = 0.0f64;
    let mut cases = 0usize;
    for n in 2..=6 {
        let reference: Vec<String> = names[..n].iter().map(|s| s.to_string()).collect();
        for perm in permutations(n) {
            let hyp: Vec<String> = perm.iter().map(|&i| names[i].to_string()).collect();
            let mut concordant = 0i64;
            let mut discordant = 0i64;
            for i in 0..n {
                for j in i + 1..n {
                    if perm[i] < perm[j] {
                        concordant += 1;
                    } else {
                        discordant += 1;
                    }
                }
            }
            let oracle = (concordant - discordant) as f64 / (concordant + discordant) as f64;
            let got = kendall_tau(&hyp, &reference).unwrap();
            max_tau_diff = max_tau_diff.max((got - oracle).abs());
            cases += 1;
        }
    }
    board.record(
        max_tau_diff < 1e-12,
        format!("7b: Kendall tau vs pair enumeration, max |diff| {max_tau_diff:.2e} over {cases} permutations"),
    );
}

// ---------------------------------------------------------------------------
// 8, 9b: tiny-MT overfit across all six encoder configurations.
// ---------------------------------------------------------------------------

fn check_tiny_mt(board: &mut Scoreboard) {
    // The shipped corpus must match its generator (seed 1).
    let train_raw = read_jsonl(&root().join("data/toy-mt/train.jsonl")).unwrap();
    let val_raw = read_jsonl(&root().join("data/toy-mt/val.jsonl")).unwrap();
    let (gen_train, gen_val) = toy_translation_dataset(50, 10, 1);
    assert_eq!(train_raw, gen_train, "shipped toy corpus drifted from its generator");
    assert_eq!(val_raw, gen_val);

    let presets = [
        "toy-mt-bow",
        "toy-mt-bow-gcn2",
        "toy-mt-cnn",
        "toy-mt-cnn-gcn2",
        "toy-mt-birnn",
        "toy-mt-birnn-gcn2",
    ];
    let mut results = Vec::new();
    for name in presets {
        let cfg = RunConfig::load(&root().join(format!("configs/{name}.conf"))).unwrap();
        assert!(cfg.epochs <= 200, "overfit budget is 200 epochs");
        // Teacher-forced token accuracy over the 50 training pairs; the stop
        // rule requires both the accuracy and the BLEU bar, so training only
        // halts once the pair is jointly met (or the epoch budget runs out).
        let (_, _, _, train_set, _) = prepare(&train_raw, &val_raw);
        let batches = make_batches(&train_set, cfg.batch_size, cfg.max_len, None);
        let seed = cfg.seed;
        let (model, log) = train_to_target(
            &cfg,
            &train_raw,
            &train_raw,
            |model, log| {
                log.best_bleu4 >= 95.0
                    && model.token_accuracy(&batches, seed).unwrap() >= 0.99
            },
            25,
        );
        let acc = model.token_accuracy(&batches, cfg.seed).unwrap();
        results.push((name, acc, log.best_bleu4, log.epochs.len()));
    }
    for (name, acc, b4, epochs) in &results {
        board.record(
            *acc >= 0.99 && *b4 >= 95.0,
            format!(
                "8: {name} overfits 50 pairs: token accuracy {:.1}% (>= 99%), \
                 BLEU4 {b4:.2} (>= 95) after {epochs} epochs (<= 200)",
                100.0 * acc
            ),
        );
    }
    // Qualitative ordering mirrored from the full-scale tables: adding GCN
    // layers never hurts the recurrent baseline. Both scores sit at the
    // overfit ceiling here, so this is an ordering check, not an effect size.
    let get = |name: &str| results.iter().find(|r| r.0 == name).unwrap().2;
    let (plain, gcn) = (get("toy-mt-birnn"), get("toy-mt-birnn-gcn2"));
    board.record(
        gcn >= plain - 1.0,
        format!("9b: tiny-MT ordering BiGRU+GCN {gcn:.2} >= BiGRU {plain:.2} (tolerance 1.0)"),
    );
    println!(
        "note: full-scale WMT BLEU tables (BiGRU 14.9 vs +GCN 16.1 and ablations) \
         need corpus-scale data and GPUs; the relative orderings above stand in for them"
    );
}

#[test]
fn acceptance() {
    let mut board = Scoreboard::new();
    check_gradients(&mut board);
    check_param_count(&mut board);
    check_locality(&mut board);
    check_metric_oracles(&mut board);
    check_tiny_mt(&mut board);
    check_reordering_suite(&mut board);
    board.finish();
}

/// Full-size reordering run: 25000 training sequences, BLEU4 >= 95 within
/// 10 epochs. Takes tens of minutes on one core; run with
/// `cargo test --test acceptance -- --ignored`.
#[test]
#[ignore]
fn acceptance_full_scale() {
    let cfg = RunConfig::load(&root().join("configs/synthetic-birnn-gcn1.conf")).unwrap();
    assert_eq!(cfg.epochs, 10);
    let (train_raw, val_raw) =
        generate_reorder_dataset(&ReorderConfig::default(), cfg.seed).unwrap();
    let (_, log) = train_to_target(&cfg, &train_raw, &val_raw, |_, log| log.best_bleu4 >= 95.0, 2);
    println!(
        "[{}] 1 (full): reordering preset reaches BLEU4 {:.2} (>= 95.0) within {} epochs (<= 10)",
        if log.best_bleu4 >= 95.0 { "pass" } else { "FAIL" },
        log.best_bleu4,
        log.epochs.len()
    );
    assert!(log.best_bleu4 >= 95.0);
}
