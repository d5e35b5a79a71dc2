//! Command-line harness: data generation, training, translation,
//! evaluation, gradient checking and gate-bias reporting.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use sgcn::checks::grad_check_suite;
use sgcn::config::RunConfig;
use sgcn::data::jsonl::{read_jsonl, read_tokenized_lines, write_jsonl};
use sgcn::data::synthetic::{generate_reorder_dataset, toy_translation_dataset, ReorderConfig};
use sgcn::data::{conllu, numerize, DepGraph, EdgeVocabulary, RawSentence, Sentence, Vocabulary};
use sgcn::error::{Result, SgcnError};
use sgcn::metrics::{bleu, bleu_by_length, corpus_kendall_tau};
use sgcn::model::{load_checkpoint, ModelConfig, Seq2SeqModel};
use sgcn::tensor::adam::AdamState;
use sgcn::train::{gate_bias_mean, restore_resume_state, synthetic_label_groups, train, RunLog};

#[derive(Parser)]
#[command(name = "sgcn", about = "Syntax-aware seq2seq translation with graph-convolutional encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic reordering corpus as JSONL files.
    GenSynthetic(GenArgs),
    /// Train a model from a config file; writes checkpoints and logs.
    Train(TrainArgs),
    /// Greedy-decode a tokenized source file with a trained checkpoint.
    Translate(TranslateArgs),
    /// Score a hypothesis file against a reference file.
    Eval(EvalArgs),
    /// Verify tape gradients against central differences (64-bit).
    GradCheck(GradCheckArgs),
    /// Report mean edge-gate biases per label group from a checkpoint.
    GateReport(GateReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Directory for train.jsonl and val.jsonl
    #[arg(long)]
    out_dir: PathBuf,
    /// Which corpus to generate: "reorder" (permuted sequences recoverable
    /// through labeled arcs) or "toy-mt" (word-for-word parallel pairs with
    /// dependency trees)
    #[arg(long, default_value = "reorder")]
    task: String,
    #[arg(long, default_value_t = 25000)]
    train: usize,
    #[arg(long, default_value_t = 1000)]
    val: usize,
    #[arg(long, default_value_t = 3)]
    len_min: usize,
    #[arg(long, default_value_t = 10)]
    len_max: usize,
    #[arg(long, default_value_t = 26)]
    vocab: usize,
    #[arg(long, default_value_t = 5)]
    real_labels: usize,
    #[arg(long, default_value_t = 5)]
    fake_labels: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key-value config file
    #[arg(long)]
    config: PathBuf,
    /// Override one config key, e.g. --set epochs=3 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from run_dir/last.ckpt, keeping epoch numbering
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Tokenized source, one sentence per line
    #[arg(long)]
    input: PathBuf,
    /// Dependency graphs: .conllu, or .jsonl with src/arcs fields.
    /// Required when the checkpoint has GCN layers.
    #[arg(long)]
    graphs: Option<PathBuf>,
    /// Hypothesis output path (stdout when omitted)
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Emit a per-length-bucket CSV with this many quantile buckets
    #[arg(long)]
    by_length: Option<usize>,
    /// Bucket CSV output path (stdout when omitted)
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GateReportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated label names for the first group (default: r-prefixed)
    #[arg(long)]
    real: Option<String>,
    /// Comma-separated label names for the second group (default: f-prefixed)
    #[arg(long)]
    fake: Option<String>,
}

fn env_seed() -> Option<u64> {
    std::env::var("SGCN_SEED").ok().and_then(|v| v.parse().ok())
}

fn cmd_gen_synthetic(args: &GenArgs) -> Result<()> {
    let seed = args.seed.or_else(env_seed).unwrap_or(1);
    if args.task == "toy-mt" {
        let (train_set, val_set) = toy_translation_dataset(args.train, args.val, seed);
        std::fs::create_dir_all(&args.out_dir)?;
        write_jsonl(&args.out_dir.join("train.jsonl"), &train_set)?;
        write_jsonl(&args.out_dir.join("val.jsonl"), &val_set)?;
        println!(
            "wrote {} train and {} validation pairs to {}",
            train_set.len(),
            val_set.len(),
            args.out_dir.display()
        );
        return Ok(());
    }
    if args.task != "reorder" {
        return Err(SgcnError::Config(format!(
            "unknown task {:?}; expected \"reorder\" or \"toy-mt\"",
            args.task
        )));
    }
    let cfg = ReorderConfig {
        n_train: args.train,
        n_val: args.val,
        len_min: args.len_min,
        len_max: args.len_max,
        vocab_size: args.vocab,
        n_real_labels: args.real_labels,
        n_fake_labels: args.fake_labels,
    };
    let (train_set, val_set) = generate_reorder_dataset(&cfg, seed)?;
    std::fs::create_dir_all(&args.out_dir)?;
    write_jsonl(&args.out_dir.join("train.jsonl"), &train_set)?;
    write_jsonl(&args.out_dir.join("val.jsonl"), &val_set)?;
    println!(
        "wrote {} train and {} validation sequences to {}",
        train_set.len(),
        val_set.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn load_run_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(seed) = env_seed() {
        cfg.seed = seed;
    }
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        SgcnError::Config(format!("cannot read config {}: {e}", args.config.display()))
    })?;
    cfg.apply_text(&text)?;
    for ov in &args.overrides {
        let (k, v) = ov.split_once('=').ok_or_else(|| {
            SgcnError::Config(format!("override must look like key=value, got {ov:?}"))
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn numerize_corpus(
    raws: &[RawSentence],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    edge_vocab: &EdgeVocabulary,
) -> Result<Vec<Sentence>> {
    raws.iter()
        .map(|r| numerize(r, src_vocab, tgt_vocab, edge_vocab))
        .collect()
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = load_run_config(args)?;
    let train_path = cfg
        .train
        .as_ref()
        .ok_or_else(|| SgcnError::Config("config must set 'train'".into()))?;
    let val_path = cfg
        .val
        .as_ref()
        .ok_or_else(|| SgcnError::Config("config must set 'val'".into()))?;
    let run_dir = cfg
        .run_dir
        .as_ref()
        .ok_or_else(|| SgcnError::Config("config must set 'run_dir'".into()))?;

    let train_raw = read_jsonl(train_path)?;
    let val_raw = read_jsonl(val_path)?;
    if train_raw.is_empty() {
        return Err(SgcnError::Data(format!("{} is empty", train_path.display())));
    }
    std::fs::create_dir_all(run_dir)?;
    std::fs::write(run_dir.join("config.resolved"), cfg.to_text())?;

    let tcfg = cfg.train_config();
    let last = run_dir.join("last.ckpt");
    let mut adam = AdamState::new(tcfg.adam.clone());
    let mut log = RunLog::default();
    let (mut model, start_epoch) = if args.resume {
        if !last.exists() {
            return Err(SgcnError::Config(format!(
                "--resume requested but {} does not exist",
                last.display()
            )));
        }
        // The sidecar vocabularies are authoritative when resuming.
        let mut model = Seq2SeqModel::<f32>::load(&last)?;
        let raw = load_checkpoint::<f32>(&last)?;
        let (epoch, _) = restore_resume_state(&raw, &mut model, &mut adam)?;
        if let Ok(prev) = std::fs::read_to_string(run_dir.join("log.csv")) {
            for line in prev.lines().skip(1) {
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() == 5 {
                    log.epochs.push(sgcn::train::EpochStats {
                        epoch: cols[0].parse().unwrap_or(0),
                        train_loss: cols[1].parse().unwrap_or(f64::NAN),
                        bleu1: cols[2].parse().unwrap_or(0.0),
                        bleu4: cols[3].parse().unwrap_or(0.0),
                        kendall: cols[4].parse().unwrap_or(0.0),
                    });
                }
            }
            for e in &log.epochs {
                if e.bleu4 > log.best_bleu4 || log.best_epoch.is_none() {
                    log.best_bleu4 = e.bleu4;
                    log.best_epoch = Some(e.epoch);
                }
            }
        }
        (model, epoch)
    } else {
        let src_sents: Vec<&[String]> = train_raw.iter().map(|r| r.src.as_slice()).collect();
        let tgt_sents: Vec<&[String]> = train_raw.iter().map(|r| r.tgt.as_slice()).collect();
        let src_vocab = Vocabulary::build(src_sents.iter().copied(), cfg.min_freq, cfg.max_vocab)?;
        let tgt_vocab = Vocabulary::build(tgt_sents.iter().copied(), cfg.min_freq, cfg.max_vocab)?;
        let edge_vocab = EdgeVocabulary::build(
            train_raw
                .iter()
                .flat_map(|r| r.arcs.iter().map(|(_, _, l)| l.as_str())),
        );
        let model = Seq2SeqModel::<f32>::init(
            ModelConfig {
                encoder: cfg.encoder_config(),
                decoder: cfg.decoder_config(),
            },
            src_vocab,
            tgt_vocab,
            edge_vocab,
            cfg.seed,
        )?;
        (model, 0)
    };

    let train_set = numerize_corpus(&train_raw, &model.src_vocab, &model.tgt_vocab, &model.edge_vocab)?;
    let val_set = numerize_corpus(&val_raw, &model.src_vocab, &model.tgt_vocab, &model.edge_vocab)?;

    train(
        &mut model,
        &train_set,
        &val_set,
        &tcfg,
        Some(run_dir),
        start_epoch,
        &mut adam,
        &mut log,
    )?;
    if let (Some(best), bleu4) = (log.best_epoch, log.best_bleu4) {
        println!("best epoch {best}: validation BLEU4 {bleu4:.2}");
    }
    println!("artifacts in {}", run_dir.display());
    Ok(())
}

fn load_graphs(path: &Path, edge_vocab: &EdgeVocabulary, expected: usize) -> Result<Vec<DepGraph>> {
    let is_conllu = path
        .extension()
        .map(|e| e == "conllu" || e == "conll")
        .unwrap_or(false);
    let parsed: Vec<(Vec<String>, Vec<(usize, usize, String)>)> = if is_conllu {
        conllu::load_conllu(path)?
    } else {
        read_jsonl(path)?
            .into_iter()
            .map(|r| (r.src, r.arcs))
            .collect()
    };
    if parsed.len() != expected {
        return Err(SgcnError::Data(format!(
            "{} has {} graphs but the input has {} sentences",
            path.display(),
            parsed.len(),
            expected
        )));
    }
    parsed
        .into_iter()
        .map(|(tokens, arcs)| {
            let g = DepGraph {
                n: tokens.len(),
                arcs: arcs
                    .iter()
                    .map(|(h, d, l)| sgcn::data::Arc {
                        head: *h,
                        dep: *d,
                        label: edge_vocab.id(l),
                    })
                    .collect(),
            };
            g.validate(edge_vocab.n_labels())?;
            Ok(g)
        })
        .collect()
}

fn cmd_translate(args: &TranslateArgs) -> Result<()> {
    let model = Seq2SeqModel::<f32>::load(&args.ckpt)?;
    let lines = read_tokenized_lines(&args.input)?;
    let needs_graph = model.config.encoder.gcn_layers > 0;
    let graphs = match (&args.graphs, needs_graph) {
        (Some(p), _) => Some(load_graphs(p, &model.edge_vocab, lines.len())?),
        (None, true) => {
            return Err(SgcnError::Config(
                "this checkpoint has GCN layers; pass --graphs with the dependency parses".into(),
            ))
        }
        (None, false) => None,
    };
    let mut out: Vec<String> = Vec::with_capacity(lines.len());
    for (i, tokens) in lines.iter().enumerate() {
        if tokens.is_empty() {
            out.push(String::new());
            continue;
        }
        let src: Vec<usize> = tokens.iter().map(|t| model.src_vocab.id(t)).collect();
        let graph = graphs.as_ref().map(|g| &g[i]);
        if let Some(g) = graph {
            if g.n != src.len() {
                return Err(SgcnError::Data(format!(
                    "graph {} covers {} tokens but the sentence has {}",
                    i + 1,
                    g.n,
                    src.len()
                )));
            }
        }
        let ids = model.translate(&src, graph)?;
        let words: Vec<&str> = ids.iter().map(|&id| model.tgt_vocab.token(id)).collect();
        out.push(words.join(" "));
    }
    let text = out.join("\n") + "\n";
    match &args.output {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let hyps = read_tokenized_lines(&args.hyp)?;
    let refs = read_tokenized_lines(&args.reference)?;
    if hyps.len() != refs.len() {
        return Err(SgcnError::Data(format!(
            "line count mismatch: {} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let (b1, b4) = bleu(&hyps, &refs, 4)?;
    let tau = corpus_kendall_tau(&hyps, &refs);
    let json = serde_json::json!({
        "bleu1": b1,
        "bleu4": b4,
        "kendall": tau,
    });
    println!("{json}");
    if let Some(buckets) = args.by_length {
        let rows = bleu_by_length(&hyps, &refs, buckets)?;
        let mut csv = String::from("min_len,max_len,count,bleu1,bleu4\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{:.4},{:.4}\n",
                r.min_len, r.max_len, r.count, r.bleu1, r.bleu4
            ));
        }
        match &args.csv {
            Some(p) => std::fs::write(p, csv)?,
            None => print!("{csv}"),
        }
    }
    Ok(())
}

fn cmd_grad_check(args: &GradCheckArgs) -> Result<()> {
    let seed = args.seed.or_else(env_seed).unwrap_or(1);
    let reports = grad_check_suite(seed)?;
    let mut all_ok = true;
    for (name, r) in &reports {
        let status = if r.passed() { "pass" } else { "FAIL" };
        println!(
            "{status}  {name}: {} coordinates, max relative error {:.3e} (tolerance {:.0e})",
            r.checked, r.max_rel_err, r.tol
        );
        for f in r.failures.iter().take(5) {
            println!(
                "      {}[{}]: analytic {:.6e} vs numeric {:.6e}",
                f.param, f.index, f.analytic, f.numeric
            );
        }
        all_ok &= r.passed();
    }
    if all_ok {
        Ok(())
    } else {
        Err(SgcnError::Numeric("gradient check failed".into()))
    }
}

fn cmd_gate_report(args: &GateReportArgs) -> Result<()> {
    let model = Seq2SeqModel::<f32>::load(&args.ckpt)?;
    let layers = model.config.encoder.gcn_layers;
    if layers == 0 {
        return Err(SgcnError::Config("checkpoint has no GCN layers".into()));
    }
    let resolve = |names: &str| -> Result<Vec<usize>> {
        names
            .split(',')
            .map(|n| {
                let n = n.trim();
                let id = model.edge_vocab.id(n);
                if id == sgcn::data::UNK_LABEL && n != model.edge_vocab.label(sgcn::data::UNK_LABEL)
                {
                    Err(SgcnError::Config(format!("label {n:?} not in edge vocabulary")))
                } else {
                    Ok(id)
                }
            })
            .collect()
    };
    let (real, fake) = match (&args.real, &args.fake) {
        (Some(r), Some(f)) => (resolve(r)?, resolve(f)?),
        (None, None) => {
            let (r, f) = synthetic_label_groups(&model.edge_vocab);
            if r.is_empty() || f.is_empty() {
                return Err(SgcnError::Config(
                    "labels do not follow the r*/f* scheme; pass --real and --fake".into(),
                ));
            }
            (r, f)
        }
        _ => {
            return Err(SgcnError::Config(
                "pass both --real and --fake, or neither".into(),
            ))
        }
    };
    let mean_real = gate_bias_mean(&model.params, layers, &real)?;
    let mean_fake = gate_bias_mean(&model.params, layers, &fake)?;
    println!("group,mean");
    println!("real,{mean_real:.6}");
    println!("fake,{mean_fake:.6}");
    println!("# separation (real - fake): {:.6}", mean_real - mean_fake);
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::try_parse().map_err(|e| {
        // clap usage errors should exit with the usage code, not clap's 2.
        if e.use_stderr() {
            eprint!("{e}");
            SgcnError::Config(String::new())
        } else {
            print!("{e}"); // --help / --version
            std::process::exit(0);
        }
    })?;
    match &cli.command {
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
        Command::Train(a) => cmd_train(a),
        Command::Translate(a) => cmd_translate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::GateReport(a) => cmd_gate_report(a),
    }
}

fn main() {
    match run() {
        Ok(()) => {}
        Err(e) => {
            let msg = e.to_string();
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            std::process::exit(e.exit_code());
        }
    }
}
