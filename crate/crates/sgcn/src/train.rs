//! Epoch loop with greedy-decode validation, BLEU-based model selection,
//! CSV run logs, gate-bias tracking and checkpoint resume.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{directed_id, make_batches, Dir, Sentence};
use crate::error::{Result, SgcnError};
use crate::metrics::{bleu, corpus_kendall_tau};
use crate::model::{save_checkpoint, Seq2SeqModel};
use crate::rng::{Rng, Stream};
use crate::tensor::adam::{AdamConfig, AdamState};
use crate::tensor::{Param, ParamStore, Real};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 45,
            batch_size: 80,
            max_len: 50,
            seed: 1,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub bleu1: f64,
    pub bleu4: f64,
    pub kendall: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub epochs: Vec<EpochStats>,
    /// Epoch number (1-based) of the best validation BLEU₄; ties go to the
    /// earlier epoch.
    pub best_epoch: Option<usize>,
    pub best_bleu4: f64,
}

impl RunLog {
    pub fn csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,bleu1,bleu4,kendall\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.6},{:.4},{:.4},{:.6}\n",
                e.epoch, e.train_loss, e.bleu1, e.bleu4, e.kendall
            ));
        }
        s
    }
}

/// Greedy-decode the validation set and score it. Returns
/// (BLEU₁, BLEU₄, mean Kendall τ).
pub fn evaluate<F: Real>(model: &Seq2SeqModel<F>, val: &[Sentence]) -> Result<(f64, f64, f64)> {
    let hyps: Vec<Result<Vec<String>>> = val
        .par_iter()
        .map(|s| {
            let ids = model.translate(&s.src, Some(&s.graph))?;
            Ok(ids
                .iter()
                .map(|&id| model.tgt_vocab.token(id).to_string())
                .collect())
        })
        .collect();
    let hyps: Vec<Vec<String>> = hyps.into_iter().collect::<Result<_>>()?;
    let refs: Vec<Vec<String>> = val
        .iter()
        .map(|s| {
            s.tgt
                .iter()
                .map(|&id| model.tgt_vocab.token(id).to_string())
                .collect()
        })
        .collect();
    let (b1, b4) = bleu(&hyps, &refs, 4)?;
    let tau = corpus_kendall_tau(&hyps, &refs).unwrap_or(0.0);
    Ok((b1, b4, tau))
}

/// Mean gate bias over the directed entries (both directions, all GCN
/// layers) of the given label ids.
pub fn gate_bias_mean<F: Real>(
    params: &ParamStore<F>,
    gcn_layers: usize,
    label_ids: &[usize],
) -> Result<f64> {
    if label_ids.is_empty() {
        return Err(SgcnError::Config("empty label group for gate-bias report".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for layer in 0..gcn_layers {
        let b = params
            .get(&format!("encoder.gcn.{layer}.gate_b"))
            .map_err(|_| {
                SgcnError::Config(format!("checkpoint has no GCN layer {layer} gate biases"))
            })?;
        for &l in label_ids {
            for dir in [Dir::In, Dir::Out] {
                let idx = directed_id(l, dir);
                if idx >= b.data.len() {
                    return Err(SgcnError::Config(format!(
                        "label id {l} out of range for gate bias vector of length {}",
                        b.data.len()
                    )));
                }
                sum += b.data[idx].to_f64();
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

/// Split a synthetic-task edge vocabulary into (real, fake) label id groups
/// by name prefix; both empty if the labels don't follow that scheme.
pub fn synthetic_label_groups(edge_vocab: &crate::data::EdgeVocabulary) -> (Vec<usize>, Vec<usize>) {
    let mut real = Vec::new();
    let mut fake = Vec::new();
    for (i, l) in edge_vocab.labels().iter().enumerate() {
        if l.starts_with('r') && l[1..].chars().all(|c| c.is_ascii_digit()) && l.len() > 1 {
            real.push(i);
        } else if l.starts_with('f') && l[1..].chars().all(|c| c.is_ascii_digit()) && l.len() > 1 {
            fake.push(i);
        }
    }
    (real, fake)
}

fn grad_diagnostics<F: Real>(grads: &crate::tensor::GradMap<F>) -> String {
    let mut norms: Vec<(String, f64)> = grads
        .iter()
        .map(|(name, g)| {
            let n = g
                .iter()
                .map(|&x| Real::to_f64(x) * Real::to_f64(x))
                .sum::<f64>()
                .sqrt();
            (name.clone(), n)
        })
        .collect();
    norms.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    norms
        .iter()
        .take(5)
        .map(|(n, v)| format!("{n}={v:.3e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Save model parameters plus optimizer moments and epoch/step bookkeeping
/// (as extra adam.* / meta.* tensors) so a run can resume.
pub fn save_resumable<F: Real>(
    path: &Path,
    model: &Seq2SeqModel<F>,
    adam: &AdamState<F>,
    epoch: usize,
    step: u64,
) -> Result<()> {
    let mut store = model.params.clone();
    for (name, _) in model.params.iter() {
        if let Some((m, v)) = adam.moments(name) {
            let shape = model.params.get(name).unwrap().shape.clone();
            store.insert(&format!("adam.m.{name}"), Param::new(shape.clone(), m.to_vec()));
            store.insert(&format!("adam.v.{name}"), Param::new(shape, v.to_vec()));
        }
    }
    store.insert("meta.epoch", Param::new(vec![1], vec![F::from_f64(epoch as f64)]));
    store.insert("meta.step", Param::new(vec![1], vec![F::from_f64(step as f64)]));
    save_checkpoint(path, &store)
}

/// Restore optimizer moments and bookkeeping written by [`save_resumable`].
/// Returns (last finished epoch, adam step count).
pub fn restore_resume_state<F: Real>(
    raw: &ParamStore<F>,
    model: &mut Seq2SeqModel<F>,
    adam: &mut AdamState<F>,
) -> Result<(usize, u64)> {
    let epoch = raw
        .get("meta.epoch")
        .map_err(|_| SgcnError::Data("checkpoint has no resume bookkeeping (meta.epoch)".into()))?
        .data[0]
        .to_f64() as usize;
    let step = raw
        .get("meta.step")
        .map_err(|_| SgcnError::Data("checkpoint has no resume bookkeeping (meta.step)".into()))?
        .data[0]
        .to_f64() as u64;
    adam.t = step;
    for (name, p) in raw.iter() {
        if let Some(base) = name.strip_prefix("adam.m.") {
            let v = raw
                .get(&format!("adam.v.{base}"))
                .map_err(|_| SgcnError::Data(format!("checkpoint missing adam.v.{base}")))?;
            adam.set_moments(base, p.data.clone(), v.data.clone());
        } else if !name.starts_with("adam.") && !name.starts_with("meta.") {
            let target = model
                .params
                .get_mut(name)
                .ok_or_else(|| SgcnError::Data(format!("checkpoint tensor {name} not in model")))?;
            if target.shape != p.shape {
                return Err(SgcnError::Data(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    p.shape, target.shape
                )));
            }
            target.data = p.data.clone();
        }
    }
    Ok((epoch, step))
}

/// Train for `cfg.epochs` epochs (or that many more when resuming), keeping
/// the checkpoint with the best validation BLEU₄ (ties favor the earlier
/// epoch). When `run_dir` is set, writes best.ckpt, last.ckpt, log.csv and a
/// gatebias.csv when the edge labels follow the synthetic r*/f* scheme.
/// `start_epoch`/`adam` carry resume state; pass 0 and a fresh state
/// otherwise.
pub fn train<F: Real>(
    model: &mut Seq2SeqModel<F>,
    train_set: &[Sentence],
    val_set: &[Sentence],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    start_epoch: usize,
    adam: &mut AdamState<F>,
    log: &mut RunLog,
) -> Result<()> {
    if train_set.is_empty() {
        return Err(SgcnError::Data("training corpus is empty".into()));
    }
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
    }
    let (real_labels, fake_labels) = synthetic_label_groups(&model.edge_vocab);
    let track_gates = model.config.encoder.gcn_layers > 0
        && !real_labels.is_empty()
        && !fake_labels.is_empty();

    let mut step: u64 = adam.t;
    for epoch in start_epoch + 1..=start_epoch + cfg.epochs {
        let mut shuffle = Rng::with_stream(cfg.seed, Stream::Shuffle, epoch as u64);
        let batches = make_batches(train_set, cfg.batch_size, cfg.max_len, Some(&mut shuffle));
        if batches.is_empty() {
            return Err(SgcnError::Data(
                "length filter removed every training sentence".into(),
            ));
        }
        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let (loss, grads) = model.batch_loss_and_grads(batch, cfg.seed, step)?;
            let finite = loss.is_finite()
                && grads
                    .values()
                    .all(|g| g.iter().all(|&x| Real::to_f64(x).is_finite()));
            if !finite {
                return Err(SgcnError::Numeric(format!(
                    "non-finite loss/gradient at epoch {epoch}, batch {bi} \
                     (loss={loss}); largest gradient norms: {}",
                    grad_diagnostics(&grads)
                )));
            }
            let tokens: usize = batch
                .tgt_mask
                .iter()
                .map(|m| m.iter().filter(|&&x| x).count() - 1)
                .sum();
            loss_sum += loss * tokens as f64;
            token_sum += tokens;
            adam.step(&mut model.params, &grads)?;
            step = adam.t;
        }
        let train_loss = loss_sum / token_sum as f64;
        let (bleu1, bleu4, kendall) = evaluate(model, val_set)?;
        log.epochs.push(EpochStats {
            epoch,
            train_loss,
            bleu1,
            bleu4,
            kendall,
        });
        let improved = bleu4 > log.best_bleu4 || log.best_epoch.is_none();
        if improved {
            log.best_bleu4 = bleu4;
            log.best_epoch = Some(epoch);
        }
        eprintln!(
            "epoch {epoch}: loss {train_loss:.4}, BLEU1 {bleu1:.2}, BLEU4 {bleu4:.2}, tau {kendall:.3}{}",
            if improved { "  (new best)" } else { "" }
        );
        if let Some(dir) = run_dir {
            if improved {
                model.save(&dir.join("best.ckpt"))?;
            }
            save_resumable(&dir.join("last.ckpt"), model, adam, epoch, step)?;
            std::fs::write(dir.join("log.csv"), log.csv())?;
            if track_gates {
                let real = gate_bias_mean(&model.params, model.config.encoder.gcn_layers, &real_labels)?;
                let fake = gate_bias_mean(&model.params, model.config.encoder.gcn_layers, &fake_labels)?;
                let path = dir.join("gatebias.csv");
                let mut f = if path.exists() {
                    std::fs::OpenOptions::new().append(true).open(&path)?
                } else {
                    let mut f = std::fs::File::create(&path)?;
                    writeln!(f, "epoch,group,mean")?;
                    f
                };
                writeln!(f, "{epoch},real,{real:.6}")?;
                writeln!(f, "{epoch},fake,{fake:.6}")?;
            }
        }
    }
    Ok(())
}
