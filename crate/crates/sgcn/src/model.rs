//! The trainable unit: encoder stack + attention decoder + vocabularies,
//! plus checkpoint serialization.
//!
//! Checkpoint format: magic "SGCN1", then a little-endian u32 tensor count,
//! then per tensor: name length (u32) + UTF-8 name, rank (u32), extents
//! (u32 each), raw 32-bit little-endian floats, row-major. Names are
//! hierarchical dotted paths (e.g. encoder.gcn.0.W_in).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::data::{Batch, DepGraph, EdgeVocabulary, Vocabulary};
use crate::decoder::{decode_train, default_max_len, greedy_decode, init_decoder_params, DecoderConfig};
use crate::encoders::{encode, init_encoder_params, EncoderConfig, EncoderKind};
use crate::error::{Result, SgcnError};
use crate::rng::{Rng, Stream};
use crate::tensor::{GradMap, Graph, Param, ParamStore, Real};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SGCN1";

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

pub struct Seq2SeqModel<F: Real> {
    pub config: ModelConfig,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub edge_vocab: EdgeVocabulary,
    pub params: ParamStore<F>,
}

impl<F: Real> Seq2SeqModel<F> {
    pub fn init(
        config: ModelConfig,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
        edge_vocab: EdgeVocabulary,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = Rng::with_stream(seed, Stream::Init, 0);
        let mut params = ParamStore::new();
        init_encoder_params(
            &mut params,
            &config.encoder,
            src_vocab.len(),
            edge_vocab.n_directed(),
            &mut rng,
        )?;
        init_decoder_params(
            &mut params,
            &config.decoder,
            tgt_vocab.len(),
            config.encoder.output_dim(),
            &mut rng,
        )?;
        Ok(Seq2SeqModel {
            config,
            src_vocab,
            tgt_vocab,
            edge_vocab,
            params,
        })
    }

    /// Teacher-forced loss for one (padded) sentence row. Returns the loss
    /// tensor (mean over this sentence's predicted tokens) and that token
    /// count; the caller combines sentences into a batch mean.
    pub fn sentence_loss(
        &self,
        g: &mut Graph<F>,
        src: &[usize],
        src_mask: &[bool],
        graph: Option<&DepGraph>,
        tgt: &[usize],
        tgt_mask: &[bool],
        rng: &mut Rng,
    ) -> Result<(crate::tensor::TensorId, usize)> {
        let enc = encode(g, &self.params, &self.config.encoder, src, src_mask, graph, rng)?;
        decode_train(g, &self.params, enc, src_mask, tgt, tgt_mask)
    }

    /// Loss and parameter gradients over one batch: token-mean across every
    /// sentence. Sentences run in parallel on independent tapes; gradient
    /// reduction is in fixed sentence order, so results are deterministic.
    pub fn batch_loss_and_grads(
        &self,
        batch: &Batch,
        seed: u64,
        step_salt: u64,
    ) -> Result<(f64, GradMap<F>)> {
        let per_sentence: Vec<Result<(f64, usize, GradMap<F>)>> = (0..batch.len())
            .into_par_iter()
            .map(|i| {
                let mut rng =
                    Rng::with_stream(seed, Stream::Dropout, step_salt.wrapping_mul(8192) + i as u64);
                let mut g: Graph<F> = Graph::new(true);
                let (loss, n) = self.sentence_loss(
                    &mut g,
                    &batch.src[i],
                    &batch.src_mask[i],
                    Some(&batch.graphs[i]),
                    &batch.tgt[i],
                    &batch.tgt_mask[i],
                    &mut rng,
                )?;
                g.backward(loss)?;
                Ok((g.item(loss).to_f64(), n, g.param_grads()))
            })
            .collect();

        let mut total_tokens = 0usize;
        let mut loss_sum = 0.0;
        let mut combined: GradMap<F> = GradMap::new();
        let mut weights = Vec::with_capacity(batch.len());
        let mut parts = Vec::with_capacity(batch.len());
        for r in per_sentence {
            let (loss, n, grads) = r?;
            total_tokens += n;
            loss_sum += loss * n as f64;
            weights.push(n);
            parts.push(grads);
        }
        for (grads, n) in parts.into_iter().zip(weights) {
            let w = F::from_f64(n as f64 / total_tokens as f64);
            for (name, g) in grads {
                let acc = combined.entry(name).or_insert_with(|| vec![F::zero(); g.len()]);
                for (a, &x) in acc.iter_mut().zip(&g) {
                    *a = *a + w * x;
                }
            }
        }
        Ok((loss_sum / total_tokens as f64, combined))
    }

    /// Mean teacher-forced token accuracy over a batch (evaluation mode).
    pub fn token_accuracy(&self, batches: &[Batch], seed: u64) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            for i in 0..batch.len() {
                let mut rng = Rng::with_stream(seed, Stream::Dropout, (bi * 100_000 + i) as u64);
                let mut g: Graph<F> = Graph::new(false);
                let enc = encode(
                    &mut g,
                    &self.params,
                    &self.config.encoder,
                    &batch.src[i],
                    &batch.src_mask[i],
                    Some(&batch.graphs[i]),
                    &mut rng,
                )?;
                // Re-run the teacher-forced steps and compare argmax.
                let t_real = batch.tgt_mask[i].iter().take_while(|&&m| m).count();
                let preds = self.forced_argmax(&mut g, enc, &batch.src_mask[i], &batch.tgt[i], t_real)?;
                for (p, &gold) in preds.iter().zip(&batch.tgt[i][1..t_real]) {
                    if *p == gold {
                        correct += 1;
                    }
                    total += 1;
                }
            }
        }
        Ok(correct as f64 / total.max(1) as f64)
    }

    fn forced_argmax(
        &self,
        g: &mut Graph<F>,
        enc: crate::tensor::TensorId,
        src_mask: &[bool],
        tgt: &[usize],
        t_real: usize,
    ) -> Result<Vec<usize>> {
        use crate::decoder::{attend_with_keys, init_state};
        use crate::encoders::gru_step;
        let store = &self.params;
        let emb_table = g.param(store, "decoder.emb")?;
        let w_k = g.param(store, "decoder.attn.W_k")?;
        let keys = g.matmul(enc, w_k)?;
        let w_out = g.param(store, "decoder.out.W")?;
        let b_out = g.param(store, "decoder.out.b")?;
        let mut state = init_state(g, store, enc, src_mask)?;
        let mut out = Vec::new();
        for i in 1..t_real {
            let prev = g.embed(emb_table, &[tgt[i - 1]])?;
            let (context, _) = attend_with_keys(g, store, state, enc, keys, src_mask)?;
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
            out.push(best);
        }
        Ok(out)
    }

    /// Greedy-decode one sentence over frozen parameters.
    pub fn translate(&self, src: &[usize], graph: Option<&DepGraph>) -> Result<Vec<usize>> {
        if src.is_empty() {
            return Ok(Vec::new());
        }
        let mask = vec![true; src.len()];
        let mut rng = Rng::new(0); // eval mode; never consulted
        let mut g: Graph<F> = Graph::new(false);
        let enc = encode(&mut g, &self.params, &self.config.encoder, src, &mask, graph, &mut rng)?;
        greedy_decode(&mut g, &self.params, enc, &mask, default_max_len(src.len()))
    }

    /// Write parameters (f32) plus vocab/arch sidecars next to the path.
    pub fn save(&self, ckpt: &Path) -> Result<()> {
        save_checkpoint(ckpt, &self.params)?;
        let dir = ckpt.parent().unwrap_or_else(|| Path::new("."));
        write_lines(&dir.join("vocab.src.txt"), self.src_vocab.tokens())?;
        write_lines(&dir.join("vocab.tgt.txt"), self.tgt_vocab.tokens())?;
        write_lines(&dir.join("vocab.labels.txt"), self.edge_vocab.labels())?;
        let e = &self.config.encoder;
        let d = &self.config.decoder;
        let meta = format!(
            "encoder {}\nemb_dim {}\nhidden_dim {}\ncnn_window {}\ngcn_layers {}\ndropout {}\nedge_dropout {}\nmax_pos {}\ndec_emb_dim {}\ndec_hidden_dim {}\nattn_dim {}\n",
            e.kind.name(), e.emb_dim, e.hidden_dim, e.cnn_window, e.gcn_layers, e.dropout,
            e.edge_dropout, e.max_pos, d.emb_dim, d.hidden_dim, d.attn_dim
        );
        std::fs::write(dir.join("model.meta"), meta)?;
        Ok(())
    }

    /// Load a model from a checkpoint plus its sidecar files.
    pub fn load(ckpt: &Path) -> Result<Self> {
        let dir = ckpt.parent().unwrap_or_else(|| Path::new("."));
        let meta_text = std::fs::read_to_string(dir.join("model.meta")).map_err(|e| {
            SgcnError::Data(format!(
                "missing model.meta next to {}: {e}",
                ckpt.display()
            ))
        })?;
        let mut kv = std::collections::HashMap::new();
        for line in meta_text.lines() {
            if let Some((k, v)) = line.split_once(' ') {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<String> {
            kv.get(k)
                .cloned()
                .ok_or_else(|| SgcnError::Data(format!("model.meta missing key {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| SgcnError::Data(format!("model.meta bad number for {k}")))
        };
        let fnum = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| SgcnError::Data(format!("model.meta bad number for {k}")))
        };
        let config = ModelConfig {
            encoder: EncoderConfig {
                kind: EncoderKind::parse(&get("encoder")?)?,
                emb_dim: num("emb_dim")?,
                hidden_dim: num("hidden_dim")?,
                cnn_window: num("cnn_window")?,
                gcn_layers: num("gcn_layers")?,
                dropout: fnum("dropout")?,
                edge_dropout: fnum("edge_dropout")?,
                max_pos: num("max_pos")?,
            },
            decoder: DecoderConfig {
                emb_dim: num("dec_emb_dim")?,
                hidden_dim: num("dec_hidden_dim")?,
                attn_dim: num("attn_dim")?,
            },
        };
        let src_vocab = Vocabulary::from_tokens(read_lines(&dir.join("vocab.src.txt"))?);
        let tgt_vocab = Vocabulary::from_tokens(read_lines(&dir.join("vocab.tgt.txt"))?);
        let edge_vocab = EdgeVocabulary::from_labels(read_lines(&dir.join("vocab.labels.txt"))?);
        let mut params = load_checkpoint(ckpt)?;
        strip_non_model(&mut params);
        Ok(Seq2SeqModel {
            config,
            src_vocab,
            tgt_vocab,
            edge_vocab,
            params,
        })
    }
}

/// Drop optimizer/bookkeeping tensors (adam.*, meta.*) from a loaded store.
pub fn strip_non_model<F: Real>(params: &mut ParamStore<F>) {
    let extra: Vec<String> = params
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| n.starts_with("adam.") || n.starts_with("meta."))
        .collect();
    if extra.is_empty() {
        return;
    }
    let mut kept = ParamStore::new();
    for (name, p) in params.iter() {
        if !extra.contains(name) {
            kept.insert(name, p.clone());
        }
    }
    *params = kept;
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in lines {
        writeln!(w, "{l}")?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(|l| l.to_string())
        .collect())
}

pub fn save_checkpoint<F: Real>(path: &Path, store: &ParamStore<F>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, p) in store.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &e in &p.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &x in &p.data {
            w.write_all(&(x.to_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<ParamStore<F>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| SgcnError::Data(format!("{}: truncated checkpoint", path.display())))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(SgcnError::Data(format!(
            "{}: bad checkpoint magic",
            path.display()
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| SgcnError::Data("checkpoint tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(F::from_f64(f32::from_le_bytes(buf) as f64));
        }
        store.insert(&name, Param::new(shape, data));
    }
    Ok(store)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
