//! Flat key-value run configuration: one `key = value` per line, `#`
//! comments, unknown keys rejected. Command-line flags override file values
//! by funneling through the same `set` entry point.

use std::path::PathBuf;

use crate::decoder::DecoderConfig;
use crate::encoders::{EncoderConfig, EncoderKind};
use crate::error::{Result, SgcnError};
use crate::tensor::adam::AdamConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub seed: u64,
    pub min_freq: usize,
    pub max_vocab: Option<usize>,
    pub max_len: usize,

    pub encoder: EncoderKind,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub cnn_window: usize,
    pub gcn_layers: usize,
    pub dropout: f64,
    pub edge_dropout: f64,
    pub max_pos: usize,

    pub dec_emb_dim: usize,
    pub dec_hidden_dim: usize,
    pub attn_dim: usize,

    pub epochs: usize,
    pub batch_size: usize,
    /// None means "pick the default for the encoder": 0.0002 for CNN,
    /// 0.001 otherwise.
    pub lr: Option<f64>,
    pub l2: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: None,
            val: None,
            run_dir: None,
            seed: 1,
            min_freq: 1,
            max_vocab: None,
            max_len: 50,
            encoder: EncoderKind::Birnn,
            emb_dim: 32,
            hidden_dim: 64,
            cnn_window: 5,
            gcn_layers: 1,
            dropout: 0.2,
            edge_dropout: 0.2,
            max_pos: 200,
            dec_emb_dim: 32,
            dec_hidden_dim: 128,
            attn_dim: 64,
            epochs: 45,
            batch_size: 80,
            lr: None,
            l2: 1e-8,
        }
    }
}

impl RunConfig {
    /// Apply one key/value pair. Used for both file lines and flag overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| SgcnError::Config(format!("bad value for {key}: {value:?}")))
        }
        match key {
            "train" => self.train = Some(PathBuf::from(value)),
            "val" => self.val = Some(PathBuf::from(value)),
            "run_dir" => self.run_dir = Some(PathBuf::from(value)),
            "seed" => self.seed = num(key, value)?,
            "min_freq" => self.min_freq = num(key, value)?,
            "max_vocab" => {
                self.max_vocab = if value == "none" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            "max_len" => self.max_len = num(key, value)?,
            "encoder" => self.encoder = EncoderKind::parse(value)?,
            "emb_dim" => self.emb_dim = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "cnn_window" => self.cnn_window = num(key, value)?,
            "gcn_layers" => self.gcn_layers = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "edge_dropout" => self.edge_dropout = num(key, value)?,
            "max_pos" => self.max_pos = num(key, value)?,
            "dec_emb_dim" => self.dec_emb_dim = num(key, value)?,
            "dec_hidden_dim" => self.dec_hidden_dim = num(key, value)?,
            "attn_dim" => self.attn_dim = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = Some(num(key, value)?),
            "l2" => self.l2 = num(key, value)?,
            _ => return Err(SgcnError::Config(format!("unknown config key: {key}"))),
        }
        Ok(())
    }

    /// Parse a config file's text into `self`, later lines overriding
    /// earlier ones.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| SgcnError::Parse {
                    line: i + 1,
                    msg: format!("expected 'key = value', got {line:?}"),
                })?;
            if value.is_empty() {
                return Err(SgcnError::Parse {
                    line: i + 1,
                    msg: format!("empty value for {key}"),
                });
            }
            self.set(key, value).map_err(|e| SgcnError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(SgcnError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(SgcnError::Config("batch_size must be at least 1".into()));
        }
        if let Some(lr) = self.lr {
            if lr < 0.0 || !lr.is_finite() {
                return Err(SgcnError::Config(format!("lr must be nonnegative, got {lr}")));
            }
        }
        if self.l2 < 0.0 {
            return Err(SgcnError::Config("l2 must be nonnegative".into()));
        }
        self.encoder_config().validate()?;
        if self.dec_emb_dim == 0 || self.dec_hidden_dim == 0 || self.attn_dim == 0 {
            return Err(SgcnError::Config("decoder dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn resolved_lr(&self) -> f64 {
        self.lr.unwrap_or(match self.encoder {
            EncoderKind::Cnn => 0.0002,
            _ => 0.001,
        })
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            kind: self.encoder,
            emb_dim: self.emb_dim,
            hidden_dim: self.hidden_dim,
            cnn_window: self.cnn_window,
            gcn_layers: self.gcn_layers,
            dropout: self.dropout,
            edge_dropout: self.edge_dropout,
            max_pos: self.max_pos,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            emb_dim: self.dec_emb_dim,
            hidden_dim: self.dec_hidden_dim,
            attn_dim: self.attn_dim,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            max_len: self.max_len,
            seed: self.seed,
            adam: AdamConfig {
                lr: self.resolved_lr(),
                l2: self.l2,
                ..AdamConfig::default()
            },
        }
    }

    /// Render every key with its resolved value (the config.resolved copy).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        if let Some(p) = &self.train {
            kv("train", p.display().to_string());
        }
        if let Some(p) = &self.val {
            kv("val", p.display().to_string());
        }
        if let Some(p) = &self.run_dir {
            kv("run_dir", p.display().to_string());
        }
        kv("seed", self.seed.to_string());
        kv("min_freq", self.min_freq.to_string());
        kv(
            "max_vocab",
            self.max_vocab.map_or("none".into(), |v| v.to_string()),
        );
        kv("max_len", self.max_len.to_string());
        kv("encoder", self.encoder.name().to_string());
        kv("emb_dim", self.emb_dim.to_string());
        kv("hidden_dim", self.hidden_dim.to_string());
        kv("cnn_window", self.cnn_window.to_string());
        kv("gcn_layers", self.gcn_layers.to_string());
        kv("dropout", self.dropout.to_string());
        kv("edge_dropout", self.edge_dropout.to_string());
        kv("max_pos", self.max_pos.to_string());
        kv("dec_emb_dim", self.dec_emb_dim.to_string());
        kv("dec_hidden_dim", self.dec_hidden_dim.to_string());
        kv("attn_dim", self.attn_dim.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.resolved_lr().to_string());
        kv("l2", self.l2.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# a comment\nencoder = bow\nepochs = 3  # trailing comment\n\nepochs = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.encoder, EncoderKind::Bow);
        assert_eq!(cfg.epochs, 7);
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("epochs = 3\nwat = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(err.to_string().contains("wat"), "{err}");
    }

    #[test]
    fn bad_value_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_text("epochs = banana\n").is_err());
        assert!(cfg.apply_text("epochs\n").is_err());
    }

    #[test]
    fn lr_defaults_follow_encoder() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.resolved_lr(), 0.001);
        cfg.set("encoder", "cnn").unwrap();
        assert_eq!(cfg.resolved_lr(), 0.0002);
        cfg.set("lr", "0.01").unwrap();
        assert_eq!(cfg.resolved_lr(), 0.01);
    }

    #[test]
    fn resolved_text_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.set("encoder", "cnn").unwrap();
        cfg.set("gcn_layers", "2").unwrap();
        cfg.set("train", "data/train.jsonl").unwrap();
        let text = cfg.to_text();
        let mut again = RunConfig::default();
        again.apply_text(&text).unwrap();
        assert_eq!(again.encoder, EncoderKind::Cnn);
        assert_eq!(again.gcn_layers, 2);
        assert_eq!(again.resolved_lr(), 0.0002);
        assert_eq!(again.train.as_deref(), Some(std::path::Path::new("data/train.jsonl")));
    }

    #[test]
    fn validation_catches_bad_ranges() {
        let mut cfg = RunConfig::default();
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.dropout = 1.5;
        assert!(cfg.validate().is_err());
    }
}
