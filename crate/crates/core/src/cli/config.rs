//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::backend::{AttentionConfig, PreprocConfig};
use crate::encoder::{EncoderConfig, LayerSpec, Pooling};
use crate::error::{Error, Result};
use crate::objectives::{AmSoftmaxConfig, DcfConfig, FocalConfig};
use crate::pipeline::{
    ClassifierLoss, FinetuneConfig, LrSchedule, NpldaTrainConfig, OptimizerKind, PretrainConfig, ScheduleKind,
};
use crate::synthdata::FeatureCorpusSpec;

/// Every accepted key with its default value.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("data.train_speakers", "50"),
    ("data.eval_speakers", "20"),
    ("data.utterances", "10"),
    ("data.channels", "23"),
    ("data.speaker_scale", "0.5"),
    ("data.noise_scale", "1.0"),
    ("data.genres", "3"),
    ("data.genre_scale", "1.0"),
    ("data.genre_noise_step", "2.0"),
    ("data.min_frames", "30"),
    ("data.max_frames", "50"),
    ("trials.enroll_counts", "4"),
    ("encoder.layers", "-2,-1,0,1,2:64; -3,0,3:64"),
    ("encoder.pooling", "stats"),
    ("encoder.asp_hidden", "16"),
    ("encoder.se_ratio", "0"),
    ("encoder.embedding_dim", "32"),
    ("encoder.fc_hidden", ""),
    ("attention.sdsa_heads", "4"),
    ("attention.ffsa_heads", "4"),
    ("attention.ffsa_hidden", "64"),
    ("pretrain.epochs", "30"),
    ("pretrain.batch_size", "32"),
    ("pretrain.optimizer", "adamw"),
    ("pretrain.lr", "0.003"),
    ("pretrain.momentum", "0.9"),
    ("pretrain.weight_decay", "0.0001"),
    ("pretrain.schedule", "cosine"),
    ("pretrain.step_period", "10"),
    ("pretrain.step_factor", "0.5"),
    ("pretrain.exp_gamma", "0.95"),
    ("pretrain.cosine_t0", "3"),
    ("pretrain.cosine_mult", "2"),
    ("pretrain.lr_min", "0.00001"),
    ("pretrain.loss", "softmax"),
    ("pretrain.am_scale", "30"),
    ("pretrain.am_margin", "0.2"),
    ("pretrain.mixup", "false"),
    ("pretrain.mixup_alpha", "1.0"),
    ("finetune.backend", "attention"),
    ("finetune.frozen_encoder", "false"),
    ("finetune.epochs", "20"),
    ("finetune.batches_per_epoch", "40"),
    ("finetune.speakers", "8"),
    ("finetune.utts", "4"),
    ("finetune.optimizer", "sgd"),
    ("finetune.lr", "0.1"),
    ("finetune.momentum", "0.9"),
    ("finetune.weight_decay", "0"),
    ("finetune.schedule", "exp"),
    ("finetune.step_period", "10"),
    ("finetune.step_factor", "0.5"),
    ("finetune.exp_gamma", "0.95"),
    ("finetune.cosine_t0", "3"),
    ("finetune.cosine_mult", "2"),
    ("finetune.lr_min", "0.00001"),
    ("finetune.encoder_lr_scale", "0.3"),
    ("finetune.mixup_fraction", "0.5"),
    ("finetune.mixup_alpha", "1.0"),
    ("loss.lambda", "0.6"),
    ("loss.focal_alpha", "0.75"),
    ("loss.focal_gamma", "2"),
    ("plda.lda_dim", "0"),
    ("plda.length_norm", "false"),
    ("plda.rank", "0"),
    ("plda.iters", "10"),
    ("nplda.epochs", "10"),
    ("nplda.batches_per_epoch", "10"),
    ("nplda.lr", "0.001"),
    ("nplda.delta", "10"),
    ("score.backend", "auto"),
    ("eval.p_target", "0.01"),
    ("eval.c_miss", "1"),
    ("eval.c_fa", "1"),
];

/// Keys that determine tensor shapes; hashed into saved models.
const MODEL_KEYS: &[&str] = &["data.channels", "data.train_speakers", "encoder.", "attention."];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    /// Defaults overridden by `key = value` lines; `#` starts a comment.
    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?.parse()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    fn parse_as<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("`{key} = {v}` is not a valid {}", std::any::type_name::<T>())))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parse_as(key)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse_as(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parse_as(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parse_as(key)
    }

    pub fn seed(&self) -> Result<u64> {
        self.u64("seed")
    }

    /// Every key with its effective value, one `key = value` per line.
    pub fn resolved(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 8 bytes of SHA-256 over the shape-determining settings.
    pub fn model_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if MODEL_KEYS.iter().any(|m| k == m || (m.ends_with('.') && k.starts_with(m))) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        let d = h.finalize();
        u64::from_be_bytes(d[..8].try_into().expect("digest length"))
    }

    /// Train and eval speakers come from one corpus so they share genre offsets.
    pub fn corpus_spec(&self) -> Result<FeatureCorpusSpec> {
        let spec = FeatureCorpusSpec {
            speakers: self.usize("data.train_speakers")? + self.usize("data.eval_speakers")?,
            utterances: self.usize("data.utterances")?,
            channels: self.usize("data.channels")?,
            speaker_scale: self.f64("data.speaker_scale")?,
            noise_scale: self.f64("data.noise_scale")?,
            genres: self.usize("data.genres")?,
            genre_scale: self.f64("data.genre_scale")?,
            genre_noise_step: self.f64("data.genre_noise_step")?,
            min_frames: self.usize("data.min_frames")?,
            max_frames: self.usize("data.max_frames")?,
            seed: self.seed()?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn enroll_counts(&self) -> Result<Vec<usize>> {
        let v = self.get("trials.enroll_counts");
        let ks: Vec<usize> = v
            .split(',')
            .map(|k| k.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("`trials.enroll_counts = {v}` is not a list of counts")))?;
        if ks.is_empty() || ks.contains(&0) {
            return Err(Error::Config("enrollment counts must be positive".into()));
        }
        Ok(ks)
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        let bad = |what: &str| Error::Config(format!("encoder.layers: {what}"));
        let mut layers = Vec::new();
        for part in self.get("encoder.layers").split(';') {
            let (offs, ch) = part.trim().split_once(':').ok_or_else(|| bad("expected `offsets:channels`"))?;
            let offsets: Vec<i32> = offs
                .split(',')
                .map(|o| o.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("offsets must be integers"))?;
            let channels = ch.trim().parse().map_err(|_| bad("channel count must be an integer"))?;
            layers.push(LayerSpec::new(&offsets, channels));
        }
        let pooling = match self.get("encoder.pooling") {
            "stats" => Pooling::Stats,
            "attentive" => Pooling::Attentive,
            other => return Err(Error::Config(format!("encoder.pooling `{other}`: expected stats or attentive"))),
        };
        let fc = self.get("encoder.fc_hidden");
        let fc_hidden = if fc.trim().is_empty() {
            Vec::new()
        } else {
            fc.split(',')
                .map(|v| v.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("encoder.fc_hidden `{fc}`")))?
        };
        let se = self.usize("encoder.se_ratio")?;
        let cfg = EncoderConfig {
            input_dim: self.usize("data.channels")?,
            layers,
            pooling,
            asp_hidden: self.usize("encoder.asp_hidden")?,
            se_ratio: (se > 0).then_some(se),
            embedding_dim: self.usize("encoder.embedding_dim")?,
            fc_hidden,
            num_classes: self.usize("data.train_speakers")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        let cfg = AttentionConfig {
            dim: self.usize("encoder.embedding_dim")?,
            sdsa_heads: self.usize("attention.sdsa_heads")?,
            ffsa_heads: self.usize("attention.ffsa_heads")?,
            ffsa_hidden: self.usize("attention.ffsa_hidden")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn optimizer(&self, p: &str) -> Result<OptimizerKind> {
        let wd = self.f64(&format!("{p}.weight_decay"))?;
        match self.get(&format!("{p}.optimizer")) {
            "sgd" => Ok(OptimizerKind::Sgd {
                momentum: self.f64(&format!("{p}.momentum"))?,
                weight_decay: wd,
            }),
            "adamw" => Ok(OptimizerKind::adamw(wd)),
            other => Err(Error::Config(format!("{p}.optimizer `{other}`: expected sgd or adamw"))),
        }
    }

    fn schedule(&self, p: &str) -> Result<LrSchedule> {
        let key = |k: &str| format!("{p}.{k}");
        let kind = match self.get(&key("schedule")) {
            "constant" => ScheduleKind::Constant,
            "step" => ScheduleKind::Step {
                period: self.usize(&key("step_period"))?,
                factor: self.f64(&key("step_factor"))?,
            },
            "exp" => ScheduleKind::Exp {
                gamma: self.f64(&key("exp_gamma"))?,
            },
            "cosine" => ScheduleKind::CosineRestarts {
                t0: self.usize(&key("cosine_t0"))?,
                mult: self.usize(&key("cosine_mult"))?,
                lr_min: self.f64(&key("lr_min"))?,
            },
            other => {
                return Err(Error::Config(format!(
                    "{p}.schedule `{other}`: expected constant, step, exp or cosine"
                )))
            }
        };
        Ok(LrSchedule {
            lr0: self.f64(&key("lr"))?,
            kind,
        })
    }

    pub fn pretrain(&self) -> Result<PretrainConfig> {
        let loss = match self.get("pretrain.loss") {
            "softmax" => ClassifierLoss::Softmax,
            "amsoftmax" => ClassifierLoss::AmSoftmax(AmSoftmaxConfig {
                scale: self.f64("pretrain.am_scale")?,
                margin: self.f64("pretrain.am_margin")?,
            }),
            other => return Err(Error::Config(format!("pretrain.loss `{other}`: expected softmax or amsoftmax"))),
        };
        Ok(PretrainConfig {
            epochs: self.usize("pretrain.epochs")?,
            batch_size: self.usize("pretrain.batch_size")?,
            optimizer: self.optimizer("pretrain")?,
            schedule: self.schedule("pretrain")?,
            loss,
            mixup: self.bool("pretrain.mixup")?,
            mixup_alpha: self.f64("pretrain.mixup_alpha")?,
            mixup_fixed_beta: None,
            seed: self.seed()?,
        })
    }

    pub fn finetune(&self) -> Result<FinetuneConfig> {
        let focal = FocalConfig {
            alpha: self.f64("loss.focal_alpha")?,
            gamma: self.f64("loss.focal_gamma")?,
        };
        focal.validate()?;
        Ok(FinetuneConfig {
            epochs: self.usize("finetune.epochs")?,
            batches_per_epoch: self.usize("finetune.batches_per_epoch")?,
            speakers_per_batch: self.usize("finetune.speakers")?,
            utts_per_speaker: self.usize("finetune.utts")?,
            optimizer: self.optimizer("finetune")?,
            schedule: self.schedule("finetune")?,
            encoder_lr_scale: self.f64("finetune.encoder_lr_scale")?,
            lambda: self.f64("loss.lambda")?,
            focal,
            mixup_fraction: self.f64("finetune.mixup_fraction")?,
            mixup_alpha: self.f64("finetune.mixup_alpha")?,
            mixup_fixed_beta: None,
            frozen_encoder: self.bool("finetune.frozen_encoder")?,
            attention: self.attention()?,
            seed: self.seed()?,
        })
    }

    pub fn preproc(&self) -> Result<PreprocConfig> {
        let lda = self.usize("plda.lda_dim")?;
        Ok(PreprocConfig {
            lda_dim: (lda > 0).then_some(lda),
            length_norm: self.bool("plda.length_norm")?,
        })
    }

    /// PLDA latent rank; 0 means half the (post-LDA) dimension.
    pub fn plda_rank(&self, dim: usize) -> Result<usize> {
        let r = self.usize("plda.rank")?;
        Ok(if r == 0 { (dim / 2).max(1) } else { r })
    }

    pub fn dcf(&self) -> Result<DcfConfig> {
        Ok(DcfConfig {
            c_miss: self.f64("eval.c_miss")?,
            c_fa: self.f64("eval.c_fa")?,
            p_target: self.f64("eval.p_target")?,
            delta: self.f64("nplda.delta")?,
        })
    }

    pub fn nplda(&self) -> Result<NpldaTrainConfig> {
        Ok(NpldaTrainConfig {
            epochs: self.usize("nplda.epochs")?,
            batches_per_epoch: self.usize("nplda.batches_per_epoch")?,
            speakers_per_batch: self.usize("finetune.speakers")?,
            utts_per_speaker: self.usize("finetune.utts")?,
            optimizer: OptimizerKind::adamw(0.0),
            lr: self.f64("nplda.lr")?,
            dcf: self.dcf()?,
            seed: self.seed()?,
        })
    }
}
