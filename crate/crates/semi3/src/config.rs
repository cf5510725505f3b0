//! Run configuration: a plain-text `key = value` file covering the dataset
//! spec, the backbone, the training knobs, the loss weights, and the
//! sharing/attention toggles. Unknown keys are errors. Blank lines and
//! `#` comments are allowed.

use crate::backbone::BackboneConfig;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::params::Strategy;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // synthetic dataset
    pub num_categories: usize,
    pub per_category: usize,
    pub image_size: usize,
    pub noise_level: f64,
    pub jitter_level: f64,
    pub data_seed: u64,
    // backbone
    pub in_channels: usize,
    pub stages: Vec<(usize, usize)>,
    pub fc_dims: Vec<usize>,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub attention_reduction: usize,
    // training
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub seed: u64,
    // loss weights and margins
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub m1: f64,
    pub m2: f64,
    // sharing and toggles
    pub share_plan: Strategy,
    pub use_co_attention: bool,
    // logging / checkpoint cadence
    pub log_csv: String,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            num_categories: 8,
            per_category: 30,
            image_size: 16,
            noise_level: 0.02,
            jitter_level: 0.05,
            data_seed: 7,
            in_channels: 3,
            stages: vec![(1, 8), (1, 16)],
            fc_dims: vec![64],
            embed_dim: 32,
            num_classes: 8,
            attention_reduction: 4,
            lr: 2e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            pretrain_epochs: 3,
            joint_epochs: 30,
            seed: 1,
            alpha: 10.0,
            beta: 100.0,
            gamma: 10.0,
            m1: 0.3,
            m2: 0.3,
            share_plan: Strategy::Semi3,
            use_co_attention: true,
            log_csv: String::new(),
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "num_categories" => self.num_categories = num(key, value)?,
            "per_category" => self.per_category = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "noise_level" => self.noise_level = num(key, value)?,
            "jitter_level" => self.jitter_level = num(key, value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "in_channels" => self.in_channels = num(key, value)?,
            "stages" => self.stages = parse_stages(value)?,
            "fc_dims" => self.fc_dims = parse_dims(value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "attention_reduction" => self.attention_reduction = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = num(key, value)?,
            "joint_epochs" => self.joint_epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "m1" => self.m1 = num(key, value)?,
            "m2" => self.m2 = num(key, value)?,
            "share_plan" => self.share_plan = Strategy::parse(value)?,
            "use_co_attention" => {
                self.use_co_attention = match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(Error::Config(format!("bad bool `{value}`"))),
                }
            }
            "log_csv" => self.log_csv = value.to_string(),
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.num_categories < 2 || self.per_category < 2 {
            return Err(Error::Config(
                "need at least 2 categories and 2 samples per category".into(),
            ));
        }
        self.loss_weights().validate()?;
        self.backbone().validate(self.image_size)?;
        Ok(())
    }

    /// Every field, one `key = value` line each, parse-stable.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("num_categories", self.num_categories.to_string());
        kv("per_category", self.per_category.to_string());
        kv("image_size", self.image_size.to_string());
        kv("noise_level", self.noise_level.to_string());
        kv("jitter_level", self.jitter_level.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("in_channels", self.in_channels.to_string());
        kv(
            "stages",
            self.stages
                .iter()
                .map(|(n, c)| format!("{n}x{c}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv(
            "fc_dims",
            self.fc_dims
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("embed_dim", self.embed_dim.to_string());
        kv("num_classes", self.num_classes.to_string());
        kv("attention_reduction", self.attention_reduction.to_string());
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("pretrain_epochs", self.pretrain_epochs.to_string());
        kv("joint_epochs", self.joint_epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("gamma", self.gamma.to_string());
        kv("m1", self.m1.to_string());
        kv("m2", self.m2.to_string());
        kv("share_plan", self.share_plan.name().to_string());
        kv("use_co_attention", self.use_co_attention.to_string());
        kv("log_csv", self.log_csv.clone());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        out
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: self.in_channels,
            stages: self.stages.clone(),
            fc_dims: self.fc_dims.clone(),
            embed_dim: self.embed_dim,
            num_classes: self.num_classes,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_categories: self.num_categories,
            per_category: self.per_category,
            image_size: self.image_size,
            noise_level: self.noise_level,
            jitter_level: self.jitter_level,
            seed: self.data_seed,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            m1: self.m1,
            m2: self.m2,
        }
    }
}

fn parse_stages(value: &str) -> Result<Vec<(usize, usize)>> {
    if value.is_empty() {
        return Err(Error::Config("stages cannot be empty".into()));
    }
    value
        .split(',')
        .map(|part| {
            let (n, c) = part
                .trim()
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("bad stage `{part}`, expected NxC")))?;
            let n = n
                .parse()
                .map_err(|_| Error::Config(format!("bad conv count in `{part}`")))?;
            let c = c
                .parse()
                .map_err(|_| Error::Config(format!("bad channel count in `{part}`")))?;
            Ok((n, c))
        })
        .collect()
}

fn parse_dims(value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad fc dim `{part}`")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialize_parse_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.lr = 0.05;
        cfg.stages = vec![(2, 4), (1, 16)];
        cfg.fc_dims = vec![];
        cfg.share_plan = Strategy::FcOnly;
        cfg.use_co_attention = false;
        cfg.log_csv = "out/log.csv".into();
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::parse("bogus_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"));
    }

    #[test]
    fn comments_and_blanks_are_fine() {
        let cfg = RunConfig::parse("# a comment\n\nlr = 0.01\n").unwrap();
        assert_eq!(cfg.lr, 0.01);
    }

    #[test]
    fn invalid_momentum_rejected() {
        assert!(RunConfig::parse("momentum = 1.5\n").is_err());
    }
}
