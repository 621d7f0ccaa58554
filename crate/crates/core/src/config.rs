//! Experiment configuration: a key=value file with strict (unknown keys
//! rejected) parsing plus command-line overrides.

use crate::backbone::BackboneConfig;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::scenes::DatasetConfig;
use crate::training::{AblationId, ModelConfig, TrainConfig};
use std::path::PathBuf;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub hidden_dim: usize,
    pub noise_dim: usize,
    pub feature_dim: usize,
    pub attn_dim: usize,
    pub embed_dim: usize,
    pub grid: usize,
    pub conv_channels: [usize; 4],
    pub disc_path_hidden: usize,
    pub disc_intent_hidden: usize,
    pub train: TrainConfig,
    pub eval_k: usize,
    pub eval_f: usize,
    pub eval_seed: u64,
    pub ablate_seeds: usize,
    pub sweep_f_values: Vec<usize>,
    pub bench_records: usize,
    pub plot_count: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            hidden_dim: 64,
            noise_dim: 32,
            feature_dim: 32,
            attn_dim: 32,
            embed_dim: 64,
            grid: 8,
            conv_channels: [8, 16, 32, 64],
            disc_path_hidden: 64,
            disc_intent_hidden: 32,
            train: TrainConfig::default(),
            eval_k: 20,
            eval_f: 5,
            eval_seed: 1234,
            ablate_seeds: 3,
            sweep_f_values: vec![1, 5, 10, 20],
            bench_records: 300,
            plot_count: 6,
            out_dir: PathBuf::from("runs/out"),
        }
    }
}

impl ExperimentConfig {
    /// Model configuration derived from the shared dims; the generator
    /// variant follows the configured ablation.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                image_size: self.dataset.image_size,
                image_channels: 3,
                grid: self.grid,
                feature_dim: self.feature_dim,
                conv_channels: self.conv_channels,
            },
            generator: GeneratorConfig {
                variant: self.train.ablation.generator_variant(),
                hidden_dim: self.hidden_dim,
                noise_dim: self.noise_dim,
                path_len: self.dataset.path_len,
                feature_dim: self.feature_dim,
                attn_dim: self.attn_dim,
                embed_dim: self.embed_dim,
                force_intent_to_global: false,
            },
            discriminator: DiscriminatorConfig {
                path_hidden: self.disc_path_hidden,
                intent_hidden: self.disc_intent_hidden,
                feature_dim: self.feature_dim,
                attn_dim: self.attn_dim,
                embed_dim: self.embed_dim,
                path_len: self.dataset.path_len,
            },
        }
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parse a config file then apply `key=value` overrides in order. The
    /// `EGOPATH_OUT` environment variable, when set, overrides `out_dir`.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            cfg.apply(k.trim(), v.trim())?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            cfg.apply(k.trim(), v.trim())?;
        }
        if let Ok(dir) = std::env::var("EGOPATH_OUT") {
            cfg.out_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.train.lr_main <= 0.0 || self.train.lr_fen <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.train.batch_size == 0 || self.eval_k == 0 {
            return Err(Error::Config("batch_size and eval.k must be positive".into()));
        }
        if self.train.f == 0 || self.train.f > self.dataset.path_len {
            return Err(Error::Config("train.f must lie in 1..=path_len".into()));
        }
        if self.eval_f == 0 || self.eval_f > self.dataset.path_len {
            return Err(Error::Config("eval.f must lie in 1..=path_len".into()));
        }
        self.model_config().validate()
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value '{value}' for {what}"));
        match key {
            "dataset.count" => self.dataset.count = value.parse().map_err(|_| bad(key))?,
            "dataset.seed" => self.dataset.seed = value.parse().map_err(|_| bad(key))?,
            "dataset.image_size" => self.dataset.image_size = value.parse().map_err(|_| bad(key))?,
            "dataset.path_len" => self.dataset.path_len = value.parse().map_err(|_| bad(key))?,
            "dataset.train_fraction" => {
                self.dataset.train_fraction = value.parse().map_err(|_| bad(key))?
            }
            "dataset.balance_tolerance" => {
                self.dataset.balance_tolerance = value.parse().map_err(|_| bad(key))?
            }
            "model.hidden" => self.hidden_dim = value.parse().map_err(|_| bad(key))?,
            "model.noise_dim" => self.noise_dim = value.parse().map_err(|_| bad(key))?,
            "model.feature_dim" => self.feature_dim = value.parse().map_err(|_| bad(key))?,
            "model.attn_dim" => self.attn_dim = value.parse().map_err(|_| bad(key))?,
            "model.embed_dim" => self.embed_dim = value.parse().map_err(|_| bad(key))?,
            "model.grid" => self.grid = value.parse().map_err(|_| bad(key))?,
            "model.conv_channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| p.trim().parse().map_err(|_| bad(key)))
                    .collect::<Result<_>>()?;
                if parts.len() != 4 {
                    return Err(bad("model.conv_channels (need 4 entries)"));
                }
                self.conv_channels = [parts[0], parts[1], parts[2], parts[3]];
            }
            "model.disc_path_hidden" => {
                self.disc_path_hidden = value.parse().map_err(|_| bad(key))?
            }
            "model.disc_intent_hidden" => {
                self.disc_intent_hidden = value.parse().map_err(|_| bad(key))?
            }
            "train.ablation" => self.train.ablation = AblationId::parse(value)?,
            "train.batch_size" => self.train.batch_size = value.parse().map_err(|_| bad(key))?,
            "train.epochs" => self.train.epochs = value.parse().map_err(|_| bad(key))?,
            "train.lr_main" => self.train.lr_main = value.parse().map_err(|_| bad(key))?,
            "train.lr_fen" => self.train.lr_fen = value.parse().map_err(|_| bad(key))?,
            "train.seed" => self.train.seed = value.parse().map_err(|_| bad(key))?,
            "train.f" => self.train.f = value.parse().map_err(|_| bad(key))?,
            "train.k_train" => self.train.k_train = value.parse().map_err(|_| bad(key))?,
            "train.saturating_gan" => {
                self.train.saturating_gan = value.parse().map_err(|_| bad(key))?
            }
            "train.val_fraction" => self.train.val_fraction = value.parse().map_err(|_| bad(key))?,
            "train.val_k" => self.train.val_k = value.parse().map_err(|_| bad(key))?,
            "train.max_steps" => {
                self.train.max_steps = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(value.parse().map_err(|_| bad(key))?)
                }
            }
            "train.stop_at_train_min_ade" => {
                self.train.stop_at_train_min_ade = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(value.parse().map_err(|_| bad(key))?)
                }
            }
            "train.check_every" => self.train.check_every = value.parse().map_err(|_| bad(key))?,
            "eval.k" => self.eval_k = value.parse().map_err(|_| bad(key))?,
            "eval.f" => self.eval_f = value.parse().map_err(|_| bad(key))?,
            "eval.seed" => self.eval_seed = value.parse().map_err(|_| bad(key))?,
            "ablate.seeds" => self.ablate_seeds = value.parse().map_err(|_| bad(key))?,
            "sweep.f_values" => {
                self.sweep_f_values = value
                    .split(',')
                    .map(|p| p.trim().parse().map_err(|_| bad(key)))
                    .collect::<Result<_>>()?
            }
            "bench.records" => self.bench_records = value.parse().map_err(|_| bad(key))?,
            "plot.count" => self.plot_count = value.parse().map_err(|_| bad(key))?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }
}

/// The desk-scale defaults written out as a documented config file.
pub fn example_config() -> String {
    let c = ExperimentConfig::default();
    format!(
        "# experiment configuration (key = value, '#' comments)\n\
         dataset.count = {}\n\
         dataset.seed = {}\n\
         dataset.image_size = {}\n\
         dataset.path_len = {}\n\
         dataset.train_fraction = {}\n\
         dataset.balance_tolerance = {}\n\
         model.hidden = {}\n\
         model.noise_dim = {}\n\
         model.feature_dim = {}\n\
         model.attn_dim = {}\n\
         model.embed_dim = {}\n\
         model.grid = {}\n\
         model.conv_channels = {},{},{},{}\n\
         model.disc_path_hidden = {}\n\
         model.disc_intent_hidden = {}\n\
         train.ablation = {}\n\
         train.batch_size = {}\n\
         train.epochs = {}\n\
         train.lr_main = {}\n\
         train.lr_fen = {}\n\
         train.seed = {}\n\
         train.f = {}\n\
         train.k_train = {}\n\
         eval.k = {}\n\
         eval.f = {}\n\
         ablate.seeds = {}\n\
         sweep.f_values = 1,5,10,20\n\
         bench.records = {}\n\
         plot.count = {}\n\
         out_dir = {}\n",
        c.dataset.count,
        c.dataset.seed,
        c.dataset.image_size,
        c.dataset.path_len,
        c.dataset.train_fraction,
        c.dataset.balance_tolerance,
        c.hidden_dim,
        c.noise_dim,
        c.feature_dim,
        c.attn_dim,
        c.embed_dim,
        c.grid,
        c.conv_channels[0],
        c.conv_channels[1],
        c.conv_channels[2],
        c.conv_channels[3],
        c.disc_path_hidden,
        c.disc_intent_hidden,
        c.train.ablation.name(),
        c.train.batch_size,
        c.train.epochs,
        c.train.lr_main,
        c.train.lr_fen,
        c.train.seed,
        c.train.f,
        c.train.k_train,
        c.eval_k,
        c.eval_f,
        c.ablate_seeds,
        c.bench_records,
        c.plot_count,
        c.out_dir.display(),
    )
}
