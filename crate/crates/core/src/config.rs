//! Experiment configuration: a flat, versioned key = value file with
//! explicit defaults. Unknown keys are errors so ablation-flag typos
//! cannot pass silently.

use std::collections::BTreeSet;
use std::path::PathBuf;

use crate::attnctl::Level;
use crate::error::{Error, Result};
use crate::model::DenoiserConfig;
use crate::sample::SamplerConfig;
use crate::schedule::ScheduleKind;
use crate::train::{AblationFlags, TrainConfig};

/// The shipped default configuration file.
pub const DEFAULT_CONFIG: &str = include_str!("../data/default.conf");

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub assets_manifest: PathBuf,
    pub output_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub train: TrainConfig,
    pub canvas_height: usize,
    pub canvas_width: usize,
    pub sampler: SamplerConfig,
    pub model: DenoiserConfig,
    pub model_seed: u64,
    pub extractor: String,
    pub extractor_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::parse(DEFAULT_CONFIG).expect("shipped default config must parse")
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig {
            version: 0,
            seed: 0,
            assets_manifest: PathBuf::from("assets/manifest.txt"),
            output_dir: PathBuf::from("out"),
            checkpoint: PathBuf::from("out/model.vdck"),
            train: TrainConfig::default(),
            canvas_height: 32,
            canvas_width: 64,
            sampler: SamplerConfig::default(),
            model: DenoiserConfig::default(),
            model_seed: 17,
            extractor: "hash".into(),
            extractor_seed: 101,
        };
        let mut seen = BTreeSet::new();
        let mut got_version = false;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("line {}: expected 'key = value'", ln + 1)))?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::format(format!("duplicate key '{key}'")));
            }
            cfg.apply(key, value)?;
            if key == "version" {
                got_version = true;
            }
        }
        if !got_version {
            return Err(Error::format("config is missing the 'version' key"));
        }
        if cfg.version != CONFIG_VERSION {
            return Err(Error::format(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        cfg.train.validate()?;
        cfg.sampler.validate()?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse::<T>()
                .map_err(|_| Error::format(format!("key '{key}': cannot parse '{value}'")))
        }
        fn boolean(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::format(format!("key '{key}': expected true/false, got '{value}'"))),
            }
        }
        match key {
            "version" => self.version = num(key, value)?,
            "seed" => {
                self.seed = num(key, value)?;
                self.train.seed = self.seed;
                self.sampler.seed = self.seed;
            }
            "assets_manifest" => self.assets_manifest = PathBuf::from(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "steps" => self.train.steps = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "learning_rate" => self.train.learning_rate = num(key, value)?,
            "weight_decay" => self.train.weight_decay = num(key, value)?,
            "alpha" => self.train.alpha = num(key, value)?,
            "beta" => self.train.beta = num(key, value)?,
            "eta" => self.train.eta = num(key, value)?,
            "levels" => {
                let levels: Result<Vec<Level>> =
                    value.split(',').map(|s| Level::parse(s.trim())).collect();
                self.train.levels = levels?;
            }
            "prior_image_count" => self.train.prior_image_count = num(key, value)?,
            "timesteps" => self.train.timesteps = num(key, value)?,
            "schedule" => self.train.schedule = ScheduleKind::parse(value)?,
            "augment" => self.train.augment = boolean(key, value)?,
            "canvas_height" => self.canvas_height = num(key, value)?,
            "canvas_width" => self.canvas_width = num(key, value)?,
            "ablation_no_concat" => self.train.ablation.no_concat = boolean(key, value)?,
            "ablation_mixed_single_concat" => {
                self.train.ablation.mixed_single_concat = boolean(key, value)?
            }
            "ablation_no_pos_attn" => self.train.ablation.no_pos_attn = boolean(key, value)?,
            "ablation_no_neg_attn" => self.train.ablation.no_neg_attn = boolean(key, value)?,
            "ablation_no_background_removal" => {
                self.train.ablation.no_background_removal = boolean(key, value)?
            }
            "sampler_steps" => self.sampler.steps = num(key, value)?,
            "guidance_scale" => self.sampler.guidance_scale = num(key, value)?,
            "frames" => self.sampler.frames = num(key, value)?,
            "fps" => self.sampler.fps = num(key, value)?,
            "model_channels" => {
                let parts: Result<Vec<usize>> = value
                    .split(',')
                    .map(|s| {
                        s.trim().parse::<usize>().map_err(|_| {
                            Error::format(format!("key '{key}': bad channel list '{value}'"))
                        })
                    })
                    .collect();
                let parts = parts?;
                if parts.len() != 4 {
                    return Err(Error::format(format!(
                        "key '{key}': need exactly 4 channel counts"
                    )));
                }
                self.model.level_channel_counts = [parts[0], parts[1], parts[2], parts[3]];
            }
            "model_heads" => self.model.attention_head_count = num(key, value)?,
            "model_text_width" => self.model.text_embedding_width = num(key, value)?,
            "model_base_channels" => self.model.base_channels = num(key, value)?,
            "model_time_width" => self.model.time_embedding_width = num(key, value)?,
            "model_temporal_layers" => {
                self.model.temporal_layers_enabled = boolean(key, value)?
            }
            "model_attn_logit_gain" => self.model.attn_logit_gain = num(key, value)?,
            "model_value_gain" => self.model.value_gain = num(key, value)?,
            "model_seed" => self.model_seed = num(key, value)?,
            "extractor" => self.extractor = value.to_string(),
            "extractor_seed" => self.extractor_seed = num(key, value)?,
            other => {
                return Err(Error::format(format!("unknown config key '{other}'")));
            }
        }
        // Mirror the sampler's canvas to the training canvas unless the
        // file overrides it later; generation must match training size.
        if key == "canvas_height" {
            self.sampler.height = self.canvas_height;
        }
        if key == "canvas_width" {
            self.sampler.width = self.canvas_width;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let levels: Vec<&str> = self.train.levels.iter().map(|l| l.name()).collect();
        let channels: Vec<String> =
            self.model.level_channel_counts.iter().map(|c| c.to_string()).collect();
        format!(
            "version = {}\nseed = {}\nassets_manifest = {}\noutput_dir = {}\ncheckpoint = {}\n\
             steps = {}\nbatch_size = {}\nlearning_rate = {}\nweight_decay = {}\nalpha = {}\n\
             beta = {}\neta = {}\nlevels = {}\nprior_image_count = {}\ntimesteps = {}\n\
             schedule = {}\naugment = {}\ncanvas_height = {}\ncanvas_width = {}\n\
             ablation_no_concat = {}\nablation_mixed_single_concat = {}\n\
             ablation_no_pos_attn = {}\nablation_no_neg_attn = {}\n\
             ablation_no_background_removal = {}\nsampler_steps = {}\nguidance_scale = {}\n\
             frames = {}\nfps = {}\nmodel_channels = {}\nmodel_heads = {}\n\
             model_text_width = {}\nmodel_base_channels = {}\nmodel_time_width = {}\n\
             model_temporal_layers = {}\nmodel_attn_logit_gain = {}\nmodel_value_gain = {}\n\
             model_seed = {}\nextractor = {}\nextractor_seed = {}\n",
            self.version,
            self.seed,
            self.assets_manifest.display(),
            self.output_dir.display(),
            self.checkpoint.display(),
            self.train.steps,
            self.train.batch_size,
            self.train.learning_rate,
            self.train.weight_decay,
            self.train.alpha,
            self.train.beta,
            self.train.eta,
            levels.join(","),
            self.train.prior_image_count,
            self.train.timesteps,
            match self.train.schedule {
                ScheduleKind::LinearBeta => "linear-beta",
                ScheduleKind::Cosine => "cosine",
            },
            self.train.augment,
            self.canvas_height,
            self.canvas_width,
            self.train.ablation.no_concat,
            self.train.ablation.mixed_single_concat,
            self.train.ablation.no_pos_attn,
            self.train.ablation.no_neg_attn,
            self.train.ablation.no_background_removal,
            self.sampler.steps,
            self.sampler.guidance_scale,
            self.sampler.frames,
            self.sampler.fps,
            channels.join(","),
            self.model.attention_head_count,
            self.model.text_embedding_width,
            self.model.base_channels,
            self.model.time_embedding_width,
            self.model.temporal_layers_enabled,
            self.model.attn_logit_gain,
            self.model.value_gain,
            self.model_seed,
            self.extractor,
            self.extractor_seed,
        )
    }

    pub fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::parse(&text)
    }

    /// Ablation variants of this config, by flag name.
    pub fn with_ablation(&self, flags: AblationFlags) -> ExperimentConfig {
        let mut out = self.clone();
        out.train.ablation = flags;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_default_parses_with_paper_values() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.train.steps, 500);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.train.learning_rate, 4e-5);
        assert_eq!(cfg.train.weight_decay, 1e-2);
        assert_eq!(cfg.train.alpha, 0.2);
        assert_eq!(cfg.train.beta, 1.0);
        assert_eq!(cfg.train.eta, -1e-8);
        assert_eq!(cfg.train.levels, vec![Level::L3]);
        assert_eq!(cfg.train.prior_image_count, 200);
        assert_eq!(cfg.sampler.steps, 50);
        assert_eq!(cfg.sampler.fps, 8);
    }

    #[test]
    fn unknown_key_is_named_in_error() {
        let text = "version = 1\nsteps = 10\nalpa = 0.3\n";
        let err = ExperimentConfig::parse(text).unwrap_err();
        assert!(err.to_string().contains("alpa"), "{err}");
    }

    #[test]
    fn duplicate_and_missing_version_rejected() {
        assert!(ExperimentConfig::parse("version = 1\nversion = 1\n").is_err());
        assert!(ExperimentConfig::parse("steps = 10\n").is_err());
        assert!(ExperimentConfig::parse("version = 2\n").is_err());
    }

    #[test]
    fn roundtrip_through_text() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.ablation.no_pos_attn = true;
        cfg.train.levels = vec![Level::L2, Level::L3];
        cfg.sampler.guidance_scale = 3.25;
        let text = cfg.to_text();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn seed_propagates_to_train_and_sampler() {
        let cfg = ExperimentConfig::parse("version = 1\nseed = 99\n").unwrap();
        assert_eq!(cfg.train.seed, 99);
        assert_eq!(cfg.sampler.seed, 99);
    }

    #[test]
    fn canvas_mirrors_into_sampler_dimensions() {
        let cfg =
            ExperimentConfig::parse("version = 1\ncanvas_height = 48\ncanvas_width = 96\n")
                .unwrap();
        assert_eq!(cfg.sampler.height, 48);
        assert_eq!(cfg.sampler.width, 96);
    }
}
