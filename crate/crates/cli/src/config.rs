//! `key = value` experiment config files. Every key is optional; command
//! line flags take precedence over config values, and anything left unset
//! falls back to the library defaults. Unknown keys are rejected by name so
//! a typo cannot silently run a different experiment.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};

/// Parsed experiment file. Mirrors the training hyperparameters plus
/// dataset location, output paths, sample counts and seeds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentConfig {
    pub data_dir: Option<PathBuf>,
    pub materials: Option<Vec<String>>,
    pub checkpoint_out: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
    pub z_dim: Option<usize>,
    pub encoder_hidden: Option<usize>,
    pub decoder_hidden: Option<usize>,
    pub hyponet_layers: Option<Vec<usize>>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub epochs: Option<usize>,
    pub materials_per_step: Option<usize>,
    pub samples_per_material: Option<usize>,
    pub learning_rate: Option<f64>,
    pub lr_decay: Option<f64>,
    pub warmup_steps: Option<usize>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// One `key = value` pair per line; blank lines and `#` comments are
    /// ignored. Later occurrences of a key override earlier ones.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("line {}: expected key=value, got `{line}`", lineno + 1);
            };
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value)
                .with_context(|| format!("line {}", lineno + 1))?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "materials" => self.materials = Some(parse_names(value)),
            "checkpoint_out" => self.checkpoint_out = Some(PathBuf::from(value)),
            "loss_log" => self.loss_log = Some(PathBuf::from(value)),
            "z_dim" => self.z_dim = Some(parse(key, value)?),
            "encoder_hidden" => self.encoder_hidden = Some(parse(key, value)?),
            "decoder_hidden" => self.decoder_hidden = Some(parse(key, value)?),
            "hyponet_layers" => self.hyponet_layers = Some(parse_sizes(value)?),
            "lambda1" => self.lambda1 = Some(parse(key, value)?),
            "lambda2" => self.lambda2 = Some(parse(key, value)?),
            "epochs" => self.epochs = Some(parse(key, value)?),
            "materials_per_step" => self.materials_per_step = Some(parse(key, value)?),
            "samples_per_material" => self.samples_per_material = Some(parse(key, value)?),
            "learning_rate" => self.learning_rate = Some(parse(key, value)?),
            "lr_decay" => self.lr_decay = Some(parse(key, value)?),
            "warmup_steps" => self.warmup_steps = Some(parse(key, value)?),
            "seed" => self.seed = Some(parse(key, value)?),
            "threads" => self.threads = Some(parse(key, value)?),
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    value
        .parse()
        .with_context(|| format!("bad value `{value}` for key `{key}`"))
}

fn parse_names(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Comma-separated layer widths, e.g. `6,60,60,60,60,3`. Also used for the
/// matching command line flag.
pub fn parse_sizes(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .with_context(|| format!("bad layer size `{}`", s.trim()))
        })
        .collect()
}
