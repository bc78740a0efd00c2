//! `key = value` experiment configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use incgan::datagen::{GeneratorConfig, SplitCounts};
use incgan::learner::{LearnerConfig, TrainConfig};
use incgan::losses::LossConfig;
use incgan::memory::Budget;
use incgan::model::{NetworkConfig, Variant};
use incgan::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub memory_budget: Budget,
    /// `None` means the variant's default weight.
    pub lambda: Option<f64>,
    pub temperature: f64,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub grad_clip: f64,
    pub feature_dim: usize,
    pub conv_stages: usize,
    pub conv_width: usize,
    /// Side of the stored images.
    pub image_size: usize,
    /// Side of the network input; `None` uses `image_size`.
    pub input_size: Option<usize>,
    pub channels: usize,
    pub seed: u64,
    pub architectures: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub amplitude: f64,
    pub output_dir: PathBuf,
    /// Dataset container to read instead of generating samples in memory.
    pub data_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let net = NetworkConfig::default();
        let train = TrainConfig::default();
        let loss = LossConfig::default();
        let counts = SplitCounts::default();
        ExperimentConfig {
            variant: Variant::MtSc,
            memory_budget: Budget::Limited(128),
            lambda: None,
            temperature: loss.temperature,
            gamma: loss.gamma,
            lr: train.lr,
            batch_size: train.batch_size,
            patience: train.patience,
            max_epochs: train.max_epochs,
            grad_clip: train.grad_clip,
            feature_dim: net.feature_dim,
            conv_stages: net.conv_stages,
            conv_width: net.conv_width,
            image_size: net.input_size,
            input_size: None,
            channels: net.channels,
            seed: 0,
            architectures: 5,
            train_count: counts.train,
            val_count: counts.val,
            test_count: counts.test,
            amplitude: 0.5,
            output_dir: PathBuf::from("out"),
            data_dir: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "variant",
    "memory_budget",
    "lambda",
    "temperature",
    "gamma",
    "lr",
    "batch_size",
    "patience",
    "max_epochs",
    "grad_clip",
    "feature_dim",
    "conv_stages",
    "conv_width",
    "image_size",
    "input_size",
    "channels",
    "seed",
    "architectures",
    "train_count",
    "val_count",
    "test_count",
    "amplitude",
    "output_dir",
    "data_dir",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl ExperimentConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "variant" => self.variant = v.parse().map_err(Error::Config)?,
            "memory_budget" => self.memory_budget = v.parse().map_err(Error::Config)?,
            "lambda" => {
                self.lambda = if v == "default" { None } else { Some(parse(key, v)?) };
            }
            "temperature" => self.temperature = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "feature_dim" => self.feature_dim = parse(key, v)?,
            "conv_stages" => self.conv_stages = parse(key, v)?,
            "conv_width" => self.conv_width = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "input_size" => {
                self.input_size = if v == "default" { None } else { Some(parse(key, v)?) };
            }
            "channels" => self.channels = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "architectures" => self.architectures = parse(key, v)?,
            "train_count" => self.train_count = parse(key, v)?,
            "val_count" => self.val_count = parse(key, v)?,
            "test_count" => self.test_count = parse(key, v)?,
            "amplitude" => self.amplitude = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "data_dir" => {
                self.data_dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) };
            }
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k, v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip(&e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key with its resolved value; [`ExperimentConfig::parse`] reads it back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("variant", self.variant.to_string());
        put("memory_budget", self.memory_budget.to_string());
        put("lambda", self.lambda().to_string());
        put("temperature", self.temperature.to_string());
        put("gamma", self.gamma.to_string());
        put("lr", self.lr.to_string());
        put("batch_size", self.batch_size.to_string());
        put("patience", self.patience.to_string());
        put("max_epochs", self.max_epochs.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("feature_dim", self.feature_dim.to_string());
        put("conv_stages", self.conv_stages.to_string());
        put("conv_width", self.conv_width.to_string());
        put("image_size", self.image_size.to_string());
        put("input_size", self.input_size().to_string());
        put("channels", self.channels.to_string());
        put("seed", self.seed.to_string());
        put("architectures", self.architectures.to_string());
        put("train_count", self.train_count.to_string());
        put("val_count", self.val_count.to_string());
        put("test_count", self.test_count.to_string());
        put("amplitude", self.amplitude.to_string());
        put("output_dir", self.output_dir.display().to_string());
        if let Some(d) = &self.data_dir {
            put("data_dir", d.display().to_string());
        }
        s
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
            .unwrap_or_else(|| LossConfig::for_variant(self.variant).lambda)
    }

    pub fn input_size(&self) -> usize {
        self.input_size.unwrap_or(self.image_size)
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            image_size: self.image_size,
            channels: self.channels,
            amplitude: self.amplitude,
            counts: SplitCounts {
                train: self.train_count,
                val: self.val_count,
                test: self.test_count,
            },
            seed: self.seed,
        }
    }

    pub fn learner(&self) -> LearnerConfig {
        LearnerConfig {
            network: NetworkConfig {
                input_size: self.input_size(),
                channels: self.channels,
                feature_dim: self.feature_dim,
                conv_stages: self.conv_stages,
                conv_width: self.conv_width,
                variant: self.variant,
            },
            loss: LossConfig {
                gamma: self.gamma,
                temperature: self.temperature,
                lambda: self.lambda(),
            },
            train: TrainConfig {
                lr: self.lr,
                batch_size: self.batch_size,
                patience: self.patience,
                max_epochs: self.max_epochs,
                grad_clip: self.grad_clip,
                seed: self.seed,
                ..TrainConfig::default()
            },
            budget: self.memory_budget,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.architectures == 0 {
            return Err(Error::Config("architectures must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.amplitude) {
            return Err(Error::Config(format!(
                "amplitude must lie in [0, 1], got {}",
                self.amplitude
            )));
        }
        if self.train_count == 0 || self.val_count == 0 || self.test_count == 0 {
            return Err(Error::Config("every split count must be at least 1".into()));
        }
        if self.input_size() > self.image_size {
            return Err(Error::Config(format!(
                "input_size {} exceeds image_size {}",
                self.input_size(),
                self.image_size
            )));
        }
        self.learner().validate()
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(s) => s.clone(),
        other => other.to_string(),
    }
}
