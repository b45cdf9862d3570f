//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys and malformed
//! values are errors. [`RunConfig::to_text`] writes every key, and parsing
//! that text gives back the same configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use colormamba::augment::AugmentConfig;
use colormamba::autoencoder::SurrogateConfig;
use colormamba::bench::{Scan2dBenchConfig, ScanBenchConfig};
use colormamba::checkpoint::Checkpoint;
use colormamba::gradcheck::GradcheckConfig;
use colormamba::networks::{Ablation, ModelConfig};
use colormamba::objectives::LossWeights;
use colormamba::optim::AdamWConfig;
use colormamba::train::TrainConfig;
use colormamba::{Error, Result};

/// Scalar type used for training and inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch: usize,
    pub n_gen: usize,
    /// Epochs between checkpoint writes; 0 writes only at the end.
    pub checkpoint_every: usize,
    pub augment_enabled: bool,
    pub augment: AugmentConfig,
    pub loss: LossWeights,
    pub surrogate: SurrogateConfig,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Defaults to `out_dir/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// When nonzero, train on this many generated pairs instead of `data_dir`.
    pub synthetic: usize,
    pub synthetic_size: usize,
    pub bench: ScanBenchConfig,
    pub scan2d: Scan2dBenchConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            precision: Precision::F64,
            model: ModelConfig::default(),
            optimizer: t.optimizer,
            epochs: t.epochs,
            batch: t.batch,
            n_gen: t.n_gen,
            checkpoint_every: 0,
            augment_enabled: t.augment.is_some(),
            augment: t.augment.unwrap_or_default(),
            loss: LossWeights::default(),
            surrogate: t.surrogate,
            data_dir: None,
            out_dir: PathBuf::from("runs/default"),
            checkpoint: None,
            synthetic: 0,
            synthetic_size: 16,
            bench: ScanBenchConfig::default(),
            scan2d: Scan2dBenchConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

fn parse<V: FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{raw}`")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{raw}`"))),
    }
}

fn parse_list(key: &str, raw: &str) -> Result<Vec<usize>> {
    raw.split(',').map(|v| parse(key, v.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn path_opt(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("`precision`: expected f32 or f64, got `{v}`"))),
                }
            }
            "model.depth" => m.depth = parse(key, v)?,
            "model.widths" => m.widths = parse_list(key, v)?,
            "model.state_size" => m.state_size = parse(key, v)?,
            "model.expand" => m.expand = parse(key, v)?,
            "model.agent_count" => m.agent_count = parse(key, v)?,
            "model.conv_kernel" => m.conv_kernel = parse(key, v)?,
            "model.tex_channels" => m.tex_channels = parse(key, v)?,
            "model.spade_zero_init" => m.spade_zero_init = parse_bool(key, v)?,
            "model.disc_widths" => {
                m.disc_widths = parse_list(key, v)?
                    .try_into()
                    .map_err(|_| Error::Config(format!("`{key}`: expected three widths, got `{v}`")))?
            }
            "ablation.mamba" => m.ablation.mamba = parse_bool(key, v)?,
            "ablation.attention" => m.ablation.attention = parse_bool(key, v)?,
            "ablation.padding_tokens" => m.ablation.padding_tokens = parse_bool(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.batch" => self.batch = parse(key, v)?,
            "train.n_gen" => self.n_gen = parse(key, v)?,
            "train.lr" => self.optimizer.lr = parse(key, v)?,
            "train.beta1" => self.optimizer.beta1 = parse(key, v)?,
            "train.beta2" => self.optimizer.beta2 = parse(key, v)?,
            "train.eps" => self.optimizer.eps = parse(key, v)?,
            "train.weight_decay" => self.optimizer.weight_decay = parse(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "augment.enabled" => self.augment_enabled = parse_bool(key, v)?,
            "augment.max_scale" => self.augment.max_scale = parse(key, v)?,
            "augment.contrast" => self.augment.contrast = parse(key, v)?,
            "augment.mirror" => self.augment.mirror = parse_bool(key, v)?,
            "augment.crop" => {
                self.augment.crop = match v {
                    "none" | "" => None,
                    _ => {
                        let (h, w) = v
                            .split_once('x')
                            .ok_or_else(|| Error::Config(format!("`{key}`: expected HxW or none, got `{v}`")))?;
                        Some((parse(key, h)?, parse(key, w)?))
                    }
                }
            }
            "loss.lambda_mse" => self.loss.lambda_mse = parse(key, v)?,
            "loss.lambda_fea" => self.loss.lambda_fea = parse(key, v)?,
            "loss.lambda_adv" => self.loss.lambda_adv = parse(key, v)?,
            "loss.alpha" => self.loss.alpha = parse(key, v)?,
            "loss.beta" => self.loss.beta = parse(key, v)?,
            "loss.gamma" => self.loss.gamma = parse(key, v)?,
            "surrogate.latent" => self.surrogate.latent = parse(key, v)?,
            "surrogate.lr" => self.surrogate.lr = parse(key, v)?,
            "surrogate.max_steps" => self.surrogate.max_steps = parse(key, v)?,
            "surrogate.target_mse" => self.surrogate.target_mse = parse(key, v)?,
            "paths.data" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "paths.out" => self.out_dir = PathBuf::from(v),
            "paths.checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.synthetic" => self.synthetic = parse(key, v)?,
            "data.size" => self.synthetic_size = parse(key, v)?,
            "bench.lengths" => self.bench.lengths = parse_list(key, v)?,
            "bench.state_size" => self.bench.state_size = parse(key, v)?,
            "bench.batch" => self.bench.batch = parse(key, v)?,
            "bench.repeats" => self.bench.repeats = parse(key, v)?,
            "bench.min_elements" => self.bench.min_elements = parse(key, v)?,
            "bench.height" => self.scan2d.height = parse(key, v)?,
            "bench.width" => self.scan2d.width = parse(key, v)?,
            "bench.channels" => self.scan2d.channels = parse(key, v)?,
            "bench.scan2d_state_size" => self.scan2d.state_size = parse(key, v)?,
            "gradcheck.step" => self.gradcheck.step = parse(key, v)?,
            "gradcheck.tolerance" => self.gradcheck.tolerance = parse(key, v)?,
            "gradcheck.max_entries" => self.gradcheck.max_entries = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let o = &self.optimizer;
        let a = &self.augment;
        let l = &self.loss;
        let s = &self.surrogate;
        vec![
            ("seed", self.seed.to_string()),
            (
                "precision",
                match self.precision {
                    Precision::F32 => "f32".into(),
                    Precision::F64 => "f64".into(),
                },
            ),
            ("model.depth", m.depth.to_string()),
            ("model.widths", list(&m.widths)),
            ("model.state_size", m.state_size.to_string()),
            ("model.expand", m.expand.to_string()),
            ("model.agent_count", m.agent_count.to_string()),
            ("model.conv_kernel", m.conv_kernel.to_string()),
            ("model.tex_channels", m.tex_channels.to_string()),
            ("model.spade_zero_init", m.spade_zero_init.to_string()),
            ("model.disc_widths", list(&m.disc_widths)),
            ("ablation.mamba", m.ablation.mamba.to_string()),
            ("ablation.attention", m.ablation.attention.to_string()),
            ("ablation.padding_tokens", m.ablation.padding_tokens.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.batch", self.batch.to_string()),
            ("train.n_gen", self.n_gen.to_string()),
            ("train.lr", o.lr.to_string()),
            ("train.beta1", o.beta1.to_string()),
            ("train.beta2", o.beta2.to_string()),
            ("train.eps", o.eps.to_string()),
            ("train.weight_decay", o.weight_decay.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("augment.enabled", self.augment_enabled.to_string()),
            ("augment.max_scale", a.max_scale.to_string()),
            ("augment.contrast", a.contrast.to_string()),
            ("augment.mirror", a.mirror.to_string()),
            (
                "augment.crop",
                a.crop.map_or("none".into(), |(h, w)| format!("{h}x{w}")),
            ),
            ("loss.lambda_mse", l.lambda_mse.to_string()),
            ("loss.lambda_fea", l.lambda_fea.to_string()),
            ("loss.lambda_adv", l.lambda_adv.to_string()),
            ("loss.alpha", l.alpha.to_string()),
            ("loss.beta", l.beta.to_string()),
            ("loss.gamma", l.gamma.to_string()),
            ("surrogate.latent", s.latent.to_string()),
            ("surrogate.lr", s.lr.to_string()),
            ("surrogate.max_steps", s.max_steps.to_string()),
            ("surrogate.target_mse", s.target_mse.to_string()),
            ("paths.data", path_opt(&self.data_dir)),
            ("paths.out", self.out_dir.display().to_string()),
            ("paths.checkpoint", path_opt(&self.checkpoint)),
            ("data.synthetic", self.synthetic.to_string()),
            ("data.size", self.synthetic_size.to_string()),
            ("bench.lengths", list(&self.bench.lengths)),
            ("bench.state_size", self.bench.state_size.to_string()),
            ("bench.batch", self.bench.batch.to_string()),
            ("bench.repeats", self.bench.repeats.to_string()),
            ("bench.min_elements", self.bench.min_elements.to_string()),
            ("bench.height", self.scan2d.height.to_string()),
            ("bench.width", self.scan2d.width.to_string()),
            ("bench.channels", self.scan2d.channels.to_string()),
            ("bench.scan2d_state_size", self.scan2d.state_size.to_string()),
            ("gradcheck.step", self.gradcheck.step.to_string()),
            ("gradcheck.tolerance", self.gradcheck.tolerance.to_string()),
            ("gradcheck.max_entries", self.gradcheck.max_entries.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate()?;
        self.loss.validate()?;
        if self.synthetic > 0 && self.synthetic_size == 0 {
            return Err(Error::Config("data.size must be positive".into()));
        }
        Ok(())
    }

    /// Replaces the ablation toggles with a named preset.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        self.model.ablation = Ablation::preset(name)?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            epochs: self.epochs,
            batch: self.batch,
            n_gen: self.n_gen,
            seed: self.seed,
            augment: self.augment_enabled.then_some(self.augment),
            surrogate: self.surrogate,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    /// Stores every key as `config.<key>` in the manifest.
    pub fn write_manifest(&self, ckpt: &mut Checkpoint) {
        for (k, v) in self.entries() {
            ckpt.set(format!("config.{k}"), v);
        }
    }

    /// Reads the configuration embedded by [`RunConfig::write_manifest`].
    pub fn from_manifest(ckpt: &Checkpoint) -> Result<Self> {
        let mut cfg = Self::default();
        let mut found = false;
        for (k, v) in &ckpt.manifest {
            if let Some(key) = k.strip_prefix("config.") {
                cfg.set(key, v)?;
                found = true;
            }
        }
        if !found {
            return Err(Error::Format("checkpoint carries no run configuration".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
