//! Flat `key=value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown or repeated keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use edgeda::archive::Manifest;
use edgeda::complexity::BenchConfig;
use edgeda::data::{ConditionSpec, SplitCounts};
use edgeda::losses::KernelConfig;
use edgeda::models::{config_hash, ModelConfig, ModelKind};
use edgeda::train::{AdamConfig, GradientAnchor, TrainConfig};

/// `(key, default, description)` for every accepted key, in echo order.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "seed",
        "0",
        "base seed for data, initialization and shuffling",
    ),
    (
        "seeds",
        "5",
        "number of seeds run by `reproduce` (seed, seed+1, ...)",
    ),
    (
        "model.input_shape",
        "6,32,32",
        "per-sample input shape C,H,W",
    ),
    (
        "model.num_classes",
        "5",
        "number of fault classes K (2..=9)",
    ),
    (
        "model.pre_fe_widths",
        "32,32",
        "stem conv widths shared by both models",
    ),
    (
        "model.c_stage_widths",
        "64,128,256,512",
        "cloud residual stage widths",
    ),
    (
        "model.c_blocks_per_stage",
        "2",
        "residual blocks per cloud stage",
    ),
    (
        "model.e_stage_widths",
        "48,64,96,128",
        "edge depthwise-separable stage widths (four)",
    ),
    (
        "model.feature_dim",
        "128",
        "feature dimension fed to the classifier",
    ),
    (
        "model.classifier_hidden",
        "0",
        "hidden width of the classifier, 0 for a single layer",
    ),
    ("source.id", "0", "source condition id"),
    ("source.speed", "30", "source shaft speed, rev/s"),
    ("source.load", "0", "source load"),
    (
        "source.noise_sigma",
        "0.2",
        "source additive noise standard deviation",
    ),
    ("target.id", "1", "target condition id"),
    ("target.speed", "20", "target shaft speed, rev/s"),
    ("target.load", "1", "target load"),
    (
        "target.noise_sigma",
        "0.2",
        "target additive noise standard deviation",
    ),
    ("split.n_train", "250", "source training windows per class"),
    (
        "split.n_ft",
        "10",
        "fine-tuning windows per class on each side",
    ),
    ("split.n_test", "100", "target test windows per class"),
    (
        "split.recording_windows",
        "0",
        "windows per recording, 0 for exactly as many as needed",
    ),
    ("cloud.batch_size", "32", "cloud training batch size"),
    ("cloud.num_epoch", "60", "cloud training epochs"),
    ("cloud.lr_max", "0.001", "cloud cosine schedule start"),
    ("cloud.lr_min", "0", "cloud cosine schedule end"),
    ("cloud.smoothing_epsilon", "0.1", "cloud label smoothing"),
    ("transfer.batch_size", "32", "per-side transfer batch size"),
    ("transfer.num_epoch", "100", "transfer epochs"),
    ("transfer.lr_max", "0.001", "transfer cosine schedule start"),
    ("transfer.lr_min", "0", "transfer cosine schedule end"),
    (
        "transfer.smoothing_epsilon",
        "0.1",
        "transfer label smoothing",
    ),
    (
        "transfer.delta",
        "1e-8",
        "adaptive weight denominator guard",
    ),
    (
        "transfer.kernel_count",
        "5",
        "number of Gaussian kernels in LMMD",
    ),
    (
        "transfer.bandwidth_multiplier",
        "2",
        "ratio between neighbouring kernel bandwidths",
    ),
    (
        "transfer.fixed_bandwidth",
        "auto",
        "base bandwidth, or `auto` for the median heuristic",
    ),
    (
        "transfer.anchor",
        "features",
        "node for adaptive-weight gradient norms: features | classifier_output",
    ),
    ("adam.beta1", "0.9", "Adam first-moment decay"),
    ("adam.beta2", "0.999", "Adam second-moment decay"),
    ("adam.eps", "1e-8", "Adam denominator epsilon"),
    ("bench.warmup", "100", "untimed warm-up inferences"),
    ("bench.iters", "1000", "timed inferences per repeat"),
    ("bench.repeats", "10", "benchmark repeats"),
];

#[derive(Debug, thiserror::Error)]
#[error("{key}: {reason}")]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

fn err(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    values: Vec<String>,
    pub seed: u64,
    pub seeds: usize,
    pub model: ModelConfig,
    pub source: ConditionSpec,
    pub target: ConditionSpec,
    pub counts: SplitCounts,
    pub cloud: TrainConfig,
    pub transfer: TrainConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::parse("").expect("defaults are valid")
    }
}

struct Values<'a> {
    v: &'a [String],
}

impl Values<'_> {
    fn raw(&self, key: &str) -> &str {
        let i = KEYS
            .iter()
            .position(|k| k.0 == key)
            .expect("registered key");
        &self.v[i]
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        let s = self.raw(key);
        s.parse()
            .map_err(|_| err(key, format!("cannot parse `{s}`")))
    }

    fn list(&self, key: &str) -> Result<Vec<usize>, ConfigError> {
        let s = self.raw(key);
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| err(key, format!("cannot parse list `{s}`")))
            })
            .collect()
    }

    fn condition(&self, side: &str) -> Result<ConditionSpec, ConfigError> {
        let c = ConditionSpec {
            id: self.get(&format!("{side}.id"))?,
            speed: self.get(&format!("{side}.speed"))?,
            load: self.get(&format!("{side}.load"))?,
            noise_sigma: self.get(&format!("{side}.noise_sigma"))?,
        };
        c.validate().map_err(|e| err(side, e.to_string()))?;
        Ok(c)
    }

    fn train(&self, p: &str, adam: AdamConfig, seed: u64) -> Result<TrainConfig, ConfigError> {
        let k = |s: &str| format!("{p}.{s}");
        let base = if p == "cloud" {
            TrainConfig::cloud_default()
        } else {
            TrainConfig::transfer_default()
        };
        let mut c = TrainConfig {
            batch_size: self.get(&k("batch_size"))?,
            num_epoch: self.get(&k("num_epoch"))?,
            lr_max: self.get(&k("lr_max"))?,
            lr_min: self.get(&k("lr_min"))?,
            smoothing_epsilon: self.get(&k("smoothing_epsilon"))?,
            adam,
            seed,
            ..base
        };
        if p == "transfer" {
            c.delta = self.get("transfer.delta")?;
            let fixed = match self.raw("transfer.fixed_bandwidth") {
                "auto" => None,
                _ => Some(self.get("transfer.fixed_bandwidth")?),
            };
            c.kernel = KernelConfig {
                kernel_count: self.get("transfer.kernel_count")?,
                bandwidth_multiplier: self.get("transfer.bandwidth_multiplier")?,
                fixed_bandwidth: fixed,
            };
            let a = self.raw("transfer.anchor");
            c.anchor = GradientAnchor::parse(a)
                .ok_or_else(|| err("transfer.anchor", format!("unknown anchor `{a}`")))?;
        }
        c.validate().map_err(|e| err(p, e.to_string()))?;
        Ok(c)
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values: Vec<String> = KEYS.iter().map(|k| k.1.to_string()).collect();
        let mut seen = vec![false; KEYS.len()];
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(&format!("line {}", no + 1), "expected key=value"))?;
            let (k, v) = (k.trim(), v.trim());
            let i = KEYS
                .iter()
                .position(|e| e.0 == k)
                .ok_or_else(|| err(k, "unknown key"))?;
            if seen[i] {
                return Err(err(k, "given more than once"));
            }
            seen[i] = true;
            values[i] = v.to_string();
        }
        Self::from_values(values)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err("config", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn from_values(values: Vec<String>) -> Result<Self, ConfigError> {
        let v = Values { v: &values };
        let shape = v.list("model.input_shape")?;
        let input_shape: [usize; 3] = shape.try_into().map_err(|_| {
            err(
                "model.input_shape",
                "expected three comma-separated dimensions",
            )
        })?;
        let model = ModelConfig {
            input_shape,
            num_classes: v.get("model.num_classes")?,
            pre_fe_widths: v.list("model.pre_fe_widths")?,
            c_stage_widths: v.list("model.c_stage_widths")?,
            c_blocks_per_stage: v.get("model.c_blocks_per_stage")?,
            e_stage_widths: v.list("model.e_stage_widths")?,
            feature_dim: v.get("model.feature_dim")?,
            classifier_hidden: v.get("model.classifier_hidden")?,
        };
        model.validate().map_err(|e| err("model", e.to_string()))?;
        let seed: u64 = v.get("seed")?;
        let adam = AdamConfig {
            beta1: v.get("adam.beta1")?,
            beta2: v.get("adam.beta2")?,
            eps: v.get("adam.eps")?,
        };
        let source = v.condition("source")?;
        let target = v.condition("target")?;
        if source.id == target.id {
            return Err(err("target.id", "must differ from source.id"));
        }
        let rw: usize = v.get("split.recording_windows")?;
        let counts = SplitCounts {
            n_train: v.get("split.n_train")?,
            n_ft: v.get("split.n_ft")?,
            n_test: v.get("split.n_test")?,
            recording_windows: (rw > 0).then_some(rw),
        };
        if counts.n_ft == 0 || counts.n_ft > counts.n_train || counts.n_test == 0 {
            return Err(err("split", "need 1 <= n_ft <= n_train and n_test >= 1"));
        }
        let seeds: usize = v.get("seeds")?;
        if seeds == 0 {
            return Err(err("seeds", "must be at least 1"));
        }
        let bench = BenchConfig {
            warmup: v.get("bench.warmup")?,
            iters: v.get("bench.iters")?,
            repeats: v.get("bench.repeats")?,
        };
        if bench.iters == 0 || bench.repeats == 0 {
            return Err(err("bench", "iters and repeats must be at least 1"));
        }
        Ok(Self {
            cloud: v.train("cloud", adam, seed)?,
            transfer: v.train("transfer", adam, seed)?,
            seed,
            seeds,
            model,
            source,
            target,
            counts,
            bench,
            values,
        })
    }

    /// Copy with `key` replaced, revalidated.
    pub fn with(&self, key: &str, value: &str) -> Result<Self, ConfigError> {
        let i = KEYS
            .iter()
            .position(|e| e.0 == key)
            .ok_or_else(|| err(key, "unknown key"))?;
        let mut values = self.values.clone();
        values[i] = value.to_string();
        Self::from_values(values)
    }

    /// Every key with its resolved value, one `key=value` per line.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(&self.values) {
            let _ = writeln!(s, "{}={v}", k.0);
        }
        s
    }

    /// The keys that determine the generated dataset.
    pub fn data_hash(&self) -> String {
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(&self.values) {
            if k.0 == "seed"
                || k.0 == "model.num_classes"
                || ["source.", "target.", "split."]
                    .iter()
                    .any(|p| k.0.starts_with(p))
            {
                let _ = writeln!(s, "{}={v}", k.0);
            }
        }
        config_hash(&s)
    }

    pub fn model_manifest(&self, kind: ModelKind, seed: u64) -> Manifest {
        Manifest::new(kind.as_str(), &self.model.hash(), seed, self.source.id)
    }

    pub fn data_manifest(&self) -> Manifest {
        Manifest::new("data", &self.data_hash(), self.seed, self.source.id)
    }
}

/// Documented defaults in config-file syntax.
pub fn defaults_text() -> String {
    let mut s = String::new();
    for (k, d, doc) in KEYS {
        let _ = writeln!(s, "# {doc}\n{k}={d}");
    }
    s
}
