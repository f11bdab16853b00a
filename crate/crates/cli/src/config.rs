use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use memepair::data::SyntheticSpec;
use memepair::model::{Ablation, HeadKind, ModelConfig};
use memepair::train::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Every tunable of every command, as one flat TOML table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: String,
    pub out_dir: String,

    pub num_concepts: usize,
    pub samples: usize,
    pub regions: usize,
    pub feat_dim: usize,
    pub noise_sigma: f64,
    pub confounder_fraction: f64,
    pub text_noise_rate: f64,
    pub data_seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,

    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_text_len: usize,
    pub max_regions: usize,
    pub head_kind: HeadKind,
    pub ablation: Ablation,
    pub dropout_rate: f64,
    pub pool_hidden: usize,
    pub share_pool: bool,
    pub allow_empty_caption: bool,
    pub layer_norm_eps: f64,
    pub init_std: f64,

    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub eval_every: u64,

    pub ensemble_seeds: Vec<u64>,

    pub gradcheck_eps: f64,
    pub gradcheck_tol: f64,
    pub gradcheck_coords: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = SyntheticSpec::default();
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            data_dir: "data".into(),
            out_dir: "out".into(),
            num_concepts: d.num_concepts,
            samples: d.samples,
            regions: d.regions,
            feat_dim: d.feat_dim,
            noise_sigma: d.noise_sigma,
            confounder_fraction: d.confounder_fraction,
            text_noise_rate: d.text_noise_rate,
            data_seed: d.seed,
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
            hidden_dim: m.hidden_dim,
            num_layers: m.num_layers,
            num_heads: m.num_heads,
            ffn_dim: m.ffn_dim,
            max_text_len: m.max_text_len,
            max_regions: m.max_regions,
            head_kind: m.head_kind,
            ablation: m.ablation,
            dropout_rate: m.dropout_rate,
            pool_hidden: m.pool_hidden,
            share_pool: m.share_pool,
            allow_empty_caption: m.allow_empty_caption,
            layer_norm_eps: m.layer_norm_eps,
            init_std: m.init_std,
            seed: t.seed,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            warmup_fraction: t.warmup_fraction,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            grad_clip_norm: t.grad_clip_norm,
            eval_every: t.eval_every,
            ensemble_seeds: vec![1, 2, 3, 4, 5],
            gradcheck_eps: 1e-5,
            gradcheck_tol: 1e-4,
            gradcheck_coords: 32,
        }
    }
}

impl RunConfig {
    /// Settings of the synthetic benchmark that `demo` reproduces.
    pub fn benchmark() -> Self {
        Self {
            samples: 2500,
            data_seed: 1,
            lr: 3e-3,
            eval_every: 25,
            out_dir: "demo".into(),
            ..Self::default()
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_concepts: self.num_concepts,
            samples: self.samples,
            regions: self.regions,
            feat_dim: self.feat_dim,
            noise_sigma: self.noise_sigma,
            confounder_fraction: self.confounder_fraction,
            text_noise_rate: self.text_noise_rate,
            seed: self.data_seed,
            ..SyntheticSpec::default()
        }
    }

    /// Model settings; vocabulary size and feature width come from the data.
    pub fn model_config(&self, vocab_size: usize, region_feat_dim: usize) -> ModelConfig {
        ModelConfig {
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            vocab_size,
            max_text_len: self.max_text_len,
            max_regions: self.max_regions,
            region_feat_dim,
            head_kind: self.head_kind,
            ablation: self.ablation,
            dropout_rate: self.dropout_rate,
            pool_hidden: self.pool_hidden,
            share_pool: self.share_pool,
            allow_empty_caption: self.allow_empty_caption,
            layer_norm_eps: self.layer_norm_eps,
            init_std: self.init_std,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_fraction: self.warmup_fraction,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            grad_clip_norm: self.grad_clip_norm,
            eval_every: self.eval_every,
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }
}

/// Config file plus command-line overrides. Named flags cover the common
/// keys; `--set key=value` reaches any key.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// TOML config file
    #[arg(long, short = 'c', global = true)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set hidden_dim=64` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Training seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Peak learning rate
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Training epochs
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Examples per optimizer step
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// `cls` or `paired`
    #[arg(long, global = true)]
    pub head_kind: Option<String>,
    /// `none`, `text_only` or `image_only`
    #[arg(long, global = true)]
    pub ablation: Option<String>,
    /// Synthetic records to generate
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    /// Generator and split seed
    #[arg(long, global = true)]
    pub data_seed: Option<u64>,
    /// Directory holding train/val/test.jsonl and vocab.txt
    #[arg(long, global = true)]
    pub data_dir: Option<String>,
    /// Output directory
    #[arg(long, short = 'o', global = true)]
    pub out_dir: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> Result<Vec<(String, Value)>> {
        let mut out: Vec<(String, Value)> = Vec::new();
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {item:?}"))?;
            out.push((k.trim().to_string(), parse_literal(v.trim())));
        }
        let int = |v: u64| Value::Integer(v as i64);
        let named = [
            ("seed", self.seed.map(int)),
            ("lr", self.lr.map(Value::Float)),
            ("epochs", self.epochs.map(|v| int(v as u64))),
            ("batch_size", self.batch_size.map(|v| int(v as u64))),
            ("head_kind", self.head_kind.clone().map(Value::String)),
            ("ablation", self.ablation.clone().map(Value::String)),
            ("samples", self.samples.map(|v| int(v as u64))),
            ("data_seed", self.data_seed.map(int)),
            ("data_dir", self.data_dir.clone().map(Value::String)),
            ("out_dir", self.out_dir.clone().map(Value::String)),
        ];
        out.extend(named.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        Ok(out)
    }
}

/// `1e-3`, `true`, `[1, 2]` parse as TOML; anything else is a bare string.
fn parse_literal(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Checks `key = value` against the type of the key's default, widening
/// integers where a float is expected.
fn check_entry(defaults: &Table, key: &str, value: Value) -> Result<Value> {
    let Some(expected) = defaults.get(key) else {
        bail!("unknown key {key}");
    };
    match (expected, value) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Integer(_), Value::Integer(i)) if i < 0 => {
            bail!("key {key}: expected a non-negative integer, got {i}")
        }
        (e, v) if std::mem::discriminant(e) == std::mem::discriminant(&v) => Ok(v),
        (e, v) => bail!("key {key}: expected {}, got {}", type_name(e), type_name(&v)),
    }
}

/// Precedence: flags > file > `base`.
pub fn resolve(base: RunConfig, overrides: &Overrides) -> Result<RunConfig> {
    let Value::Table(defaults) = Value::try_from(&base).expect("run config serializes") else {
        unreachable!("a struct serializes to a table")
    };
    let mut merged = defaults.clone();
    if let Some(path) = &overrides.config {
        for (k, v) in read_file(path)? {
            let v = check_entry(&defaults, &k, v).with_context(|| format!("config file {}", path.display()))?;
            merged.insert(k, v);
        }
    }
    for (k, v) in overrides.pairs()? {
        let v = check_entry(&defaults, &k, v).context("command-line override")?;
        merged.insert(k, v);
    }
    match Value::Table(merged.clone()).try_into::<RunConfig>() {
        Ok(cfg) => Ok(cfg),
        Err(e) => {
            // Values can be well-typed yet invalid (an unknown enum variant); name the key.
            for (k, v) in merged.iter().filter(|(k, v)| defaults.get(*k) != Some(*v)) {
                let mut single = defaults.clone();
                single.insert(k.clone(), v.clone());
                if let Err(e) = Value::Table(single).try_into::<RunConfig>() {
                    bail!("key {k}: {}", e.message());
                }
            }
            bail!("invalid config: {}", e.message())
        }
    }
}

fn read_file(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    text.parse::<Table>()
        .map_err(|e| anyhow!("config {} is not valid TOML: {}", path.display(), e.message()))
}
