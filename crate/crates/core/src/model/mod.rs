//! Single-stream transformer over joint region + text sequences, with a CLS
//! head and a paired head that encodes (image, OCR text) and (image, caption)
//! separately, attention-pools both and classifies the concatenation.

mod check;
mod forward;

pub use check::{generic_params, model_gradcheck, random_examples, toy_config};
pub use forward::{
    attention_pool, build_sequence, cls_forward, embed_sequence, encoder_forward, forward, paired_forward,
    paired_halves, predict_proba, Dropout, EncoderOutput, PairedOutput,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{tokenize_with_info, MemeRecord, Vocab, CLS, PAD, SEP};
use crate::tensor::{ParameterSet, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocab size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("{got} regions exceed max_regions {max}")]
    TooManyRegions { got: usize, max: usize },
    #[error("text of {got} tokens exceeds max_text_len {max}")]
    TextTooLong { got: usize, max: usize },
    #[error("region features have dimension {got}, model expects {expected}")]
    FeatureDim { got: usize, expected: usize },
    #[error("record {id:?} has no caption; backfill inferred captions before using the paired head")]
    MissingCaption { id: String },
    #[error("record {id:?} has an empty caption; backfill it or set allow_empty_caption")]
    EmptyCaption { id: String },
    #[error("attention pooling needs at least one unmasked position")]
    AllMasked,
    #[error("missing parameter {0}")]
    MissingParam(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Cls,
    Paired,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    TextOnly,
    ImageOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub max_regions: usize,
    pub region_feat_dim: usize,
    pub head_kind: HeadKind,
    pub ablation: Ablation,
    pub dropout_rate: f64,
    pub pool_hidden: usize,
    pub share_pool: bool,
    pub allow_empty_caption: bool,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 128,
            max_text_len: 16,
            max_regions: 8,
            region_feat_dim: 16,
            head_kind: HeadKind::Paired,
            ablation: Ablation::None,
            dropout_rate: 0.0,
            pool_hidden: 32,
            share_pool: true,
            allow_empty_caption: false,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        let extents = [
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_regions", self.max_regions),
            ("region_feat_dim", self.region_feat_dim),
            ("pool_hidden", self.pool_hidden),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be >= 1"));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.max_text_len < 3 {
            return bad("max_text_len must be >= 3".into());
        }
        if self.vocab_size < 4 {
            return bad("vocab_size must cover the 4 reserved tokens".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0,1), got {}", self.dropout_rate));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be > 0".into());
        }
        if !(self.init_std >= 0.0) {
            return bad("init_std must be >= 0".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Parameter names and shapes for `cfg`, with their init rule.
fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.hidden_dim;
    let mut v: Vec<(String, Vec<usize>, Init)> = vec![
        ("emb.tok".into(), vec![cfg.vocab_size, d], Init::Normal),
        ("emb.pos".into(), vec![cfg.max_text_len, d], Init::Normal),
        ("emb.seg".into(), vec![2, d], Init::Normal),
        ("emb.region.w".into(), vec![cfg.region_feat_dim + 5, d], Init::Normal),
        ("emb.region.b".into(), vec![d], Init::Zeros),
        ("emb.ln.gamma".into(), vec![d], Init::Ones),
        ("emb.ln.beta".into(), vec![d], Init::Zeros),
    ];
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("enc.{l}.{s}");
        for ln in ["ln1", "ln2"] {
            v.push((p(&format!("{ln}.gamma")), vec![d], Init::Ones));
            v.push((p(&format!("{ln}.beta")), vec![d], Init::Zeros));
        }
        for w in ["wq", "wk", "wv", "wo"] {
            v.push((p(&format!("attn.{w}")), vec![d, d], Init::Normal));
            v.push((p(&format!("attn.b{}", &w[1..])), vec![d], Init::Zeros));
        }
        v.push((p("ffn.w1"), vec![d, cfg.ffn_dim], Init::Normal));
        v.push((p("ffn.b1"), vec![cfg.ffn_dim], Init::Zeros));
        v.push((p("ffn.w2"), vec![cfg.ffn_dim, d], Init::Normal));
        v.push((p("ffn.b2"), vec![d], Init::Zeros));
    }
    let head_in = match cfg.head_kind {
        HeadKind::Cls => d,
        HeadKind::Paired => {
            for prefix in pool_prefixes(cfg) {
                v.push((format!("{prefix}.w"), vec![d, cfg.pool_hidden], Init::Normal));
                v.push((format!("{prefix}.v"), vec![cfg.pool_hidden, 1], Init::Normal));
            }
            2 * d
        }
    };
    v.push(("head.fc1.w".into(), vec![head_in, d], Init::Normal));
    v.push(("head.fc1.b".into(), vec![d], Init::Zeros));
    v.push(("head.fc2.w".into(), vec![d, 2], Init::Zeros));
    v.push(("head.fc2.b".into(), vec![2], Init::Zeros));
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

pub(crate) fn pool_prefixes(cfg: &ModelConfig) -> Vec<&'static str> {
    if cfg.share_pool {
        vec!["pool"]
    } else {
        vec!["pool.a", "pool.b"]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Seeded initialization: `N(0, init_std)` weights, zero biases, unit gains,
/// and a zero final layer so an untrained model predicts 0.5.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
    let mut params = ParameterSet::new();
    for (name, shape, init) in param_layout(cfg) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(params)
}

/// Checks that `params` has exactly the arrays `cfg` expects.
pub fn check_params(cfg: &ModelConfig, params: &ParameterSet) -> Result<(), ModelError> {
    let layout = param_layout(cfg);
    if layout.len() != params.len() {
        return Err(ModelError::InvalidConfig(format!(
            "parameter set has {} arrays, config expects {}",
            params.len(),
            layout.len()
        )));
    }
    for (name, shape, _) in layout {
        match params.get(&name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(ModelError::InvalidConfig(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            None => return Err(ModelError::MissingParam(name)),
        }
    }
    Ok(())
}

/// A record turned into token ids and dense region arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub label: Option<u8>,
    pub text_ids: Vec<usize>,
    pub caption_ids: Option<Vec<usize>>,
    /// K x D region features.
    pub features: Tensor,
    pub boxes: Vec<[f64; 4]>,
}

impl Example {
    pub fn num_regions(&self) -> usize {
        self.boxes.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EncodeStats {
    pub text_truncated: bool,
    pub caption_truncated: bool,
}

/// Tokenizes text and caption (truncating to `max_text_len`) and packs the regions.
pub fn encode_record(
    cfg: &ModelConfig,
    vocab: &Vocab,
    record: &MemeRecord,
) -> Result<(Example, EncodeStats), ModelError> {
    if record.num_regions() > cfg.max_regions {
        return Err(ModelError::TooManyRegions {
            got: record.num_regions(),
            max: cfg.max_regions,
        });
    }
    if record.feat_dim() != cfg.region_feat_dim {
        return Err(ModelError::FeatureDim {
            got: record.feat_dim(),
            expected: cfg.region_feat_dim,
        });
    }
    let (text_ids, text_truncated) = tokenize_with_info(vocab, &record.text, cfg.max_text_len);
    let (caption_ids, caption_truncated) = match &record.caption {
        Some(c) => {
            let (ids, t) = tokenize_with_info(vocab, c, cfg.max_text_len);
            (Some(ids), t)
        }
        None => (None, false),
    };
    let features = Tensor::from_rows(&record.features)?;
    Ok((
        Example {
            id: record.id.clone(),
            label: record.label,
            text_ids,
            caption_ids,
            features,
            boxes: record.boxes.clone(),
        },
        EncodeStats {
            text_truncated,
            caption_truncated,
        },
    ))
}

/// Encodes a batch of records, returning examples plus truncation counts
/// `(texts truncated, captions truncated)`.
pub fn encode_records(
    cfg: &ModelConfig,
    vocab: &Vocab,
    records: &[MemeRecord],
) -> Result<(Vec<Example>, (usize, usize)), ModelError> {
    let mut out = Vec::with_capacity(records.len());
    let mut counts = (0, 0);
    for r in records {
        let (ex, st) = encode_record(cfg, vocab, r)?;
        counts.0 += usize::from(st.text_truncated);
        counts.1 += usize::from(st.caption_truncated);
        out.push(ex);
    }
    Ok((out, counts))
}

/// One (text, regions) joint sequence. Text tokens come first, so the CLS
/// token is row 0; region rows follow.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSequence {
    pub token_ids: Vec<usize>,
    pub positions: Vec<usize>,
    /// 1 for text rows, 0 for region rows.
    pub segment_ids: Vec<usize>,
    pub features: Tensor,
    pub boxes: Vec<[f64; 4]>,
    /// 1 = attendable, 0 = padding or ablated.
    pub mask: Vec<bool>,
}

impl JointSequence {
    pub fn text_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn num_regions(&self) -> usize {
        self.boxes.len()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

pub(crate) fn has_words(ids: &[usize]) -> bool {
    ids.iter().any(|&t| t != CLS && t != SEP && t != PAD)
}
