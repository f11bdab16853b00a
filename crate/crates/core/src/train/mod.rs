//! Cross-entropy fine-tuning with AdamW, warmup/decay schedule, gradient
//! clipping, seeded shuffling and bit-exact checkpoints.

mod checkpoint;
mod optim;
mod run;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_VERSION, MAGIC};
pub use optim::{adamw_step, clip_grad_norm, global_norm, lr_at, AdamState};
pub use run::{predict, train_run, LogEntry, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::eval::EvalError;
use crate::model::ModelError;
use crate::tensor::{Graph, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("record {id:?} in the training set has no label")]
    Unlabeled { id: String },
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {found}; supported versions: {supported:?}")]
    Version { found: u32, supported: Vec<u32> },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global-norm clip threshold; `<= 0` disables clipping.
    pub grad_clip_norm: f64,
    /// Validation interval in optimizer steps; `0` evaluates only at the end.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 5,
            batch_size: 32,
            lr: 1e-3,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!(
                "warmup_fraction must be in [0,1), got {}",
                self.warmup_fraction
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must be in [0,1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps must be > 0 and weight_decay >= 0".into());
        }
        Ok(())
    }
}

/// `-log softmax(logits)[label]`, recorded on the graph.
pub fn cross_entropy(g: &mut Graph, logits: Var, label: u8) -> Result<Var, TensorError> {
    g.cross_entropy(logits, usize::from(label))
}
