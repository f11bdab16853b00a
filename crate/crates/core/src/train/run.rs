use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    adamw_step, clip_grad_norm, cross_entropy, lr_at, AdamState, Checkpoint, RngState, TrainConfig, TrainError,
};
use crate::data::Vocab;
use crate::eval::{auroc, Predictions};
use crate::model::{forward, init_params, predict_proba, Dropout, Example, ModelConfig};
use crate::tensor::{Graph, ParameterSet, Var};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogEntry {
    pub step: u64,
    /// Mean batch loss; absent for the step-0 evaluation.
    pub loss: Option<f64>,
    pub val_auroc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation AUROC (ties go to the later step);
    /// the final state when there is no validation set.
    pub best: Checkpoint,
    pub best_val_auroc: Option<f64>,
    pub log: Vec<LogEntry>,
    pub total_steps: u64,
}

/// Probabilities for `examples`; labels are attached when every example has one.
pub fn predict(cfg: &ModelConfig, params: &ParameterSet, examples: &[Example]) -> Result<Predictions, TrainError> {
    let probs = examples
        .iter()
        .map(|ex| predict_proba(cfg, params, ex))
        .collect::<Result<Vec<_>, _>>()?;
    let labels = examples.iter().map(|e| e.label).collect::<Option<Vec<u8>>>();
    Ok(Predictions::new(
        examples.iter().map(|e| e.id.clone()).collect(),
        probs,
        labels,
    )?)
}

/// Mean cross-entropy over `batch`, recorded on one graph.
pub fn batch_loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParameterSet,
    batch: &[&Example],
    dropout: &mut Dropout,
) -> Result<Var, TrainError> {
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let label = ex.label.ok_or_else(|| TrainError::Unlabeled { id: ex.id.clone() })?;
        let z = forward(g, cfg, params, ex, dropout)?;
        let l = cross_entropy(g, z, label)?;
        losses.push(g.reshape(l, &[1, 1])?);
    }
    let all = g.concat_rows(&losses)?;
    let sum = g.sum(all)?;
    Ok(g.scale(sum, 1.0 / batch.len() as f64)?)
}

fn val_auroc(cfg: &ModelConfig, params: &ParameterSet, val: &[Example]) -> Result<Option<f64>, TrainError> {
    if val.is_empty() {
        return Ok(None);
    }
    Ok(Some(auroc(&predict(cfg, params, val)?)?))
}

/// Trains from a seeded initialization. Single-threaded and fully determined
/// by `(train_cfg.seed, configs, data)`.
pub fn train_run(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    vocab: &Vocab,
    train: &[Example],
    val: &[Example],
) -> Result<TrainOutcome, TrainError> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if let Some(ex) = train.iter().find(|e| e.label.is_none()) {
        return Err(TrainError::Unlabeled { id: ex.id.clone() });
    }

    let seed = train_cfg.seed;
    let mut params = init_params(model_cfg, seed)?;
    let mut adam = AdamState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(1);

    let steps_per_epoch = train.len().div_ceil(train_cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * train_cfg.epochs as u64;
    let snapshot = |params: &ParameterSet, adam: &AdamState, rng: &ChaCha8Rng, step: u64| Checkpoint {
        model: model_cfg.clone(),
        train: train_cfg.clone(),
        step,
        params: params.clone(),
        adam: adam.clone(),
        rng: RngState::capture(rng),
        vocab: vocab.tokens().to_vec(),
    };

    let mut log = Vec::with_capacity(total_steps as usize + 1);
    let initial = val_auroc(model_cfg, &params, val)?;
    log.push(LogEntry {
        step: 0,
        loss: None,
        val_auroc: initial,
    });
    let mut best = snapshot(&params, &adam, &shuffle_rng, 0);
    let mut best_auc = initial;

    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _epoch in 0..train_cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(train_cfg.batch_size) {
            step += 1;
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let mut dropout = Dropout::new(model_cfg.dropout_rate, seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut g = Graph::new();
            let loss = batch_loss(&mut g, model_cfg, &params, &batch, &mut dropout)?;
            let loss_value = g.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            let mut grads = g.backward(loss)?.into_params();
            clip_grad_norm(&mut grads, train_cfg.grad_clip_norm);
            let lr = lr_at(step, total_steps, train_cfg);
            adamw_step(&mut params, &grads, &mut adam, step, lr, train_cfg)?;

            let due = step == total_steps || (train_cfg.eval_every > 0 && step.is_multiple_of(train_cfg.eval_every));
            let auc = if due { val_auroc(model_cfg, &params, val)? } else { None };
            log.push(LogEntry {
                step,
                loss: Some(loss_value),
                val_auroc: auc,
            });
            let improved = match (auc, best_auc) {
                (Some(a), Some(b)) => a >= b,
                (Some(_), None) => true,
                (None, _) => val.is_empty() && step == total_steps,
            };
            if improved {
                best = snapshot(&params, &adam, &shuffle_rng, step);
                best_auc = auc.or(best_auc);
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_val_auroc: best_auc,
        log,
        total_steps,
    })
}
