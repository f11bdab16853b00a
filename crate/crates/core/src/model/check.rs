use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{forward, init_params, Dropout, Example, ModelConfig, ModelError};
use crate::data::{CLS, SEP};
use crate::tensor::{finite_diff_check, GradCheckConfig, GradCheckReport, Graph, ParameterSet, Tensor};

/// Toy configuration used by the gradient check: d=16, L=2, H=4, K=4.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        num_layers: 2,
        num_heads: 4,
        ffn_dim: 32,
        vocab_size: 24,
        max_text_len: 10,
        max_regions: 4,
        region_feat_dim: 6,
        pool_hidden: 8,
        ..Default::default()
    }
}

/// Seeded labeled examples with `regions` regions, OCR text and a caption.
pub fn random_examples(cfg: &ModelConfig, n: usize, regions: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_words = cfg.max_text_len - 2;
    let ids = |rng: &mut ChaCha8Rng| {
        let len = rng.gen_range(1..=max_words);
        let mut v = vec![CLS];
        v.extend((0..len).map(|_| rng.gen_range(4..cfg.vocab_size.max(5))));
        v.push(SEP);
        v
    };
    (0..n)
        .map(|i| {
            let text_ids = ids(&mut rng);
            let caption_ids = ids(&mut rng);
            let feats = (0..regions * cfg.region_feat_dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let boxes = (0..regions)
                .map(|_| {
                    let (x1, y1) = (rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5));
                    [x1, y1, x1 + rng.gen_range(0.1..0.5), y1 + rng.gen_range(0.1..0.5)]
                })
                .collect();
            Example {
                id: format!("g{i}"),
                label: Some((i % 2) as u8),
                text_ids,
                caption_ids: Some(caption_ids),
                features: Tensor::new(vec![regions, cfg.region_feat_dim], feats).expect("shape matches data"),
                boxes,
            }
        })
        .collect()
}

/// Initializes parameters and then jitters every array (including the zero
/// output layer, biases and gains) so that no gradient is trivially zero.
pub fn generic_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet, ModelError> {
    let mut params = init_params(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let noise = Normal::new(0.0, 0.3).expect("valid std");
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    Ok(params)
}

/// Finite-difference check of the full model loss (mean cross-entropy over a
/// few generic examples) against reverse-mode gradients.
pub fn model_gradcheck(cfg: &ModelConfig, seed: u64, check: &GradCheckConfig) -> Result<GradCheckReport, ModelError> {
    cfg.validate()?;
    let examples = random_examples(cfg, 2, cfg.max_regions.min(4), seed);
    let params = generic_params(cfg, seed)?;
    finite_diff_check(
        |p: &ParameterSet| -> Result<_, ModelError> {
            let mut g = Graph::new();
            let mut losses = Vec::new();
            for ex in &examples {
                let z = forward(&mut g, cfg, p, ex, &mut Dropout::disabled())?;
                let l = g.cross_entropy(z, usize::from(ex.label.unwrap_or(0)))?;
                losses.push(g.reshape(l, &[1, 1])?);
            }
            let all = g.concat_rows(&losses)?;
            let loss = g.sum(all)?;
            Ok((g, loss))
        },
        &params,
        check,
    )
}
