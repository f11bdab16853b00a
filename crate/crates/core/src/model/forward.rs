use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{has_words, pool_prefixes, Ablation, Example, HeadKind, JointSequence, ModelConfig, ModelError};
use crate::data::PAD;
use crate::tensor::{Graph, ParameterSet, Tensor, Var};

const MASK_LOGIT: f64 = -1e9;

/// Inverted dropout driven by a seeded stream; a no-op when disabled.
#[derive(Clone, Debug)]
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: (rate > 0.0).then(|| ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        let Some(rng) = self.rng.as_mut() else { return Ok(x) };
        let keep = 1.0 - self.rate;
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        Ok(g.mul(x, m)?)
    }
}

fn param(g: &mut Graph, params: &ParameterSet, name: &str) -> Result<Var, ModelError> {
    let t = params
        .get(name)
        .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
    Ok(g.param(name, t))
}

fn mask_bias(mask: &[bool]) -> Tensor {
    Tensor::vector(mask.iter().map(|&m| if m { 0.0 } else { MASK_LOGIT }).collect())
}

fn linear(g: &mut Graph, params: &ParameterSet, x: Var, w: &str, b: &str) -> Result<Var, ModelError> {
    let wv = param(g, params, w)?;
    let bv = param(g, params, b)?;
    let y = g.matmul(x, wv)?;
    Ok(g.add_row(y, bv)?)
}

/// Pairs the record's regions with `text_ids`, applying padding and ablation masks.
pub fn build_sequence(cfg: &ModelConfig, ex: &Example, text_ids: &[usize]) -> Result<JointSequence, ModelError> {
    if text_ids.len() > cfg.max_text_len {
        return Err(ModelError::TextTooLong {
            got: text_ids.len(),
            max: cfg.max_text_len,
        });
    }
    if let Some(&id) = text_ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    let k = ex.num_regions();
    if k > cfg.max_regions {
        return Err(ModelError::TooManyRegions {
            got: k,
            max: cfg.max_regions,
        });
    }
    if ex.features.cols() != cfg.region_feat_dim || ex.features.rows() != k {
        return Err(ModelError::FeatureDim {
            got: ex.features.cols(),
            expected: cfg.region_feat_dim,
        });
    }
    let t = text_ids.len();
    let text_on = cfg.ablation != Ablation::ImageOnly;
    let image_on = cfg.ablation != Ablation::TextOnly;
    let mut mask: Vec<bool> = text_ids.iter().map(|&id| text_on && id != PAD).collect();
    mask.extend(std::iter::repeat_n(image_on, k));
    Ok(JointSequence {
        token_ids: text_ids.to_vec(),
        positions: (0..t).collect(),
        segment_ids: std::iter::repeat_n(1, t).chain(std::iter::repeat_n(0, k)).collect(),
        features: ex.features.clone(),
        boxes: ex.boxes.clone(),
        mask,
    })
}

/// Joint embedding: text rows are token + position + segment-1 embeddings,
/// region rows are a projection of `[features | x1 y1 x2 y2 area]` plus the
/// segment-0 embedding; every row is then layer-normed.
pub fn embed_sequence(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParameterSet,
    seq: &JointSequence,
) -> Result<Var, ModelError> {
    let t = seq.text_len();
    let k = seq.num_regions();
    if t > cfg.max_text_len {
        return Err(ModelError::TextTooLong {
            got: t,
            max: cfg.max_text_len,
        });
    }
    if let Some(&id) = seq.token_ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    if k > cfg.max_regions {
        return Err(ModelError::TooManyRegions {
            got: k,
            max: cfg.max_regions,
        });
    }

    let tok = param(g, params, "emb.tok")?;
    let pos = param(g, params, "emb.pos")?;
    let seg = param(g, params, "emb.seg")?;
    let mut rows = Vec::with_capacity(2);
    if t > 0 {
        let te = g.gather_rows(tok, &seq.token_ids)?;
        let pe = g.gather_rows(pos, &seq.positions)?;
        let x = g.add(te, pe)?;
        let s1 = g.gather_rows(seg, &[1])?;
        rows.push(g.add_row(x, s1)?);
    }
    if k > 0 {
        let d = seq.features.cols();
        let mut input = Vec::with_capacity(k * (d + 5));
        for (f, b) in seq.features.data().chunks(d).zip(&seq.boxes) {
            input.extend_from_slice(f);
            input.extend_from_slice(b);
            input.push((b[2] - b[0]) * (b[3] - b[1]));
        }
        let inp = g.constant(Tensor::new(vec![k, d + 5], input)?);
        let r = linear(g, params, inp, "emb.region.w", "emb.region.b")?;
        let s0 = g.gather_rows(seg, &[0])?;
        rows.push(g.add_row(r, s0)?);
    }
    let x = g.concat_rows(&rows)?;
    let gamma = param(g, params, "emb.ln.gamma")?;
    let beta = param(g, params, "emb.ln.beta")?;
    let x = g.layer_norm(x, gamma, beta, cfg.layer_norm_eps)?;
    if cfg.ablation == Ablation::None {
        return Ok(x);
    }
    let d = cfg.hidden_dim;
    let keep_text = cfg.ablation == Ablation::TextOnly;
    let zero = (0..t + k).flat_map(|i| {
        let keep = (i < t) == keep_text;
        std::iter::repeat_n(if keep { 1.0 } else { 0.0 }, d)
    });
    let m = g.constant(Tensor::new(vec![t + k, d], zero.collect())?);
    Ok(g.mul(x, m)?)
}

pub struct EncoderOutput {
    pub hidden: Var,
    /// Attention weights per layer and head, each `S x S`.
    pub attention: Vec<Var>,
}

/// Pre-norm transformer stack. Masked positions are never attended to but
/// their rows are still computed and emitted.
pub fn encoder_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParameterSet,
    x: Var,
    mask: &[bool],
    dropout: &mut Dropout,
) -> Result<EncoderOutput, ModelError> {
    let s = g.shape(x)[0];
    if g.shape(x) != [s, cfg.hidden_dim] || mask.len() != s {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "encoder_forward",
            left: g.shape(x).to_vec(),
            right: vec![mask.len(), cfg.hidden_dim],
        }
        .into());
    }
    let bias = g.constant(mask_bias(mask));
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut h = x;
    let mut attention = Vec::with_capacity(cfg.num_layers * cfg.num_heads);
    for l in 0..cfg.num_layers {
        let name = |s: &str| format!("enc.{l}.{s}");
        let g1 = param(g, params, &name("ln1.gamma"))?;
        let b1 = param(g, params, &name("ln1.beta"))?;
        let a = g.layer_norm(h, g1, b1, cfg.layer_norm_eps)?;
        let q = linear(g, params, a, &name("attn.wq"), &name("attn.bq"))?;
        let k = linear(g, params, a, &name("attn.wk"), &name("attn.bk"))?;
        let v = linear(g, params, a, &name("attn.wv"), &name("attn.bv"))?;
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for hd in 0..cfg.num_heads {
            let qh = g.slice_cols(q, hd * dh, dh)?;
            let kh = g.slice_cols(k, hd * dh, dh)?;
            let vh = g.slice_cols(v, hd * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let scores = g.add_row(scores, bias)?;
            let w = g.softmax_rows(scores)?;
            attention.push(w);
            heads.push(g.matmul(w, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        let o = linear(g, params, cat, &name("attn.wo"), &name("attn.bo"))?;
        let o = dropout.apply(g, o)?;
        h = g.add(h, o)?;

        let g2 = param(g, params, &name("ln2.gamma"))?;
        let b2 = param(g, params, &name("ln2.beta"))?;
        let bn = g.layer_norm(h, g2, b2, cfg.layer_norm_eps)?;
        let f = linear(g, params, bn, &name("ffn.w1"), &name("ffn.b1"))?;
        let f = g.gelu(f)?;
        let f = linear(g, params, f, &name("ffn.w2"), &name("ffn.b2"))?;
        let f = dropout.apply(g, f)?;
        h = g.add(h, f)?;
    }
    Ok(EncoderOutput { hidden: h, attention })
}

/// Additive attention pooling: `score_i = v . tanh(W h_i)` over unmasked rows,
/// softmax, then the weighted sum of rows. Returns `1 x d`.
pub fn attention_pool(
    g: &mut Graph,
    params: &ParameterSet,
    prefix: &str,
    hidden: Var,
    mask: &[bool],
) -> Result<Var, ModelError> {
    if !mask.iter().any(|&m| m) {
        return Err(ModelError::AllMasked);
    }
    let s = g.shape(hidden)[0];
    let w = param(g, params, &format!("{prefix}.w"))?;
    let v = param(g, params, &format!("{prefix}.v"))?;
    let proj = g.matmul(hidden, w)?;
    let act = g.tanh(proj)?;
    let scores = g.matmul(act, v)?;
    let scores = g.reshape(scores, &[1, s])?;
    let bias = g.constant(mask_bias(mask));
    let scores = g.add_row(scores, bias)?;
    let weights = g.softmax_rows(scores)?;
    Ok(g.matmul(weights, hidden)?)
}

fn mlp_head(g: &mut Graph, params: &ParameterSet, x: Var) -> Result<Var, ModelError> {
    let h = linear(g, params, x, "head.fc1.w", "head.fc1.b")?;
    let h = g.gelu(h)?;
    let z = linear(g, params, h, "head.fc2.w", "head.fc2.b")?;
    Ok(g.reshape(z, &[2])?)
}

fn encode(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParameterSet,
    seq: &JointSequence,
    dropout: &mut Dropout,
) -> Result<Var, ModelError> {
    let x = embed_sequence(g, cfg, params, seq)?;
    Ok(encoder_forward(g, cfg, params, x, &seq.mask, dropout)?.hidden)
}

/// Baseline head: MLP over the CLS hidden state of (regions, OCR text).
/// The caption is never read.
pub fn cls_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParameterSet,
    ex: &Example,
    dropout: &mut Dropout,
) -> Result<Var, ModelError> {
    let seq = build_sequence(cfg, ex, &ex.text_ids)?;
    let h = encode(g, cfg, params, &seq, dropout)?;
    let cls = g.row(h, 0)?;
    mlp_head(g, params, cls)
}

/// Half A pairs the regions with the OCR text, half B pairs the same regions
/// with the inferred caption.
pub fn paired_halves(cfg: &ModelConfig, ex: &Example) -> Result<(JointSequence, JointSequence), ModelError> {
    let caption = ex
        .caption_ids
        .as_ref()
        .ok_or_else(|| ModelError::MissingCaption { id: ex.id.clone() })?;
    if !cfg.allow_empty_caption && !has_words(caption) {
        return Err(ModelError::EmptyCaption { id: ex.id.clone() });
    }
    Ok((
        build_sequence(cfg, ex, &ex.text_ids)?,
        build_sequence(cfg, ex, caption)?,
    ))
}

pub struct PairedOutput {
    pub logits: Var,
    pub pooled_a: Var,
    pub pooled_b: Var,
}

/// Paired head: shared encoder over both halves, attention-pool each,
/// concatenate, MLP.
pub fn paired_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParameterSet,
    ex: &Example,
    dropout: &mut Dropout,
) -> Result<PairedOutput, ModelError> {
    let (a, b) = paired_halves(cfg, ex)?;
    let prefixes = pool_prefixes(cfg);
    let (pa, pb) = (prefixes[0], *prefixes.last().unwrap());
    let ha = encode(g, cfg, params, &a, dropout)?;
    let pooled_a = attention_pool(g, params, pa, ha, &a.mask)?;
    let hb = encode(g, cfg, params, &b, dropout)?;
    let pooled_b = attention_pool(g, params, pb, hb, &b.mask)?;
    let cat = g.concat_cols(&[pooled_a, pooled_b])?;
    let logits = mlp_head(g, params, cat)?;
    Ok(PairedOutput {
        logits,
        pooled_a,
        pooled_b,
    })
}

/// Logits (shape `[2]`) for whichever head `cfg` selects.
pub fn forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParameterSet,
    ex: &Example,
    dropout: &mut Dropout,
) -> Result<Var, ModelError> {
    match cfg.head_kind {
        HeadKind::Cls => cls_forward(g, cfg, params, ex, dropout),
        HeadKind::Paired => Ok(paired_forward(g, cfg, params, ex, dropout)?.logits),
    }
}

/// Probability of the hateful class.
pub fn predict_proba(cfg: &ModelConfig, params: &ParameterSet, ex: &Example) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let z = forward(&mut g, cfg, params, ex, &mut Dropout::disabled())?;
    Ok(proba_from_logits(g.value(z).data()))
}

pub(crate) fn proba_from_logits(z: &[f64]) -> f64 {
    1.0 / (1.0 + (z[0] - z[1]).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CLS, SEP};
    use crate::model::init_params;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            ..Default::default()
        }
    }

    fn example(k: usize, text: usize, caption: usize) -> Example {
        let ids = |n: usize, off: usize| {
            let mut v = vec![CLS];
            v.extend((0..n).map(|i| 4 + (i + off) % 16));
            v.push(SEP);
            v
        };
        Example {
            id: "x".into(),
            label: Some(1),
            text_ids: ids(text - 2, 0),
            caption_ids: Some(ids(caption - 2, 5)),
            features: Tensor::new(vec![k, 16], (0..k * 16).map(|i| ((i * 7) % 11) as f64 / 10.0).collect()).unwrap(),
            boxes: (0..k)
                .map(|i| [0.1 * i as f64, 0.0, 0.1 * i as f64 + 0.2, 0.5])
                .collect(),
        }
    }

    #[test]
    fn embed_shape_and_determinism() {
        let c = cfg();
        let p = init_params(&c, 1).unwrap();
        let ex = example(4, 7, 5);
        let seq = build_sequence(&c, &ex, &ex.text_ids).unwrap();
        let mut g = Graph::new();
        let a = embed_sequence(&mut g, &c, &p, &seq).unwrap();
        let b = embed_sequence(&mut g, &c, &p, &seq).unwrap();
        assert_eq!(g.shape(a), &[11, 32]);
        assert!(g.value(a).all_finite());
        assert!(g
            .value(a)
            .data()
            .iter()
            .zip(g.value(b).data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn text_only_masks_regions() {
        let c = ModelConfig {
            ablation: Ablation::TextOnly,
            ..cfg()
        };
        let ex = example(4, 7, 5);
        let seq = build_sequence(&c, &ex, &ex.text_ids).unwrap();
        assert_eq!(&seq.mask[7..], &[false; 4]);
        assert!(seq.mask[..7].iter().all(|&m| m));
        let p = init_params(&c, 1).unwrap();
        let mut g = Graph::new();
        let e = embed_sequence(&mut g, &c, &p, &seq).unwrap();
        assert!((7..11).all(|r| g.value(e).row(r).iter().all(|&v| v == 0.0)));

        let c = ModelConfig {
            ablation: Ablation::ImageOnly,
            ..cfg()
        };
        let seq = build_sequence(&c, &ex, &ex.text_ids).unwrap();
        assert_eq!(&seq.mask[..7], &[false; 7]);
    }

    #[test]
    fn embed_errors() {
        let c = cfg();
        let ex = example(4, 7, 5);
        let mut bad = ex.text_ids.clone();
        bad[1] = 99;
        assert!(matches!(
            build_sequence(&c, &ex, &bad),
            Err(ModelError::TokenOutOfRange { id: 99, .. })
        ));
        assert!(matches!(
            build_sequence(&c, &ex, &[CLS; 17]),
            Err(ModelError::TextTooLong { got: 17, max: 16 })
        ));
        let many = example(9, 7, 5);
        assert!(matches!(
            build_sequence(&c, &many, &many.text_ids),
            Err(ModelError::TooManyRegions { got: 9, max: 8 })
        ));
    }

    #[test]
    fn zero_layers_is_identity() {
        let c = ModelConfig { num_layers: 0, ..cfg() };
        let p = init_params(&c, 1).unwrap();
        let ex = example(4, 7, 5);
        let seq = build_sequence(&c, &ex, &ex.text_ids).unwrap();
        let mut g = Graph::new();
        let x = embed_sequence(&mut g, &c, &p, &seq).unwrap();
        let out = encoder_forward(&mut g, &c, &p, x, &seq.mask, &mut Dropout::disabled()).unwrap();
        assert_eq!(out.hidden, x);
    }

    #[test]
    fn single_unmasked_key_gets_all_attention() {
        let c = ModelConfig { init_std: 0.5, ..cfg() };
        let p = init_params(&c, 2).unwrap();
        let ex = example(4, 7, 5);
        let seq = build_sequence(&c, &ex, &ex.text_ids).unwrap();
        let mut mask = vec![false; seq.len()];
        mask[3] = true;
        let mut g = Graph::new();
        let x = embed_sequence(&mut g, &c, &p, &seq).unwrap();
        let out = encoder_forward(&mut g, &c, &p, x, &mask, &mut Dropout::disabled()).unwrap();
        assert_eq!(out.attention.len(), 8);
        for &w in &out.attention {
            let t = g.value(w);
            for i in 0..t.rows() {
                assert_eq!(t.at(i, 3), 1.0);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let c = ModelConfig { init_std: 0.5, ..cfg() };
        let p = init_params(&c, 2).unwrap();
        let ex = example(4, 9, 5);
        let seq = build_sequence(&c, &ex, &ex.text_ids).unwrap();
        let mut g = Graph::new();
        let x = embed_sequence(&mut g, &c, &p, &seq).unwrap();
        let out = encoder_forward(&mut g, &c, &p, x, &seq.mask, &mut Dropout::disabled()).unwrap();
        for &w in &out.attention {
            let t = g.value(w);
            for i in 0..t.rows() {
                assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_examples() {
        let mut p = ParameterSet::new();
        p.insert("pool.w", Tensor::zeros(&[2, 3])).unwrap();
        p.insert("pool.v", Tensor::full(&[3, 1], 0.3)).unwrap();
        let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0], vec![100.0, 100.0]]).unwrap();
        let mut g = Graph::new();
        let hv = g.constant(h);
        let out = attention_pool(&mut g, &p, "pool", hv, &[true, true, false]).unwrap();
        assert_eq!(g.value(out).data(), &[2.0, -1.0]);
        let one = attention_pool(&mut g, &p, "pool", hv, &[false, true, false]).unwrap();
        assert_eq!(g.value(one).data(), &[3.0, -4.0]);
        assert!(matches!(
            attention_pool(&mut g, &p, "pool", hv, &[false; 3]),
            Err(ModelError::AllMasked)
        ));
    }

    #[test]
    fn heads_produce_two_finite_logits() {
        for head_kind in [HeadKind::Cls, HeadKind::Paired] {
            let c = ModelConfig { head_kind, ..cfg() };
            let p = init_params(&c, 1).unwrap();
            let ex = example(4, 7, 5);
            let mut g = Graph::new();
            let z = forward(&mut g, &c, &p, &ex, &mut Dropout::disabled()).unwrap();
            assert_eq!(g.value(z).data(), &[0.0, 0.0]);
            assert_eq!(predict_proba(&c, &p, &ex).unwrap(), 0.5);
        }
    }

    #[test]
    fn proba_examples() {
        assert_eq!(proba_from_logits(&[0.0, 0.0]), 0.5);
        assert!((proba_from_logits(&[0.0, 3f64.ln()]) - 0.75).abs() < 1e-12);
        let p = proba_from_logits(&[30.0, -30.0]);
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn caption_requirements() {
        let c = cfg();
        let mut ex = example(4, 7, 5);
        ex.caption_ids = None;
        assert!(matches!(paired_halves(&c, &ex), Err(ModelError::MissingCaption { .. })));
        ex.caption_ids = Some(vec![CLS, SEP]);
        assert!(matches!(paired_halves(&c, &ex), Err(ModelError::EmptyCaption { .. })));
        let allow = ModelConfig {
            allow_empty_caption: true,
            ..c
        };
        assert!(paired_halves(&allow, &ex).is_ok());
    }

    #[test]
    fn halves_share_region_features() {
        let c = cfg();
        let ex = example(4, 7, 5);
        let (a, b) = paired_halves(&c, &ex).unwrap();
        assert_eq!(a.features.data().len(), b.features.data().len());
        assert!(a
            .features
            .data()
            .iter()
            .zip(b.features.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.boxes, b.boxes);
        assert_ne!(a.token_ids, b.token_ids);
    }
}
