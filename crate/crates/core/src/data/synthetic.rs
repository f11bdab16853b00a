//! Benign-confounder synthetic memes.
//!
//! Every record has an image concept and a text concept drawn from `0..C`. A
//! record is hateful iff both concepts agree, so neither modality alone says
//! anything about the label. Hateful records can spawn two confounders: one
//! with the image swapped, one with the text swapped, each labeled benign.
//! Region features are a noisy one-hot of the image concept; the caption is
//! drawn from a per-concept caption vocabulary, so it restates the image
//! concept in words.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{build_vocab, DataError, MemeRecord, Vocab};

pub const IMG_CONF_SUFFIX: &str = "-imgconf";
pub const TXT_CONF_SUFFIX: &str = "-txtconf";

const WORDS_PER_CONCEPT: usize = 5;
const FILLER_WORDS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_concepts: usize,
    pub samples: usize,
    pub regions: usize,
    pub feat_dim: usize,
    pub noise_sigma: f64,
    pub confounder_fraction: f64,
    /// Probability that each OCR word is replaced by a random concept word.
    pub text_noise_rate: f64,
    pub text_words: (usize, usize),
    pub caption_words: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_concepts: 8,
            samples: 1000,
            regions: 4,
            feat_dim: 16,
            noise_sigma: 0.1,
            confounder_fraction: 0.5,
            text_noise_rate: 0.0,
            text_words: (3, 6),
            caption_words: (2, 4),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::InvalidSpec(m));
        if self.num_concepts < 2 {
            return fail(format!("num_concepts must be >= 2, got {}", self.num_concepts));
        }
        if self.samples < 4 {
            return fail(format!("samples must be >= 4, got {}", self.samples));
        }
        if self.regions < 1 {
            return fail("regions must be >= 1".into());
        }
        if self.feat_dim < self.num_concepts {
            return fail(format!(
                "feat_dim {} cannot hold a one-hot over {} concepts",
                self.feat_dim, self.num_concepts
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.confounder_fraction) {
            return fail(format!(
                "confounder_fraction must be in [0,1], got {}",
                self.confounder_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.text_noise_rate) {
            return fail(format!(
                "text_noise_rate must be in [0,1], got {}",
                self.text_noise_rate
            ));
        }
        for (name, (lo, hi)) in [("text_words", self.text_words), ("caption_words", self.caption_words)] {
            if lo < 1 || lo > hi {
                return fail(format!("{name} range ({lo}, {hi}) is invalid"));
            }
        }
        Ok(())
    }
}

/// Ground-truth concepts behind a generated record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Concepts {
    pub image: usize,
    pub text: usize,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub records: Vec<MemeRecord>,
    /// Parallel to `records`.
    pub concepts: Vec<Concepts>,
    pub vocab: Vocab,
    /// Header object: generator spec and the word lists.
    pub meta: Value,
}

struct WordLists {
    text: Vec<Vec<String>>,
    caption: Vec<Vec<String>>,
    filler: Vec<String>,
}

fn nonsense_word(rng: &mut ChaCha8Rng) -> String {
    const CONS: &[u8] = b"bdfgklmnprstvz";
    const VOW: &[u8] = b"aeiou";
    (0..3)
        .flat_map(|_| [CONS[rng.gen_range(0..CONS.len())], VOW[rng.gen_range(0..VOW.len())]])
        .map(char::from)
        .collect()
}

fn word_lists(rng: &mut ChaCha8Rng, concepts: usize) -> WordLists {
    let mut used = BTreeSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng| loop {
        let w = nonsense_word(rng);
        if used.insert(w.clone()) {
            return w;
        }
    };
    let mut block = |rng: &mut ChaCha8Rng, n: usize| -> Vec<String> { (0..n).map(|_| fresh(rng)).collect() };
    let text = (0..concepts).map(|_| block(rng, WORDS_PER_CONCEPT)).collect();
    let caption = (0..concepts).map(|_| block(rng, WORDS_PER_CONCEPT)).collect();
    let filler = block(rng, FILLER_WORDS);
    WordLists { text, caption, filler }
}

struct Gen<'a> {
    spec: &'a SyntheticSpec,
    lists: WordLists,
    noise: Normal<f64>,
    rng: ChaCha8Rng,
}

impl Gen<'_> {
    fn other_concept(&mut self, not: usize) -> usize {
        let c = self.rng.gen_range(0..self.spec.num_concepts - 1);
        if c >= not {
            c + 1
        } else {
            c
        }
    }

    fn text(&mut self, concept: usize) -> String {
        let (lo, hi) = self.spec.text_words;
        let n = self.rng.gen_range(lo..=hi);
        (0..n)
            .map(|_| {
                let c = if self.rng.gen_bool(self.spec.text_noise_rate) {
                    self.rng.gen_range(0..self.spec.num_concepts)
                } else {
                    concept
                };
                self.lists.text[c].choose(&mut self.rng).unwrap().clone()
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn caption(&mut self, concept: usize) -> String {
        let (lo, hi) = self.spec.caption_words;
        let n = self.rng.gen_range(lo..=hi);
        let mut ws: Vec<String> = (0..n)
            .map(|_| self.lists.caption[concept].choose(&mut self.rng).unwrap().clone())
            .collect();
        let fillers = self.rng.gen_range(1..=2);
        for _ in 0..fillers {
            let at = self.rng.gen_range(0..=ws.len());
            let w = self.lists.filler.choose(&mut self.rng).unwrap().clone();
            ws.insert(at, w);
        }
        ws.join(" ")
    }

    fn image(&mut self, concept: usize) -> (Vec<Vec<f64>>, Vec<[f64; 4]>) {
        let d = self.spec.feat_dim;
        let mut features = Vec::with_capacity(self.spec.regions);
        let mut boxes = Vec::with_capacity(self.spec.regions);
        for _ in 0..self.spec.regions {
            let f = (0..d)
                .map(|j| {
                    let base = if j == concept { 1.0 } else { 0.0 };
                    base + self.noise.sample(&mut self.rng)
                })
                .collect();
            features.push(f);
            let (a, b): (f64, f64) = (self.rng.gen(), self.rng.gen());
            let (c, e): (f64, f64) = (self.rng.gen(), self.rng.gen());
            boxes.push([a.min(b), c.min(e), a.max(b), c.max(e)]);
        }
        (features, boxes)
    }

    fn record(&mut self, id: String, image: usize, text: usize) -> (MemeRecord, Concepts) {
        let (features, boxes) = self.image(image);
        let rec = MemeRecord {
            id,
            label: Some(u8::from(image == text)),
            text: self.text(text),
            caption: Some(self.caption(image)),
            features,
            boxes,
        };
        (rec, Concepts { image, text })
    }
}

/// Generates a balanced confounder dataset, fully determined by `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lists = word_lists(&mut rng, spec.num_concepts);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
    let mut gen = Gen {
        spec,
        lists,
        noise,
        rng,
    };

    let n = spec.samples;
    let positives = n / 2;
    let sources = ((spec.confounder_fraction * positives as f64).round() as usize).min((n - positives) / 2);
    let free_negatives = n - positives - 2 * sources;

    let mut groups: Vec<Vec<(MemeRecord, Concepts)>> = Vec::with_capacity(positives + free_negatives);
    for i in 0..positives {
        let c = gen.rng.gen_range(0..spec.num_concepts);
        let id = format!("syn-{i:06}");
        let mut group = vec![gen.record(id.clone(), c, c)];
        if i < sources {
            let img = gen.other_concept(c);
            let (mut img_conf, ic) = gen.record(format!("{id}{IMG_CONF_SUFFIX}"), img, c);
            img_conf.text = group[0].0.text.clone();
            let txt = gen.other_concept(c);
            let (mut txt_conf, tc) = gen.record(format!("{id}{TXT_CONF_SUFFIX}"), c, txt);
            txt_conf.features = group[0].0.features.clone();
            txt_conf.boxes = group[0].0.boxes.clone();
            txt_conf.caption = group[0].0.caption.clone();
            group.push((img_conf, ic));
            group.push((txt_conf, tc));
        }
        groups.push(group);
    }
    for j in 0..free_negatives {
        let img = gen.rng.gen_range(0..spec.num_concepts);
        let txt = gen.other_concept(img);
        groups.push(vec![gen.record(format!("syn-{:06}", positives + j), img, txt)]);
    }
    groups.shuffle(&mut gen.rng);

    let (records, concepts): (Vec<_>, Vec<_>) = groups.into_iter().flatten().unzip();
    let vocab = build_vocab(&records, 1);
    let meta = serde_json::json!({
        "generator": "benign-confounder",
        "spec": spec,
        "text_words": gen.lists.text,
        "caption_words": gen.lists.caption,
        "filler_words": gen.lists.filler,
    });
    Ok(SyntheticDataset {
        records,
        concepts,
        vocab,
        meta,
    })
}

/// Accuracy of the best rule that predicts the label from one concept alone
/// (per concept value, the majority label). Returns `(image, text)`.
pub fn unimodal_majority_accuracy(ds: &SyntheticDataset) -> (f64, f64) {
    let rule = |key: &dyn Fn(&Concepts) -> usize| {
        let c = ds.concepts.iter().map(key).max().map_or(0, |m| m + 1);
        let mut counts = vec![[0usize; 2]; c];
        for (k, r) in ds.concepts.iter().zip(&ds.records) {
            counts[key(k)][usize::from(r.label.unwrap_or(0))] += 1;
        }
        let correct: usize = counts.iter().map(|[a, b]| *a.max(b)).sum();
        correct as f64 / ds.records.len().max(1) as f64
    };
    (rule(&|k| k.image), rule(&|k| k.text))
}
