//! End-to-end acceptance checks. Each test prints one `[PASS]`/`[FAIL]` line
//! to stderr (bypassing the harness capture) and then asserts.
//!
//! The training benchmark: 2500 synthetic records (C=8, seed 1) split
//! 0.8/0.1/0.1 by group, with validation and test merged into one ~500-record
//! validation set. Runs are cached so criteria sharing a run train it once.

use std::collections::HashMap;
use std::io::Write as _;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use memepair::data::{
    generate_synthetic, load_dataset, split_dataset, unimodal_majority_accuracy, write_dataset, MemeRecord,
    SyntheticSpec, Vocab, IMG_CONF_SUFFIX, TXT_CONF_SUFFIX,
};
use memepair::eval::{
    auroc, auroc_pairwise, ensemble_average, mean_nll, read_predictions, write_predictions, Predictions,
};
use memepair::model::{encode_records, model_gradcheck, toy_config, Ablation, Example, HeadKind, ModelConfig};
use memepair::tensor::GradCheckConfig;
use memepair::train::{load_checkpoint, predict, save_checkpoint, train_run, Checkpoint, LogEntry, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(name: &str, pass: bool, detail: &str) {
    let line = format!("[{}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const CLEAN_EPOCHS: usize = 5;
const NOISY_EPOCHS: usize = 15;
const NOISE_RATE: f64 = 0.5;

struct Split {
    vocab: Vocab,
    train: Vec<MemeRecord>,
    val: Vec<MemeRecord>,
}

fn make_split(text_noise_rate: f64) -> Split {
    let spec = SyntheticSpec {
        num_concepts: 8,
        samples: 2500,
        text_noise_rate,
        seed: 1,
        ..Default::default()
    };
    let ds = generate_synthetic(&spec).unwrap();
    let (train, val, test) = split_dataset(&ds.records, [0.8, 0.1, 0.1], 1).unwrap();
    Split {
        vocab: ds.vocab,
        train,
        val: val.into_iter().chain(test).collect(),
    }
}

fn clean() -> &'static Split {
    static S: OnceLock<Split> = OnceLock::new();
    S.get_or_init(|| make_split(0.0))
}

fn noisy() -> &'static Split {
    static S: OnceLock<Split> = OnceLock::new();
    S.get_or_init(|| make_split(NOISE_RATE))
}

fn model_config(vocab: &Vocab, head_kind: HeadKind, ablation: Ablation) -> ModelConfig {
    ModelConfig {
        hidden_dim: 32,
        num_layers: 2,
        num_heads: 4,
        vocab_size: vocab.len(),
        head_kind,
        ablation,
        ..Default::default()
    }
}

fn train_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        seed,
        epochs,
        batch_size: 32,
        lr: 3e-3,
        eval_every: if epochs > CLEAN_EPOCHS { 50 } else { 25 },
        ..Default::default()
    }
}

#[derive(Clone)]
struct Run {
    best: Checkpoint,
    best_auroc: f64,
    log: Vec<LogEntry>,
    val_preds: Predictions,
    elapsed: Duration,
}

type Key = (HeadKind, Ablation, u64, bool);

fn execute(key: Key) -> Run {
    let (head, ablation, seed, is_noisy) = key;
    let split = if is_noisy { noisy() } else { clean() };
    let cfg = model_config(&split.vocab, head, ablation);
    let (train, _) = encode_records(&cfg, &split.vocab, &split.train).unwrap();
    let (val, _): (Vec<Example>, _) = encode_records(&cfg, &split.vocab, &split.val).unwrap();
    let epochs = if is_noisy { NOISY_EPOCHS } else { CLEAN_EPOCHS };
    let start = Instant::now();
    let out = train_run(&cfg, &train_config(seed, epochs), &split.vocab, &train, &val).unwrap();
    let elapsed = start.elapsed();
    let val_preds = predict(&cfg, &out.best.params, &val).unwrap();
    Run {
        best_auroc: out.best_val_auroc.unwrap(),
        best: out.best,
        log: out.log,
        val_preds,
        elapsed,
    }
}

fn run(key: Key) -> Run {
    static CACHE: OnceLock<Mutex<HashMap<Key, Run>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(r) = cache.lock().unwrap().get(&key) {
        return r.clone();
    }
    let r = execute(key);
    cache.lock().unwrap().insert(key, r.clone());
    r
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn gradient_fidelity() {
    let cfg = ModelConfig {
        head_kind: HeadKind::Paired,
        ..toy_config()
    };
    assert_eq!(
        (cfg.hidden_dim, cfg.num_layers, cfg.num_heads, cfg.max_regions),
        (16, 2, 4, 4)
    );
    let check = GradCheckConfig {
        coords_per_array: 32,
        tol: 1e-4,
        ..Default::default()
    };
    let start = Instant::now();
    let rep = model_gradcheck(&cfg, 0, &check).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let params = memepair::model::generic_params(&cfg, 0).unwrap();
    let coverage = rep
        .arrays
        .iter()
        .all(|a| a.checked >= 32.min(params.get(&a.name).unwrap().len()));
    let pass = rep.max_rel_error <= 1e-4 && coverage && secs < 60.0;
    report(
        "gradient fidelity",
        pass,
        &format!(
            "max rel err {:.3e} over {} arrays (tol 1e-4), {secs:.1}s (< 60s)",
            rep.max_rel_error,
            rep.arrays.len()
        ),
    );
    assert!(pass);
}

#[test]
fn auroc_oracle_equivalence() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for set in 0..200 {
        let n = rng.gen_range(2..300);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // Every other set draws scores from a coarse grid to force ties.
        let grid = if set % 2 == 0 { 0 } else { rng.gen_range(1..8) };
        let probs = (0..n)
            .map(|_| {
                let p: f64 = rng.gen();
                if grid > 0 {
                    (p * grid as f64).round() / grid as f64
                } else {
                    p
                }
            })
            .collect();
        let ids = (0..n).map(|i| format!("r{i}")).collect();
        let p = Predictions::new(ids, probs, Some(labels)).unwrap();
        worst = worst.max((auroc(&p).unwrap() - auroc_pairwise(&p).unwrap()).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-9 && secs < 5.0;
    report(
        "AUROC oracle equivalence",
        pass,
        &format!("max |trapezoid - pairwise| = {worst:.1e} over 200 sets (tol 1e-9), {secs:.2}s (< 5s)"),
    );
    assert!(pass);
}

#[test]
fn multimodal_gap() {
    let paired = run((HeadKind::Paired, Ablation::None, 1, false));
    let text_only = run((HeadKind::Cls, Ablation::TextOnly, 1, false));
    let image_only = run((HeadKind::Cls, Ablation::ImageOnly, 1, false));
    let total = (paired.elapsed + text_only.elapsed + image_only.elapsed).as_secs_f64();
    let split = clean();
    let pass =
        paired.best_auroc >= 0.95 && text_only.best_auroc <= 0.65 && image_only.best_auroc <= 0.65 && total < 600.0;
    report(
        "multimodal gap",
        pass,
        &format!(
            "train {} / val {}: paired {:.4} (>= 0.95), text_only {:.4} (<= 0.65), image_only {:.4} (<= 0.65), {total:.0}s (< 600s)",
            split.train.len(),
            split.val.len(),
            paired.best_auroc,
            text_only.best_auroc,
            image_only.best_auroc
        ),
    );
    assert!(pass);
}

#[test]
fn paired_head_advantage() {
    let aurocs = |head, noisy| SEEDS.map(|s| run((head, Ablation::None, s, noisy)).best_auroc);
    let (pc, cc) = (
        mean(&aurocs(HeadKind::Paired, false)),
        mean(&aurocs(HeadKind::Cls, false)),
    );
    let (pn, cn) = (
        mean(&aurocs(HeadKind::Paired, true)),
        mean(&aurocs(HeadKind::Cls, true)),
    );
    let pass = pc >= cc - 0.01 && pn > cn;
    report(
        "paired-head advantage",
        pass,
        &format!(
            "seeds 1-5 mean val AUROC clean: paired {pc:.4} vs cls {cc:.4} (>= cls - 0.01); \
             OCR noise {NOISE_RATE}: paired {pn:.4} vs cls {cn:.4} (strictly greater)"
        ),
    );
    assert!(pass);
}

#[test]
fn deep_ensemble_improvement() {
    let runs: Vec<Run> = SEEDS
        .iter()
        .map(|&s| run((HeadKind::Paired, Ablation::None, s, false)))
        .collect();
    let members: Vec<Predictions> = runs.iter().map(|r| r.val_preds.clone()).collect();
    let ens = ensemble_average(&members).unwrap();
    let member_nll = mean(&members.iter().map(|p| mean_nll(p).unwrap()).collect::<Vec<_>>());
    let member_auc = mean(&members.iter().map(|p| auroc(p).unwrap()).collect::<Vec<_>>());
    let (ens_nll, ens_auc) = (mean_nll(&ens).unwrap(), auroc(&ens).unwrap());
    let pass = ens_nll <= member_nll && ens_auc >= member_auc - 0.005;
    report(
        "deep-ensemble improvement",
        pass,
        &format!(
            "ensemble NLL {ens_nll:.5} vs mean member {member_nll:.5} (<=); \
             ensemble AUROC {ens_auc:.4} vs mean member {member_auc:.4} (>= mean - 0.005)"
        ),
    );
    assert!(pass);
}

#[test]
fn determinism() {
    let first = run((HeadKind::Paired, Ablation::None, 1, false));
    let again = execute((HeadKind::Paired, Ablation::None, 1, false));
    let same_ckpt = first.best.to_bytes() == again.best.to_bytes();
    let same_log = first.log == again.log;
    let pass = same_ckpt && same_log;
    report(
        "determinism",
        pass,
        &format!("repeat of the paired seed-1 run: checkpoint bytes equal {same_ckpt}, metric logs equal {same_log}"),
    );
    assert!(pass);
}

#[test]
fn data_invariants() {
    let spec = SyntheticSpec {
        samples: 4000,
        seed: 7,
        ..Default::default()
    };
    let a = generate_synthetic(&spec).unwrap();
    let b = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_dataset(&pa, Some(&a.meta), &a.records).unwrap();
    write_dataset(&pb, Some(&b.meta), &b.records).unwrap();
    let deterministic = std::fs::read(&pa).unwrap() == std::fs::read(&pb).unwrap();

    let by_id: HashMap<&str, usize> = a.records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let mut confounders = 0;
    let mut flips_ok = true;
    for (i, r) in a.records.iter().enumerate() {
        for (suffix, image_changes) in [(IMG_CONF_SUFFIX, true), (TXT_CONF_SUFFIX, false)] {
            let Some(src) = r.id.strip_suffix(suffix) else { continue };
            confounders += 1;
            let s = by_id[src];
            let (ck, cs) = (a.concepts[i], a.concepts[s]);
            let one_modality = if image_changes {
                ck.image != cs.image && ck.text == cs.text
            } else {
                ck.text != cs.text && ck.image == cs.image
            };
            flips_ok &= r.label == Some(0) && a.records[s].label == Some(1) && one_modality;
        }
    }
    let pos = a.records.iter().filter(|r| r.label == Some(1)).count() as f64 / a.records.len() as f64;
    let balanced = (pos - 0.5).abs() <= 0.02;
    let (img_acc, txt_acc) = unimodal_majority_accuracy(&a);
    let pass = deterministic && flips_ok && confounders > 0 && balanced && img_acc <= 0.6 && txt_acc <= 0.6;
    report(
        "data invariants",
        pass,
        &format!(
            "identical bytes {deterministic}; {confounders} confounders flip label {flips_ok}; \
             positive rate {pos:.4} (0.5 +/- 0.02); majority rule image {img_acc:.4}, text {txt_acc:.4} (<= 0.6)"
        ),
    );
    assert!(pass);
}

#[test]
fn round_trips() {
    let dir = tempfile::tempdir().unwrap();

    let split = clean();
    let cfg = model_config(&split.vocab, HeadKind::Paired, Ablation::None);
    let (train, _) = encode_records(&cfg, &split.vocab, &split.train[..64]).unwrap();
    let out = train_run(&cfg, &train_config(3, 1), &split.vocab, &train, &[]).unwrap();
    let ckpt_path = dir.path().join("model.ckpt");
    save_checkpoint(&out.best, &ckpt_path).unwrap();
    let loaded = load_checkpoint(&ckpt_path).unwrap();
    let ckpt_ok = loaded.params.bitwise_eq(&out.best.params) && loaded.to_bytes() == out.best.to_bytes();

    let data_path = dir.path().join("val.jsonl");
    write_dataset(&data_path, None, &split.val).unwrap();
    let data_ok = load_dataset(&data_path).unwrap().records == split.val;

    let (val, _) = encode_records(&cfg, &split.vocab, &split.val).unwrap();
    let preds = predict(&cfg, &loaded.params, &val).unwrap();
    let pred_path = dir.path().join("preds.jsonl");
    write_predictions(&pred_path, &preds).unwrap();
    let read = read_predictions(&pred_path).unwrap();
    let ens = ensemble_average(std::slice::from_ref(&read)).unwrap();
    let ens_ok = read == preds && ens == preds;

    let pass = ckpt_ok && data_ok && ens_ok;
    report(
        "round-trips",
        pass,
        &format!("checkpoint bitwise {ckpt_ok}; dataset write/read {data_ok}; single-file ensemble identity {ens_ok}"),
    );
    assert!(pass);
}
