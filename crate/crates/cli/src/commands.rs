use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use memepair::data::{
    generate_synthetic, load_dataset, read_vocab, split_dataset, write_dataset, write_vocab, Dataset,
};
use memepair::eval::{
    ensemble_average, evaluate, read_predictions, roc_curve, write_predictions, write_roc_csv, EvalReport, Predictions,
};
use memepair::fsutil::write_atomic;
use memepair::model::{encode_records, model_gradcheck, toy_config};
use memepair::tensor::GradCheckConfig;
use memepair::train::{load_checkpoint, predict, save_checkpoint, train_run};
use serde_json::json;

use crate::config::{resolve, Overrides, RunConfig};
use crate::{Command, InternalFailure};

pub fn run(command: Command, overrides: &Overrides) -> Result<()> {
    let base = match command {
        Command::Demo => RunConfig::benchmark(),
        _ => RunConfig::default(),
    };
    let cfg = resolve(base, overrides)?;
    match command {
        Command::GenData => gen_data(&cfg, &cfg.out_dir()),
        Command::Train => train(&cfg, Path::new(&cfg.data_dir), &cfg.out_dir()).map(|_| ()),
        Command::Eval { checkpoint, input } => eval(&cfg, &checkpoint, &input, &cfg.out_dir()).map(|_| ()),
        Command::Ensemble { predictions } => ensemble(&cfg, &predictions, &cfg.out_dir()).map(|_| ()),
        Command::Gradcheck => gradcheck(&cfg),
        Command::Roc { predictions } => roc(&cfg, &predictions, &cfg.out_dir()),
        Command::Demo => demo(&cfg),
    }
}

fn prepare_out(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_text(&dir.join("config.toml"), &cfg.to_toml())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn print_report(label: &str, r: &EvalReport) {
    println!(
        "{label}: auroc {:.4}  accuracy {:.4}  n {} ({} positive, {} negative)",
        r.auroc, r.accuracy, r.n, r.positives, r.negatives
    );
}

fn write_report(path: &Path, r: &EvalReport) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(r)? + "\n"))
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = generate_synthetic(&cfg.synthetic_spec())?;
    let fractions = [cfg.train_fraction, cfg.val_fraction, cfg.test_fraction];
    let (train, val, test) = split_dataset(&ds.records, fractions, cfg.data_seed)?;
    prepare_out(cfg, out)?;
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        write_dataset(out.join(format!("{name}.jsonl")), Some(&ds.meta), part)?;
    }
    write_vocab(out.join("vocab.txt"), &ds.vocab)?;
    println!(
        "wrote {} records (train {}, val {}, test {}) and {} vocabulary tokens to {}",
        ds.records.len(),
        train.len(),
        val.len(),
        test.len(),
        ds.vocab.len(),
        out.display()
    );
    Ok(())
}

fn feat_dim(ds: &Dataset) -> Result<usize> {
    match ds.records.first() {
        Some(r) => Ok(r.feat_dim()),
        None => bail!("dataset is empty"),
    }
}

/// Returns the path of the validation predictions, if a validation split exists.
fn train(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<Option<PathBuf>> {
    let train_set = load_dataset(data_dir.join("train.jsonl"))?;
    let val_path = data_dir.join("val.jsonl");
    let val_set = if val_path.exists() {
        load_dataset(&val_path)?
    } else {
        Dataset {
            meta: None,
            records: vec![],
        }
    };
    let vocab = read_vocab(data_dir.join("vocab.txt"))?;
    let model_cfg = cfg.model_config(vocab.len(), feat_dim(&train_set)?);
    let train_cfg = cfg.train_config();
    let (train_ex, (tt, ct)) = encode_records(&model_cfg, &vocab, &train_set.records)?;
    let (val_ex, _) = encode_records(&model_cfg, &vocab, &val_set.records)?;
    if tt + ct > 0 {
        eprintln!(
            "note: truncated {tt} texts and {ct} captions to max_text_len {}",
            model_cfg.max_text_len
        );
    }

    let outcome = train_run(&model_cfg, &train_cfg, &vocab, &train_ex, &val_ex)?;
    prepare_out(cfg, out)?;
    save_checkpoint(&outcome.best, out.join("model.ckpt"))?;
    let mut log = String::new();
    for entry in &outcome.log {
        log.push_str(&serde_json::to_string(entry)?);
        log.push('\n');
    }
    write_text(&out.join("metrics.jsonl"), &log)?;
    let val_preds = if val_ex.is_empty() {
        None
    } else {
        let p = predict(&model_cfg, &outcome.best.params, &val_ex)?;
        let path = out.join("val_predictions.jsonl");
        write_predictions(&path, &p)?;
        Some(path)
    };
    match outcome.best_val_auroc {
        Some(a) => println!(
            "seed {}: best val auroc {a:.4} at step {} of {}; checkpoint {}",
            train_cfg.seed,
            outcome.best.step,
            outcome.total_steps,
            out.join("model.ckpt").display()
        ),
        None => println!(
            "seed {}: trained {} steps without validation",
            train_cfg.seed, outcome.total_steps
        ),
    }
    Ok(val_preds)
}

fn eval(cfg: &RunConfig, checkpoint: &Path, input: &Path, out: &Path) -> Result<PathBuf> {
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = load_dataset(input)?;
    let vocab = memepair::data::Vocab::from_tokens(ckpt.vocab.iter().skip(4).cloned().collect());
    if vocab.tokens() != ckpt.vocab.as_slice() {
        bail!("checkpoint vocabulary is malformed");
    }
    let (examples, _) = encode_records(&ckpt.model, &vocab, &ds.records)?;
    let preds = predict(&ckpt.model, &ckpt.params, &examples)?;
    prepare_out(cfg, out)?;
    let path = out.join("predictions.jsonl");
    write_predictions(&path, &preds)?;
    if preds.labels.is_some() {
        let r = evaluate(&preds)?;
        write_report(&out.join("report.json"), &r)?;
        print_report(&format!("{}", input.display()), &r);
    } else {
        println!(
            "{}: {} unlabeled predictions written to {}",
            input.display(),
            preds.len(),
            path.display()
        );
    }
    Ok(path)
}

fn ensemble(cfg: &RunConfig, files: &[PathBuf], out: &Path) -> Result<PathBuf> {
    let runs = files
        .iter()
        .map(|f| read_predictions(f).with_context(|| format!("reading {}", f.display())))
        .collect::<Result<Vec<Predictions>>>()?;
    let avg = ensemble_average(&runs)?;
    prepare_out(cfg, out)?;
    let path = out.join("predictions.jsonl");
    write_predictions(&path, &avg)?;
    if avg.labels.is_some() {
        let members = runs.iter().map(evaluate).collect::<Result<Vec<_>, _>>()?;
        let r = evaluate(&avg)?;
        let mean = members.iter().map(|m| m.auroc).sum::<f64>() / members.len() as f64;
        write_report(&out.join("report.json"), &r)?;
        print_report(&format!("ensemble of {}", runs.len()), &r);
        println!("mean member auroc {mean:.4}");
    } else {
        println!("averaged {} runs into {}", runs.len(), path.display());
    }
    Ok(path)
}

fn gradcheck(cfg: &RunConfig) -> Result<()> {
    let model = memepair::model::ModelConfig {
        head_kind: cfg.head_kind,
        share_pool: cfg.share_pool,
        ..toy_config()
    };
    let check = GradCheckConfig {
        eps: cfg.gradcheck_eps,
        tol: cfg.gradcheck_tol,
        coords_per_array: cfg.gradcheck_coords,
        seed: cfg.seed,
    };
    let report = model_gradcheck(&model, cfg.seed, &check)?;
    for a in &report.arrays {
        println!(
            "{:<24} {:>3} coords  max rel err {:.3e}",
            a.name, a.checked, a.max_rel_error
        );
    }
    let status = if report.passed() { "PASS" } else { "FAIL" };
    println!(
        "{status}: max relative error {:.3e} (tol {:.1e})",
        report.max_rel_error, report.tol
    );

    let out = cfg.out_dir();
    prepare_out(cfg, &out)?;
    let arrays: Vec<_> = report
        .arrays
        .iter()
        .map(|a| json!({"name": a.name, "checked": a.checked, "max_rel_error": a.max_rel_error}))
        .collect();
    let body =
        json!({"passed": report.passed(), "max_rel_error": report.max_rel_error, "tol": report.tol, "arrays": arrays});
    write_text(
        &out.join("gradcheck.json"),
        &(serde_json::to_string_pretty(&body)? + "\n"),
    )?;
    if !report.passed() {
        return Err(InternalFailure(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_error, report.tol
        ))
        .into());
    }
    Ok(())
}

fn roc(cfg: &RunConfig, predictions: &Path, out: &Path) -> Result<()> {
    let preds = read_predictions(predictions)?;
    let curve = roc_curve(&preds)?;
    prepare_out(cfg, out)?;
    let path = out.join("roc.csv");
    write_roc_csv(&path, &curve)?;
    println!("{} ROC points written to {}", curve.points.len(), path.display());
    Ok(())
}

fn demo(cfg: &RunConfig) -> Result<()> {
    let root = cfg.out_dir();
    let data = root.join("data");
    gen_data(cfg, &data)?;
    let mut test_preds = Vec::new();
    for &seed in &cfg.ensemble_seeds {
        let run_cfg = RunConfig { seed, ..cfg.clone() };
        let dir = root.join(format!("seed{seed}"));
        train(&run_cfg, &data, &dir)?;
        test_preds.push(eval(
            &run_cfg,
            &dir.join("model.ckpt"),
            &data.join("test.jsonl"),
            &dir.join("test"),
        )?);
    }
    let ens_dir = root.join("ensemble");
    let ens = ensemble(cfg, &test_preds, &ens_dir)?;
    roc(cfg, &ens, &ens_dir)?;
    prepare_out(cfg, &root)
}
