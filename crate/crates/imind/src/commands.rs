//! Subcommand bodies. Each returns the `results` object of its summary.

use std::path::Path;

use imind_core::attribution::{self, AttributionConfig};
use imind_core::baselines::{self, ClassifierConfig, KMeansBaseline, KMeansMetric};
use imind_core::disentangle::project_to_orthonormal;
use imind_core::dual::{self, DualConfig, EpochMetrics, Stage2Data};
use imind_core::linalg::orthonormality_error;
use imind_core::mae::{self, ENCODER_PREFIX};
use imind_core::metrics::{EvalReport, THRESHOLD};
use imind_core::pipeline;
use imind_core::synth::{self, Dataset};
use imind_core::Tensor;
use serde_json::{json, Value};

use crate::checkpoint::{self, Preprocessing, Stage1, Stage2};
use crate::config::RunConfig;
use crate::dataset;
use crate::error::{CliError, CliResult};
use crate::mkt;
use crate::run::RunDir;

pub const DATASET_DIR: &str = "dataset";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const EMPTY_MARKER: &str = "EMPTY";

fn required<'a>(p: &'a Option<std::path::PathBuf>, flag: &str) -> CliResult<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} (or paths.{flag}) is required")))
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Averaged, standardized and padded records of `split` under fitted `prep`.
pub fn apply_prep(prep: &Preprocessing, split: &Dataset) -> CliResult<Stage2Data> {
    split.validate()?;
    let recs = synth::average_repetitions(&split.records)?;
    Ok(pipeline::stage2_data(
        &recs,
        split,
        &prep.stats,
        prep.target_len,
        prep.patch_size,
    )?)
}

fn report_json(r: &EvalReport, samples: usize) -> Value {
    json!({
        "ACC": r.acc,
        "mAP": r.map,
        "AUC": r.auc,
        "Hamming": r.hamming,
        "MCC": r.mcc,
        "mcc_degenerate": r.mcc_degenerate,
        "skipped_classes": r.skipped_classes,
        "samples": samples,
    })
}

pub fn synth(cfg: &RunConfig, run: &RunDir) -> CliResult<Value> {
    let mut g = cfg.synth.clone();
    g.seed = cfg.seed;
    let (train, test, gt) = synth::generate_dataset(&g)?;
    dataset::write_dataset(&run.join(DATASET_DIR), &train, &test)?;
    println!(
        "synth: {} subjects, {} classes, {} train / {} test records, voxel lengths {:?}",
        train.num_subjects,
        train.num_classes,
        train.records.len(),
        test.records.len(),
        gt.lengths
    );
    Ok(json!({
        "dataset": DATASET_DIR,
        "num_subjects": train.num_subjects,
        "num_classes": train.num_classes,
        "train_records": train.records.len(),
        "test_records": test.records.len(),
        "voxel_lengths": gt.lengths,
    }))
}

pub fn pretrain(cfg: &RunConfig, run: &RunDir) -> CliResult<Value> {
    let (train, test) = dataset::load_dataset(required(&cfg.paths.dataset, "dataset")?)?;
    let p = pipeline::prepare(&train, &test, cfg.encoder.patch_size, cfg.seq_len)?;
    let prep = Preprocessing {
        stats: p.stats.clone(),
        lengths: p.lengths.clone(),
        target_len: p.target_len,
        patch_size: p.patch_size,
    };
    let mut enc = cfg.encoder.clone();
    enc.seq_len = p.target_len;
    let mut tc = cfg.pretrain.clone();
    tc.seed = cfg.seed;

    let mut log = csv_writer(&run.join("loss.csv"))?;
    log.write_record(["epoch", "loss"])?;
    let mut rows = Vec::new();
    let result = mae::pretrain_stage1(&p.train.x, &enc, &tc, |e, l| {
        println!("pretrain: epoch {e} loss {l:.6}");
        rows.push((e, l));
    });
    for (e, l) in &rows {
        log.write_record([e.to_string(), l.to_string()])?;
    }
    log.flush()
        .map_err(|e| CliError::io(&run.join("loss.csv"), e))?;
    let dir = run.join(CHECKPOINT_DIR);
    match result {
        Ok(out) => {
            checkpoint::save_stage1(
                &dir,
                &Stage1 {
                    encoder: enc,
                    store: out.store,
                    prep,
                },
            )?;
            Ok(json!({
                "checkpoint": CHECKPOINT_DIR,
                "seq_len": p.target_len,
                "epochs": out.history.epoch_loss.len(),
                "final_loss": out.history.epoch_loss.last(),
                "masked_mse_initial": out.history.initial_eval,
                "masked_mse_final": out.history.final_eval,
            }))
        }
        Err(f) => {
            checkpoint::save_stage1(
                &dir,
                &Stage1 {
                    encoder: enc,
                    store: f.last_good.subset(ENCODER_PREFIX),
                    prep,
                },
            )?;
            Err(f.error.into())
        }
    }
}

fn vision_dims(split: &Dataset) -> CliResult<(usize, usize)> {
    let first = split
        .vision
        .values()
        .next()
        .ok_or_else(|| CliError::Data("dataset has no vision features".into()))?;
    Ok(first.dims2()?)
}

pub fn train(cfg: &RunConfig, run: &RunDir) -> CliResult<Value> {
    let s1 = checkpoint::load_stage1(required(&cfg.paths.stage1, "stage1")?)?;
    let (train, test) = dataset::load_dataset(required(&cfg.paths.dataset, "dataset")?)?;
    let tr = apply_prep(&s1.prep, &train)?;
    let te = apply_prep(&s1.prep, &test)?;
    let (nx, dx) = vision_dims(&train)?;
    let dual = DualConfig {
        num_subjects: train.num_subjects,
        num_classes: train.num_classes,
        vision_tokens: nx,
        vision_dim: dx,
        ..cfg.dual.clone()
    };
    let mut tc = cfg.train.clone();
    tc.seed = cfg.seed;

    let result = dual::train_stage2(&tr, Some(&te), &s1.store, &s1.encoder, &dual, &tc, |m| {
        println!(
            "train: epoch {} L_subj {:.6} L_obj {:.6} L_orth {:.6} total {:.6} val_ACC {} val_mAP {}",
            m.epoch,
            m.l_subj,
            m.l_obj,
            m.l_orth,
            m.total,
            opt(m.val_acc),
            opt(m.val_map)
        )
    });
    let history: &[EpochMetrics] = match &result {
        Ok(o) => &o.history,
        Err(f) => &f.history,
    };
    let path = run.join("metrics.csv");
    let mut log = csv_writer(&path)?;
    log.write_record([
        "epoch", "L_subj", "L_obj", "L_orth", "total", "val_ACC", "val_mAP",
    ])?;
    for m in history {
        log.write_record([
            m.epoch.to_string(),
            m.l_subj.to_string(),
            m.l_obj.to_string(),
            m.l_orth.to_string(),
            m.total.to_string(),
            opt(m.val_acc),
            opt(m.val_map),
        ])?;
    }
    log.flush().map_err(|e| CliError::io(&path, e))?;
    let epochs = history.len();

    let dir = run.join(CHECKPOINT_DIR);
    let (model, mut store) = match result {
        Ok(o) => (o.model, o.store),
        Err(f) => {
            let mut store = f.last_good;
            let model = dual::model_for_store(&mut store, &s1.encoder, &dual)?;
            checkpoint::save_stage2(
                &dir,
                &Stage2 {
                    encoder: s1.encoder,
                    dual,
                    model,
                    store,
                    prep: s1.prep,
                },
            )?;
            return Err(f.error.into());
        }
    };
    let orth_trained = orthonormality_error(store.value(model.basis.id))?;
    let before = model.evaluate(&store, &te, cfg.eval.batch_size, cfg.eval.auc_average)?;
    let mut after = None;
    if cfg.retract {
        let b = project_to_orthonormal(store.value(model.basis.id))?;
        *store.value_mut(model.basis.id) = b;
        after = Some(model.evaluate(&store, &te, cfg.eval.batch_size, cfg.eval.auc_average)?);
    }
    let orth_saved = orthonormality_error(store.value(model.basis.id))?;
    let final_report = after.as_ref().unwrap_or(&before);
    println!(
        "train: test ACC {:.4} MCC {:.4} mAP {:.4} AUC {:.4}, ||BB^T - I||_F = {orth_saved:.3e}",
        final_report.acc, final_report.mcc, final_report.map, final_report.auc
    );
    checkpoint::save_stage2(
        &dir,
        &Stage2 {
            encoder: s1.encoder,
            dual,
            model,
            store,
            prep: s1.prep,
        },
    )?;
    Ok(json!({
        "checkpoint": CHECKPOINT_DIR,
        "epochs": epochs,
        "orthonormality_error_trained": orth_trained,
        "orthonormality_error_saved": orth_saved,
        "retracted": cfg.retract,
        "test": report_json(final_report, te.len()),
        "test_before_retraction": after.as_ref().map(|_| report_json(&before, te.len())),
    }))
}

pub fn eval(cfg: &RunConfig, run: &RunDir) -> CliResult<Value> {
    let ck = checkpoint::load_stage2(required(&cfg.paths.checkpoint, "checkpoint")?)?;
    let (_, test) = dataset::load_dataset(required(&cfg.paths.dataset, "dataset")?)?;
    let te = apply_prep(&ck.prep, &test)?;
    let r = ck
        .model
        .evaluate(&ck.store, &te, cfg.eval.batch_size, cfg.eval.auc_average)?;
    let report = report_json(&r, te.len());
    run.write_json("eval.json", &report)?;
    let path = run.join("per_class_ap.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["class", "ap"])?;
    for (c, ap) in r.per_class_ap.iter().enumerate() {
        w.write_record([c.to_string(), opt(*ap)])?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    println!(
        "eval: ACC {:.4} MCC {:.4} mAP {:.4} AUC {:.4} Hamming {:.4}",
        r.acc, r.mcc, r.map, r.auc, r.hamming
    );
    Ok(report)
}

/// ROI label per real voxel: a label file when configured, else consecutive blocks.
fn roi_labels(cfg: &RunConfig, len: usize) -> CliResult<Vec<i64>> {
    match &cfg.attribute.roi_file {
        Some(p) => {
            let t = mkt::read(p)?;
            if t.rank() != 1 || t.len() != len {
                return Err(CliError::Data(format!(
                    "{}: ROI labels must be a vector of {len} entries, got shape {:?}",
                    p.display(),
                    t.shape()
                )));
            }
            t.data()
                .iter()
                .map(|&v| {
                    if v.fract() == 0.0 && v.is_finite() {
                        Ok(v as i64)
                    } else {
                        Err(CliError::Data(format!(
                            "{}: ROI label {v} is not an integer",
                            p.display()
                        )))
                    }
                })
                .collect()
        }
        None => {
            let block = cfg.attribute.roi_block;
            if block == 0 {
                return Err(CliError::Config(
                    "`attribute.roi_block` must be positive".into(),
                ));
            }
            Ok((0..len).map(|i| (i / block) as i64).collect())
        }
    }
}

pub fn attribute(cfg: &RunConfig, run: &RunDir) -> CliResult<Value> {
    let ck = checkpoint::load_stage2(required(&cfg.paths.checkpoint, "checkpoint")?)?;
    let (_, test) = dataset::load_dataset(required(&cfg.paths.dataset, "dataset")?)?;
    let a = &cfg.attribute;
    if a.class >= ck.dual.num_classes {
        return Err(CliError::Config(format!(
            "class {} out of range [0, {})",
            a.class, ck.dual.num_classes
        )));
    }
    if a.subject >= ck.dual.num_subjects {
        return Err(CliError::Config(format!(
            "subject {} out of range [0, {})",
            a.subject, ck.dual.num_subjects
        )));
    }
    let te = apply_prep(&ck.prep, &test)?;
    let plan = ck.prep.plan(a.subject)?;
    let acfg = AttributionConfig {
        statistic: a.statistic,
        residual: a.residual,
    };
    let map = attribution::aggregate_fingerprint(
        &ck.model, &ck.store, &te, a.class, a.subject, &plan, &acfg,
    )?;
    let mut meta = json!({
        "class_id": a.class,
        "subject_id": a.subject,
        "statistic": a.statistic.name(),
        "residual": a.residual,
        "threshold": THRESHOLD,
        "samples": map.as_ref().map_or(0, |m| m.samples),
        "empty": map.is_none(),
        "voxels": plan.source_len,
    });
    let Some(map) = map else {
        run.write(
            EMPTY_MARKER,
            format!(
                "no true-positive test samples for class {} and subject {}\n",
                a.class, a.subject
            ),
        )?;
        run.write_json("attribution.json", &meta)?;
        println!(
            "attribute: no true positives for class {} / subject {}; empty result",
            a.class, a.subject
        );
        return Ok(meta);
    };
    let labels = roi_labels(cfg, map.scores.len())?;
    mkt::write(
        &run.join("fingerprint.mkt"),
        &Tensor::vector(map.scores.clone()),
    )?;
    let path = run.join("fingerprint.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["voxel_index", "roi_label", "score"])?;
    for (i, (s, r)) in map.scores.iter().zip(&labels).enumerate() {
        w.write_record([i.to_string(), r.to_string(), s.to_string()])?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let groups = attribution::roi_group(&map, &labels)?;
    let path = run.join("roi_scores.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["roi_label", "voxels", "mean", "max"])?;
    for (roi, v) in &groups {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        w.write_record([
            roi.to_string(),
            v.len().to_string(),
            mean.to_string(),
            max.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    meta["top_voxels"] = attribution::top_q(&map.scores, 10.min(map.scores.len())).into();
    run.write_json("attribution.json", &meta)?;
    println!(
        "attribute: class {} subject {} from {} samples ({} statistic)",
        a.class,
        a.subject,
        map.samples,
        a.statistic.name()
    );
    Ok(meta)
}

fn kmeans_json(b: &KMeansBaseline) -> Value {
    json!({
        "ACC": b.report.acc,
        "MCC": b.report.mcc,
        "mcc_degenerate": b.report.mcc_degenerate,
        "objective": b.clustering.objective,
        "iterations": b.clustering.iterations,
        "converged": b.clustering.converged,
    })
}

pub fn baselines(cfg: &RunConfig, run: &RunDir) -> CliResult<Value> {
    let (train, test) = dataset::load_dataset(required(&cfg.paths.dataset, "dataset")?)?;
    let p = pipeline::prepare(&train, &test, cfg.encoder.patch_size, cfg.seq_len)?;
    let s = train.num_subjects;
    let eu = baselines::kmeans_subject_baseline(
        &p.test.x,
        &p.test.subjects,
        s,
        KMeansMetric::Euclidean,
        cfg.seed,
    )?;
    let co = baselines::kmeans_subject_baseline(
        &p.test.x,
        &p.test.subjects,
        s,
        KMeansMetric::Cosine,
        cfg.seed,
    )?;
    let clf = ClassifierConfig {
        steps: cfg.baselines.classifier_steps,
        lr: cfg.baselines.classifier_lr,
        seed: cfg.seed,
    };
    let lin = baselines::linear_subject_baselines(
        &p.train.x,
        &p.train.subjects,
        &p.test.x,
        &p.test.subjects,
        s,
        &clf,
    )?;
    let out = json!({
        "kmeans_euclidean": kmeans_json(&eu),
        "kmeans_cosine": kmeans_json(&co),
        "least_squares": {
            "ACC": lin.least_squares.acc,
            "MCC": lin.least_squares.mcc,
            "mcc_degenerate": lin.least_squares.mcc_degenerate,
        },
        "linear_classifier": {
            "ACC": lin.classifier.acc,
            "MCC": lin.classifier.mcc,
            "mcc_degenerate": lin.classifier.mcc_degenerate,
        },
        "test_samples": p.test.len(),
    });
    run.write_json("baselines.json", &out)?;
    println!(
        "baselines: K-Means ACC {:.4} (euclidean) / {:.4} (cosine); least squares {:.4}; linear classifier {:.4}",
        eu.report.acc, co.report.acc, lin.least_squares.acc, lin.classifier.acc
    );
    Ok(out)
}
