use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use imind::checkpoint::{self, Preprocessing, Stage2};
use imind::dataset;
use imind_core::dual::{DualConfig, DualModel};
use imind_core::mae::EncoderConfig;
use imind_core::params::ParamStore;
use imind_core::pipeline::prepare;
use imind_core::synth::{generate_dataset, GeneratorConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const TINY: &str = "\
seed = 1
synth.base_length = 40
synth.train_stimuli_per_subject = 12
synth.test_stimuli = 6
synth.vision_tokens = 3
synth.vision_dim = 6
encoder.patch_size = 8
encoder.dim = 16
encoder.layers = 1
encoder.heads = 2
encoder.decoder_dim = 8
encoder.decoder_layers = 1
encoder.decoder_heads = 2
pretrain.epochs = 1
pretrain.batch_size = 8
dual.obj_dim = 10
dual.heads = 2
train.epochs = 1
train.batch_size = 8
";

fn imind(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imind"))
        .args(args)
        .output()
        .unwrap()
}

fn run_dir(o: &Output) -> PathBuf {
    let s = String::from_utf8_lossy(&o.stdout);
    PathBuf::from(
        s.lines()
            .find_map(|l| l.strip_prefix("run directory: "))
            .unwrap_or_else(|| panic!("no run directory in {s}")),
    )
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    cfg: PathBuf,
    out: PathBuf,
}

impl Fixture {
    fn new(extra: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tmp.path().join("run.cfg");
        fs::write(&cfg, format!("{TINY}{extra}")).unwrap();
        let out = tmp.path().join("runs");
        Fixture {
            _tmp: tmp,
            cfg,
            out,
        }
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut all = args.to_vec();
        all.extend(["--config", s(&self.cfg), "--out", s(&self.out)]);
        imind(&all)
    }

    fn ok(&self, args: &[&str]) -> PathBuf {
        let o = self.run(args);
        assert!(
            o.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        run_dir(&o)
    }
}

#[test]
fn dataset_round_trip() {
    let cfg = GeneratorConfig {
        base_length: 30,
        train_stimuli_per_subject: 5,
        test_stimuli: 3,
        vision_tokens: 2,
        vision_dim: 4,
        ..GeneratorConfig::default()
    };
    let (train, test, _) = generate_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    dataset::write_dataset(dir.path(), &train, &test).unwrap();
    let (tr, te) = dataset::load_dataset(dir.path()).unwrap();
    assert_eq!(tr, train);
    assert_eq!(te, test);
}

#[test]
fn stage2_checkpoint_round_trip() {
    let gen = GeneratorConfig {
        base_length: 30,
        train_stimuli_per_subject: 5,
        test_stimuli: 3,
        vision_tokens: 2,
        vision_dim: 4,
        ..GeneratorConfig::default()
    };
    let (train, test, _) = generate_dataset(&gen).unwrap();
    let p = prepare(&train, &test, 8, None).unwrap();
    let encoder = EncoderConfig {
        patch_size: 8,
        seq_len: p.target_len,
        dim: 8,
        layers: 1,
        heads: 2,
        decoder_dim: 8,
        decoder_layers: 1,
        decoder_heads: 2,
        mask_ratio: 0.5,
    };
    let dual = DualConfig {
        obj_dim: 5,
        heads: 1,
        vision_tokens: 2,
        vision_dim: 4,
        ..DualConfig::default()
    };
    let mut store = ParamStore::new();
    let model = DualModel::new(
        &mut store,
        &encoder,
        &dual,
        &mut ChaCha8Rng::seed_from_u64(4),
    )
    .unwrap();
    let (before_s, before_o) = model.predict(&store, &p.test, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ck = Stage2 {
        encoder,
        dual,
        model,
        store,
        prep: Preprocessing {
            stats: p.stats.clone(),
            lengths: p.lengths.clone(),
            target_len: p.target_len,
            patch_size: 8,
        },
    };
    checkpoint::save_stage2(dir.path(), &ck).unwrap();
    let back = checkpoint::load_stage2(dir.path()).unwrap();
    assert_eq!(back.store, ck.store);
    assert_eq!(back.prep, ck.prep);
    let (s2, o2) = back.model.predict(&back.store, &p.test, 4).unwrap();
    assert_eq!(s2, before_s);
    assert_eq!(o2, before_o);

    assert!(checkpoint::load_stage1(dir.path()).is_err());
    fs::remove_file(dir.path().join("params").join("basis.B.mkt")).unwrap();
    let e = checkpoint::load_stage2(dir.path()).unwrap_err();
    assert!(e.to_string().contains("basis.B.mkt"), "{e}");
}

#[test]
fn full_pipeline_writes_expected_artifacts() {
    let f = Fixture::new("train.retract = true\n");
    let synth = f.ok(&["synth"]);
    let data = synth.join("dataset");
    assert!(data.join("train").join("manifest.csv").is_file());
    assert_eq!(
        fs::read_to_string(synth.join("config.txt")).unwrap(),
        fs::read_to_string(&f.cfg).unwrap()
    );

    let pre = f.ok(&["pretrain", "--dataset", s(&data)]);
    let loss = fs::read_to_string(pre.join("loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,loss\n"));
    assert_eq!(summary(&pre)["status"], "ok");

    let s1 = pre.join("checkpoint");
    let tr = f.ok(&["train", "--dataset", s(&data), "--stage1", s(&s1)]);
    let metrics = fs::read_to_string(tr.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,L_subj,L_obj,L_orth,total,val_ACC,val_mAP\n"));
    let sm = summary(&tr);
    assert!(
        sm["results"]["orthonormality_error_saved"]
            .as_f64()
            .unwrap()
            <= 1e-10
    );

    let ck = tr.join("checkpoint");
    let ev = f.ok(&["eval", "--dataset", s(&data), "--checkpoint", s(&ck)]);
    let report: Value =
        serde_json::from_str(&fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    for key in ["ACC", "mAP", "AUC", "Hamming", "MCC"] {
        assert!(report[key].is_number(), "{key}");
    }
    assert!(ev.join("per_class_ap.csv").is_file());

    let bl = f.ok(&["baselines", "--dataset", s(&data)]);
    let b: Value =
        serde_json::from_str(&fs::read_to_string(bl.join("baselines.json")).unwrap()).unwrap();
    for key in [
        "kmeans_euclidean",
        "kmeans_cosine",
        "least_squares",
        "linear_classifier",
    ] {
        assert!(b[key]["ACC"].is_number(), "{key}");
    }
}

#[test]
fn attribute_without_true_positives_is_an_explicit_empty_result() {
    let f = Fixture::new("");
    let data = f.ok(&["synth"]).join("dataset");
    // Drop class 2 from every test label so no sample can qualify.
    let manifest = data.join("test").join("manifest.csv");
    let mut rdr = csv::Reader::from_path(&manifest).unwrap();
    let header = rdr.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let mut w = csv::Writer::from_path(&manifest).unwrap();
    w.write_record(&header).unwrap();
    for r in rows {
        let labels: Vec<&str> = r[2].split(';').filter(|l| *l != "2").collect();
        let labels = labels.join(";");
        w.write_record([&r[0], &r[1], labels.as_str(), &r[3], &r[4]])
            .unwrap();
    }
    w.flush().unwrap();

    let s1 = f
        .ok(&["pretrain", "--dataset", s(&data)])
        .join("checkpoint");
    let ck = f
        .ok(&["train", "--dataset", s(&data), "--stage1", s(&s1)])
        .join("checkpoint");
    let at = f.ok(&[
        "attribute",
        "--dataset",
        s(&data),
        "--checkpoint",
        s(&ck),
        "--class",
        "2",
    ]);
    assert!(at.join("EMPTY").is_file());
    assert!(!at.join("fingerprint.csv").exists());
    let meta: Value =
        serde_json::from_str(&fs::read_to_string(at.join("attribution.json")).unwrap()).unwrap();
    assert_eq!(meta["empty"], true);
    assert_eq!(meta["samples"], 0);
    assert_eq!(summary(&at)["exit_code"], 0);
}

#[test]
fn exit_codes() {
    let f = Fixture::new("");
    assert_eq!(imind(&[]).status.code(), Some(1));
    assert_eq!(imind(&["--help"]).status.code(), Some(0));
    assert_eq!(imind(&["synth", "--seed", "x"]).status.code(), Some(1));

    let bad = f.out.parent().unwrap().join("bad.cfg");
    fs::write(&bad, "synth.noise = 0.2\n").unwrap();
    let o = imind(&["synth", "--config", s(&bad), "--out", s(&f.out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("synth.noise"));
    assert!(
        !f.out.exists(),
        "config errors must not create a run directory"
    );

    let o = f.run(&["eval", "--dataset", "nowhere", "--checkpoint", "missing-ck"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing-ck"));
    let sm = summary(&run_dir(&o));
    assert_eq!(sm["status"], "error");
    assert_eq!(sm["exit_code"], 2);

    assert_eq!(f.run(&["pretrain"]).status.code(), Some(1));
}

#[test]
fn divergence_exits_numerical_with_last_good_checkpoint() {
    let f = Fixture::new("pretrain.lr = 1e200\npretrain.warmup_frac = 0\n");
    let data = f.ok(&["synth"]).join("dataset");
    let o = f.run(&["pretrain", "--dataset", s(&data)]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let dir = run_dir(&o);
    assert_eq!(summary(&dir)["exit_code"], 3);
    let ck = checkpoint::load_stage1(&dir.join("checkpoint")).unwrap();
    assert!(ck.store.params().iter().all(|p| p.value.all_finite()));
}

#[test]
fn seed_flag_overrides_config() {
    let f = Fixture::new("");
    let a = f.ok(&["synth", "--seed", "7"]);
    let resolved = fs::read_to_string(a.join("config.resolved.txt")).unwrap();
    assert!(resolved.lines().any(|l| l == "seed = 7"));
    assert_eq!(summary(&a)["seed"], 7);
}

#[test]
fn default_synth_writes_two_thousand_training_trials() {
    let tmp = tempfile::tempdir().unwrap();
    let o = imind(&["synth", "--out", s(tmp.path())]);
    assert!(o.status.success());
    let dir = run_dir(&o);
    let sm = summary(&dir);
    assert_eq!(sm["results"]["num_subjects"], 4);
    assert_eq!(sm["results"]["num_classes"], 8);
    let mut rdr = csv::Reader::from_path(dir.join("dataset/train/manifest.csv")).unwrap();
    let trials: std::collections::BTreeSet<(String, String)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].to_string())
        })
        .collect();
    assert_eq!(trials.len(), 2000);
}
