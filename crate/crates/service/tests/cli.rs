use std::path::Path;
use std::process::{Command, Output};

use rand::Rng;
use serde_json::{json, Value};

use shoeprint_core::evalkit::{Scenario, ScenarioData};
use shoeprint_core::forest::{self, Dataset, FeatureRecord, FEATURE_NAMES};
use shoeprint_core::seed;

fn shoeprint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shoeprint")).args(args).output().unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = shoeprint(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{args:?}: {e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn error_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.lines().last().unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn random_dataset(n: usize, scenario: &str, s: u64) -> Dataset {
    let mut rng = seed::rng(s);
    let mut d = Dataset::new(forest::feature_columns());
    for i in 0..n {
        let label = (i % 2) as u8;
        d.push(FeatureRecord {
            pair_id: format!("{scenario}-{i}"),
            q_shoe_id: format!("s{}", i / 2),
            k_shoe_id: format!("k{i}"),
            scenario: scenario.into(),
            label,
            values: (0..FEATURE_NAMES.len()).map(|_| rng.random::<f64>() + label as f64 * 0.6).collect(),
        })
        .unwrap();
    }
    d
}

fn small_corpus(dir: &Path) {
    let spec = json!({
        "base": { "width": 80, "height": 160, "pattern_period": 18.0, "rac_count_min": 6, "rac_count_max": 8 },
        "n_models": 1,
        "shoes_per_model": 4,
        "blur_levels": [],
        "seed": 4
    });
    std::fs::write(dir.join("spec.json"), spec.to_string()).unwrap();
    let out = ok_json(&["synth", "--spec", p(&dir.join("spec.json")), "--out", p(&dir.join("corpus"))]);
    assert_eq!(out["records"], 8);
}

#[test]
fn image_verbs_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let corpus = dir.path().join("corpus");
    let q_img = corpus.join("images/m00s000_L_v1_b00_r0.png");
    let k_img = corpus.join("images/m00s000_L_v1_b00_r1.png");

    let out = shoeprint(&["extract", p(&q_img)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("x,y\n"));
    let q_csv = dir.path().join("q.csv");
    let k_csv = dir.path().join("k.csv");
    let e = ok_json(&["extract", p(&q_img), "--out", p(&q_csv)]);
    assert!(e["points"].as_u64().unwrap() > 0);
    ok_json(&["extract", p(&k_img), "--out", p(&k_csv)]);

    let a = ok_json(&["align", p(&q_csv), p(&k_csv)]);
    assert!(a["transform"]["theta"].as_f64().unwrap().abs() < 0.2);
    assert_eq!(a["candidates"], 50);

    let pipeline = corpus.join("pipeline.json");
    let f = ok_json(&["features", p(&q_img), p(&k_img), "--pipeline", p(&pipeline)]);
    let names: Vec<&str> = f["features"].as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(names, FEATURE_NAMES.to_vec());

    let feats = dir.path().join("train.csv");
    random_dataset(40, "PristineAN", 1).write_csv_path(&feats).unwrap();
    let model = dir.path().join("model.json");
    let t = ok_json(&["train", p(&feats), "--out", p(&model), "--n-trees", "30"]);
    assert!(t.get("grid_points").is_none());

    let out = shoeprint(&["predict", "--model", p(&model), p(&q_img), p(&k_img), "--pipeline", p(&pipeline)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1);
    let v: Value = serde_json::from_str(stdout.trim()).unwrap();
    let obj = v.as_object().unwrap();
    assert_eq!(obj.keys().collect::<Vec<_>>(), vec!["posterior"]);
    assert!((0.0..=1.0).contains(&obj["posterior"].as_f64().unwrap()));

    let r = ok_json(&["evaluate", "--model", p(&model), p(&feats)]);
    assert_eq!(r["n"], 40);
    assert!(r["auc"].as_f64().unwrap() > 0.9);

    let x = ok_json(&[
        "experiment",
        "--registry",
        p(&corpus.join("registry.csv")),
        "--scenarios",
        "PristineAN",
        "--regime",
        "baseline,full",
        "--n-trees",
        "20",
        "--out",
        p(&dir.path().join("exp")),
    ]);
    assert_eq!(x["cells"], 2);
    assert!(dir.path().join("exp/features/PristineAN_test.csv").exists());
}

#[test]
fn full_grid_evaluates_144_configurations() {
    let dir = tempfile::tempdir().unwrap();
    let feats = dir.path().join("f.csv");
    random_dataset(30, "PristineAN", 2).write_csv_path(&feats).unwrap();
    let model = dir.path().join("m.json");
    let cv = dir.path().join("cv.json");
    let t = ok_json(&["train", p(&feats), "--out", p(&model), "--grid", "full", "--folds", "3", "--cv-out", p(&cv)]);
    assert_eq!(t["grid_points"], 144);
    let table: Value = serde_json::from_str(&std::fs::read_to_string(&cv).unwrap()).unwrap();
    assert_eq!(table["table"].as_array().unwrap().len(), 144);
    assert!(model.exists());
}

#[test]
fn loo_experiment_trains_one_model_per_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = ScenarioData::default();
    for (i, sc) in Scenario::ALL.iter().enumerate() {
        data.train.insert(*sc, random_dataset(20, sc.name(), 10 + i as u64));
        data.test.insert(*sc, random_dataset(10, sc.name(), 50 + i as u64));
    }
    data.save_dir(dir.path().join("features")).unwrap();
    let out = dir.path().join("report");
    let x = ok_json(&["experiment", "--features", p(&dir.path().join("features")), "--regime", "loo", "--n-trees", "10", "--out", p(&out)]);
    assert_eq!(x["models_trained"], 13);
    assert_eq!(x["cells"], 13);
    for f in ["report.json", "accuracy.csv", "emd.csv", "plot_data.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let plot: Value = serde_json::from_str(&std::fs::read_to_string(out.join("plot_data.json")).unwrap()).unwrap();
    assert_eq!(plot.as_object().unwrap().len(), 13);
}

#[test]
fn failures_exit_nonzero_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.png");
    let out = shoeprint(&["extract", p(&missing)]);
    assert_eq!(error_json(&out)["error"]["code"], "IOError");

    let out = shoeprint(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["code"], "UsageError");

    let out = shoeprint(&["experiment", "--features", p(dir.path()), "--regime", "sideways", "--out", p(&dir.path().join("o"))]);
    assert_eq!(error_json(&out)["error"]["code"], "InvalidArgumentError");
}

#[test]
fn serve_reads_env_and_answers_http() {
    use std::io::{BufRead, BufReader, Read, Write};
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("models")).unwrap();
    let model = forest::train(&random_dataset(30, "PristineAN", 7), forest::Hyperparams { n_trees: 5, ..Default::default() }, 0).unwrap();
    model.save(dir.path().join("models/pristine.json")).unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_shoeprint"))
        .args(["serve", "--host", "127.0.0.1"])
        .env("SOLE_PORT", "0")
        .env("SOLE_SEED", "3")
        .env("SOLE_MODEL_DIR", dir.path().join("models"))
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr: Value = serde_json::from_str(&line).unwrap();
    let mut stream = std::net::TcpStream::connect(addr["listening"].as_str().unwrap()).unwrap();
    stream.write_all(b"GET /api/models HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    stream.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains(r#""default":"pristine""#), "{resp}");
}
