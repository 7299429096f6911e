use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hfd::data::{write_csv, Dataset};
use hfd::eval::SparseSimilarity;
use hfd::synth;

fn hfd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfd"))
        .args(args)
        .env_remove("HFD_SEED")
        .output()
        .expect("spawn hfd")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(data: &Dataset, path: &Path) {
    write_csv(data, fs::File::create(path).unwrap()).unwrap();
}

struct Fixture {
    dir: tempfile::TempDir,
    data: PathBuf,
    model: PathBuf,
}

fn fixture(trees: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    write(&synth::gaussian_mixture(3, 30, 4, 3.0, 1.0, 2).unwrap(), &data);
    let out = dir.path().join("run");
    let o = hfd(&["train", "--data", s(&data), "--trees", trees, "--seed", "3", "--output-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    Fixture {
        model: out.join("model.json"),
        data,
        dir,
    }
}

#[test]
fn train_writes_model_config_and_log() {
    let f = fixture("4");
    let run = f.model.parent().unwrap();
    for name in ["model.json", "config.json", "train.log"] {
        assert!(run.join(name).exists(), "{name} missing");
    }
    let forest = hfd::hierarchy::Forest::from_json(&fs::read_to_string(&f.model).unwrap()).unwrap();
    assert_eq!(forest.n_trees(), 4);
    assert_eq!(forest.n(), 90);
    let cfg = hfd::config::ExperimentConfig::load(&run.join("config.json")).unwrap();
    assert_eq!(cfg.trees, 4);
    assert_eq!(cfg.seed, 3);
}

#[test]
fn approx_with_full_candidates_matches_brute_force_csv() {
    let f = fixture("5");
    let a = f.dir.path().join("a.csv");
    let b = f.dir.path().join("b.csv");
    let o = hfd(&["knn", "--model", s(&f.model), "-k", "4", "--k-o", "90", "--output", s(&a)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = hfd(&["knn", "--model", s(&f.model), "-k", "4", "--mode", "brute", "--output", s(&b)]);
    assert_eq!(code(&o), 0);
    let a = fs::read_to_string(a).unwrap();
    assert_eq!(a, fs::read_to_string(b).unwrap());
    assert_eq!(a.lines().count(), 1 + 90 * 4);
    assert_eq!(a.lines().next().unwrap(), "query,rank,neighbor,distance");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.dir.path().join("a.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["queries"], 90);
}

#[test]
fn external_queries_and_dimension_mismatch() {
    let f = fixture("3");
    let q = f.dir.path().join("q.csv");
    fs::write(&q, "0.1,0.2,0.3,0.4\n1,1,1,1\n").unwrap();
    let o = hfd(&["knn", "--model", s(&f.model), "--queries", s(&q), "-k", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 1 + 2 * 2);

    fs::write(&q, "0.1,0.2,0.3,0.4\n").unwrap();
    let o = hfd(&["knn", "--model", s(&f.model), "--queries", s(&q), "-k", "3"]);
    assert_eq!(code(&o), 0, "single query row: {}", String::from_utf8_lossy(&o.stderr));

    fs::write(&q, "0.1,0.2,0.3\n").unwrap();
    let o = hfd(&["knn", "--model", s(&f.model), "--queries", s(&q)]);
    assert_eq!(code(&o), 5);
}

#[test]
fn distance_of_a_row_to_itself_is_zero() {
    let f = fixture("3");
    let left = f.dir.path().join("l.csv");
    let right = f.dir.path().join("r.csv");
    fs::write(&left, "0,0,0,0\n3,1,-2,0.5\n").unwrap();
    fs::write(&right, "0,0,0,0\n-3,4,1,2\n").unwrap();
    let o = hfd(&["distance", "--model", s(&f.model), "--left", s(&left), "--right", s(&right)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows[0], "row,distance");
    assert_eq!(rows[1], "0,0");
    let d: f64 = rows[2].split(',').nth(1).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&d));
}

#[test]
fn exit_codes() {
    let f = fixture("2");
    assert_eq!(code(&hfd(&["train", "--bogus"])), 2);
    assert_eq!(code(&hfd(&["train", "--data", s(&f.data), "--trees", "0"])), 2);
    assert_eq!(code(&hfd(&["knn", "--model", "/nonexistent/model.json"])), 3);
    let bad = f.dir.path().join("bad.json");
    fs::write(&bad, r#"{"format_version": 99}"#).unwrap();
    assert_eq!(code(&hfd(&["knn", "--model", s(&bad)])), 3);
    // unlabeled data cannot drive a classification protocol
    let o = hfd(&[
        "eval",
        "--data",
        s(&f.data),
        "--unlabeled",
        "--protocol",
        "classify",
        "--output-dir",
        s(&f.dir.path().join("e")),
    ]);
    assert_eq!(code(&o), 6);
    // one tree, truncated to a single candidate, cannot supply 20 neighbours
    let one = f.dir.path().join("one");
    let o = hfd(&["train", "--data", s(&f.data), "--trees", "1", "--output-dir", s(&one)]);
    assert_eq!(code(&o), 0);
    let o = hfd(&[
        "knn",
        "--model",
        s(&one.join("model.json")),
        "-k",
        "20",
        "--k-o",
        "1",
        "--truncate",
    ]);
    assert_eq!(code(&o), 7, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn seed_precedence_is_config_then_env_then_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"dataset": {"path": "x.csv"}, "seed": 1}"#).unwrap();
    let seed_of = |extra: &[&str], env: Option<&str>| -> u64 {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_hfd"));
        cmd.args(["train", "--config", s(&cfg), "--print-effective-config"]).args(extra);
        match env {
            Some(v) => cmd.env("HFD_SEED", v),
            None => cmd.env_remove("HFD_SEED"),
        };
        let o = cmd.output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        v["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(&[], None), 1);
    assert_eq!(seed_of(&[], Some("5")), 5);
    assert_eq!(seed_of(&["--seed", "9"], Some("5")), 9);
    let o = Command::new(env!("CARGO_BIN_EXE_hfd"))
        .args(["train", "--config", s(&cfg), "--print-effective-config"])
        .env("HFD_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn constraint_file_drives_training() {
    let f = fixture("2");
    let cons = f.dir.path().join("cons.csv");
    let o = hfd(&[
        "constraints",
        "sample",
        "--data",
        s(&f.data),
        "--must-link",
        "40",
        "--cannot-link",
        "30",
        "--seed",
        "1",
        "--output",
        s(&cons),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&cons).unwrap();
    assert_eq!(text.lines().filter(|l| l.ends_with(",ML")).count(), 40);
    assert_eq!(text.lines().filter(|l| l.ends_with(",CL")).count(), 30);
    let out = f.dir.path().join("withcons");
    let o = hfd(&[
        "train",
        "--data",
        s(&f.data),
        "--constraints",
        s(&cons),
        "--trees",
        "2",
        "--output-dir",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(out.join("train.log")).unwrap();
    assert!(log.contains("40 must-link, 30 cannot-link"), "{log}");
}

#[test]
fn dataset_normalize_writes_zero_mean_columns() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.csv");
    fs::write(&raw, "1,10,0\n3,30,1\n5,50,0\n").unwrap();
    let out = dir.path().join("norm.csv");
    let stats = dir.path().join("stats.json");
    let o = hfd(&["dataset", "normalize", "--data", s(&raw), "--output", s(&out), "--stats", s(&stats)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let opts = hfd::data::CsvOptions {
        label_column: true,
        header: false,
    };
    let norm = hfd::data::parse_csv(fs::File::open(&out).unwrap(), opts).unwrap();
    assert_eq!(norm.labels().unwrap(), &[0, 1, 0]);
    for c in 0..2 {
        let mean: f64 = (0..3).map(|i| norm.row(i)[c]).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
    }
    assert!(stats.exists());
}

#[test]
fn eval_protocols_write_reports() {
    let f = fixture("2");
    let out = f.dir.path().join("eval");
    let cfg = f.dir.path().join("eval.json");
    fs::write(
        &cfg,
        r#"{"ann": {"k_o": 30, "k": 5}, "eval": {"retrieval_ks": [5, 10], "eval_ks": [5, 10], "k_o_values": [1, 5], "similarity_k": 10}}"#,
    )
    .unwrap();
    for protocol in ["retrieval", "ann_quality", "export_similarity"] {
        let o = hfd(&[
            "eval",
            "--config",
            s(&cfg),
            "--data",
            s(&f.data),
            "--trees",
            "3",
            "--protocol",
            protocol,
            "--output-dir",
            s(&out),
        ]);
        assert_eq!(code(&o), 0, "{protocol}: {}", String::from_utf8_lossy(&o.stderr));
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join(format!("{protocol}.json"))).unwrap()).unwrap();
        assert_eq!(report["protocol"], protocol);
        assert!(out.join(format!("{protocol}.csv")).exists());
    }
    let mtx = fs::File::open(out.join("similarity.mtx")).unwrap();
    let m = SparseSimilarity::read_matrix_market(std::io::BufReader::new(mtx)).unwrap();
    assert_eq!(m.n, 90);
    for (&(i, j), &v) in &m.entries {
        assert_eq!(m.get(j, i), Some(v));
    }
}

#[test]
fn vmeasure_command() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.txt");
    let t = dir.path().join("t.txt");
    fs::write(&p, "0\n0\n1\n1\n").unwrap();
    fs::write(&t, "5\n5\n7\n7\n").unwrap();
    let o = hfd(&["vmeasure", "--predicted", s(&p), "--truth", s(&t)]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["v_measure"].as_f64().unwrap() - 1.0).abs() < 1e-12, "{v}");
}
