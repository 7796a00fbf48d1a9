use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn avru(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avru")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(path: &Path, text: &str) -> PathBuf {
    fs::write(path, text).unwrap();
    path.to_path_buf()
}

fn generator_json(n_a: usize, out: &str) -> String {
    format!(
        r#"{{"family": "RPM3x3", "n_a": {n_a}, "splits": {{"train": 16, "val": 8, "test": 8}}, "seed": 4, "out": "{out}"}}"#
    )
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).map(|p| (p.clone(), fs::read(&p).unwrap())).collect();
    out.sort();
    out.into_iter().map(|(p, b)| (p.file_name().unwrap().into(), b)).collect()
}

#[test]
fn generate_is_repeatable_and_flags_override_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(&tmp.path().join("gen.json"), &generator_json(3, "a"));
    let first = avru(&["generate", cfg.to_str().unwrap()]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let b = tmp.path().join("b");
    assert_eq!(code(&avru(&["generate", cfg.to_str().unwrap(), "--out", b.to_str().unwrap()])), 0);
    assert_eq!(tree(&tmp.path().join("a")), tree(&b));
    let c = tmp.path().join("c");
    assert_eq!(code(&avru(&["generate", cfg.to_str().unwrap(), "--out", c.to_str().unwrap(), "--seed", "5"])), 0);
    assert_ne!(tree(&b), tree(&c));
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(&tmp.path().join("bad.json"), "{\"family\": \"RPM3x3\",\n  \"n_a\": 3,,\n}");
    let out = avru(&["generate", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));

    let unknown = write(&tmp.path().join("unknown.json"), &generator_json(3, "x").replace("\"seed\"", "\"colour\": 1, \"seed\""));
    assert_eq!(code(&avru(&["generate", unknown.to_str().unwrap()])), 2);
    let too_many = write(&tmp.path().join("many.json"), &generator_json(9, "x"));
    assert_eq!(code(&avru(&["generate", too_many.to_str().unwrap()])), 2);
    assert_eq!(code(&avru(&["generate"])), 2);
    assert_eq!(code(&avru(&["--help"])), 0);

    let data = tmp.path().join("d");
    assert_eq!(code(&avru(&["generate", write(&tmp.path().join("g.json"), &generator_json(3, "d")).to_str().unwrap()])), 0);
    let run = write(&tmp.path().join("run.json"), &format!(r#"{{"regime": "transfer", "dataset": "{}", "out": "r"}}"#, data.display()));
    let out = avru(&["train", run.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("source"), "{}", stderr(&out));
    let neg = write(&tmp.path().join("neg.json"), &format!(r#"{{"regime": "stl", "dataset": "{}", "beta": -1, "out": "r"}}"#, data.display()));
    assert_eq!(code(&avru(&["train", neg.to_str().unwrap()])), 2);
}

#[test]
fn io_errors_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    assert_eq!(code(&avru(&["generate", missing.to_str().unwrap()])), 3);
    assert_eq!(code(&avru(&["render", missing.to_str().unwrap(), tmp.path().join("o").to_str().unwrap()])), 3);
    let junk = write(&tmp.path().join("junk.umck"), "not a checkpoint");
    assert_eq!(code(&avru(&["eval", junk.to_str().unwrap(), missing.to_str().unwrap()])), 3);
}

#[test]
fn train_eval_embed_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = write(&tmp.path().join("gen.json"), &generator_json(4, "data"));
    assert_eq!(code(&avru(&["generate", gen.to_str().unwrap()])), 0);
    let data = tmp.path().join("data");

    let png = tmp.path().join("png");
    let out = avru(&["render", data.to_str().unwrap(), png.to_str().unwrap(), "--png", "--split", "val", "--n-a", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("8 canvases 448x416"));
    assert_eq!(fs::read_dir(png.join("val")).unwrap().count(), 16);
    let sidecar = fs::read_to_string(png.join("val").join("val-000000.json")).unwrap();
    assert!(sidecar.contains("\"n_a\":2"), "{sidecar}");

    let run = write(
        &tmp.path().join("run.json"),
        r#"{"regime": "stl", "dataset": "data", "out": "run", "batch_size": 8, "max_epochs": 1,
            "model": {"stem_channels": [2, 2, 4, 4], "blocks": 1, "segments": 2, "expansion": 2}}"#,
    );
    let out = avru(&["train", run.to_str().unwrap(), "--seed", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["checkpoint.umck", "history.csv", "summary.json"] {
        assert!(tmp.path().join("run").join(f).exists(), "{f}");
    }
    let ckpt = tmp.path().join("run").join("checkpoint.umck");

    let out = avru(&["eval", ckpt.to_str().unwrap(), data.to_str().unwrap(), "--n-a", "3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["count"], 8);
    assert_eq!(report["n_a"], 3);
    assert!((report["chance"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);

    let emb = tmp.path().join("emb.csv");
    let out = avru(&["embed", ckpt.to_str().unwrap(), data.to_str().unwrap(), "--out", emb.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&emb).unwrap().lines().count(), 9);

    let wide = write(&tmp.path().join("wide.json"), &generator_json(6, "wide"));
    assert_eq!(code(&avru(&["generate", wide.to_str().unwrap()])), 0);
    let out = avru(&["train", run.to_str().unwrap(), "--regime", "transfer", "--source", ckpt.to_str().unwrap(), "--out", tmp.path().join("t").to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cross = write(
        &tmp.path().join("cross.json"),
        &fs::read_to_string(&run).unwrap().replace("\"data\"", "\"wide\"").replace("\"stl\"", "\"transfer\""),
    );
    let out = avru(&["train", cross.to_str().unwrap(), "--source", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("transfer-compatibility"));
    let out = avru(&["eval", ckpt.to_str().unwrap(), tmp.path().join("wide").to_str().unwrap(), "--n-a", "5"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}
