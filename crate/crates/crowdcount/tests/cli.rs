use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use crowdcount::manifest::{read_manifest, write_manifest, Manifest, Split};
use crowdcount::tensor_file::read_tensor;

fn crowdcount(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crowdcount"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn synth(dir: &Path, seed: &str) {
    let o = crowdcount(
        dir,
        &[
            "--seed", seed, "synth", "--out", "ds", "--train-count", "4", "--test-count", "2",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn params_prints_the_conv_weight_ladder() {
    let dir = tempfile::tempdir().unwrap();
    let o = crowdcount(dir.path(), &["params"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let line = |arch: &str| text.lines().find(|l| l.starts_with(arch)).unwrap().to_string();
    assert!(line("dr_resnet").contains("28,096"), "{text}");
    assert!(line("dr_resnet").contains("0.028M"));
    assert!(line("resnet20").contains("41,920"));
    assert!(line("resnet26").contains("55,744"));
    assert!(line("resnet14").contains("0.028M"));
    assert!(stderr(&o).starts_with("resolved config: {"), "{}", stderr(&o));

    let o = crowdcount(dir.path(), &["--json", "params"]);
    let rows: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let dr = rows
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["arch"] == "dr_resnet")
        .unwrap();
    assert_eq!(dr["conv_weights"], 28_096);
    assert_eq!(dr["depth"], 26);
}

#[test]
fn usage_problems_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"train": {"learning_rat": 0.1}}"#).unwrap();
    fs::write(dir.path().join("invalid.json"), r#"{"kernel": {"fixed_window": 24}}"#).unwrap();
    for args in [
        &["params", "--no-such-flag"][..],
        &["frobnicate"],
        &["--config", "bad.json", "params"],
        &["--config", "invalid.json", "params"],
        &["--config", "missing.json", "params"],
        &["kfold", "--manifest", "missing.csv", "--out", "f"],
        &["eval", "--checkpoint", "missing.drck", "--manifest", "missing.csv"],
        &["density", "--annotation", "missing.json", "--out", "maps"],
        &["train", "--manifest", "m.csv", "--out", "o", "--crop", "63x64"],
    ] {
        let o = crowdcount(dir.path(), args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
        assert!(!stderr(&o).is_empty());
    }
    assert_eq!(code(&crowdcount(dir.path(), &["--help"])), 0);
    assert_eq!(code(&crowdcount(dir.path(), &["--version"])), 0);
}

#[test]
fn runtime_failures_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("garbage.drck"), b"DRCKnonsense").unwrap();
    synth(dir.path(), "1");
    let o = crowdcount(
        dir.path(),
        &["eval", "--checkpoint", "garbage.drck", "--manifest", "ds/test.csv"],
    );
    assert_eq!(code(&o), 1, "{}", stderr(&o));

    // a learning rate this large blows up within a few iterations
    let o = crowdcount(
        dir.path(),
        &[
            "train", "--manifest", "ds/train.csv", "--out", "run", "--iterations", "20", "--learning-rate", "1",
        ],
    );
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    assert!(dir.path().join("run/loss.csv").is_file());
}

#[test]
fn density_of_one_head_sums_to_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("one.json"),
        r#"{"image": "one.png", "width": 40, "height": 32, "points": [[20.0, 16.0]]}"#,
    )
    .unwrap();
    let o = crowdcount(
        dir.path(),
        &[
            "density", "--mode", "fixed", "--window", "25", "--sigma", "1.5", "--annotation", "one.json", "--out",
            "maps", "--preview",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let map = read_tensor(&dir.path().join("maps/one.drt4")).unwrap();
    assert_eq!((map.shape().h, map.shape().w), (32, 40));
    let sum: f64 = map.data().iter().map(|&v| f64::from(v)).sum();
    assert!((sum - 1.0).abs() < 1e-5, "{sum}");
    assert!(dir.path().join("maps/one.png").is_file());
    assert!(dir.path().join("maps/one.drt4.provenance.json").is_file());

    let o = crowdcount(
        dir.path(),
        &[
            "density", "--annotation", "one.json", "--out", "small", "--downsample", "4",
        ],
    );
    assert_eq!(code(&o), 0);
    let map = read_tensor(&dir.path().join("small/one.drt4")).unwrap();
    assert_eq!((map.shape().h, map.shape().w), (8, 10));
}

fn fifty_id_manifest(dir: &Path) {
    let rows: Vec<_> = (0..50)
        .map(|i| (format!("img/{i:02}.png").into(), format!("ann/{i:02}.json").into()))
        .collect();
    let m = Manifest::new(dir, Split::All, &rows).unwrap();
    write_manifest(&dir.join("all.csv"), &m).unwrap();
}

#[test]
fn five_fold_split_of_fifty_ids() {
    let dir = tempfile::tempdir().unwrap();
    fifty_id_manifest(dir.path());
    let o = crowdcount(
        dir.path(),
        &[
            "--seed", "3", "kfold", "--manifest", "all.csv", "--k", "5", "--out", "folds",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut seen = Vec::new();
    for fold in 0..5 {
        let test = read_manifest(&dir.path().join(format!("folds/fold{fold}_test.csv")))
            .unwrap()
            .ids();
        let train = read_manifest(&dir.path().join(format!("folds/fold{fold}_train.csv")))
            .unwrap()
            .ids();
        assert_eq!(test.len(), 10);
        assert_eq!(train.len(), 40);
        assert!(test.iter().all(|id| !train.contains(id)));
        seen.extend(test);
    }
    seen.sort();
    let all: Vec<String> = (0..50).map(|i| format!("{i:02}")).collect();
    assert_eq!(seen, all);

    let o = crowdcount(
        dir.path(),
        &[
            "--seed", "3", "kfold", "--manifest", "all.csv", "--fold", "2", "--out", "again",
        ],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(dir.path().join("folds/fold2_test.csv")).unwrap(),
        fs::read(dir.path().join("again/fold2_test.csv")).unwrap()
    );
    assert!(!dir.path().join("again/fold0_test.csv").exists());
}

fn files_under(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn repeated_deterministic_runs_give_identical_artifacts() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let d = d.path();
        synth(d, "5");
        let train = [
            "--seed", "5", "--deterministic", "train", "--manifest", "ds/train.csv", "--out", "run", "--iterations",
            "3", "--learning-rate", "1e-5", "--batch-size", "2",
        ];
        let o = crowdcount(d, &train);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let eval = [
            "--deterministic", "eval", "--checkpoint", "run/checkpoint_000003.drck", "--manifest", "ds/test.csv",
            "--out", "report.json",
        ];
        let o = crowdcount(d, &eval);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let o = crowdcount(
            d,
            &[
                "density", "--manifest", "ds/train.csv", "--mode", "adaptive", "--out", "maps",
            ],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let (a, b) = (files_under(dirs[0].path()), files_under(dirs[1].path()));
    assert_eq!(a.len(), b.len());
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs between runs");
    }
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    for artifact in [
        "run/loss.csv", "run/checkpoint_000003.drck", "report.json", "maps/train_0000.drt4",
    ] {
        assert!(names.contains(&artifact), "{artifact} missing from {names:?}");
        let prov = format!("{artifact}.provenance.json");
        assert!(names.contains(&prov.as_str()), "{prov} missing");
    }
    assert!(names.contains(&"ds/provenance.json"));
}

#[test]
fn provenance_records_command_config_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "12");
    let text = fs::read_to_string(dir.path().join("ds/provenance.json")).unwrap();
    let p: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(p["command"], "synth");
    assert_eq!(p["seed"], 12);
    assert_eq!(p["config"]["synth"]["train_count"], 4);
    assert_eq!(p["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn eval_and_count_after_training() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "8");
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"train": {"iterations": 2, "learning_rate": 1e-5}}"#,
    )
    .unwrap();
    let o = crowdcount(
        dir.path(),
        &[
            "--config", "cfg.json", "train", "--manifest", "ds/train.csv", "--out", "run",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains(r#""iterations":2"#));
    let loss = fs::read_to_string(dir.path().join("run/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);

    // one unreadable image is skipped, not fatal
    fs::write(dir.path().join("ds/images/test_0001.png"), b"broken").unwrap();
    let o = crowdcount(
        dir.path(),
        &[
            "--json", "eval", "--checkpoint", "run/checkpoint_000002.drck", "--manifest", "ds/test.csv", "--out",
            "r.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["n"], 1);
    assert_eq!(report["skipped"], serde_json::json!(["test_0001"]));
    assert!(report["mae"].as_f64().unwrap() <= report["mse"].as_f64().unwrap());

    let o = crowdcount(
        dir.path(),
        &[
            "count", "--checkpoint", "run/checkpoint_000002.drck", "ds/images/train_0000.png",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = stdout(&o);
    let (id, count) = line.trim().split_once('\t').unwrap();
    assert_eq!(id, "train_0000");
    assert!(count.parse::<f64>().unwrap().is_finite());
}
