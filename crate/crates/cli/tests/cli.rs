use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn spreadnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spreadnet"))
        .args(args)
        .output()
        .expect("spawn spreadnet")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if path.is_dir() {
            for (k, v) in contents(&path) {
                out.insert(format!("{name}/{k}"), v);
            }
        } else {
            out.insert(name, fs::read(&path).unwrap());
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 6] = ["--set", "n_lat=8", "--set", "n_lon=8", "--set", "spinup_steps=200"];

fn small_dataset(dir: &Path, samples: &str) {
    let mut args = vec!["gen", "--samples", samples, "--seed", "3", "--out", s(dir)];
    args.extend(SMALL);
    let out = spreadnet(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = spreadnet(&["stats", "--data", s(dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn gradcheck_prints_one_line_per_layer() {
    let out = spreadnet(&["gradcheck", "--seed", "7"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 8, "{text}");
    for line in lines {
        let err: f64 = line.split_whitespace().nth(2).unwrap().parse().unwrap();
        assert!(err < 1e-6, "{line}");
        assert!(line.contains("max_rel_error") && line.ends_with("ok"), "{line}");
    }
}

#[test]
fn gen_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let out = spreadnet(&["gen", "--samples", "10", "--seed", "1", "--out", s(d)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let (ca, cb) = (contents(&a), contents(&b));
    assert_eq!(ca.len(), 21);
    assert!(ca == cb, "directories differ");
    // A different seed changes the samples.
    let c = tmp.path().join("c");
    spreadnet(&["gen", "--samples", "10", "--seed", "2", "--out", s(&c)]);
    assert_ne!(contents(&c)["s000000.esg"], ca["s000000.esg"]);
}

#[test]
fn train_with_missing_manifest_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere").join("manifest.txt");
    let out = spreadnet(&[
        "train",
        "--data",
        s(tmp.path()),
        "--manifest",
        s(&missing),
        "--out",
        s(&tmp.path().join("run")),
    ]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("train") && err.contains(s(&missing)), "{err}");
    // The default manifest location is reported the same way.
    let out = spreadnet(&["train", "--data", s(tmp.path()), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(code(&out), 1);
    assert!(
        stderr(&out).contains(s(&tmp.path().join("manifest.txt"))),
        "{}",
        stderr(&out)
    );
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = spreadnet(&["frobnicate"]);
    assert_eq!(code(&out), 1);
    let out = spreadnet(&["gen", "--out", s(tmp.path()), "--set", "colour=blue"]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("gen") && err.contains("colour") && err.contains("valid keys") && err.contains("n_lat"));
    let cfg = tmp.path().join("gen.txt");
    fs::write(&cfg, "members=10\nwind=3\n").unwrap();
    let out = spreadnet(&["gen", "--out", s(tmp.path()), "--config", s(&cfg)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
    let out = spreadnet(&[
        "gen",
        "--out",
        s(tmp.path()),
        "--config",
        s(&tmp.path().join("absent.txt")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("absent.txt"));
    let out = spreadnet(&["gen", "--out", s(tmp.path()), "--set", "members=lots"]);
    assert_eq!(code(&out), 1);
    let out = spreadnet(&["train", "--help"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("--config"));
}

#[test]
fn runtime_errors_exit_two_and_name_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    small_dataset(&d, "5");
    let manifest = fs::read_to_string(d.join("manifest.txt")).unwrap();
    let mut lines = manifest.lines().skip_while(|l| *l != "[train]");
    let id = lines.nth(1).unwrap();
    let path = d.join(format!("{id}.esg"));
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let out = spreadnet(&["stats", "--data", s(&d), "--out", s(&tmp.path().join("st.txt"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).starts_with("spreadnet stats:"), "{}", stderr(&out));
}

#[test]
fn config_file_is_overridden_by_set_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("gen.txt");
    fs::write(&cfg, "seed=9\nn_lat=8\nn_lon=8\nspinup_steps=50\nmembers=3\n").unwrap();
    let a = tmp.path().join("a");
    let out = spreadnet(&[
        "gen",
        "--samples",
        "3",
        "--seed",
        "4",
        "--set",
        "members=4",
        "--config",
        s(&cfg),
        "--out",
        s(&a),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let b = tmp.path().join("b");
    let out = spreadnet(&[
        "gen",
        "--samples",
        "3",
        "--set",
        "seed=4",
        "--set",
        "n_lat=8",
        "--set",
        "n_lon=8",
        "--set",
        "spinup_steps=50",
        "--set",
        "members=4",
        "--out",
        s(&b),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(contents(&a) == contents(&b));
}

#[test]
fn split_matches_the_manifest_written_by_gen() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    let mut args = vec!["gen", "--samples", "20", "--out", s(&d), "--set", "split_seed=5"];
    args.extend(SMALL);
    assert_eq!(code(&spreadnet(&args)), 0);
    let m = tmp.path().join("m.txt");
    let out = spreadnet(&["split", "--data", s(&d), "--seed", "5", "--out", s(&m)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(&m).unwrap(), fs::read(d.join("manifest.txt")).unwrap());
    // 20 samples over 10 epochs: tags 8 and 9 are test, 16 remain, 12 train.
    assert!(stdout(&out).contains("train 12, val 4, test 4"), "{}", stdout(&out));
}

#[test]
fn pipeline_is_bitwise_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for name in ["one", "two"] {
        let root = tmp.path().join(name);
        let d = root.join("data");
        small_dataset(&d, "10");
        let r = root.join("run");
        let out = spreadnet(&[
            "train",
            "--data",
            s(&d),
            "--out",
            s(&r),
            "--seed",
            "2",
            "--steps",
            "12",
            "--set",
            "base_channels=4",
            "--set",
            "depth=1",
            "--set",
            "batch_size=2",
            "--set",
            "n_workers=2",
            "--set",
            "checkpoint_every=4",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert!(stdout(&out).contains("step 12"));
        let e = root.join("eval");
        let out = spreadnet(&[
            "eval",
            "--data",
            s(&d),
            "--checkpoint",
            s(&r.join("best.ckpt")),
            "--out",
            s(&e),
            "--set",
            "heatmap_level=1",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert!(stdout(&out).contains("run/best") && stdout(&out).contains("linear"));
        let b = root.join("baseline");
        let out = spreadnet(&["baseline", "--data", s(&d), "--out", s(&b)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        runs.push(contents(&root));
    }
    let files: Vec<&String> = runs[0].keys().collect();
    for f in [
        "run/best.ckpt",
        "run/curve.csv",
        "run/inputs.txt",
        "eval/report.csv",
        "baseline/linear.txt",
    ] {
        assert!(runs[0].contains_key(f), "{f} missing from {files:?}");
    }
    assert!(runs[0].keys().any(|k| k.starts_with("eval/heatmaps/")));
    assert!(runs[0] == runs[1], "runs differ");
    // The linear rows agree between eval and baseline.
    let row = |k: &str| {
        let text = String::from_utf8(runs[0][k].clone()).unwrap();
        text.lines().find(|l| l.starts_with("linear,")).unwrap().to_string()
    };
    assert_eq!(row("eval/report.csv"), row("baseline/report.csv"));
}
