use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_desknmt"));
    c.env("DESKNMT_WORKERS", "1");
    c
}

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/tiny.toml")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}\t")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
}

#[test]
fn evaluate_self_is_100() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("ref.txt");
    fs::write(&f, "the cat sat down\na b c d e\n").unwrap();
    let out = ok(&[
        "evaluate",
        "--candidate",
        f.to_str().unwrap(),
        "--reference",
        f.to_str().unwrap(),
    ]);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!((row[0], row[7]), ("ref.txt", "100.00"), "{out}");
    let out = ok(&[
        "--format",
        "json-text",
        "evaluate",
        "--metric",
        "chrf",
        "--candidate",
        f.to_str().unwrap(),
        "--reference",
        f.to_str().unwrap(),
    ]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["chrf3"], 100.0);
}

#[test]
fn exit_codes() {
    // usage errors
    assert_eq!(run(&["no-such-verb"]).status.code(), Some(1));
    assert_eq!(run(&["--format", "xml", "evaluate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    // configuration errors
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "name = \"x\"\n").unwrap();
    assert_eq!(
        run(&["vocab", "--config", bad.to_str().unwrap()]).status.code(),
        Some(1)
    );
    let o = bin()
        .env("DESKNMT_WORKERS", "zero")
        .args(["vocab", "--config", tiny().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    // data errors
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    fs::write(&a, "x\ny\n").unwrap();
    fs::write(&b, "x\n").unwrap();
    let o = run(&[
        "evaluate",
        "--candidate",
        a.to_str().unwrap(),
        "--reference",
        b.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alignment"));
    let missing = dir.path().join("missing.txt");
    assert_eq!(
        run(&[
            "evaluate",
            "--candidate",
            missing.to_str().unwrap(),
            "--reference",
            b.to_str().unwrap()
        ])
        .status
        .code(),
        Some(2)
    );
    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = run(&[
        "decode",
        "--checkpoint",
        junk.to_str().unwrap(),
        "--vocab",
        a.to_str().unwrap(),
        "--input",
        a.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn significance_and_annotation() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str, t: &str| {
        let f = dir.path().join(n);
        fs::write(&f, t).unwrap();
        f.to_str().unwrap().to_string()
    };
    let r = p("r", "a b c\nd e f\ng h i\nj k\n");
    let s = p("s", "a b x\nd e f\ny h i\nj\n");
    let out = ok(&[
        "--format",
        "json-text",
        "significance",
        "--a",
        &s,
        "--b",
        &s,
        "--reference",
        &r,
    ]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["significant"], false);
    let imp = p("i", "a b c\n");
    let base = p("b", "a x\n");
    let refs = p("rr", "b y\n");
    let out = ok(&["analyze", "--improved", &imp, "--baseline", &base, "--reference", &refs]);
    assert_eq!(field(&out, "total"), "3\t100.0");
    assert_eq!(field(&out, "-"), "1\t33.3");
    // mixing the two analyze modes is a usage error
    let o = run(&["analyze", "--config", tiny().to_str().unwrap(), "--improved", &imp]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verify_fixtures_verb() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let out = ok(&["verify-fixtures", "--dir", dir.to_str().unwrap()]);
    assert!(out.contains("fixtures passed"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn pipeline_end_to_end() {
    let out_dir = tempfile::tempdir().unwrap();
    let o = out_dir.path().to_str().unwrap();
    let cfg = tiny();
    let c = cfg.to_str().unwrap();
    let v = ok(&["--out", o, "vocab", "--config", c]);
    let exp_dir = PathBuf::from(field(&v, "dir"));
    assert!(exp_dir.join("vocab.txt").is_file());
    ok(&["--out", o, "train-parent", "--config", c]);
    let t = ok(&["--out", o, "transfer", "--config", c]);
    assert!(t.contains("child\tbest_dev_bleu"));
    ok(&["--out", o, "transfer", "--config", c, "--reset-schedule"]);
    ok(&["--out", o, "baseline", "--config", c]);
    for f in [
        "parent.ckpt",
        "child.ckpt",
        "child-reset.ckpt",
        "baseline-best.ckpt",
        "child-test.out",
        "manifest.json",
    ] {
        assert!(exp_dir.join(f).is_file(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(exp_dir.join("manifest.json")).unwrap()).unwrap();
    for cmd in ["vocab", "train-parent", "transfer", "transfer-reset", "baseline"] {
        assert!(manifest["commands"][cmd].is_object(), "{cmd}");
    }
    // decoding the test set with the best child reproduces the saved outputs
    let p = |n: &str| exp_dir.join(n).to_str().unwrap().to_string();
    let dec = ok(&[
        "decode",
        "--checkpoint",
        &p("child-best.ckpt"),
        "--vocab",
        &p("vocab.txt"),
        "--input",
        &p("child-test.src"),
        "--beam-size",
        "2",
        "--max-output-len",
        "20",
    ]);
    assert_eq!(dec, fs::read_to_string(exp_dir.join("child-test.out")).unwrap());
    let ev = ok(&[
        "evaluate",
        "--candidate",
        &p("child-test.out"),
        "--reference",
        &p("child-test.ref"),
    ]);
    assert!(ev.starts_with("system\tlength\tp1"));
    let an = ok(&["--out", o, "analyze", "--config", c]);
    assert!(an.lines().last().unwrap().starts_with("from_parent"));
    // a different seed is a different experiment directory
    let v2 = ok(&["--out", o, "--seed-override", "99", "vocab", "--config", c]);
    assert_ne!(field(&v2, "dir"), field(&v, "dir"));
    // a vocabulary from another experiment is refused
    let other = PathBuf::from(field(&v2, "dir")).join("vocab.txt");
    let r = run(&[
        "decode",
        "--checkpoint",
        &p("child-best.ckpt"),
        "--vocab",
        other.to_str().unwrap(),
        "--input",
        &p("child-test.src"),
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn run_matrix_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tiny();
    let ra = ok(&[
        "--out",
        a.path().to_str().unwrap(),
        "run-matrix",
        "--config",
        c.to_str().unwrap(),
    ]);
    let rb = bin()
        .env("DESKNMT_WORKERS", "2")
        .args([
            "--out",
            b.path().to_str().unwrap(),
            "run-matrix",
            "--config",
            c.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(rb.status.success());
    let strip = |s: &str| {
        s.lines()
            .filter(|l| !l.starts_with("dir\t"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&ra), strip(&stdout(&rb)));
    let da = PathBuf::from(field(&ra, "dir"));
    let db = b.path().join(da.file_name().unwrap());
    for f in ["manifest.json", "rows.tsv", "summary.tsv", "curves.tsv"] {
        assert_eq!(fs::read(da.join(f)).unwrap(), fs::read(db.join(f)).unwrap(), "{f}");
    }
}
