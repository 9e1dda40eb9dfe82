use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dsnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsnet")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_small(out: &Path, extra: &[&str]) -> Output {
    let out = out.to_str().unwrap();
    let mut args = vec![
        "-q", "train", "--synthetic", "48", "--blocks", "1,1", "--base-width", "4", "--width", "1", "--iterations", "6",
        "--batch-size", "16", "--seed", "2", "--out", out,
    ];
    args.extend_from_slice(extra);
    dsnet(&args)
}

#[test]
fn analyze_reports_reference_counts() {
    let o = dsnet(&["analyze"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("25557032"), "{text}");
    assert!(text.contains("25344") && text.contains("31680"));

    let o = dsnet(&["analyze", "--variant", "dsnet", "--all-depths", "--csv"]);
    let csv = stdout(&o);
    assert!(csv.starts_with("variant,depth,width,params,shortcut_params,gflops,activation_mb\n"));
    assert_eq!(csv.lines().count(), 1 + 5);
}

#[test]
fn verify_passes() {
    let o = dsnet(&["verify", "--cases", "20"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("all checks passed"));
}

#[test]
fn gradcheck_exit_code_follows_result() {
    let ok = dsnet(&["gradcheck", "--variant", "ds2net", "--coords", "5"]);
    assert!(ok.status.success(), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("PASS"));
    let strict = dsnet(&["gradcheck", "--variant", "dsnet", "--coords", "5", "--tol", "1e-30"]);
    assert_eq!(strict.status.code(), Some(1));
    assert!(stdout(&strict).contains("FAIL"));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = train_small(&run, &["--variant", "dsnet-a", "--precision", "f64"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["final.dsnt", "metrics.csv", "run.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ckpt = run.join("final.dsnt");
    let o = dsnet(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--synthetic", "48", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["images"], 12);
    assert!(v["top5_err"].as_f64().unwrap() <= v["top1_err"].as_f64().unwrap());

    // the written run file reproduces the run
    let again = dir.path().join("again");
    let cfg = run.join("run.json");
    let o = dsnet(&[
        "-q", "train", "--config", cfg.to_str().unwrap(), "--synthetic", "48", "--out", again.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(again.join("final.dsnt")).unwrap());
}

#[test]
fn errors_exit_nonzero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.dsnt");
    fs::write(&bogus, b"JUNKJUNKJUNK").unwrap();
    let o = dsnet(&["eval", "--checkpoint", bogus.to_str().unwrap(), "--synthetic", "8"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));

    fs::write(dir.path().join("data_batch_1.bin"), vec![0u8; 3072]).unwrap();
    let o = dsnet(&["train", "--data-dir", dir.path().to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("truncated"), "{}", stderr(&o));

    let o = dsnet(&["analyze", "--variant", "densenet"]);
    assert!(!o.status.success());
    let o = dsnet(&["analyze", "--depth", "27"]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"network": {"variant": "dsnet", "widht": 0.5}}"#).unwrap();
    let o = dsnet(&["analyze", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("widht"), "{}", stderr(&o));
}

#[test]
fn deterministic_flag_runs_identically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(train_small(&a, &["--variant", "ds2net", "--deterministic"]).status.success());
    assert!(train_small(&b, &["--variant", "ds2net"]).status.success());
    assert_eq!(fs::read(a.join("final.dsnt")).unwrap(), fs::read(b.join("final.dsnt")).unwrap());
}
