use std::path::Path;
use std::process::Command;

fn ghs(out: &Path, args: &[&str]) -> String {
    let o = Command::new(env!("CARGO_BIN_EXE_ghs"))
        .args(["--threads", "1", "--out"])
        .arg(out)
        .args(args)
        .output()
        .expect("spawn ghs");
    assert!(o.status.success(), "ghs {args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn synthetic_fit_and_render() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ghs(&data, &["make-synthetic", "--frames", "12", "--size", "32"]);
    for f in ["sequence.jsonl", "train.jsonl", "test.jsonl", "homographies.json", "images/00000.png", "masks/00011.png"] {
        assert!(data.join(f).exists(), "{f} missing");
    }
    let train = data.join("train.jsonl");
    assert_eq!(std::fs::read_to_string(&train).unwrap().lines().count(), 10);

    let fit = dir.path().join("fit");
    ghs(&fit, &["fit", "--sequence", train.to_str().unwrap(), "--until-stage", "1"]);
    for f in ["avatar.ghsa", "checkpoint.ghsa", "log.csv"] {
        assert!(fit.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(fit.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 401, "header plus one row per stage-1 iteration");

    let renders = dir.path().join("renders");
    let test = data.join("test.jsonl");
    let out = ghs(
        &renders,
        &["render", "--avatar", fit.join("avatar.ghsa").to_str().unwrap(), "--sequence", test.to_str().unwrap()],
    );
    assert!(out.starts_with("mean PSNR"), "{out}");
    assert_eq!(std::fs::read_dir(&renders).unwrap().count(), 2);
}

#[test]
fn bake_requires_anchors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ghs(&data, &["make-synthetic", "--frames", "6", "--size", "24"]);
    let fit = dir.path().join("fit");
    let seq = data.join("sequence.jsonl");
    ghs(&fit, &["fit", "--sequence", seq.to_str().unwrap(), "--until-stage", "1"]);
    let o = Command::new(env!("CARGO_BIN_EXE_ghs"))
        .args(["--out"])
        .arg(dir.path().join("a.baked"))
        .args(["bake", "--avatar"])
        .arg(fit.join("avatar.ghsa"))
        .arg("--sequence")
        .arg(&seq)
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no anchors"));
}
