use std::path::Path;
use std::process::{Command, Output};

fn mtvnet(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtvnet"))
        .args(args)
        .env("MTVNET_DATA_DIR", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn summary(o: &Output) -> String {
    stdout(o).lines().last().unwrap_or_default().to_string()
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

const MAKE: [&str; 11] = [
    "make-data", "--generator", "trabecular", "--count", "4", "--edge", "32", "--scale", "2", "--seed", "7",
];

#[test]
fn make_data_writes_paired_stores_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtvnet(dir.path(), &MAKE);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(summary(&out).starts_with("ok command=make-data hr=4 lr=4"));
    let hr = dir.path().join("synthetic/hr");
    let lr = dir.path().join("synthetic/lr_x2");
    assert_eq!(files(&hr).len(), 4);
    assert_eq!(files(&hr), files(&lr));
    let before: Vec<Vec<u8>> = files(&hr).iter().map(|f| std::fs::read(hr.join(f)).unwrap()).collect();
    assert!(mtvnet(dir.path(), &MAKE).status.success());
    let after: Vec<Vec<u8>> = files(&hr).iter().map(|f| std::fs::read(hr.join(f)).unwrap()).collect();
    assert_eq!(before, after);
    // a smaller rerun leaves no stale volumes behind
    let mut fewer = MAKE;
    fewer[4] = "2";
    assert!(mtvnet(dir.path(), &fewer).status.success());
    assert_eq!(files(&hr).len(), 2);
}

#[test]
fn usage_and_runtime_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing_scale = mtvnet(dir.path(), &["make-data", "--generator", "noise"]);
    assert_eq!(missing_scale.status.code(), Some(2));
    let unknown = mtvnet(dir.path(), &["make-data", "--generator", "marble", "--scale", "2"]);
    assert_eq!(unknown.status.code(), Some(1));
    let both = mtvnet(dir.path(), &["eval", "--model", "trilinear", "--ckpt", "last"]);
    assert_eq!(both.status.code(), Some(2));
    let no_ckpt = mtvnet(dir.path(), &["eval", "--ckpt", "last"]);
    assert_eq!(no_ckpt.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&no_ckpt.stderr).contains("checkpoint"));
    let no_data = mtvnet(dir.path(), &["train", "--steps", "2"]);
    assert_eq!(no_data.status.code(), Some(1));
}

#[test]
fn help_lists_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    let help = stdout(&mtvnet(dir.path(), &["train", "--help"]));
    for flag in ["--config", "--preset", "--set", "--steps", "--seed", "--data", "--run", "--resume", "--data-dir"] {
        assert!(help.contains(flag), "train --help lacks {flag}");
    }
    let help = stdout(&mtvnet(dir.path(), &["eval", "--help"]));
    for flag in ["--model", "--ckpt", "--scale", "--tile", "--no-padding", "--out"] {
        assert!(help.contains(flag), "eval --help lacks {flag}");
    }
}

#[test]
fn trilinear_evaluation_needs_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert!(mtvnet(dir.path(), &MAKE).status.success());
    let out = mtvnet(dir.path(), &["eval", "--model", "trilinear"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&out);
    assert!(s.starts_with("ok command=eval model=trilinear volumes=4 psnr="), "{s}");
    let report = std::fs::read_to_string(dir.path().join("synthetic/eval_trilinear_x2.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 4 + 1);
}

#[test]
fn train_resume_eval_and_lam_on_a_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert!(mtvnet(root, &["make-data", "--generator", "ellipsoid", "--count", "1", "--edge", "32", "--scale", "2"])
        .status
        .success());
    let tiny = [
        "--set", "model.embed_dim=8", "--set", "model.skip_dim=4", "--set", "model.level.0.context=8",
    ];
    let mut args = vec!["train", "--preset", "desk", "--steps", "4", "--seed", "1"];
    args.extend(tiny);
    let out = mtvnet(root, &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(summary(&out).starts_with("ok command=train iterations=4"));
    let run = root.join("runs/default");
    for f in ["config.cfg", "last.mtvckpt", "loss.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let mut resume = vec!["train", "--preset", "desk", "--steps", "6", "--seed", "1", "--resume"];
    resume.extend(tiny);
    let out = mtvnet(root, &resume);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(summary(&out).starts_with("ok command=train iterations=6"));
    let losses = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 6);

    let out = mtvnet(root, &["eval", "--ckpt", "last"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("eval_synthetic.csv").exists());

    let out = mtvnet(root, &["lam", "--ckpt", "last", "--steps", "8", "--box-size", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(summary(&out).starts_with("ok command=lam di="));
    for f in ["lam.csv", "lam.png", "attribution.mtvvol", "summary.txt"] {
        assert!(run.join("lam").join(f).exists(), "{f} missing");
    }
}

#[test]
fn profile_of_the_three_level_preset_has_one_row_per_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtvnet(dir.path(), &["profile", "--preset", "L3", "--resolutions", "16,32,48,64,128"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("profile/profile.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
    assert!(csv.lines().last().unwrap().starts_with("L3,128,true,128;64;32,4096;4096;4096"));
    assert!(dir.path().join("profile/profile.png").exists());
}
