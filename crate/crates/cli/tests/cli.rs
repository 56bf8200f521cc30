//! The `headkd` binary end to end: outputs, exit codes and messages.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn headkd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_headkd"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const DATA: &str = r#"version = 1

[data.synthetic]
kind = "concentric_rings"
num_classes = 4
dim = 8
samples_per_class = 40
noise_std = 0.15
seed = 1
"#;

#[test]
fn gen_data_writes_a_deterministic_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = [
        "gen-data",
        "--kind",
        "concentric_rings",
        "--num-classes",
        "4",
        "--samples-per-class",
        "200",
    ];
    let a = headkd(d, &[&args[..], &["--out", "a"]].concat());
    let b = headkd(d, &[&args[..], &["--out", "b"]].concat());
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(b.status.code(), Some(0), "{}", stderr(&b));
    assert!(stdout(&a).contains("data.csv"));
    let text = fs::read_to_string(d.join("a/data.csv")).unwrap();
    assert_eq!(text, fs::read_to_string(d.join("b/data.csv")).unwrap());
    assert_eq!(text.lines().count(), 801);
    assert!(text.starts_with("f0,f1,f2,f3,f4,f5,f6,f7,label\n"));

    let other = headkd(d, &[&args[..], &["--out", "c", "--seed", "9"]].concat());
    assert_eq!(other.status.code(), Some(0));
    assert_ne!(text, fs::read_to_string(d.join("c/data.csv")).unwrap());
}

#[test]
fn invalid_arguments_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad_kind = headkd(d, &["gen-data", "--kind", "spirals"]);
    assert_eq!(bad_kind.status.code(), Some(1));
    assert!(stderr(&bad_kind).contains("kind"), "{}", stderr(&bad_kind));

    let no_kind = headkd(d, &["gen-data"]);
    assert_eq!(no_kind.status.code(), Some(1));

    let bad_spec = headkd(
        d,
        &[
            "gen-data",
            "--kind",
            "gaussian_blobs",
            "--num-classes",
            "1",
            "--noise-std",
            "0",
        ],
    );
    assert_eq!(bad_spec.status.code(), Some(1));
    let msg = stderr(&bad_spec);
    assert!(
        msg.contains("num_classes") && msg.contains("noise_std"),
        "{msg}"
    );

    assert_eq!(headkd(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(headkd(d, &["train", "missing.toml"]).status.code(), Some(2));
    assert_eq!(headkd(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn config_problems_are_listed_together() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("bad.toml"),
        format!("{DATA}\n[student]\nhidden = [8]\nembedding_dim = 8\n[train]\nmode = \"kd\"\nalpha_th = 2.0\ntau = 0.0\n"),
    )
    .unwrap();
    let out = headkd(d, &["train", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    assert!(
        msg.contains("alpha_th") && msg.contains("tau") && msg.contains("teacher"),
        "{msg}"
    );

    fs::write(d.join("syntax.toml"), "version = = 1\n").unwrap();
    let out = headkd(d, &["train", "syntax.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("syntax.toml:1"), "{}", stderr(&out));
}

#[test]
fn train_analyze_shkd_and_ablate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("teacher.toml"),
        format!("{DATA}\n[teacher]\nhidden = [32]\nembedding_dim = 16\n[train]\nmode = \"vanilla\"\nepochs = 3\n"),
    )
    .unwrap();
    let t = headkd(d, &["train", "teacher.toml", "--out", "teacher"]);
    assert_eq!(t.status.code(), Some(0), "{}", stderr(&t));
    assert!(d.join("teacher/model.ckpt").exists());
    let report = fs::read_to_string(d.join("teacher/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 4);

    let student_cfg = format!(
        "teacher_checkpoint = \"teacher/model.ckpt\"\nseeds = [0, 1]\n{DATA}\n[student]\nhidden = [8]\nembedding_dim = 8\n\
         [train]\nmode = \"th_kd\"\nepochs = 3\n"
    );
    fs::write(d.join("student.toml"), student_cfg).unwrap();
    let s = headkd(d, &["train", "student.toml", "--out", "student"]);
    assert_eq!(s.status.code(), Some(0), "{}", stderr(&s));
    assert!(d.join("student/seed-0/model.ckpt").exists());
    assert!(d.join("student/seed-1/report.csv").exists());

    // a rerun reproduces the report byte for byte
    let again = headkd(
        d,
        &["train", "student.toml", "--out", "again", "--seed", "1"],
    );
    assert_eq!(again.status.code(), Some(0), "{}", stderr(&again));
    assert_eq!(
        fs::read(d.join("again/report.csv")).unwrap(),
        fs::read(d.join("student/seed-1/report.csv")).unwrap()
    );

    let a = headkd(
        d,
        &[
            "analyze",
            "teacher.toml",
            "--teacher",
            "teacher/model.ckpt",
            "--student",
            "student/seed-0/model.ckpt",
            "--out",
            "analysis",
        ],
    );
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert!(stdout(&a).contains("mean_angle_rad"));
    assert!(d.join("analysis/angles.csv").exists());

    let own = headkd(
        d,
        &[
            "analyze",
            "teacher.toml",
            "--teacher",
            "teacher/model.ckpt",
            "--student",
            "teacher/model.ckpt",
            "--out",
            "own",
        ],
    );
    assert_eq!(own.status.code(), Some(0));
    assert!(
        stdout(&own).contains("mean_angle_rad,0\n"),
        "{}",
        stdout(&own)
    );

    // wrong data width for the checkpoint
    fs::write(d.join("wide.toml"), DATA.replace("dim = 8", "dim = 6")).unwrap();
    let mismatch = headkd(
        d,
        &[
            "analyze",
            "wide.toml",
            "--teacher",
            "teacher/model.ckpt",
            "--student",
            "teacher/model.ckpt",
        ],
    );
    assert_eq!(mismatch.status.code(), Some(1), "{}", stderr(&mismatch));
    let msg = stderr(&mismatch);
    assert!(
        msg.contains("architecture") && msg.contains("6 features"),
        "{msg}"
    );

    let phases = "[shkd.step0]\nmode = \"vanilla\"\nepochs = 2\n[shkd.step1]\nmode = \"vanilla\"\nepochs = 2\n\
                  [shkd.step2]\nmode = \"th_kd\"\nepochs = 2\n";
    fs::write(
        d.join("shkd.toml"),
        format!("{DATA}\n[teacher]\nhidden = [32]\nembedding_dim = 16\n[student]\nhidden = [8]\nembedding_dim = 8\n{phases}\n[ablate]\ninitial_widths = [4, 4]\n"),
    )
    .unwrap();
    let sh = headkd(d, &["shkd", "shkd.toml", "--out", "shkd"]);
    assert_eq!(sh.status.code(), Some(0), "{}", stderr(&sh));
    let summary = fs::read_to_string(d.join("shkd/summary.csv")).unwrap();
    assert!(summary.contains("head_chain_ok,true"), "{summary}");
    for i in 0..3 {
        assert!(d.join(format!("shkd/step{i}.ckpt")).exists());
        assert!(d.join(format!("shkd/step{i}.csv")).exists());
    }

    let ab = headkd(d, &["ablate", "shkd.toml", "--out", "ablate"]);
    assert_eq!(ab.status.code(), Some(0), "{}", stderr(&ab));
    let table = fs::read_to_string(d.join("ablate/ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "width,teacher_test_acc,final_student_test_acc");
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1], rows[2]);
    assert!(stderr(&ab).contains("observation"));

    fs::write(
        d.join("nophase.toml"),
        format!("{DATA}\n[teacher]\nhidden = [32]\nembedding_dim = 16\n[student]\nhidden = [8]\nembedding_dim = 8\n[shkd.step0]\nmode = \"vanilla\"\n[shkd.step2]\nmode = \"th_kd\"\n"),
    )
    .unwrap();
    let missing = headkd(d, &["shkd", "nophase.toml"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(
        stderr(&missing).contains("shkd.step1: missing phase section"),
        "{}",
        stderr(&missing)
    );
}
