use std::path::Path;
use std::process::{Command, Output};

use discene::cli::model_config_for;
use discene::model::{init_params, save_checkpoint};
use discene::scene::SceneFile;
use discene::syndata::{scene_file_name, Dataset, MANIFEST};
use discene::train::{Role, TrainConfig};

fn discene(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_discene"))
        .args(args)
        .env_remove("DISCENE_THREADS")
        .output()
        .unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn gen(dir: &Path, seed: u64, count: usize) {
    let out = discene(&[
        "gen",
        "--seed",
        &seed.to_string(),
        "--count",
        &count.to_string(),
        "--out",
        &s(dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn read_log(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn report(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_count_zero_writes_only_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let out = discene(&["gen", "--count", "0", "--out", &s(&data)]);
    assert_eq!(out.status.code(), Some(0));
    let names: Vec<_> = std::fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(names, vec![std::ffi::OsString::from(MANIFEST)]);
    assert!(Dataset::load(&data).unwrap().is_empty());
}

#[test]
fn gen_is_deterministic_and_paper_grid_has_benchmark_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    gen(&a, 3, 2);
    gen(&b, 3, 2);
    for f in [MANIFEST.to_string(), scene_file_name(0), scene_file_name(1)] {
        assert_eq!(
            std::fs::read(a.join(&f)).unwrap(),
            std::fs::read(b.join(&f)).unwrap(),
            "{f}"
        );
    }

    let p = dir.path().join("p");
    let out = discene(&["gen", "--count", "1", "--grid", "paper", "--out", &s(&p)]);
    assert!(out.status.success());
    let scene = SceneFile::read(&p.join(scene_file_name(0))).unwrap();
    assert_eq!(scene.grid.spec.dims, [60, 60, 36]);
    assert!((scene.grid.spec.voxel_size - 0.08).abs() < 1e-7);
}

#[test]
fn student_without_teacher_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    gen(&data, 0, 2);
    let out = discene(&[
        "train",
        "--role",
        "student",
        "--data",
        &s(&data),
        "--out",
        &s(&dir.path().join("s.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("teacher"));
    assert!(!dir.path().join("s.ckpt").exists());
}

#[test]
fn usage_and_data_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(discene(&["gen", "--bogus"]).status.code(), Some(1));
    assert_eq!(discene(&["frobnicate"]).status.code(), Some(1));

    let data = dir.path().join("d");
    gen(&data, 0, 1);
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = discene(&[
        "eval",
        "--ckpt",
        &s(&junk),
        "--data",
        &s(&data),
        "--report",
        &s(&dir.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let missing = discene(&[
        "eval",
        "--ckpt",
        &s(&junk),
        "--data",
        &s(&dir.path().join("nope")),
        "--report",
        "r.json",
    ]);
    assert_eq!(missing.status.code(), Some(2));

    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"epochs": 1, "colour": "red"}"#).unwrap();
    let out = discene(&[
        "train",
        "--data",
        &s(&data),
        "--out",
        &s(&dir.path().join("t.ckpt")),
        "--config",
        &s(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_command() {
    let ok = discene(&["gradcheck", "--component", "chamfer", "--trials", "2"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("chamfer    PASS"));

    let bad = discene(&["gradcheck", "--component", "nonsense"]);
    assert_ne!(bad.status.code(), Some(0));
    let msg = String::from_utf8_lossy(&bad.stderr);
    for name in ["chamfer", "focal", "ql", "full"] {
        assert!(msg.contains(name), "{msg}");
    }
}

#[test]
fn train_and_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    gen(&data, 11, 3);
    let teacher = dir.path().join("t.ckpt");
    let out = discene(&[
        "train",
        "--role",
        "teacher",
        "--data",
        &s(&data),
        "--out",
        &s(&teacher),
        "--epochs",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_log(&dir.path().join("t.ckpt.log.jsonl")).len(), 2);

    // empty level list: a baseline student with zero distillation terms
    let student = dir.path().join("s.ckpt");
    let log = dir.path().join("s.jsonl");
    let out = discene(&[
        "train",
        "--role",
        "student",
        "--data",
        &s(&data),
        "--out",
        &s(&student),
        "--log",
        &s(&log),
        "--epochs",
        "2",
        "--teacher-ckpt",
        &s(&teacher),
        "--distill",
        "",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for rec in read_log(&log) {
        for key in ["l_efa", "l_ql", "l_pl", "l_al"] {
            assert_eq!(rec[key].as_f64(), Some(0.0), "{key}");
        }
        assert_eq!(rec["total"], rec["l_task"]);
    }

    let full_log = dir.path().join("f.jsonl");
    let out = discene(&[
        "train",
        "--role",
        "student",
        "--data",
        &s(&data),
        "--out",
        &s(&dir.path().join("f.ckpt")),
        "--log",
        &s(&full_log),
        "--epochs",
        "1",
        "--teacher-ckpt",
        &s(&teacher),
        "--distill",
        "efa,ql,pl,al",
        "--tgi",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(read_log(&full_log)[0]["l_ql"].as_f64().unwrap() > 0.0);

    let rpath = dir.path().join("r.json");
    let out = discene(&[
        "eval",
        "--ckpt",
        &s(&student),
        "--data",
        &s(&data),
        "--report",
        &s(&rpath),
    ]);
    assert!(out.status.success());
    let r = report(&rpath);
    for key in ["iou", "miou", "per_class_iou"] {
        assert!(r.get(key).is_some(), "{key}");
    }
    let echoed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(echoed, r);

    let out = discene(&[
        "eval",
        "--ckpt",
        &s(&student),
        "--data",
        &s(&data),
        "--report",
        &s(&rpath),
        "--threshold",
        "1.1",
    ]);
    assert!(out.status.success());
    assert_eq!(report(&rpath)["iou"].as_f64(), Some(0.0));
}

#[test]
fn overfit_checkpoint_beats_random_init() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    gen(&data, 21, 1);
    let trained = dir.path().join("t.ckpt");
    let out = discene(&[
        "train",
        "--role",
        "teacher",
        "--data",
        &s(&data),
        "--out",
        &s(&trained),
        "--epochs",
        "60",
        "--lr",
        "3e-3",
        "--batch-size",
        "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = TrainConfig {
        role: Role::Teacher,
        ..TrainConfig::default()
    };
    let dataset = Dataset::load(&data).unwrap();
    let config = model_config_for(&cfg, &dataset).unwrap();
    let random = dir.path().join("r.ckpt");
    save_checkpoint(&init_params(&config, 99).unwrap(), &random).unwrap();

    let iou = |ckpt: &Path| {
        let rpath = dir.path().join("rep.json");
        let out = discene(&["eval", "--ckpt", &s(ckpt), "--data", &s(&data), "--report", &s(&rpath)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        report(&rpath)["iou"].as_f64().unwrap()
    };
    let (a, b) = (iou(&trained), iou(&random));
    assert!(a > b, "trained {a} vs random {b}");
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    gen(&data, 4, 2);
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"epochs": 1, "batch_size": 1}"#).unwrap();

    let from_file = dir.path().join("a.jsonl");
    let out = discene(&[
        "train",
        "--data",
        &s(&data),
        "--out",
        &s(&dir.path().join("a.ckpt")),
        "--log",
        &s(&from_file),
        "--config",
        &s(&cfg),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_log(&from_file).len(), 1);

    let flagged = dir.path().join("b.jsonl");
    let out = discene(&[
        "train",
        "--data",
        &s(&data),
        "--out",
        &s(&dir.path().join("b.ckpt")),
        "--log",
        &s(&flagged),
        "--config",
        &s(&cfg),
        "--epochs",
        "2",
    ]);
    assert!(out.status.success());
    assert_eq!(read_log(&flagged).len(), 2);
}

#[test]
fn threads_flag_and_env_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    gen(&data, 8, 3);
    let train = |name: &str, extra: &[&str], env: Option<&str>| {
        let ckpt = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_discene"));
        cmd.args(["train", "--data", &s(&data), "--out", &s(&ckpt), "--epochs", "1"])
            .args(extra);
        cmd.env_remove("DISCENE_THREADS");
        if let Some(v) = env {
            cmd.env("DISCENE_THREADS", v);
        }
        assert!(cmd.output().unwrap().status.success());
        std::fs::read(ckpt).unwrap()
    };
    let a = train("a.ckpt", &[], None);
    assert_eq!(a, train("b.ckpt", &["--threads", "1"], None));
    assert_eq!(a, train("c.ckpt", &[], Some("2")));
    let bad = discene(&["--threads", "x", "gradcheck"]);
    assert_eq!(bad.status.code(), Some(1));
}
