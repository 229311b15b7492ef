//! Drives the `tplab` binary: training, recipe runs, exit codes and
//! reproducibility of the written tables.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tplab_harness::Recipe;

fn tplab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tplab"))
        .args(args)
        .env("TPLAB_THREADS", "1")
        .output()
        .expect("spawn tplab")
}

fn train_small(dir: &Path) -> PathBuf {
    let ckpt = dir.join("small.bin");
    let out = tplab(&[
        "train",
        "--task",
        "direction",
        "--out",
        ckpt.to_str().unwrap(),
        "--steps",
        "10",
        "--set",
        "n_layers=2",
        "--set",
        "train_size=100",
        "--set",
        "eval_size=16",
        "--set",
        "target_accuracy=none",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    ckpt
}

fn run_recipe(ckpt: &Path, recipe: &str, out_dir: &Path) -> Output {
    tplab(&[
        "run",
        "--recipe",
        recipe,
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--n-samples",
        "12",
    ])
}

#[test]
fn recipe_names_are_unique_and_listed() {
    let names: std::collections::BTreeSet<_> = Recipe::ALL.iter().map(|r| r.name()).collect();
    assert_eq!(names.len(), 9);
    let out = tplab(&["recipes"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for r in Recipe::ALL {
        assert_eq!(r.name().parse::<Recipe>().unwrap(), r);
        assert!(text.contains(r.name()), "{} missing from listing", r.name());
    }
}

#[test]
fn unknown_recipe_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_recipe(&dir.path().join("none.bin"), "fig99_nothing", dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_recipe(&dir.path().join("none.bin"), "fig4_reverse", dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn output_errors_and_reproducible_tables() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(dir.path());

    let blocker = dir.path().join("plain_file");
    std::fs::write(&blocker, "x").unwrap();
    let out = run_recipe(&ckpt, "fig4_reverse", &blocker.join("sub"));
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    let mismatch = tplab(&[
        "run",
        "--recipe",
        "fig4_reverse",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "n_layers=3",
    ]);
    assert_eq!(mismatch.status.code(), Some(3));

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = run_recipe(&ckpt, "fig4_reverse", d);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["fig4_reverse.csv", "fig4_reverse.json"] {
        let x = std::fs::read(a.join(file)).unwrap();
        let y = std::fs::read(b.join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between runs");
    }

    let csv = std::fs::read_to_string(a.join("fig4_reverse.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("recipe,task,condition,window,mean_pc,n"));
    let conditions: Vec<&str> = lines.map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(conditions, ["reverse_order", "reverse_pe"]);
    assert!(!csv.contains('\r'));

    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("fig4_reverse.json")).unwrap()).unwrap();
    assert_eq!(meta["recipe"], "fig4_reverse");
    assert_eq!(meta["n_samples"], 12);
}

#[test]
fn every_recipe_runs_on_a_small_model() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(dir.path());
    for r in Recipe::ALL {
        let out = run_recipe(&ckpt, r.name(), &dir.path().join("all"));
        assert!(
            out.status.success(),
            "{}: {}",
            r.name(),
            String::from_utf8_lossy(&out.stderr)
        );
        let csv = std::fs::read_to_string(dir.path().join("all").join(format!("{}.csv", r.name()))).unwrap();
        assert!(csv.lines().count() > 1, "{} wrote no rows", r.name());
    }
}
