use std::fs;
use std::path::{Path, PathBuf};

use incgan_cli::main_with_args;

/// A stream small enough to train in well under a second.
const TINY: &[&str] = &[
    "image_size=8",
    "train_count=12",
    "val_count=6",
    "test_count=6",
    "max_epochs=2",
    "conv_width=4",
    "feature_dim=8",
    "batch_size=8",
    "architectures=3",
    "memory_budget=12",
];

fn incgan(args: &[&str]) -> i32 {
    let mut argv = vec!["incgan".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    main_with_args(argv)
}

fn tiny(command: &str, out: &Path, extra: &[&str]) -> i32 {
    let out = out.to_str().unwrap();
    let mut args = vec![command, "--out", out];
    for kv in TINY.iter().chain(extra) {
        args.extend(["--set", kv]);
    }
    incgan(&args)
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn rows(p: impl AsRef<Path>) -> Vec<Vec<String>> {
    read(p)
        .lines()
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn run_writes_one_row_per_step_and_a_square_confusion() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tiny("run", dir.path(), &["variant=mt_mc"]), 0);
    let m = rows(dir.path().join("metrics.csv"));
    assert_eq!(m.len(), 4);
    assert_eq!(
        m[0].join(","),
        "step,seen_architectures,detection_acc,detection_arch0,detection_arch1,detection_arch2,\
         classification_acc,aux_detector_acc,epochs_run"
    );
    for (i, row) in m[1..].iter().enumerate() {
        assert_eq!(row[0], (i + 1).to_string());
        assert_eq!(row.len(), m[0].len());
        // four decimals everywhere a number is reported
        assert!(row[2].len() == 6 && row[2].contains('.'), "{row:?}");
    }
    let c = rows(dir.path().join("confusion.csv"));
    assert_eq!(c.len(), 4);
    assert!(c.iter().all(|r| r.len() == 4));
    let svg = read(dir.path().join("detection.svg"));
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(dir.path().join("checkpoint").is_dir());
}

#[test]
fn resolved_config_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(tiny("run", &a, &["seed=3"]), 0);
    let config = a.join("config.txt");
    assert_eq!(
        incgan(&["run", "--config", config.to_str().unwrap(), "--out", b.to_str().unwrap()]),
        0
    );
    for f in ["metrics.csv", "confusion.csv", "epochs.csv", "detection.svg"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(tiny("run", &a, &[]), 0);
    let out = b.to_str().unwrap().to_string();
    let mut args = vec!["run", "--out", &out, "--seed", "9"];
    for kv in TINY {
        args.extend(["--set", kv]);
    }
    assert_eq!(incgan(&args), 0);
    assert!(read(b.join("config.txt")).contains("seed = 9"));
    assert_ne!(read(a.join("epochs.csv")), read(b.join("epochs.csv")));
}

#[test]
fn generated_container_matches_in_memory_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("nested").join("data");
    assert_eq!(tiny("gen-data", &data, &[]), 0);
    let manifest = read(data.join("manifest.csv"));
    // 3 architectures, 2 origins, 24 samples each
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 144);

    let again = dir.path().join("again");
    assert_eq!(tiny("gen-data", &again, &[]), 0);
    assert_eq!(manifest, read(again.join("manifest.csv")));

    let (from_disk, in_memory) = (dir.path().join("disk"), dir.path().join("memory"));
    let data_dir = format!("data_dir={}", data.display());
    assert_eq!(tiny("run", &from_disk, &[&data_dir]), 0);
    assert_eq!(tiny("run", &in_memory, &[]), 0);
    assert_eq!(read(from_disk.join("metrics.csv")), read(in_memory.join("metrics.csv")));
}

#[test]
fn eval_reproduces_the_final_step() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tiny("run", dir.path(), &[]), 0);
    assert_eq!(tiny("eval", dir.path(), &[]), 0);
    let run = rows(dir.path().join("metrics.csv"));
    let eval = rows(dir.path().join("eval_metrics.csv"));
    assert_eq!(eval.len(), 2);
    let last = run.last().unwrap();
    // everything but epochs_run
    assert_eq!(eval[1][..last.len() - 1], last[..last.len() - 1]);
    assert_eq!(read(dir.path().join("confusion.csv")), read(dir.path().join("eval_confusion.csv")));
}

#[test]
fn budget_sweep_grid_follows_declared_variant_order() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap().to_string();
    let mut args = vec!["budget-sweep", "--out", &out, "--variants", "finetune,mt_sc", "--budgets", "inf,0"];
    for kv in TINY {
        args.extend(["--set", kv]);
    }
    assert_eq!(incgan(&args), 0);
    let grid = rows(dir.path().join("sweep.csv"));
    assert_eq!(grid[0], ["variant", "M=inf", "M=0"]);
    let names: Vec<&str> = grid[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["mt_sc", "finetune"]);
    assert!(PathBuf::from(&out).join("finetune_M0").join("metrics.csv").is_file());
}

#[test]
fn ablation_marks_one_cell_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap().to_string();
    let mut args = vec![
        "ablate",
        "--out",
        &out,
        "--variants",
        "mt_sc,mt_mc",
        "--lambdas",
        "0.5,1",
        "--temperatures",
        "2",
        "--architectures",
        "2",
    ];
    for kv in TINY {
        args.extend(["--set", kv]);
    }
    assert_eq!(incgan(&args), 0);
    let grid = rows(dir.path().join("ablation.csv"));
    assert_eq!(grid.len(), 5);
    let best_col = grid[0].iter().position(|h| h == "best").unwrap();
    for v in ["mt_sc", "mt_mc"] {
        let marked = grid[1..].iter().filter(|r| r[0] == v && r[best_col] == "*").count();
        assert_eq!(marked, 1, "{v}");
    }
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tiny("run", dir.path(), &["no_such_key=1"]), 2);
    assert_eq!(tiny("run", dir.path(), &["memory_budget=-3"]), 2);
    assert_eq!(tiny("run", dir.path(), &["variant=icarl_plus"]), 2);
    assert_eq!(incgan(&["frobnicate"]), 2);
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "seed = 1\nlearning_rate = 0.1\n").unwrap();
    assert_eq!(incgan(&["run", "--config", bad.to_str().unwrap()]), 2);
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = format!("data_dir={}", dir.path().join("absent").display());
    assert_eq!(tiny("run", dir.path(), &[&missing]), 1);
    let ckpt = dir.path().join("nothing");
    let out = dir.path().to_str().unwrap().to_string();
    let mut args = vec!["eval", "--out", &out, "--checkpoint", ckpt.to_str().unwrap()];
    for kv in TINY {
        args.extend(["--set", kv]);
    }
    assert_eq!(incgan(&args), 1);
}

#[test]
fn help_exits_cleanly() {
    assert_eq!(incgan(&["--help"]), 0);
}
