use std::path::Path;
use std::process::{Command, Output};

use clap::CommandFactory;
use psta_cli::Cli;

fn psta(args: &[&str], env: &[(&str, &str)], cwd: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_psta"));
    cmd.args(args).current_dir(cwd);
    for (k, _) in std::env::vars() {
        if k.starts_with("PSTA_") {
            cmd.env_remove(k);
        }
    }
    cmd.envs(env.iter().copied());
    cmd.output().expect("spawn psta")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn ini_value(ini: &str, section: &str, key: &str) -> String {
    let mut current = "";
    for line in ini.lines() {
        if let Some(s) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = s;
        } else if current == section {
            if let Some((k, v)) = line.split_once(" = ") {
                if k == key {
                    return v.to_string();
                }
            }
        }
    }
    panic!("{section}.{key} missing");
}

const TINY: &str =
    "data.parcels=40;data.dates=5;data.max_pixels=30;data.classes=3;pse.sample_size=8";

#[test]
fn precedence_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.ini");
    std::fs::write(&file, "[run]\nseed = 1\n[train]\nepochs = 11\n").unwrap();
    let file = file.to_str().unwrap();
    for mask in 0..8u8 {
        let (use_file, use_env, use_flag) = (mask & 1 != 0, mask & 2 != 0, mask & 4 != 0);
        let mut args = vec!["train", "--dry-run", "--out", "o"];
        let mut env = Vec::new();
        if use_file {
            args.extend(["--config", file]);
        }
        if use_env {
            env.push(("PSTA_SEED", "2"));
            env.push(("PSTA_SET", "train.epochs=12"));
        }
        if use_flag {
            args.extend(["--seed", "3", "--set", "train.epochs=13"]);
        }
        let o = psta(&args, &env, dir.path());
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        let (seed, epochs) = if use_flag {
            ("3", "13")
        } else if use_env {
            ("2", "12")
        } else if use_file {
            ("1", "11")
        } else {
            ("0", "30")
        };
        let ini = stdout(&o);
        assert_eq!(ini_value(&ini, "run", "seed"), seed, "mask {mask}");
        assert_eq!(ini_value(&ini, "train", "epochs"), epochs, "mask {mask}");
        let written = std::fs::read_to_string(dir.path().join("o/resolved_config.ini")).unwrap();
        assert_eq!(written, ini);
    }
}

#[test]
fn dedicated_flags_and_overrides_share_layers() {
    let dir = tempfile::tempdir().unwrap();
    // An environment value loses to any command-line value for the same key.
    let o = psta(
        &["train", "--dry-run", "--set", "train.epochs=4"],
        &[("PSTA_EPOCHS", "9")],
        dir.path(),
    );
    assert_eq!(ini_value(&stdout(&o), "train", "epochs"), "4");
    let o = psta(
        &["train", "--dry-run", "--epochs", "5"],
        &[("PSTA_SET", "train.epochs=9;tae.heads=2")],
        dir.path(),
    );
    let ini = stdout(&o);
    assert_eq!(ini_value(&ini, "train", "epochs"), "5");
    assert_eq!(ini_value(&ini, "tae", "heads"), "2");
}

#[test]
fn help_lists_every_flag_and_env_var() {
    let dir = tempfile::tempdir().unwrap();
    let help = stdout(&psta(&["--help"], &[], dir.path()));
    let mut cmd = Cli::command();
    cmd.build();
    let mut commands = vec![cmd.clone()];
    commands.extend(cmd.get_subcommands().cloned());
    for c in &commands {
        for arg in c.get_arguments() {
            if let Some(long) = arg.get_long() {
                assert!(
                    help.contains(&format!("--{long}")),
                    "--{long} missing from --help"
                );
            }
            if let Some(env) = arg.get_env() {
                let env = env.to_str().unwrap();
                assert!(env.starts_with("PSTA_"));
                assert!(help.contains(env), "{env} missing from --help");
            }
        }
    }
    for sub in [
        "generate",
        "train",
        "evaluate",
        "predict",
        "inspect-attention",
        "ablate",
        "cross-validate",
        "format-check",
    ] {
        assert!(help.contains(sub), "{sub}");
    }
}

#[test]
fn every_long_flag_has_an_env_mirror() {
    let cmd = Cli::command();
    for arg in cmd.get_arguments() {
        if arg
            .get_long()
            .is_some_and(|l| l != "help" && l != "version")
        {
            assert!(
                arg.get_env().is_some(),
                "--{} has no PSTA_ variable",
                arg.get_long().unwrap()
            );
        }
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(
        psta(&["train", "--set", "nope.key=1"], &[], p)
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        psta(&["train", "--set", "tae.heads=x"], &[], p)
            .status
            .code(),
        Some(1)
    );
    assert_eq!(psta(&["not-a-command"], &[], p).status.code(), Some(1));
    assert_eq!(psta(&["--help"], &[], p).status.code(), Some(0));
    let o = psta(&["evaluate", "--data", "missing"], &[], p);
    assert_eq!(o.status.code(), Some(1));
    assert!(o.stdout.is_empty());
    assert!(!o.stderr.is_empty());
    assert_eq!(
        psta(&["format-check", "--data", "missing"], &[], p)
            .status
            .code(),
        Some(1)
    );
    assert_eq!(psta(&["predict"], &[], p).status.code(), Some(1));

    // Writing outputs where a file stands in for the directory is a runtime failure.
    std::fs::write(p.join("blocker"), "").unwrap();
    assert_eq!(
        psta(&["generate", "--out", "blocker/x", "--set", TINY], &[], p)
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn pipeline_generate_train_evaluate_predict() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let ok = |args: &[&str]| {
        let o = psta(args, &[], p);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        stdout(&o)
    };
    ok(&["generate", "--out", "run", "--set", TINY, "--seed", "7"]);
    let check = ok(&["format-check", "--out", "run"]);
    assert!(check.contains("parcels=40"));
    let train = ok(&[
        "train",
        "--out",
        "run",
        "--set",
        TINY,
        "--epochs",
        "2",
        "--batch-size",
        "8",
    ]);
    let log = std::fs::read_to_string(p.join("run/epoch_log.csv")).unwrap();
    assert_eq!(
        log.lines().next().unwrap(),
        "epoch,train_loss,val_OA,val_mIoU,seconds"
    );
    assert_eq!(log.lines().count(), 3);

    let eval = ok(&["evaluate", "--out", "run"]);
    assert_eq!(eval, train);
    assert_eq!(
        std::fs::read(p.join("run/eval_test_confusion.csv")).unwrap(),
        std::fs::read(p.join("run/test_confusion.csv")).unwrap()
    );

    let pred = ok(&["predict", "--out", "run", "--parcel-id", "5"]);
    let fields: Vec<&str> = pred.trim().split(',').collect();
    assert_eq!(fields.len(), 3, "{pred}");
    assert_eq!(fields[0], "5");
    assert!(fields[1].parse::<usize>().unwrap() < 3);
    let prob: f64 = fields[2].parse().unwrap();
    assert!((1.0 / 3.0..=1.0).contains(&prob));

    let att = ok(&["inspect-attention", "--out", "run", "--parcel-id", "5"]);
    let rows: Vec<&str> = att.lines().collect();
    assert_eq!(rows[0], "parcel_id,head,t,day,weight");
    // 4 heads x 5 dates
    assert_eq!(rows.len(), 1 + 4 * 5);
    let head0: f64 = rows[1..6]
        .iter()
        .map(|r| r.rsplit(',').next().unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((head0 - 1.0).abs() < 1e-6);

    assert_eq!(
        psta(&["predict", "--out", "run", "--parcel-id", "999"], &[], p)
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn generate_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for out in ["a", "b", "c"] {
        let seed = if out == "c" { "8" } else { "7" };
        let o = psta(
            &["generate", "--out", out, "--set", TINY, "--seed", seed],
            &[],
            p,
        );
        assert_eq!(o.status.code(), Some(0));
    }
    let blob = |d: &str| std::fs::read(p.join(d).join("dataset/dataset.pset")).unwrap();
    let manifest = |d: &str| std::fs::read(p.join(d).join("dataset/manifest.txt")).unwrap();
    assert_eq!(blob("a"), blob("b"));
    assert_eq!(manifest("a"), manifest("b"));
    assert_ne!(blob("a"), blob("c"));
}
