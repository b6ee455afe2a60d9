//! End-to-end subcommand tests driven through `run_subcommand`.

use std::path::{Path, PathBuf};

use biflow_cli::run_subcommand;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["biflow".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    run_subcommand(&argv)
}

fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("cfg.txt");
    std::fs::write(
        &p,
        "dataset = two_moons\n\
         n_samples = 256\n\
         eval_samples = 96\n\
         blocks = 2\n\
         width = 16\n\
         rev_width = 16\n\
         epochs = 2\n\
         rev_epochs = 2\n\
         batch_size = 128\n\
         warmup_epochs = 1\n\
         ema_decay = 0.99\n\
         lr = 2e-3\n\
         seed = 11\n",
    )
    .unwrap();
    p
}

fn train_stack(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = write_config(dir);
    let fwd = dir.join("fwd.bifl");
    let full = dir.join("full.bifl");
    assert_eq!(
        run(&[
            "train-forward",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            fwd.to_str().unwrap()
        ]),
        0
    );
    assert_eq!(
        run(&[
            "train-reverse",
            "--config",
            cfg.to_str().unwrap(),
            "--forward",
            fwd.to_str().unwrap(),
            "--out",
            full.to_str().unwrap()
        ]),
        0
    );
    (fwd, full)
}

#[test]
fn unknown_subcommand_fails_with_usage() {
    assert_ne!(run(&["frobnicate"]), 0);
}

#[test]
fn sample_n_zero_is_empty_and_ok() {
    let dir = tempfile::tempdir().unwrap();
    let (_, full) = train_stack(dir.path());
    let out = dir.path().join("samples.csv");
    assert_eq!(
        run(&[
            "sample",
            "--ckpt",
            full.to_str().unwrap(),
            "--n",
            "0",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1, "only the header: {text}");
}

#[test]
fn exact_inverse_and_one_nfe_outputs_differ() {
    // same seed, w = 0: the two samplers draw the same prior stream but the
    // learned inverse is not the analytic inverse
    let dir = tempfile::tempdir().unwrap();
    let (_, full) = train_stack(dir.path());
    let a = dir.path().join("invert.csv");
    let b = dir.path().join("sample.csv");
    assert_eq!(
        run(&[
            "invert",
            "--ckpt",
            full.to_str().unwrap(),
            "--n",
            "8",
            "--cfg-scale",
            "0",
            "--seed",
            "5",
            "--out",
            a.to_str().unwrap()
        ]),
        0
    );
    assert_eq!(
        run(&[
            "sample",
            "--ckpt",
            full.to_str().unwrap(),
            "--n",
            "8",
            "--w",
            "0",
            "--seed",
            "5",
            "--out",
            b.to_str().unwrap()
        ]),
        0
    );
    let ta = std::fs::read_to_string(&a).unwrap();
    let tb = std::fs::read_to_string(&b).unwrap();
    assert_ne!(ta, tb);
}

#[test]
fn reruns_reproduce_csv_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (_, full) = train_stack(dir.path());
    for cmd in [
        vec!["sample", "--n", "16", "--seed", "3"],
        vec!["invert", "--n", "4", "--seed", "3"],
        vec!["eval", "--seed", "3"],
        vec!["ablate-cfg", "--n", "24", "--seed", "3"],
    ] {
        let o1 = dir.path().join("a.csv");
        let o2 = dir.path().join("b.csv");
        for out in [&o1, &o2] {
            let mut args = cmd.clone();
            args.insert(1, "--ckpt");
            args.insert(2, full.to_str().unwrap());
            args.push("--out");
            args.push(out.to_str().unwrap());
            assert_eq!(run(&args), 0, "command {:?}", args);
        }
        let a = std::fs::read(&o1).unwrap();
        let b = std::fs::read(&o2).unwrap();
        assert_eq!(a, b, "rerun of {:?} changed bytes", cmd[0]);
    }
}

#[test]
fn ablate_cfg_emits_exactly_eight_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (fwd, _) = train_stack(dir.path());
    let out = dir.path().join("grid.csv");
    assert_eq!(
        run(&[
            "ablate-cfg",
            "--ckpt",
            fwd.to_str().unwrap(),
            "--n",
            "16",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 9, "header + 8 cells, got: {text}");
    assert_eq!(rows[0], "schedule,space,mode,scale,mmd2");
}

#[test]
fn edit_subcommands_emit_before_after() {
    let dir = tempfile::tempdir().unwrap();
    let (_, full) = train_stack(dir.path());
    let out = dir.path().join("edit.csv");
    assert_eq!(
        run(&[
            "edit",
            "inpaint",
            "--ckpt",
            full.to_str().unwrap(),
            "--mask-spec",
            "0",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("role,"));
    assert!(text.contains("\nbefore,"));
    assert!(text.contains("\nafter,"));

    assert_eq!(
        run(&[
            "edit",
            "class",
            "--ckpt",
            full.to_str().unwrap(),
            "--from",
            "0",
            "--to",
            "1",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("\nafter,"));
}

#[test]
fn benchmark_reports_both_samplers() {
    let dir = tempfile::tempdir().unwrap();
    let (_, full) = train_stack(dir.path());
    let out = dir.path().join("bench.csv");
    assert_eq!(
        run(&[
            "benchmark",
            "--ckpt",
            full.to_str().unwrap(),
            "--n",
            "8",
            "--batch",
            "8",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("sequential_inverse"));
    assert!(text.contains("reverse_1nfe"));
}

#[test]
fn env_seed_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let (_, full) = train_stack(dir.path());
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    std::env::set_var("BIFLOW_SEED", "99");
    assert_eq!(
        run(&[
            "sample",
            "--ckpt",
            full.to_str().unwrap(),
            "--n",
            "4",
            "--out",
            a.to_str().unwrap()
        ]),
        0
    );
    std::env::remove_var("BIFLOW_SEED");
    assert_eq!(
        run(&[
            "sample",
            "--ckpt",
            full.to_str().unwrap(),
            "--n",
            "4",
            "--seed",
            "99",
            "--out",
            b.to_str().unwrap()
        ]),
        0
    );
    assert_eq!(
        std::fs::read(&a).unwrap(),
        std::fs::read(&b).unwrap(),
        "BIFLOW_SEED and --seed must agree"
    );
}
