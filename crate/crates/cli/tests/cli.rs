//! End-to-end tests of the `dds` binary: artifacts, determinism, exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dds() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dds"))
}

fn run(args: &[&str]) -> Output {
    dds().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            walk(&path, out);
        } else {
            out.push(path);
        }
    }
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    walk(dir, &mut files);
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let rel = p.strip_prefix(dir).unwrap().to_path_buf();
            let bytes = fs::read(&p).unwrap();
            (rel, bytes)
        })
        .collect()
}

/// Small dataset every training test shares.
fn gen_tiny(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    let result = run(&[
        "gen",
        "--seed",
        "5",
        "--domains",
        "2",
        "--n",
        "10",
        "--size",
        "32",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&result);
    out.join("manifest.csv")
}

const TINY_SETS: [&str; 6] = [
    "--set",
    "pretrain_iters=6",
    "--set",
    "adapt_iters=4",
    "--set",
    "batch_size=4",
];

#[test]
fn gen_writes_manifest_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let result = run(&[
            "gen", "--seed", "7", "--domains", "2", "--n", "40", "--size", "32", "--out",
            out.to_str().unwrap(),
        ]);
        assert_ok(&result);
    }
    let manifest = fs::read_to_string(out_a.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 81, "header + 80 rows");

    let a = tree_bytes(&out_a);
    let b = tree_bytes(&out_b);
    assert_eq!(a.len(), b.len());
    for ((pa, ba), (pb, bb)) in a.iter().zip(&b) {
        assert_eq!(pa, pb);
        assert_eq!(ba, bb, "file {} differs between runs", pa.display());
    }
}

#[test]
fn gen_rejects_non_power_of_two_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen",
        "--seed",
        "1",
        "--size",
        "63",
        "--out",
        dir.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn mask_popcount_golden_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("m1.pgm");
    let p2 = dir.path().join("m2.pgm");
    for p in [&p1, &p2] {
        let out = run(&[
            "mask", "--d", "5", "--lam", "0.3", "--seed", "1", "--size", "64", "--out",
            p.to_str().unwrap(),
        ]);
        assert_ok(&out);
    }
    let bytes = fs::read(&p1).unwrap();
    assert_eq!(bytes, fs::read(&p2).unwrap());
    // floor(0.3 * 4096) = 1228 white pixels.
    let white = bytes.iter().rev().take(64 * 64).filter(|&&b| b == 255).count();
    assert_eq!(white, 1228);
}

#[test]
fn mask_rejects_lambda_above_half() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "mask",
        "--d",
        "1",
        "--lam",
        "0.6",
        "--seed",
        "1",
        "--out",
        dir.path().join("m.pgm").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn stylize_identity_cases() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_tiny(dir.path());
    let base = manifest.parent().unwrap();
    let target = base.join("domain0/img_000.ppm");

    // Single source equal to the target: identity at 8 bits.
    let out_path = dir.path().join("self.ppm");
    assert_ok(&run(&[
        "stylize",
        "--target",
        target.to_str().unwrap(),
        "--source",
        target.to_str().unwrap(),
        "--beta",
        "0.25",
        "--out",
        out_path.to_str().unwrap(),
    ]));
    assert_eq!(fs::read(&out_path).unwrap(), fs::read(&target).unwrap());

    // beta = 0 replaces nothing.
    let donor = base.join("domain1/img_000.ppm");
    let out_path = dir.path().join("beta0.ppm");
    assert_ok(&run(&[
        "stylize",
        "--target",
        target.to_str().unwrap(),
        "--source",
        donor.to_str().unwrap(),
        "--beta",
        "0",
        "--out",
        out_path.to_str().unwrap(),
    ]));
    assert_eq!(fs::read(&out_path).unwrap(), fs::read(&target).unwrap());

    // Batch-mean amplitude differs from any single donor's.
    let multi = dir.path().join("multi.ppm");
    let single = dir.path().join("single.ppm");
    let sources: Vec<String> = (0..8)
        .map(|i| base.join(format!("domain1/img_00{i}.ppm")).display().to_string())
        .collect();
    let mut args = vec!["stylize", "--target", target.to_str().unwrap()];
    for s in &sources {
        args.extend(["--source", s]);
    }
    args.extend(["--beta", "0.25", "--out", multi.to_str().unwrap()]);
    assert_ok(&run(&args));
    assert_ok(&run(&[
        "stylize",
        "--target",
        target.to_str().unwrap(),
        "--source",
        &sources[0],
        "--beta",
        "0.25",
        "--out",
        single.to_str().unwrap(),
    ]));
    assert_ne!(fs::read(&multi).unwrap(), fs::read(&single).unwrap());
}

#[test]
fn mix_writes_mask_and_both_directions() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_tiny(dir.path());
    let base = manifest.parent().unwrap();
    let out = dir.path().join("mixdump");
    assert_ok(&run(&[
        "mix",
        "--src",
        base.join("domain0/img_000.ppm").to_str().unwrap(),
        "--tgt",
        base.join("domain1/img_000.ppm").to_str().unwrap(),
        "--d",
        "3",
        "--lam",
        "0.4",
        "--seed",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]));
    for name in ["mask.pgm", "mixed_src_on_mask.ppm", "mixed_tgt_on_mask.ppm"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
}

#[test]
fn pretrain_adapt_eval_artifacts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_tiny(dir.path());
    let manifest = manifest.to_str().unwrap();
    let runs = dir.path().join("runs");
    let runs_s = runs.to_str().unwrap();

    // Pretrain.
    let mut args = vec!["pretrain", "--data", manifest, "--seed", "5", "--out", runs_s];
    args.extend(TINY_SETS);
    let out = run(&args);
    assert_ok(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let pretrain_dir = PathBuf::from(stdout.lines().last().unwrap());
    for name in ["config.cfg", "pretrain.ckpt", "runlog.csv", "evals.csv", "eval.csv"] {
        assert!(pretrain_dir.join(name).is_file(), "{name} missing");
    }
    let ckpt = pretrain_dir.join("pretrain.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();

    // The echoed config reproduces the run byte for byte.
    let before = tree_bytes(&pretrain_dir);
    let echoed = pretrain_dir.join("config.cfg");
    let out = run(&[
        "pretrain",
        "--data",
        manifest,
        "--out",
        runs_s,
        "--config",
        echoed.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert_eq!(before, tree_bytes(&pretrain_dir), "rerun must be byte-identical");

    // Adapt with the source_only variant: eval.csv equals a direct eval of
    // the pretrain checkpoint.
    let mut args = vec![
        "adapt",
        "--data",
        manifest,
        "--seed",
        "5",
        "--init",
        ckpt_s,
        "--variant",
        "source_only",
        "--out",
        runs_s,
    ];
    args.extend(TINY_SETS);
    let out = run(&args);
    assert_ok(&out);
    let adapt_dir = PathBuf::from(String::from_utf8(out.stdout).unwrap().lines().last().unwrap().to_string());
    let eval_csv = dir.path().join("direct_eval.csv");
    assert_ok(&run(&[
        "eval",
        "--data",
        manifest,
        "--ckpt",
        ckpt_s,
        "--domain",
        "1",
        "--split",
        "test",
        "--out",
        eval_csv.to_str().unwrap(),
    ]));
    assert_eq!(
        fs::read(adapt_dir.join("eval.csv")).unwrap(),
        fs::read(&eval_csv).unwrap()
    );
    // source_only returns the init unchanged.
    assert_eq!(
        fs::read(adapt_dir.join("student.ckpt")).unwrap(),
        fs::read(&ckpt).unwrap()
    );

    // Fullnet adapt twice: byte-identical run directory.
    let mut args = vec![
        "adapt", "--data", manifest, "--seed", "5", "--init", ckpt_s, "--variant", "fullnet",
        "--out", runs_s,
    ];
    args.extend(TINY_SETS);
    let out = run(&args);
    assert_ok(&out);
    let full_dir =
        PathBuf::from(String::from_utf8(out.stdout).unwrap().lines().last().unwrap().to_string());
    let first = tree_bytes(&full_dir);
    assert_ok(&run(&args));
    assert_eq!(first, tree_bytes(&full_dir));
    assert!(full_dir.join("teacher.ckpt").is_file());

    // Postprocessed eval differs only through hole filling; here just check
    // both run and produce the pinned header.
    let post_csv = dir.path().join("post.csv");
    assert_ok(&run(&[
        "eval",
        "--data",
        manifest,
        "--ckpt",
        ckpt_s,
        "--domain",
        "1",
        "--postprocess",
        "--out",
        post_csv.to_str().unwrap(),
    ]));
    let text = fs::read_to_string(&post_csv).unwrap();
    assert!(text.starts_with("scope,dice_od,dice_oc,hd95_od,hd95_oc,n,undefined\n"));
}

#[test]
fn eval_missing_checkpoint_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_tiny(dir.path());
    let out = run(&[
        "eval",
        "--data",
        manifest.to_str().unwrap(),
        "--ckpt",
        dir.path().join("missing.ckpt").to_str().unwrap(),
        "--domain",
        "0",
    ]);
    assert_eq!(exit_code(&out), 3);
}

#[test]
fn unknown_config_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_tiny(dir.path());
    let out = run(&[
        "pretrain",
        "--data",
        manifest.to_str().unwrap(),
        "--set",
        "bogus_key=1",
        "--out",
        dir.path().join("runs").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_tiny(dir.path());
    let manifest = manifest.to_str().unwrap();
    let runs = dir.path().join("runs");
    let runs_s = runs.to_str().unwrap();

    let mut args = vec!["pretrain", "--data", manifest, "--seed", "5", "--out", runs_s];
    args.extend(TINY_SETS);
    let out = run(&args);
    assert_ok(&out);
    let pretrain_dir = PathBuf::from(
        String::from_utf8(out.stdout).unwrap().lines().last().unwrap().to_string(),
    );
    let ckpt = pretrain_dir.join("pretrain.ckpt");

    let mut args = vec![
        "sweep",
        "--data",
        manifest,
        "--init",
        ckpt.to_str().unwrap(),
        "--param",
        "lambda_s",
        "--values",
        "0.1,0.5",
        "--out",
        runs_s,
    ];
    args.extend(TINY_SETS);
    let out = run(&args);
    assert_ok(&out);
    let sweep_dir = PathBuf::from(
        String::from_utf8(out.stdout).unwrap().lines().last().unwrap().to_string(),
    );
    let csv = fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "param,value,dice_od,dice_oc,hd95_od,hd95_oc");
    assert_eq!(csv.lines().count(), 3, "header + 2 rows");

    // Unsweepable key.
    let out = run(&[
        "sweep", "--data", manifest, "--init", ckpt.to_str().unwrap(), "--param", "seed",
        "--values", "1", "--out", runs_s,
    ]);
    assert_eq!(exit_code(&out), 2);
}
