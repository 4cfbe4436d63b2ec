use std::path::Path;
use std::process::{Command, Output};

use anyhow::{ensure, Result};
use cair::data::{load_image, DatasetIndex, IndexEntry, Split};
use cair::metrics::{psnr, PSNR_SENTINEL};
use cair::Tensor;

fn cair(dir: &Path, args: &[&str]) -> Result<Output> {
    Ok(Command::new(env!("CARGO_BIN_EXE_cair"))
        .current_dir(dir)
        .env("CAIR_THREADS", "1")
        .args(args)
        .output()?)
}

fn ok(dir: &Path, args: &[&str]) -> Result<String> {
    let out = cair(dir, args)?;
    ensure!(
        out.status.success(),
        "cair {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8(out.stdout)?)
}

/// Runs a command expected to fail and returns its single stderr line.
fn err_line(dir: &Path, args: &[&str]) -> Result<String> {
    let out = cair(dir, args)?;
    ensure!(
        !out.status.success(),
        "cair {args:?} unexpectedly succeeded"
    );
    let text = String::from_utf8(out.stderr)?;
    let lines: Vec<&str> = text.lines().collect();
    ensure!(lines.len() == 1, "expected one error line, got {text:?}");
    Ok(lines[0].to_string())
}

const TINY: &str = "[model]\nlevels = 2\nbase_width = 4\nblock_counts = 1,1,1\nca_width = 4\n\
[train]\ntotal_iters = 3\nbatch_size = 2\npatch_size = 16\nlog_every = 1\n\
[data]\nindex = corpus/index.tsv\n";

fn corpus(dir: &Path) -> Result<()> {
    ok(
        dir,
        &[
            "--seed",
            "4",
            "gen-data",
            "--synthetic",
            "4",
            "--size",
            "24",
            "--out",
            "corpus",
        ],
    )?;
    std::fs::write(dir.join("tiny.txt"), TINY)?;
    Ok(())
}

#[test]
fn params_reports_closed_form_counts() -> Result<()> {
    let dir = tempfile::tempdir()?;
    assert_eq!(
        ok(dir.path(), &["params", "--net", "ensemble"])?.trim(),
        "27299"
    );
    let m: usize = ok(dir.path(), &["params"])?.trim().parse()?;
    let s: usize = ok(dir.path(), &["params", "--variant", "s"])?
        .trim()
        .parse()?;
    let plain: usize = ok(dir.path(), &["params", "--variant", "plain"])?
        .trim()
        .parse()?;
    assert!(plain < s && s < m, "{plain} {s} {m}");
    Ok(())
}

#[test]
fn identity_model_infers_its_input() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let d = dir.path();
    corpus(d)?;
    ok(
        d,
        &["init", "--config", "tiny.txt", "--out", "id", "--identity"],
    )?;
    let listed = ok(
        d,
        &[
            "infer",
            "--weights",
            "id/weights.bin",
            "--input",
            "corpus/filtered",
            "--output",
            "restored",
        ],
    )?;
    let mut count = 0;
    for line in listed.lines() {
        let out = Path::new(line);
        let name = out.file_name().unwrap().to_str().unwrap();
        assert!(name.ends_with("_restored.png"), "{name}");
        let src = d
            .join("corpus/filtered")
            .join(name.replace("_restored", ""));
        let a = load_image::<f64>(&d.join(out))?;
        let b = load_image::<f64>(&src)?;
        assert!(psnr(&a, &b)? >= PSNR_SENTINEL);
        count += 1;
    }
    assert_eq!(count, 4 * 8);
    Ok(())
}

#[test]
fn eval_of_identical_pairs_is_perfect_and_deterministic() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let d = dir.path();
    corpus(d)?;
    let idx = DatasetIndex::read(&d.join("corpus/index.tsv"))?;
    let same = DatasetIndex {
        root: idx.root.clone(),
        entries: idx
            .entries
            .iter()
            .filter(|e| e.filter == idx.entries[0].filter)
            .map(|e| IndexEntry {
                filtered: e.original.clone(),
                split: Split::Test,
                ..e.clone()
            })
            .collect(),
    };
    same.write(&d.join("corpus/same.tsv"))?;
    ok(
        d,
        &[
            "eval",
            "--identity",
            "--index",
            "corpus/same.tsv",
            "--out",
            "ev",
        ],
    )?;
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("ev/summary.json"))?)?;
    assert_eq!(summary["psnr_db"], PSNR_SENTINEL);
    assert_eq!(summary["ssim"], 1.0);
    assert_eq!(summary["n_images"], 4);

    ok(d, &["init", "--config", "tiny.txt", "--out", "m"])?;
    for out in ["e1", "e2"] {
        ok(
            d,
            &[
                "eval",
                "--weights",
                "m/weights.bin",
                "--index",
                "corpus/index.tsv",
                "--tta",
                "--out",
                out,
            ],
        )?;
    }
    let a = std::fs::read_to_string(d.join("e1/metrics.txt"))?;
    assert_eq!(a, std::fs::read_to_string(d.join("e2/metrics.txt"))?);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines.len(), 8 + 1);
    assert!(lines[8].starts_with("summary\tn=8\t"), "{}", lines[8]);
    Ok(())
}

#[test]
fn training_is_reproducible_under_a_seed() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let d = dir.path();
    corpus(d)?;
    for out in ["a", "b"] {
        ok(
            d,
            &["--seed", "9", "train", "--config", "tiny.txt", "--out", out],
        )?;
    }
    ok(
        d,
        &[
            "--seed", "10", "train", "--config", "tiny.txt", "--out", "c",
        ],
    )?;
    let log = |o: &str| std::fs::read_to_string(d.join(o).join("train.log"));
    assert_eq!(log("a")?.lines().count(), 3);
    assert_eq!(log("a")?, log("b")?);
    assert_ne!(log("a")?, log("c")?);
    let w = |o: &str| std::fs::read(d.join(o).join("weights.bin"));
    assert_eq!(w("a")?, w("b")?);
    assert!(d.join("a/checkpoint.bin").exists());
    assert!(std::fs::read_to_string(d.join("a/config.txt"))?.contains("seed = 9\n"));
    Ok(())
}

#[test]
fn failures_print_one_machine_readable_line() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let d = dir.path();
    corpus(d)?;
    ok(d, &["init", "--config", "tiny.txt", "--out", "m"])?;

    let mut bytes = std::fs::read(d.join("m/weights.bin"))?;
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(d.join("m/bad.bin"), bytes)?;
    let line = err_line(
        d,
        &[
            "infer",
            "--weights",
            "m/bad.bin",
            "--input",
            "corpus/filtered",
            "--output",
            "o",
        ],
    )?;
    assert!(
        line.starts_with("error: kind=corrupt_weights msg=\""),
        "{line}"
    );
    assert!(line.contains("corrupt weights"), "{line}");

    std::fs::write(
        d.join("wide.txt"),
        TINY.replace("base_width = 4", "base_width = 8"),
    )?;
    let line = err_line(
        d,
        &[
            "infer",
            "--weights",
            "m/weights.bin",
            "--config",
            "wide.txt",
            "--input",
            "corpus/filtered",
            "--output",
            "o",
        ],
    )?;
    assert!(line.starts_with("error: kind=shape_mismatch"), "{line}");
    assert!(
        line.contains("intro.weight")
            && line.contains("[8, 3, 3, 3]")
            && line.contains("[4, 3, 3, 3]"),
        "{line}"
    );

    std::fs::write(d.join("typo.txt"), "[train]\nlr_inti = 0.1\n")?;
    let line = err_line(d, &["params", "--config", "typo.txt"])?;
    assert!(line.starts_with("error: kind=config"), "{line}");
    assert!(line.contains("line 2"), "{line}");
    Ok(())
}

#[test]
fn gradcheck_command_passes() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let out = ok(dir.path(), &["gradcheck", "--ops-only"])?;
    assert!(out.lines().count() > 20);
    assert!(out.lines().all(|l| l.ends_with("PASS")), "{out}");
    Ok(())
}

#[test]
fn help_lists_every_flag() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let help = ok(dir.path(), &["infer", "--help"])?;
    for flag in [
        "--weights",
        "--config",
        "--variant",
        "--ensemble",
        "--tta",
        "--tlsc",
        "--identity",
        "--input",
        "--output",
        "--seed",
    ] {
        assert!(help.contains(flag), "infer --help lacks {flag}");
    }
    let top = ok(dir.path(), &["--help"])?;
    for cmd in [
        "train",
        "init",
        "infer",
        "eval",
        "ensemble-train",
        "gradcheck",
        "gen-data",
        "params",
    ] {
        assert!(top.contains(cmd), "--help lacks {cmd}");
    }
    Ok(())
}

#[test]
fn ensemble_pipeline_runs_from_the_command_line() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let d = dir.path();
    corpus(d)?;
    std::fs::write(
        d.join("s.txt"),
        TINY.replace("ca_width = 4", "ca_width = 4\nvariant = s"),
    )?;
    ok(d, &["init", "--config", "s.txt", "--out", "s"])?;
    ok(d, &["init", "--config", "tiny.txt", "--out", "m"])?;
    ok(
        d,
        &[
            "ensemble-train",
            "--weights-s",
            "s/weights.bin",
            "--weights-m",
            "m/weights.bin",
            "--config",
            "tiny.txt",
            "--out",
            "ens",
        ],
    )?;
    let listed = ok(
        d,
        &[
            "infer",
            "--weights",
            "s/weights.bin",
            "--weights",
            "m/weights.bin",
            "--ensemble",
            "ens/ensemble.bin",
            "--input",
            "corpus/filtered",
            "--output",
            "o",
        ],
    )?;
    assert_eq!(listed.lines().count(), 32);
    let img: Tensor<f64> = load_image(&d.join(listed.lines().next().unwrap()))?;
    assert_eq!(img.shape(), &[1, 3, 24, 24]);
    let line = err_line(
        d,
        &[
            "infer",
            "--weights",
            "m/weights.bin",
            "--ensemble",
            "ens/ensemble.bin",
            "--input",
            "corpus/filtered",
            "--output",
            "o",
        ],
    )?;
    assert!(line.contains("expects 2 restorers"), "{line}");
    Ok(())
}
