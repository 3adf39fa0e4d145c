use std::path::Path;
use std::process::{Command, Output};

use scdma::detect_pg::DetectorParams;
use scdma::signature::SignatureMatrix;

fn scdma(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scdma"))
        .args(args)
        .current_dir(dir)
        .env_remove("SCDMA_OUT_DIR")
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn gen_signature_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = scdma(
        &[
            "gen-signature",
            "--m",
            "120",
            "--n",
            "120",
            "--k",
            "6",
            "--seed",
            "1",
            "--out",
            "sig.txt",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let a = SignatureMatrix::from_text(&std::fs::read_to_string(dir.path().join("sig.txt")).unwrap()).unwrap();
    assert_eq!((a.m(), a.n(), a.k()), (120, 120, 6));
    assert_eq!(a.nnz(), 720);
}

#[test]
fn audit_prints_table_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = scdma(&["audit-ops", "--n", "1200", "--m", "1200", "--k", "6"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("6.99e6"), "{text}");
    assert!(text.contains("1.08e4"), "{text}");
}

#[test]
fn fractional_column_weight_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = scdma(
        &[
            "train",
            "--m",
            "3",
            "--n",
            "4",
            "--k",
            "2",
            "--depth",
            "1",
            "--batches",
            "1",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("non-integer column weight"), "{err}");
    assert!(err.contains("--k"), "{err}");
}

#[test]
fn unknown_flags_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = scdma(&["sweep", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = scdma(&["sweep", "--config", "missing.conf"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stpg_sweep_without_checkpoints_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = scdma(
        &["sweep", "--n", "12", "--m", "12", "--k", "2", "--detectors", "stpg"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("checkpoint"));
}

#[test]
fn help_shows_defaults_for_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["gen-signature", "train", "joint-train", "sweep", "audit-ops"] {
        let out = scdma(&[sub, "--help"], dir.path());
        assert_eq!(out.status.code(), Some(0));
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.contains("[default:"), "{sub}: {text}");
    }
}

#[test]
fn train_then_sweep_with_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.conf"),
        "# small system\nn = 12\nm = 12\nk = 3\ndepth = 3\nbatches = 4\nbatch_size = 16\nsnr_db = 4,6\nout_dir = ckpt\n",
    )
    .unwrap();
    let out = scdma(
        &["--threads", "1", "train", "--config", "run.conf", "--batches", "2"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let manifest = std::fs::read_to_string(dir.path().join("ckpt/train_manifest.txt")).unwrap();
    assert!(manifest.contains("batches = 2"), "{manifest}");
    assert!(manifest.contains("depth = 3"), "{manifest}");
    for snr in ["4", "6"] {
        let text = std::fs::read_to_string(dir.path().join(format!("ckpt/stpg_{snr}dB.txt"))).unwrap();
        assert_eq!(DetectorParams::from_text(&text).unwrap().depth(), 3);
    }

    let out = scdma(
        &[
            "sweep",
            "--signature",
            "ckpt/signature.txt",
            "--snr-db",
            "4,6",
            "--detectors",
            "pg,stpg,bp,ml",
            "--checkpoints",
            "ckpt",
            "--min-bits",
            "1200",
            "--max-bits",
            "1200",
            "--out",
            "res/sweep.csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("res/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "detector,snr_db,bits,errors,ber,ci95,adds,mults,seconds");
    assert_eq!(lines.len(), 1 + 8);
    assert!(dir.path().join("res/sweep.manifest.txt").exists());
}

#[test]
fn out_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_scdma"))
        .args(["gen-signature", "--m", "12", "--n", "12", "--k", "2"])
        .current_dir(dir.path())
        .env("SCDMA_OUT_DIR", dir.path().join("env_out"))
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("env_out/signature.txt").exists());
}
