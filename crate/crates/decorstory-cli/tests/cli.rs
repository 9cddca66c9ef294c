//! Black-box tests of the `decorstory` binary: exit codes, stderr
//! messages, flag defaults, precision selection, and output formats.

use std::path::Path;
use std::process::{Command, Output};

use decorstory::demb::{load_embeddings, parse_matrix_bytes, LoadedEmbeddings, ParsedMatrix};
use decorstory::real::Dtype;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_decorstory"));
    cmd.env_remove("DECORSTORY_FLOAT");
    cmd
}

fn gen_input(dir: &Path, name: &str, n: usize, d: usize, rho: f64, seed: u64) -> std::path::PathBuf {
    let path = dir.join(name);
    let out = bin()
        .args([
            "gen-synthetic",
            "--n",
            &n.to_string(),
            "--d",
            &d.to_string(),
            "--rho",
            &rho.to_string(),
            "--seed",
            &seed.to_string(),
        ])
        .arg("--out")
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success(), "gen-synthetic failed: {:?}", out);
    path
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn decorrelate_happy_path() {
    let dir = tempfile::tempdir().unwrap();
    let input = gen_input(dir.path(), "a.demb", 4, 24, 0.8, 5);
    let output = dir.path().join("b.demb");
    let out = bin()
        .arg("decorrelate")
        .arg("--in")
        .arg(&input)
        .arg("--out")
        .arg(&output)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    assert!(output.exists());
    assert!(decorstory::demb::layout_path_for(&output).exists());
    // Output frames really are decorrelated.
    let (loaded, layout) = load_embeddings(&output).unwrap();
    let matrix = match loaded {
        LoadedEmbeddings::F64(m) => m,
        _ => panic!("default precision must be f64"),
    };
    let frames = decorstory::layout::extract_frame_matrix(&matrix, &layout).unwrap();
    let report = decorstory::analysis::report_for_rows(frames.rows()).unwrap();
    assert!(report.mean_abs_offdiag <= 1e-8);
}

#[test]
fn svr_domain_error_mentions_frame_index() {
    let dir = tempfile::tempdir().unwrap();
    let input = gen_input(dir.path(), "a.demb", 3, 8, 0.5, 1);
    let out = bin()
        .arg("svr")
        .arg("--in")
        .arg(&input)
        .args(["--frame", "9"])
        .arg("--out")
        .arg(dir.path().join("c.demb"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr_of(&out).contains("frame index"),
        "stderr: {}",
        stderr_of(&out)
    );
}

#[test]
fn malformed_input_is_a_domain_error_not_a_panic() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.demb");
    std::fs::write(&bad, b"not a demb file at all").unwrap();
    let out = bin()
        .arg("decorrelate")
        .arg("--in")
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("out.demb"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!stderr_of(&out).contains("panicked"));
}

#[test]
fn usage_errors_exit_2() {
    let out = bin().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args(["decorrelate", "--in", "a.demb", "--unknown-flag"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_lists_module_defaults() {
    let out = bin().args(["pipeline", "--help"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let help = String::from_utf8_lossy(&out.stdout).into_owned();
    for default in ["0.001", "0.1", "10", "8", "0.00000001", "error"] {
        assert!(help.contains(default), "missing default {}: {}", default, help);
    }
    let out = bin().args(["decorrelate", "--help"]).output().unwrap();
    let help = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(help.contains("0.00000001"));
}

#[test]
fn precision_env_var_selects_dtype() {
    let dir = tempfile::tempdir().unwrap();
    let input = gen_input(dir.path(), "a.demb", 2, 8, 0.3, 9);
    // Default: f64 output.
    let (loaded, _) = load_embeddings(&input).unwrap();
    assert_eq!(loaded.dtype(), Dtype::F64);
    // f32 selected: the decorrelated file stores f32.
    let out32 = dir.path().join("b32.demb");
    let status = bin()
        .env("DECORSTORY_FLOAT", "f32")
        .arg("decorrelate")
        .arg("--in")
        .arg(&input)
        .arg("--out")
        .arg(&out32)
        .status()
        .unwrap();
    assert!(status.success());
    let (loaded, _) = load_embeddings(&out32).unwrap();
    assert_eq!(loaded.dtype(), Dtype::F32);
    // Invalid value: usage error.
    let out = bin()
        .env("DECORSTORY_FLOAT", "f16")
        .arg("decorrelate")
        .arg("--in")
        .arg(&input)
        .arg("--out")
        .arg(dir.path().join("c.demb"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_synthetic_is_deterministic_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_input(dir.path(), "a.demb", 3, 16, 0.7, 42);
    let b = gen_input(dir.path(), "b.demb", 3, 16, 0.7, 42);
    let c = gen_input(dir.path(), "c.demb", 3, 16, 0.7, 43);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn ipca_writes_query_by_dim_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let input = gen_input(dir.path(), "a.demb", 3, 12, 0.5, 4);
    let output = dir.path().join("out.demb");
    let status = bin()
        .arg("ipca")
        .arg("--in")
        .arg(&input)
        .args(["--queries", "5", "--d", "3", "--seed", "8"])
        .arg("--out")
        .arg(&output)
        .status()
        .unwrap();
    assert!(status.success());
    match parse_matrix_bytes(&std::fs::read(&output).unwrap()).unwrap() {
        ParsedMatrix::F64(m) => {
            assert_eq!((m.nrows(), m.ncols()), (5, 3));
        }
        _ => panic!("expected f64 output"),
    }
}

#[test]
fn metrics_csv_is_rfc4180_with_17_digit_floats() {
    let dir = tempfile::tempdir().unwrap();
    let before = gen_input(dir.path(), "a.demb", 4, 32, 0.9, 6);
    let after = dir.path().join("b.demb");
    assert!(bin()
        .arg("decorrelate")
        .arg("--in")
        .arg(&before)
        .arg("--out")
        .arg(&after)
        .status()
        .unwrap()
        .success());
    let csv_path = dir.path().join("m.csv");
    assert!(bin()
        .arg("metrics")
        .arg("--before")
        .arg(&before)
        .arg("--after")
        .arg(&after)
        .arg("--csv")
        .arg(&csv_path)
        .status()
        .unwrap()
        .success());
    let raw = std::fs::read_to_string(&csv_path).unwrap();
    assert!(raw.starts_with("record,value\r\n"), "missing header/CRLF");
    assert!(raw.ends_with("\r\n"));
    for line in raw.trim_end().lines().skip(1) {
        let line = line.trim_end_matches('\r');
        let (record, value) = line.split_once(',').unwrap();
        assert!(!record.is_empty());
        assert!(!value.contains(','));
        if record.ends_with("n_frames") {
            value.parse::<usize>().unwrap();
        } else {
            // 17 significant digits in scientific notation, dot separator.
            let v: f64 = value.parse().unwrap();
            assert!(value.contains('e'), "not scientific: {}", value);
            assert_eq!(value, format!("{:.16e}", v), "not canonical: {}", value);
        }
    }
}

#[test]
fn pipeline_writes_frames_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let input = gen_input(dir.path(), "a.demb", 2, 8, 0.4, 3);
    let out_dir = dir.path().join("runs");
    let status = bin()
        .arg("pipeline")
        .arg("--in")
        .arg(&input)
        .args(["--steps", "4", "--seed", "7", "--latent-dim", "3"])
        .args(["--no-ipca", "--parallel-frames"])
        .arg("--out-dir")
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(status.success());
    for j in 1..=2 {
        let frame = out_dir.join(format!("frame_{}.demb", j));
        match parse_matrix_bytes(&std::fs::read(&frame).unwrap()).unwrap() {
            ParsedMatrix::F64(m) => assert_eq!((m.nrows(), m.ncols()), (1, 3)),
            _ => panic!("expected f64 latent"),
        }
    }
    let trace = std::fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    assert!(trace.starts_with("frame,step,norm\r\n"));
    // 2 frames x (4 + 1) steps + header.
    assert_eq!(trace.trim_end().lines().count(), 1 + 2 * 5);
}
