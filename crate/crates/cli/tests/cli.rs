//! End-to-end tests that spawn the compiled binary, covering the documented
//! exit codes, the `error=<code> msg=<text>` stderr contract, output shapes,
//! and determinism of checkpoints and sample streams.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_platedvi"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary spawns")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is utf-8")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is utf-8")
}

fn assert_ok(out: &Output) {
    assert_eq!(
        out.status.code(),
        Some(0),
        "expected success, stderr: {}",
        stderr_of(out)
    );
}

fn assert_failure(out: &Output, exit: i32, code: &str, needle: &str) {
    assert_eq!(out.status.code(), Some(exit), "stderr: {}", stderr_of(out));
    let err = stderr_of(out);
    let mut lines = err.lines();
    let line = lines.next().expect("one stderr line");
    assert!(lines.next().is_none(), "stderr must be a single line: {err}");
    assert!(
        line.starts_with(&format!("error={code} msg=")),
        "unexpected stderr `{line}`"
    );
    assert!(line.contains(needle), "`{line}` does not mention `{needle}`");
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &TempDir, generator: &str, n: usize, seed: u64) -> PathBuf {
    let out = dir.path().join(format!("{generator}-{n}-{seed}.csv"));
    let result = run(&[
        "synth",
        "--generator",
        generator,
        "--n",
        &n.to_string(),
        "--out",
        path_str(&out),
        "--seed",
        &seed.to_string(),
    ]);
    assert_ok(&result);
    out
}

fn train_gaussian(dir: &TempDir, data: &Path, epochs: usize, seed: u64) -> PathBuf {
    let ck = dir.path().join(format!("g-{epochs}-{seed}.ck"));
    let result = run(&[
        "train",
        "--model",
        "gaussian_mean",
        "--data",
        path_str(data),
        "--out",
        path_str(&ck),
        "--epochs",
        &epochs.to_string(),
        "--batch-size",
        "16",
        "--seed",
        &seed.to_string(),
    ]);
    assert_ok(&result);
    ck
}

fn train_vae(dir: &TempDir, data: &Path, epochs: usize, seed: u64) -> PathBuf {
    let ck = dir.path().join(format!("v-{epochs}-{seed}.ck"));
    let result = run(&[
        "train",
        "--model",
        "vae",
        "--data",
        path_str(data),
        "--out",
        path_str(&ck),
        "--epochs",
        &epochs.to_string(),
        "--batch-size",
        "25",
        "--latent-dim",
        "2",
        "--hidden-dim",
        "8",
        "--seed",
        &seed.to_string(),
    ]);
    assert_ok(&result);
    ck
}

fn rows_of(stdout: &str) -> Vec<Vec<f64>> {
    stdout
        .lines()
        .map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect())
        .collect()
}

#[test]
fn missing_data_file_exits_2_and_names_the_path() {
    let dir = TempDir::new().unwrap();
    let ck = dir.path().join("never.ck");
    let out = run(&[
        "train",
        "--model",
        "gaussian_mean",
        "--data",
        "/no/such/file.csv",
        "--out",
        path_str(&ck),
    ]);
    assert_failure(&out, 2, "data", "/no/such/file.csv");
}

#[test]
fn malformed_csv_is_diagnosed_with_row_and_column() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "1.0\n2.0\npotato\n").unwrap();
    let ck = dir.path().join("never.ck");
    let args = [
        "train",
        "--model",
        "gaussian_mean",
        "--data",
        path_str(&bad),
        "--out",
        path_str(&ck),
    ];
    let out = run(&args);
    assert_failure(&out, 2, "data", "row 3");
    assert!(stderr_of(&out).contains("potato"));

    std::fs::write(&bad, "1.0,2.0\n3.0\n").unwrap();
    let out = run(&args);
    assert_failure(&out, 2, "data", "row 2");
    assert!(stderr_of(&out).contains("expected 2"));
}

#[test]
fn empty_dataset_exits_2() {
    let dir = TempDir::new().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let ck = dir.path().join("never.ck");
    let out = run(&[
        "train",
        "--model",
        "gaussian_mean",
        "--data",
        path_str(&empty),
        "--out",
        path_str(&ck),
    ]);
    assert_failure(&out, 2, "data", "empty");
}

#[test]
fn header_row_is_detected_and_skipped() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("headed.csv");
    std::fs::write(&csv, "value\n0.5\n1.5\n0.9\n1.1\n").unwrap();
    train_gaussian(&dir, &csv, 3, 1);
}

#[test]
fn gaussian_predictive_gives_n_single_column_rows() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "gaussian", 40, 3);
    let ck = train_gaussian(&dir, &data, 5, 1);
    let out = run(&[
        "sample",
        "--checkpoint",
        path_str(&ck),
        "--what",
        "predictive:x",
        "--n",
        "5",
        "--seed",
        "9",
    ]);
    assert_ok(&out);
    let rows = rows_of(&stdout_of(&out));
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.len() == 1));
}

#[test]
fn vae_posterior_is_one_row_per_datum_times_latent_dim() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "two_clusters", 10, 4);
    let ck = train_vae(&dir, &data, 3, 2);
    let out = run(&[
        "sample",
        "--checkpoint",
        path_str(&ck),
        "--what",
        "posterior:z",
        "--data",
        path_str(&data),
        "--seed",
        "5",
    ]);
    assert_ok(&out);
    let rows = rows_of(&stdout_of(&out));
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.len() == 2));

    // The same query without conditioning data cannot run the encoder.
    let out = run(&[
        "sample",
        "--checkpoint",
        path_str(&ck),
        "--what",
        "posterior:z",
    ]);
    assert_failure(&out, 2, "data", "--data");
}

#[test]
fn unknown_variable_and_bad_what_exit_2() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "gaussian", 20, 0);
    let ck = train_gaussian(&dir, &data, 2, 0);
    let out = run(&[
        "sample",
        "--checkpoint",
        path_str(&ck),
        "--what",
        "posterior:nope",
    ]);
    assert_failure(&out, 2, "data", "nope");
    let out = run(&["sample", "--checkpoint", path_str(&ck), "--what", "z"]);
    assert_failure(&out, 2, "usage", "posterior:<name>");
}

#[test]
fn sampling_is_deterministic_under_seed() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "gaussian", 30, 6);
    let ck = train_gaussian(&dir, &data, 4, 3);
    let args = [
        "sample",
        "--checkpoint",
        path_str(&ck),
        "--what",
        "predictive:x",
        "--n",
        "20",
        "--seed",
        "42",
    ];
    let a = run(&args);
    let b = run(&args);
    assert_ok(&a);
    assert_eq!(a.stdout, b.stdout);

    let mut other = args;
    other[8] = "43";
    let c = run(&other);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn train_is_bitwise_deterministic() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "two_clusters", 30, 8);
    let ck1 = train_vae(&dir, &data, 3, 7);
    let bytes1 = std::fs::read(&ck1).unwrap();
    std::fs::remove_file(&ck1).unwrap();
    let ck2 = train_vae(&dir, &data, 3, 7);
    assert_eq!(bytes1, std::fs::read(&ck2).unwrap());
}

#[test]
fn eval_reproduces_the_final_training_elbo_exactly() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "gaussian", 25, 2);
    let ck = dir.path().join("g.ck");
    let out = run(&[
        "train",
        "--model",
        "gaussian_mean",
        "--data",
        path_str(&data),
        "--out",
        path_str(&ck),
        "--epochs",
        "6",
        "--batch-size",
        "8",
        "--seed",
        "13",
        "--verbose",
    ]);
    assert_ok(&out);
    let stdout = stdout_of(&out);
    let last_epoch = stdout
        .lines()
        .filter(|l| l.starts_with("epoch="))
        .last()
        .expect("verbose epoch lines");
    assert!(last_epoch.starts_with("epoch=6 "));
    let logged = last_epoch
        .split_whitespace()
        .find_map(|f| f.strip_prefix("elbo="))
        .unwrap();

    // No --seed and no --mc-samples: both default to the checkpoint's own.
    let eval = run(&["eval", "--checkpoint", path_str(&ck), "--data", path_str(&data)]);
    assert_ok(&eval);
    assert_eq!(stdout_of(&eval), format!("elbo={logged}\n"));
}

#[test]
fn synth_generators_match_their_distributions() {
    let dir = TempDir::new().unwrap();
    let g = synth(&dir, "gaussian", 100_000, 11);
    let text = std::fs::read_to_string(&g).unwrap();
    let values: Vec<f64> = text.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(values.len(), 100_000);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    // CLT: se = 1/sqrt(1e5) ~ 0.0032, so 0.01 is a 3-sigma band.
    assert!((mean - 1.0).abs() < 0.01, "gaussian mean {mean}");

    let c = synth(&dir, "two_clusters", 1000, 12);
    let text = std::fs::read_to_string(&c).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 1000);
    assert!(rows.iter().all(|r| r.len() == 4));
    for coord in 0..4 {
        let mean = rows.iter().map(|r| r[coord]).sum::<f64>() / 1000.0;
        // Mixture mean is 0 with per-draw std sqrt(1+4); 0.3 > 4 se.
        assert!(mean.abs() < 0.3, "coordinate {coord} mean {mean}");
    }
}

#[test]
fn synth_is_bitwise_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = synth(&dir, "gaussian", 64, 21);
    let reread = std::fs::read(&a).unwrap();
    std::fs::remove_file(&a).unwrap();
    let b = synth(&dir, "gaussian", 64, 21);
    assert_eq!(reread, std::fs::read(&b).unwrap());
}

#[test]
fn checkpoint_survives_reload_for_sampling() {
    // Corrupting one payload character must be caught at load time.
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "gaussian", 20, 1);
    let ck = train_gaussian(&dir, &data, 2, 5);
    let mut text = std::fs::read_to_string(&ck).unwrap();
    text = text.replace("platedvi-checkpoint v1", "platedvi-checkpoint v9");
    std::fs::write(&ck, text).unwrap();
    let out = run(&[
        "sample",
        "--checkpoint",
        path_str(&ck),
        "--what",
        "predictive:x",
    ]);
    assert_failure(&out, 2, "checkpoint", "header");
}

#[test]
fn diverging_training_exits_3() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "two_clusters", 60, 5);
    let ck = dir.path().join("nan.ck");
    let out = run(&[
        "train",
        "--model",
        "vae",
        "--data",
        path_str(&data),
        "--out",
        path_str(&ck),
        "--epochs",
        "5",
        "--batch-size",
        "30",
        "--lr",
        "1e75",
        "--seed",
        "0",
    ]);
    assert_failure(&out, 3, "numeric", "NaN");
    assert!(!ck.exists(), "no checkpoint is written on failure");
}

#[test]
fn env_seed_is_the_fallback_and_flag_overrides_it() {
    let dir = TempDir::new().unwrap();
    let flag = dir.path().join("flag.csv");
    let env = dir.path().join("env.csv");
    let over = dir.path().join("override.csv");

    let out = run(&[
        "synth", "--generator", "gaussian", "--n", "32", "--out", path_str(&flag), "--seed", "14",
    ]);
    assert_ok(&out);
    let out = bin()
        .args(["synth", "--generator", "gaussian", "--n", "32", "--out", path_str(&env)])
        .env("PLATEDVI_SEED", "14")
        .output()
        .unwrap();
    assert_ok(&out);
    assert_eq!(std::fs::read(&flag).unwrap(), std::fs::read(&env).unwrap());

    let out = bin()
        .args(["synth", "--generator", "gaussian", "--n", "32", "--out", path_str(&over), "--seed", "15"])
        .env("PLATEDVI_SEED", "14")
        .output()
        .unwrap();
    assert_ok(&out);
    assert_ne!(std::fs::read(&flag).unwrap(), std::fs::read(&over).unwrap());

    let out = bin()
        .args(["synth", "--generator", "gaussian", "--n", "32", "--out", path_str(&over)])
        .env("PLATEDVI_SEED", "soup")
        .output()
        .unwrap();
    assert_failure(&out, 2, "usage", "PLATEDVI_SEED");
}

#[test]
fn usage_errors_exit_2_with_a_single_line() {
    let dir = TempDir::new().unwrap();
    let out = run(&["frobnicate"]);
    assert_failure(&out, 2, "usage", "frobnicate");

    let data = synth(&dir, "gaussian", 10, 0);
    let ck = dir.path().join("never.ck");
    let out = run(&[
        "train", "--model", "mystery", "--data", path_str(&data), "--out", path_str(&ck),
    ]);
    assert_failure(&out, 2, "usage", "mystery");

    let out = run(&[
        "train", "--model", "gaussian_mean", "--data", path_str(&data), "--out", path_str(&ck),
        "--epochs", "0",
    ]);
    assert_failure(&out, 2, "usage", "--epochs");

    let out = run(&[
        "synth", "--generator", "spiral", "--n", "5", "--out", path_str(&ck),
    ]);
    assert_failure(&out, 2, "usage", "spiral");
}

#[test]
fn help_and_version_exit_0() {
    let out = run(&["--help"]);
    assert_ok(&out);
    assert!(stdout_of(&out).contains("train"));
    let out = run(&["--version"]);
    assert_ok(&out);
    assert!(stdout_of(&out).starts_with("platedvi"));
}

#[test]
fn closed_output_pipe_ends_sampling_quietly() {
    use std::io::Read;
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "two_clusters", 40, 3);
    let ck = train_vae(&dir, &data, 2, 5);
    // 50k predictive rows overflow the pipe buffer by a wide margin, so the
    // process is still writing when the reader hangs up, exactly as under
    // `platedvi sample ... | head`.
    let mut child = bin()
        .args([
            "sample", "--checkpoint", path_str(&ck), "--what", "predictive:x", "--from-prior",
            "--n", "50000", "--seed", "1",
        ])
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .expect("binary spawns");
    let mut head = [0u8; 256];
    let mut out = child.stdout.take().unwrap();
    out.read_exact(&mut head).unwrap();
    drop(out);
    let status = child.wait().unwrap();
    let mut err = String::new();
    child.stderr.take().unwrap().read_to_string(&mut err).unwrap();
    assert!(err.is_empty(), "stderr should be silent, got: {err}");
    assert_eq!(status.code(), Some(0), "hung-up reader should end the run cleanly");
}
