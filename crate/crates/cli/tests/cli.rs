//! Process-level checks of the command-line frontend: exit codes, stream
//! discipline (errors on stderr only), and byte-for-byte determinism of
//! file outputs across repeated runs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn facefit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facefit"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("the binary launches")
}

fn stdout_text(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is utf-8")
}

fn stderr_text(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is utf-8")
}

/// Generate the bundled synthetic assets into `dir` and return their names.
fn synth(dir: &Path) -> [&'static str; 5] {
    let out = facefit(dir, &["synth", "--dir", "."]);
    assert!(out.status.success(), "synth failed: {}", stderr_text(&out));
    let names = ["model.bin", "scan.obj", "gt.params", "landmarks.txt", "target.png"];
    for name in names {
        assert!(dir.join(name).exists(), "synth did not write {name}");
    }
    names
}

#[test]
fn synth_writes_the_advertised_files() {
    let dir = tempfile::tempdir().expect("tempdir");
    synth(dir.path());
    let out = facefit(dir.path(), &["synth", "--dir", "."]);
    let text = stdout_text(&out);
    for name in ["model.bin", "scan.obj", "gt.params", "landmarks.txt", "target.png"] {
        assert!(text.contains(name), "stdout does not mention {name}:\n{text}");
    }
}

#[test]
fn render_is_deterministic_and_matches_the_generated_target() {
    let dir = tempfile::tempdir().expect("tempdir");
    synth(dir.path());
    for out_name in ["a.png", "b.png"] {
        let out = facefit(
            dir.path(),
            &["render", "--model", "model.bin", "--params", "gt.params", "--out", out_name],
        );
        assert!(out.status.success(), "render failed: {}", stderr_text(&out));
    }
    let a = fs::read(dir.path().join("a.png")).expect("first render");
    let b = fs::read(dir.path().join("b.png")).expect("second render");
    assert_eq!(a, b, "two renders of the same inputs must be byte-identical");
    let target = fs::read(dir.path().join("target.png")).expect("generated target");
    assert_eq!(
        a, target,
        "rendering the saved parameters must reproduce the generated target byte for byte"
    );
}

#[test]
fn gradcheck_exits_zero_with_a_per_path_report() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = facefit(dir.path(), &["gradcheck", "--seed", "3"]);
    assert!(out.status.success(), "gradcheck failed: {}", stderr_text(&out));
    let text = stdout_text(&out);
    assert!(text.contains("all gradient checks passed"), "missing the final verdict:\n{text}");
    assert!(
        text.matches("PASS").count() >= 19,
        "expected one PASS line per checked path:\n{text}"
    );
    assert!(stderr_text(&out).is_empty(), "a passing run must not write to stderr");
}

#[test]
fn missing_inputs_fail_on_stderr_with_empty_stdout() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = facefit(
        dir.path(),
        &["render", "--model", "absent.bin", "--params", "nope.params", "--out", "x.png"],
    );
    assert!(!out.status.success(), "a missing model must fail the run");
    assert!(out.stdout.is_empty(), "errors must not leak to stdout: {}", stdout_text(&out));
    let err = stderr_text(&out);
    assert!(err.starts_with("error:"), "diagnostics go to stderr: {err}");
    assert!(!dir.path().join("x.png").exists(), "no output file may appear on failure");
}

#[test]
fn unknown_flags_are_rejected() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = facefit(dir.path(), &["render", "--frobnicate"]);
    assert!(!out.status.success());
    assert!(!stderr_text(&out).is_empty(), "usage errors belong on stderr");
}

#[test]
fn malformed_config_fails_with_a_located_message() {
    let dir = tempfile::tempdir().expect("tempdir");
    fs::write(dir.path().join("bad.cfg"), "width = abc\n").expect("write config");
    let out = facefit(dir.path(), &["--config", "bad.cfg", "gradcheck"]);
    assert!(!out.status.success(), "a malformed config must fail the run");
    let err = stderr_text(&out);
    assert!(err.contains("width"), "the message should name the bad key: {err}");
}

#[test]
fn fit_scan_rows_shrink_with_basis_size() {
    let dir = tempfile::tempdir().expect("tempdir");
    synth(dir.path());
    let out = facefit(
        dir.path(),
        &["fit-scan", "--model", "model.bin", "--mesh", "scan.obj", "--ks", "2,4,8"],
    );
    assert!(out.status.success(), "fit-scan failed: {}", stderr_text(&out));
    let text = stdout_text(&out);
    let errors: Vec<f64> = text
        .lines()
        .filter_map(|l| l.split("nme=").nth(1))
        .map(|v| v.trim().parse().expect("numeric error column"))
        .collect();
    assert_eq!(errors.len(), 3, "expected one row per basis size:\n{text}");
    for pair in errors.windows(2) {
        assert!(
            pair[1] <= pair[0] + 1e-12,
            "errors must not grow with basis size: {errors:?}"
        );
    }
    assert!(errors[2] < 1e-4, "the full basis spans the target mesh: {errors:?}");
}

#[test]
fn relight_under_the_original_light_reproduces_the_render() {
    let dir = tempfile::tempdir().expect("tempdir");
    synth(dir.path());
    let out = facefit(
        dir.path(),
        &[
            "relight",
            "--model",
            "model.bin",
            "--params",
            "gt.params",
            "--light",
            "gt.params",
            "--out",
            "relit.png",
        ],
    );
    assert!(out.status.success(), "relight failed: {}", stderr_text(&out));
    let relit = fs::read(dir.path().join("relit.png")).expect("relit image");
    let target = fs::read(dir.path().join("target.png")).expect("target image");
    assert_eq!(relit, target, "relighting under the original light must be the identity");
}

#[test]
fn fit_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().expect("tempdir");
    synth(dir.path());
    // A short budget keeps the test quick; determinism is what matters here.
    fs::write(dir.path().join("short.cfg"), "max_iters = 40\n").expect("write config");
    let mut reports = Vec::new();
    for trial in ["r1", "r2"] {
        let params = format!("{trial}.params");
        let report = format!("{trial}.txt");
        let out = facefit(
            dir.path(),
            &[
                "--config",
                "short.cfg",
                "fit",
                "--model",
                "model.bin",
                "--image",
                "target.png",
                "--landmarks",
                "landmarks.txt",
                "--out",
                &params,
                "--report",
                &report,
            ],
        );
        assert!(out.status.success(), "fit failed: {}", stderr_text(&out));
        let text = stdout_text(&out);
        assert!(text.contains("iterations="), "report lists the iteration count:\n{text}");
        assert!(text.contains("termination="), "report lists the stop reason:\n{text}");
        reports.push((
            fs::read(dir.path().join(&params)).expect("fitted parameters"),
            fs::read(dir.path().join(&report)).expect("fit report"),
            text,
        ));
    }
    assert_eq!(reports[0].0, reports[1].0, "fitted parameter files must be byte-identical");
    assert_eq!(reports[0].1, reports[1].1, "fit reports must be byte-identical");
    assert_eq!(reports[0].2, reports[1].2, "stdout must be identical across runs");
}

#[test]
fn unwrap_writes_a_texture_and_its_validity_mask() {
    let dir = tempfile::tempdir().expect("tempdir");
    synth(dir.path());
    let out = facefit(
        dir.path(),
        &[
            "unwrap",
            "--model",
            "model.bin",
            "--params",
            "gt.params",
            "--image",
            "target.png",
            "--out",
            "tex.png",
            "--mask-out",
            "texmask.png",
        ],
    );
    assert!(out.status.success(), "unwrap failed: {}", stderr_text(&out));
    assert!(dir.path().join("tex.png").exists());
    assert!(dir.path().join("texmask.png").exists());
}
