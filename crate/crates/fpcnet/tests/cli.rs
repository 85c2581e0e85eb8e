//! CLI contract tests: exit codes, flag rejection, sidecars, file errors.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fpcnet")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn fpcnet")
}

fn tmpdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("fpcnet-cli-tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn count_prints_reference_numbers() {
    let dir = tmpdir("count");
    let out = run_in(&dir, &["count", "--model", "fpcnet-dh"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "fpcnet-dh 288 24624");

    let out = run_in(&dir, &["count"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("fpcnet-cc 116880 3318000"));
    assert!(text.contains("basenet 928920 8294520"));
    // Sidecar written with resolved config.
    let sidecar = std::fs::read_to_string(dir.join("fpcnet-count.run.json")).unwrap();
    assert!(sidecar.contains("\"command\": \"count\""));
}

#[test]
fn unknown_flags_and_bad_usage_exit_1() {
    let dir = tmpdir("usage");
    let out = run_in(&dir, &["count", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));

    let out = run_in(&dir, &["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));

    // Precondition violations are usage errors too.
    let out = run_in(&dir, &["count", "--model", "resnet"]);
    assert_eq!(out.status.code(), Some(1));

    let out = run_in(&dir, &["synth-cc", "--out", "d", "--generate", "4", "--size", "abc"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_and_malformed_data_exit_2() {
    let dir = tmpdir("data");
    let out = run_in(
        &dir,
        &["eval-dh", "--data", "missing.bin", "--model", "missing.json"],
    );
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(dir.join("broken.ppm"), b"P6 4 4 255 \x01\x02").unwrap();
    let out = run_in(
        &dir,
        &["dehaze", "--in", "broken.ppm", "--model", "m.json", "--out", "x.ppm"],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("byte"), "{err}");
}

#[test]
fn diverging_training_aborts_with_exit_3() {
    let dir = tmpdir("nanloss");
    let out = run_in(
        &dir,
        &["synth-cc", "--out", "cc", "--generate", "8", "--size", "48x48",
          "--casts-per-image", "2", "--seed", "3"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run_in(
        &dir,
        &["train-cc", "--data", "cc", "--out", "cc.json", "--iters", "200",
          "--width-divisor", "8", "--ensembles-per-cast", "2",
          "--lr", "1e12", "--seed", "3"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("non-finite loss"), "{err}");
}

#[test]
fn gradcheck_command_passes_for_all_models() {
    let dir = tmpdir("gradcheck");
    for model in ["fpcnet-dh", "fpcnet-cc", "basenet"] {
        let out = run_in(&dir, &["gradcheck", "--model", model, "--samples", "50"]);
        assert!(
            out.status.success(),
            "{model}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    }
}

#[test]
fn verify_equivalence_emits_expected_csv_columns() {
    let dir = tmpdir("verify");
    let out = run_in(
        &dir,
        &["verify-equivalence", "--k", "2", "--trials", "25", "--seed", "9",
          "--out", "sweep.csv"],
    );
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "k,channels,trials,shuffled_mean_diff,unshuffled_mean_diff,p95_shuffled,p95_unshuffled"
    );
    let row = lines.next().unwrap();
    assert!(row.starts_with("2,3,25,"));
}

#[test]
fn dehaze_writes_image_and_transmission_map() {
    let dir = tmpdir("dehaze");
    // Tiny dataset and a briefly trained model are enough to exercise the
    // full pipeline.
    assert!(run_in(
        &dir,
        &["synth-dh", "--out", "dh.bin", "--generate", "6", "--size", "48x48",
          "--patches", "200", "--seed", "2"],
    )
    .status
    .success());
    assert!(run_in(
        &dir,
        &["train-dh", "--data", "dh.bin", "--out", "dh.json", "--iters", "20",
          "--seed", "2"],
    )
    .status
    .success());
    // A hazy input straight from the generator family.
    assert!(run_in(
        &dir,
        &["synth-cc", "--out", "imgs", "--generate", "1", "--size", "64x64",
          "--casts-per-image", "1", "--seed", "4"],
    )
    .status
    .success());
    let out = run_in(
        &dir,
        &["dehaze", "--in", "imgs/clear/img0000.ppm", "--model", "dh.json",
          "--out", "clear.ppm"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("clear.ppm").exists());
    assert!(dir.join("clear.ppm.tmap.pgm").exists());
    assert!(dir.join("clear.ppm.run.json").exists());

    // The t-map is a valid PGM with the image's dimensions.
    let tmap = std::fs::read(dir.join("clear.ppm.tmap.pgm")).unwrap();
    assert!(tmap.starts_with(b"P5\n64 64\n255\n"));
}
