//! Black-box tests of the binary: flag contracts, exit codes, and the
//! pipeline wired end to end through temp files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bdrrn::plane::{read_pgm, write_pgm, Plane8};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bdrrn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawning bdrrn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Writes a YUV420 file of random frames, returning its path.
fn write_yuv(dir: &Path, name: &str, w: usize, h: usize, frames: usize, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bytes = Vec::new();
    for _ in 0..frames {
        bytes.extend((0..w * h).map(|_| rng.gen::<u8>()));
        bytes.extend(std::iter::repeat(128u8).take(w * h / 2));
    }
    let path = dir.join(name);
    std::fs::write(&path, bytes).unwrap();
    path
}

#[test]
fn help_exits_zero_and_unknown_flag_exits_one() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["params", "--help"])), 0);
    assert_eq!(code(&run(&["--definitely-not-a-flag"])), 1);
    assert_eq!(code(&run(&["params", "--bogus"])), 1);
    assert_eq!(code(&run(&[])), 1);
}

#[test]
fn params_reports_counts_and_delta() {
    let drrn = run(&["params"]);
    assert_eq!(code(&drrn), 0);
    assert!(stdout(&drrn).contains("total: 75075"));

    let add = run(&["params", "--variant", "bdrrn", "--fusion", "add"]);
    assert_eq!(code(&add), 0);
    let text = stdout(&add);
    assert!(text.contains("total: 75075"));
    assert!(text.contains("vs drrn: 0"));

    let concat = run(&["params", "--variant", "bdrrn", "--fusion", "concat"]);
    assert!(stdout(&concat).contains("total: 148867"));
}

#[test]
fn fusion_with_drrn_is_a_usage_error() {
    let out = run(&[
        "params", "--variant", "drrn", "--fusion", "add",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--fusion"));
}

#[test]
fn missing_input_exits_two() {
    let out = run(&[
        "mask",
        "--decoded", "/nonexistent/decoded.pgm",
        "--partition", "/nonexistent/part.bpart",
        "--out", "/tmp/never-written.pgm",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn mask_rejects_dimension_mismatch_with_both_sizes() {
    let dir = TempDir::new().unwrap();
    let pgm = dir.path().join("frame.pgm");
    write_pgm(&Plane8::filled(32, 32, 99), &pgm).unwrap();
    let bpart = dir.path().join("part.bpart");
    std::fs::write(&bpart, "BPART 1 64 64\nframe 0\ncu 0 0 64\n").unwrap();
    let out = run(&[
        "mask",
        "--decoded", pgm.to_str().unwrap(),
        "--partition", bpart.to_str().unwrap(),
        "--out", dir.path().join("mask.pgm").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("64x64") && err.contains("32x32"), "{err}");
}

#[test]
fn mask_of_constant_frame_is_constant() {
    let dir = TempDir::new().unwrap();
    let pgm = dir.path().join("frame.pgm");
    write_pgm(&Plane8::filled(64, 64, 200), &pgm).unwrap();
    let bpart = dir.path().join("part.bpart");
    std::fs::write(&bpart, "BPART 1 64 64\nframe 0\ncu 0 0 64\n").unwrap();
    let mask_path = dir.path().join("mask.pgm");
    let out = run(&[
        "mask",
        "--decoded", pgm.to_str().unwrap(),
        "--partition", bpart.to_str().unwrap(),
        "--out", mask_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mask = read_pgm(&mask_path).unwrap();
    assert!(mask.pixels.iter().all(|p| *p == 200));
}

#[test]
fn synth_is_deterministic_and_qstep_one_lossless() {
    let dir = TempDir::new().unwrap();
    let orig = write_yuv(dir.path(), "orig.yuv", 96, 64, 3, 11);
    let synth = |qstep: &str, dec: &str, part: &str| {
        run(&[
            "synth",
            "--original", orig.to_str().unwrap(),
            "--dims", "96x64",
            "--frames", "3",
            "--qstep", qstep,
            "--seed", "5",
            "--out-decoded", dir.path().join(dec).to_str().unwrap(),
            "--out-partition", dir.path().join(part).to_str().unwrap(),
        ])
    };
    assert_eq!(code(&synth("24", "a.yuv", "a.bpart")), 0);
    assert_eq!(code(&synth("24", "b.yuv", "b.bpart")), 0);
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.yuv"), read("b.yuv"));
    assert_eq!(read("a.bpart"), read("b.bpart"));

    assert_eq!(code(&synth("1", "c.yuv", "c.bpart")), 0);
    assert_eq!(read("c.yuv"), std::fs::read(&orig).unwrap());
}

/// End to end: synth, dataset, train (twice for determinism), enhance, eval.
#[test]
fn pipeline_round_trip() {
    let dir = TempDir::new().unwrap();
    let orig = write_yuv(dir.path(), "orig.yuv", 64, 64, 4, 21);
    let dec = dir.path().join("dec.yuv");
    let part = dir.path().join("part.bpart");
    let out = run(&[
        "synth",
        "--original", orig.to_str().unwrap(),
        "--dims", "64x64",
        "--frames", "4",
        "--qstep", "20",
        "--seed", "9",
        "--out-decoded", dec.to_str().unwrap(),
        "--out-partition", part.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let manifest = dir.path().join("manifest.txt");
    std::fs::write(&manifest, "orig.yuv dec.yuv part.bpart 27 64 64 4\n").unwrap();

    let out = run(&["dataset", "--manifest", manifest.to_str().unwrap(), "--qp", "27"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("patches: 4"));

    let no_entries = run(&["dataset", "--manifest", manifest.to_str().unwrap(), "--qp", "37"]);
    assert_eq!(code(&no_entries), 0);
    assert!(stdout(&no_entries).contains("patches: 0"));

    let train_to = |name: &str| {
        let ckpt = dir.path().join(name);
        let out = run(&[
            "train",
            "--manifest", manifest.to_str().unwrap(),
            "--variant", "bdrrn",
            "--fusion", "add",
            "--qp", "27",
            "--epochs", "2",
            "--batch", "2",
            "--seed", "3",
            "--channels", "2",
            "--iters", "1,1,1",
            "--out", ckpt.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        ckpt
    };
    let ckpt = train_to("m1.ckpt");
    let ckpt2 = train_to("m2.ckpt");
    let bytes = std::fs::read(&ckpt).unwrap();
    assert_eq!(bytes, std::fs::read(&ckpt2).unwrap());
    assert_eq!(&bytes[..4], b"BDRN");
    assert!(dir.path().join("m1.steps.csv").exists());

    // Training at a QP with no manifest entries is a validation failure.
    let empty = run(&[
        "train",
        "--manifest", manifest.to_str().unwrap(),
        "--variant", "drrn",
        "--qp", "37",
        "--out", dir.path().join("x.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(code(&empty), 2);

    // bdrrn checkpoint without --partition is rejected.
    let enh = dir.path().join("enh.yuv");
    let no_part = run(&[
        "enhance",
        "--ckpt", ckpt.to_str().unwrap(),
        "--decoded", dec.to_str().unwrap(),
        "--dims", "64x64",
        "--out", enh.to_str().unwrap(),
    ]);
    assert_eq!(code(&no_part), 2);

    let out = run(&[
        "enhance",
        "--ckpt", ckpt.to_str().unwrap(),
        "--decoded", dec.to_str().unwrap(),
        "--dims", "64x64",
        "--partition", part.to_str().unwrap(),
        "--out", enh.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let enhanced = std::fs::read(&enh).unwrap();
    let decoded = std::fs::read(&dec).unwrap();
    assert_eq!(enhanced.len(), decoded.len());
    // Chroma halves are copied through untouched.
    let frame = 64 * 64 * 3 / 2;
    for f in 0..4 {
        let luma_end = f * frame + 64 * 64;
        assert_eq!(enhanced[luma_end..(f + 1) * frame], decoded[luma_end..(f + 1) * frame]);
    }

    let out = run(&[
        "eval",
        "--ckpt", ckpt.to_str().unwrap(),
        "--manifest", manifest.to_str().unwrap(),
        "--qp", "27",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("mean delta:"));
}

#[test]
fn drrn_checkpoint_warns_about_partition_and_pgm_round_trips() {
    let dir = TempDir::new().unwrap();
    let orig = write_yuv(dir.path(), "orig.yuv", 64, 64, 2, 31);
    let dec = dir.path().join("dec.yuv");
    let part = dir.path().join("part.bpart");
    run(&[
        "synth",
        "--original", orig.to_str().unwrap(),
        "--dims", "64x64",
        "--frames", "2",
        "--qstep", "16",
        "--out-decoded", dec.to_str().unwrap(),
        "--out-partition", part.to_str().unwrap(),
    ]);
    let manifest = dir.path().join("manifest.txt");
    std::fs::write(&manifest, "orig.yuv dec.yuv part.bpart 22 64 64 2\n").unwrap();
    let ckpt = dir.path().join("drrn.ckpt");
    let out = run(&[
        "train",
        "--manifest", manifest.to_str().unwrap(),
        "--variant", "drrn",
        "--qp", "22",
        "--epochs", "1",
        "--batch", "1",
        "--channels", "2",
        "--iters", "1,1,1",
        "--out", ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    // Odd-sized PGM input, partition flag present but unused.
    let pgm_in = dir.path().join("odd.pgm");
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    write_pgm(
        &Plane8 {
            width: 37,
            height: 91,
            pixels: (0..37 * 91).map(|_| rng.gen()).collect(),
        },
        &pgm_in,
    )
    .unwrap();
    let pgm_out = dir.path().join("odd-enh.pgm");
    let out = run(&[
        "enhance",
        "--ckpt", ckpt.to_str().unwrap(),
        "--decoded", pgm_in.to_str().unwrap(),
        "--partition", part.to_str().unwrap(),
        "--out", pgm_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("ignoring --partition"));
    let plane = read_pgm(&pgm_out).unwrap();
    assert_eq!((plane.width, plane.height), (37, 91));
}

#[test]
fn bdrate_identical_test_is_zero_and_csv_has_header() {
    let dir = TempDir::new().unwrap();
    let rd = "seq1 22 800 39.0\nseq1 27 400 36.0\nseq1 32 200 33.0\nseq1 37 100 30.0\n";
    let anchor = dir.path().join("anchor.rd");
    let test = dir.path().join("method.rd");
    std::fs::write(&anchor, rd).unwrap();
    std::fs::write(&test, rd).unwrap();
    let out = run(&[
        "bdrate",
        "--anchor", anchor.to_str().unwrap(),
        "--test", test.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("0.00"));

    let csv = run(&[
        "bdrate",
        "--anchor", anchor.to_str().unwrap(),
        "--test", test.to_str().unwrap(),
        "--csv",
    ]);
    assert!(stdout(&csv).starts_with("sequence,method,bd_rate_percent"));
}

#[test]
fn gradcheck_toy_config_exits_zero() {
    let out = run(&["gradcheck", "--channels", "2", "--size", "8x8"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("max relative gradient error"));
}
