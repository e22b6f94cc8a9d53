//! End-to-end CLI tests: the gen-data / train / synth / eval workflow, the
//! exit-code contract, and flag validation.

use std::path::Path;
use std::process::{Command, Output};

fn vts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vts"))
        .args(args)
        .output()
        .expect("spawn vts")
}

fn write_tiny_corpus_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("corpus.toml");
    std::fs::write(
        &path,
        "n_speakers = 2\nn_clips_per_speaker = 6\nclip_len_tokens = 2\nframes_per_token = 2\nseed = 5\n",
    )
    .unwrap();
    path
}

#[test]
fn full_workflow_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_corpus_config(tmp.path());
    let corpus = tmp.path().join("corpus");

    let out = vts(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", corpus.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("seed 5"), "resolved config must print the seed");

    let run = tmp.path().join("run");
    let out = vts(&[
        "train", "--corpus", corpus.to_str().unwrap(), "--mode", "SI",
        "--epochs", "2", "--batch-size", "4", "--seed", "3",
        "--out", run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("checkpoint.bin").is_file());
    assert!(run.join("metrics.jsonl").is_file());

    let ckpt = run.join("checkpoint.bin");
    let video = corpus.join("clips/clip_00001_video.f32");
    let wav = tmp.path().join("synth.wav");
    let out = vts(&[
        "synth", "--checkpoint", ckpt.to_str().unwrap(), "--video", video.to_str().unwrap(),
        "--speaker-id", "1", "--out", wav.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // duration: T = 4 frames at 20 fps -> 0.2 s -> 3200 samples
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("0.200 s"), "got: {stdout}");

    let report = tmp.path().join("report.json");
    let out = vts(&[
        "eval", "--checkpoint", ckpt.to_str().unwrap(), "--corpus", corpus.to_str().unwrap(),
        "--metrics", "eer,mcd,probe", "--n-pairs", "200",
        "--out", report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let obj = json.as_object().unwrap();
    let mut keys: Vec<&str> = obj.keys().map(|s| s.as_str()).collect();
    keys.sort_unstable();
    assert_eq!(
        keys,
        vec!["config_hash", "eer", "mcd_mean", "mcd_std", "n_clips", "n_pairs", "probe_accuracy"]
    );
}

#[test]
fn gen_data_is_deterministic_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_corpus_config(tmp.path());
    let c1 = tmp.path().join("c1");
    let c2 = tmp.path().join("c2");
    for c in [&c1, &c2] {
        let out = vts(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", c.to_str().unwrap()]);
        assert!(out.status.success());
    }
    let m1 = std::fs::read(c1.join("manifest.json")).unwrap();
    let m2 = std::fs::read(c2.join("manifest.json")).unwrap();
    assert_eq!(m1, m2);
    let w1 = std::fs::read(c1.join("clips/clip_00003.wav")).unwrap();
    let w2 = std::fs::read(c2.join("clips/clip_00003.wav")).unwrap();
    assert_eq!(w1, w2);
}

#[test]
fn gen_data_without_seed_draws_and_prints_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = vts(&[
        "gen-data", "--n-speakers", "2", "--clips-per-speaker", "1",
        "--out", tmp.path().join("c").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("seed "),
        "a drawn seed must be printed for reproducibility: {stdout}"
    );
}

#[test]
fn usage_errors_exit_2_runtime_errors_exit_1() {
    // missing required --out
    let out = vts(&["gen-data"]);
    assert_eq!(out.status.code(), Some(2));

    // unknown flag
    let out = vts(&["gen-data", "--out", "/tmp/x", "--nope"]);
    assert_eq!(out.status.code(), Some(2));

    // B + disentangle rejected before training starts
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_corpus_config(tmp.path());
    let corpus = tmp.path().join("corpus");
    assert!(vts(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", corpus.to_str().unwrap()])
        .status
        .success());
    let out = vts(&[
        "train", "--corpus", corpus.to_str().unwrap(), "--mode", "B",
        "--disentangle", "dispel", "--out", tmp.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    // nonexistent corpus is a runtime failure
    let out = vts(&[
        "train", "--corpus", "/nonexistent", "--mode", "B",
        "--out", tmp.path().join("r2").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));

    // eval on an empty corpus directory fails with structure, not a panic
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let run = tmp.path().join("run");
    assert!(vts(&[
        "train", "--corpus", corpus.to_str().unwrap(), "--mode", "B",
        "--epochs", "1", "--out", run.to_str().unwrap(),
    ])
    .status
    .success());
    let out = vts(&[
        "eval", "--checkpoint", run.join("checkpoint.bin").to_str().unwrap(),
        "--corpus", empty.to_str().unwrap(), "--out", tmp.path().join("rep.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_speaker_flag_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_corpus_config(tmp.path());
    let corpus = tmp.path().join("corpus");
    assert!(vts(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", corpus.to_str().unwrap()])
        .status
        .success());
    let run = tmp.path().join("run");
    assert!(vts(&[
        "train", "--corpus", corpus.to_str().unwrap(), "--mode", "SI",
        "--epochs", "1", "--batch-size", "4", "--out", run.to_str().unwrap(),
    ])
    .status
    .success());
    let ckpt = run.join("checkpoint.bin");
    let video = corpus.join("clips/clip_00000_video.f32");

    // conflicting speaker flags
    let out = vts(&[
        "synth", "--checkpoint", ckpt.to_str().unwrap(), "--video", video.to_str().unwrap(),
        "--speaker-id", "0", "--mean-embedding", "--out", tmp.path().join("a.wav").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // SI checkpoint with --speaker-wav: embedding modes only
    let out = vts(&[
        "synth", "--checkpoint", ckpt.to_str().unwrap(), "--video", video.to_str().unwrap(),
        "--speaker-wav", corpus.join("clips/clip_00000.wav").to_str().unwrap(),
        "--out", tmp.path().join("b.wav").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // valid id succeeds; out-of-range id is a runtime error
    let out = vts(&[
        "synth", "--checkpoint", ckpt.to_str().unwrap(), "--video", video.to_str().unwrap(),
        "--speaker-id", "1", "--out", tmp.path().join("c.wav").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let out = vts(&[
        "synth", "--checkpoint", ckpt.to_str().unwrap(), "--video", video.to_str().unwrap(),
        "--speaker-id", "2", "--out", tmp.path().join("d.wav").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
