//! End-to-end CLI tests: the synth -> train -> evaluate flow, the
//! segment -> features flow on generated WAV fixtures, and the exit codes
//! (0 success, 2 config error, 3 numerical failure).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_varprop")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("spawn varprop")
}

fn assert_code(out: &Output, want: i32) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("varprop_cli_{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const MINI_CONFIG: &str = r#"
[architecture]
preset = "micro"
pooling = "max"
tasks = 1

[training]
loss_mode = "variational"
learning_rate = 0.003
max_epochs = 2
patience = 2
logit_samples = 4
trials = 1
seed = 3

[augment]
enabled = false

[synth]
tasks = 1
train_clips = 16
devel_clips = 8
test_clips = 8
positive_priors = [0.5]
snr = 4.0
frames = 8
mels = 4
seed = 11
"#;

#[test]
fn synth_train_evaluate_roundtrip() {
    let dir = workdir("train");
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, MINI_CONFIG).unwrap();
    let cfg = cfg.to_str().unwrap();

    let data = dir.join("data");
    let out = run(&["synth", "--config", cfg, "--out", data.to_str().unwrap()]);
    assert_code(&out, 0);

    let runs = dir.join("runs");
    let out = run(&[
        "train",
        "--config",
        cfg,
        "--data",
        data.to_str().unwrap(),
        "--out",
        runs.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert!(runs.join("trial0.ckpt").exists());
    assert!(runs.join("trial0_metrics.json").exists());
    assert!(runs.join("trial0_history.csv").exists());

    let report = dir.join("report.json");
    let out = run(&[
        "evaluate",
        "--checkpoint",
        runs.join("trial0.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--partition",
        "test",
        "--json",
        report.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("weighted.au_pr"), "{text}");
    let json = std::fs::read_to_string(&report).unwrap();
    assert!(json.contains("per_task"));
}

fn write_wav(path: &Path, samples: &[f64], rate: u32) {
    let mut bytes: Vec<u8> = Vec::new();
    let data_len = (samples.len() * 2) as u32;
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_len).to_le_bytes());
    bytes.extend_from_slice(b"WAVEfmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes());
    bytes.extend_from_slice(&rate.to_le_bytes());
    bytes.extend_from_slice(&(rate * 2).to_le_bytes());
    bytes.extend_from_slice(&2u16.to_le_bytes());
    bytes.extend_from_slice(&16u16.to_le_bytes());
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        bytes.extend_from_slice(&(((s * 32768.0).clamp(-32768.0, 32767.0)) as i16).to_le_bytes());
    }
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn segment_and_features_flow() {
    let dir = workdir("segment");
    let audio = dir.join("audio");
    std::fs::create_dir_all(&audio).unwrap();
    for (rid, part) in [("r1", "train"), ("r2", "devel"), ("r3", "test")] {
        let samples: Vec<f64> = (0..16_000 * 10)
            .map(|i| {
                let t = i as f64 / 16_000.0;
                let tone = if (4.0..5.0).contains(&t) {
                    0.4 * (2.0 * std::f64::consts::PI * 2_000.0 * t).sin()
                } else {
                    0.0
                };
                tone + 0.01 * ((i as u64 * 2654435761 % 65536) as f64 / 32768.0 - 1.0)
            })
            .collect();
        write_wav(&audio.join(format!("{rid}.wav")), &samples, 16_000);
        let _ = part;
    }
    std::fs::write(
        dir.join("annotations.csv"),
        "recording_id,start_s,end_s,species\nr1,4.0,5.0,whinny\nr2,4.0,5.0,whinny\nr3,4.0,5.0,whinny\n",
    )
    .unwrap();
    std::fs::write(
        dir.join("recordings.csv"),
        "recording_id,duration_s,partition\nr1,10.0,train\nr2,10.0,devel\nr3,10.0,test\n",
    )
    .unwrap();

    let manifest = dir.join("clips.csv");
    let out = run(&[
        "segment",
        "--annotations",
        dir.join("annotations.csv").to_str().unwrap(),
        "--recordings",
        dir.join("recordings.csv").to_str().unwrap(),
        "--out",
        manifest.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert_code(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("whinny"));

    let featset = dir.join("featset");
    let out = run(&[
        "features",
        "--manifest",
        manifest.to_str().unwrap(),
        "--audio",
        audio.to_str().unwrap(),
        "--out",
        featset.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert!(featset.join("meta.json").exists());
    assert!(featset.join("train").join("labels.csv").exists());
}

#[test]
fn oracle_and_gradcheck_run() {
    let dir = workdir("oracle");
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, MINI_CONFIG).unwrap();
    let out = run(&[
        "oracle",
        "--config",
        cfg.to_str().unwrap(),
        "--samples",
        "20000",
        "--sampler",
        "chain",
    ]);
    assert_code(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("chain sampler"));

    let out = run(&[
        "gradcheck",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert_code(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradient check passed"));
}

#[test]
fn config_errors_exit_2() {
    let dir = workdir("config_err");
    // malformed config file
    let bad = dir.join("bad.toml");
    std::fs::write(&bad, "[architecture]\npreset = \"galactic\"\n").unwrap();
    let out = run(&[
        "synth",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.join("x").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    // missing dataset directory
    let out = run(&[
        "train",
        "--out",
        dir.join("y").to_str().unwrap(),
        "--data",
        dir.join("absent").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
}

#[test]
fn numerical_failures_exit_3() {
    let dir = workdir("numeric_err");
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, MINI_CONFIG).unwrap();
    let data = dir.join("data");
    let out = run(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    // corrupt one training clip with a NaN; the loss goes non-finite and
    // training must abort with the numerical-failure exit code
    let clip = data.join("train").join("clip000000.vpt");
    let mut t = varprop::audio::read_tensor(&clip).unwrap();
    t.data_mut()[0] = f64::NAN;
    varprop::audio::write_tensor(&clip, &t).unwrap();
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.join("runs").to_str().unwrap(),
    ]);
    assert_code(&out, 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("numerical"));
}

#[test]
fn init_config_writes_defaults() {
    let dir = workdir("init");
    let path = dir.join("default.toml");
    let out = run(&["init-config", "--out", path.to_str().unwrap()]);
    assert_code(&out, 0);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("batch_size = 8"));
    assert!(text.contains("patience = 15"));
}
