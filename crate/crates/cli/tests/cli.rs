use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use dctnet::data::{read_wav, write_wav, SampleFormat};
use dctnet::dsp::Waveform;
use dctnet::model::{ModelConfig, ModelParams};

fn dctnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dctnet")).args(args).output().unwrap()
}

fn dctnet_piped(args: &[&str], stdin: &[u8]) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_dctnet"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin).unwrap();
    child.wait_with_output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn tone(len: usize, rate: u32) -> Waveform {
    let s = (0..len).map(|i| 0.3 * (i as f64 * 0.05).sin() + 0.05 * (i as f64 * 1.7).cos()).collect();
    Waveform::new(s, rate).unwrap()
}

fn toy_checkpoint(dir: &Path) -> String {
    let path = dir.join("toy.ckpt");
    ModelParams::<f32>::build(&ModelConfig::toy(), 7).unwrap().save(&path).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = dctnet(&["enhance", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("Usage"));
    assert_eq!(dctnet(&[]).status.code(), Some(1));
    assert_eq!(dctnet(&["--help"]).status.code(), Some(0));
}

#[test]
fn wrong_rate_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.wav");
    write_wav(&input, &tone(4410, 44_100), SampleFormat::Pcm16).unwrap();
    let ckpt = toy_checkpoint(dir.path());
    let out_path = dir.path().join("out.wav");
    let out = dctnet(&[
        "enhance",
        "--in",
        input.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
        "--checkpoint",
        &ckpt,
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("44100"), "{}", text(&out.stderr));
    let missing = dctnet(&["enhance", "--in", "nope.wav", "--out", "x.wav", "--checkpoint", &ckpt]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn gradcheck_toy_passes() {
    let out = dctnet(&["gradcheck", "--config", "toy", "--seed", "0", "--probes", "20"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let line: serde_json::Value = serde_json::from_str(text(&out.stdout).trim()).unwrap();
    assert!(line["max_rel_err"].as_f64().unwrap() < 1e-3);
    assert_eq!(line["pass"], true);
}

#[test]
fn batch_and_stream_enhance_agree() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.wav");
    write_wav(&input, &tone(5000, 16_000), SampleFormat::Float32).unwrap();
    let ckpt = toy_checkpoint(dir.path());
    let run = |name: &str, extra: &[&str]| {
        let path = dir.path().join(name);
        let mut args = vec!["enhance", "--in", input.to_str().unwrap(), "--out", path.to_str().unwrap()];
        args.extend_from_slice(&["--checkpoint", &ckpt]);
        args.extend_from_slice(extra);
        let out = dctnet(&args);
        assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
        read_wav(&path).unwrap()
    };
    let batch = run("batch.wav", &[]);
    let stream = run("stream.wav", &["--stream", "--chunk-ms", "3"]);
    assert_eq!(batch.len(), 5000);
    assert_eq!(stream.len(), 5000);
    let diff = batch.samples.iter().zip(&stream.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-5, "max diff {diff}");
}

#[test]
fn raw_pcm_pipe() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = toy_checkpoint(dir.path());
    let pcm: Vec<u8> =
        tone(3001, 16_000).samples.iter().flat_map(|&s| dctnet::data::to_pcm16(s).to_le_bytes()).collect();
    let stream = dctnet_piped(&["enhance", "--in", "-", "--out", "-", "--checkpoint", &ckpt, "--stream"], &pcm);
    assert_eq!(stream.status.code(), Some(0), "{}", text(&stream.stderr));
    let batch = dctnet_piped(&["enhance", "--in", "-", "--out", "-", "--checkpoint", &ckpt], &pcm);
    assert_eq!(batch.status.code(), Some(0));
    assert_eq!(stream.stdout.len(), pcm.len());
    let decode =
        |b: &[u8]| -> Vec<i32> { b.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as i32).collect() };
    let (s, b) = (decode(&stream.stdout), decode(&batch.stdout));
    // Rounding to 16 bits may split values that differ in the last float bits.
    assert!(s.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1));
    let odd = dctnet_piped(&["enhance", "--in", "-", "--out", "-", "--checkpoint", &ckpt], &pcm[..5]);
    assert_eq!(odd.status.code(), Some(2));
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, "train = 4\nval = 2\ntest = 2\nduration_s = 1.0\n").unwrap();
    let out = dctnet(&["synth-data", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));

    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "preset = \"toy\"\n[train]\nbatch_size = 2\nmax_steps = 3\ncrop_s = 0.25\n").unwrap();
    let run_dir = dir.path().join("run");
    let train = |extra: &[&str]| {
        let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out"];
        args.push(run_dir.to_str().unwrap());
        args.extend_from_slice(extra);
        dctnet(&args)
    };
    let first = train(&[]);
    assert_eq!(first.status.code(), Some(0), "{}", text(&first.stderr));
    let lines: Vec<serde_json::Value> = text(&first.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.last().unwrap()["kind"], "summary");
    assert_eq!(lines.last().unwrap()["steps"], 3);
    assert!(run_dir.join("best.ckpt").exists() && run_dir.join("state.ckpt").exists());

    // A resumed run with the same step budget has nothing left to do.
    let again = train(&["--resume"]);
    assert_eq!(again.status.code(), Some(0), "{}", text(&again.stderr));

    let report = dir.path().join("report.jsonl");
    let ev = dctnet(&[
        "eval",
        "--checkpoint",
        run_dir.join("best.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(ev.status.code(), Some(0), "{}", text(&ev.stderr));
    let rows: Vec<serde_json::Value> =
        std::fs::read_to_string(&report).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 3, "two test utterances and a summary");
}

#[test]
fn bench_reports_rtf() {
    let out = dctnet(&["bench", "--preset", "toy", "--seconds", "0.2"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let line: serde_json::Value = serde_json::from_str(text(&out.stdout).trim()).unwrap();
    assert!(line["report"]["rtf"].as_f64().unwrap() > 0.0);
    assert!(line["report"]["hardware"]["logical_cores"].as_u64().unwrap() >= 1);
    assert_eq!(dctnet(&["bench", "--seconds", "1"]).status.code(), Some(1));
}
