//! Command-line front end: enhancement, training, evaluation, corpus
//! generation, benchmarking and gradient checking.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error,
//! 3 numerical failure.

mod config;

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dctnet::data::{
    from_pcm16, read_wav, synth_dataset, to_pcm16, write_wav, DatasetManifest, SampleFormat, Split, SynthSpec,
};
use dctnet::dsp::{Waveform, SAMPLE_RATE};
use dctnet::eval::{evaluate, sha256_hex};
use dctnet::model::ModelParams;
use dctnet::stream::{benchmark_rtf, open_session, StreamOutput};
use dctnet::train::{model_gradcheck, output_paths, TrainExample, Trainer, MODEL_GRADCHECK_TOL};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dctnet::Error),
    #[error("{0}")]
    Config(String),
    /// A check ran to completion and failed.
    #[error("{0}")]
    Check(String),
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Core(e.into())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Self::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Core(dctnet::Error::Numerical(_)) | Self::Check(_) => 3,
            Self::Core(_) | Self::Config(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dctnet", version, about = "Causal DCT-domain speech enhancement with voice activity detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Enhance a 16 kHz mono recording.
    Enhance(EnhanceArgs),
    /// Train a model on a generated corpus.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus split and write a JSONL report.
    Eval(EvalArgs),
    /// Generate a synthetic speech-plus-noise corpus.
    SynthData(SynthArgs),
    /// Measure the streaming real-time factor.
    Bench(BenchArgs),
    /// Compare analytic and numeric gradients of the full training loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct EnhanceArgs {
    /// Input WAV, or `-` for raw 16-bit little-endian PCM on stdin.
    #[arg(long = "in")]
    input: String,
    /// Output WAV, or `-` for raw 16-bit PCM on stdout.
    #[arg(long)]
    out: String,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Process in chunks through a streaming session.
    #[arg(long)]
    stream: bool,
    /// Chunk length for `--stream`.
    #[arg(long, default_value_t = 10.0)]
    chunk_ms: f64,
    /// Write 16-bit PCM instead of 32-bit float WAV.
    #[arg(long)]
    pcm16: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Config file, or a preset name (`full`, `toy`, `desk`).
    #[arg(long)]
    config: String,
    /// Corpus directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the training state saved in `--out`.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Split to score; defaults to test, or val when there is no test split.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// TOML file with `SynthSpec` fields; defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Checkpoint to time.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    checkpoint: Option<PathBuf>,
    /// Time a freshly initialized model of this preset instead.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 10.0)]
    seconds: f64,
    #[arg(long, default_value_t = 10.0)]
    chunk_ms: f64,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Config file, or a preset name (`full`, `toy`, `desk`).
    #[arg(long)]
    config: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Randomly chosen parameters to probe.
    #[arg(long, default_value_t = 50)]
    probes: usize,
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let result = match cli.command {
        Command::Enhance(a) => enhance(&a, &mut out),
        Command::Train(a) => train(&a, &mut out),
        Command::Eval(a) => eval(&a, &mut out),
        Command::SynthData(a) => synth(&a, &mut out),
        Command::Bench(a) => bench(&a, &mut out),
        Command::Gradcheck(a) => gradcheck(&a, &mut out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn json_line(out: &mut impl Write, value: &serde_json::Value) -> Result<(), CliError> {
    writeln!(out, "{value}")?;
    Ok(())
}

fn read_pcm16(input: &mut impl Read) -> Result<Vec<f64>, CliError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() % 2 != 0 {
        return Err(dctnet::Error::UnsupportedFormat("raw PCM input has an odd number of bytes".into()).into());
    }
    Ok(bytes.chunks_exact(2).map(|b| from_pcm16(i16::from_le_bytes([b[0], b[1]]))).collect())
}

fn write_pcm16(out: &mut impl Write, samples: &[f64]) -> io::Result<()> {
    let bytes: Vec<u8> = samples.iter().flat_map(|&s| to_pcm16(s).to_le_bytes()).collect();
    out.write_all(&bytes)
}

/// Where enhanced audio goes: straight to stdout or collected for a WAV.
enum Sink {
    Pipe(BufWriter<io::Stdout>),
    Wav { path: PathBuf, samples: Vec<f64>, format: SampleFormat },
}

impl Sink {
    fn new(arg: &str, pcm16: bool) -> Self {
        if arg == "-" {
            Sink::Pipe(BufWriter::new(io::stdout()))
        } else {
            let format = if pcm16 { SampleFormat::Pcm16 } else { SampleFormat::Float32 };
            Sink::Wav { path: PathBuf::from(arg), samples: Vec::new(), format }
        }
    }

    fn write(&mut self, samples: &[f64]) -> Result<(), CliError> {
        match self {
            Sink::Pipe(w) => {
                write_pcm16(w, samples)?;
                w.flush()?;
            }
            Sink::Wav { samples: acc, .. } => acc.extend_from_slice(samples),
        }
        Ok(())
    }

    fn finish(self) -> Result<(), CliError> {
        match self {
            Sink::Pipe(mut w) => w.flush()?,
            Sink::Wav { path, samples, format } => write_wav(&path, &Waveform::new(samples, SAMPLE_RATE)?, format)?,
        }
        Ok(())
    }
}

fn enhance(a: &EnhanceArgs, out: &mut impl Write) -> Result<(), CliError> {
    if !(a.chunk_ms > 0.0) {
        return Err(CliError::Config("--chunk-ms must be positive".into()));
    }
    let model = Arc::new(ModelParams::<f32>::load(&a.checkpoint)?);
    let mut sink = Sink::new(&a.out, a.pcm16);
    let chunk = ((a.chunk_ms * 1e-3 * SAMPLE_RATE as f64).round() as usize).max(1);
    let (ingested, frames) = if a.stream {
        let mut session = open_session(Arc::clone(&model))?;
        let mut frames = 0;
        let mut emit = |o: StreamOutput, sink: &mut Sink| -> Result<(), CliError> {
            frames += o.vad.len();
            sink.write(&o.samples)
        };
        if a.input == "-" {
            // Pipe mode: process stdin as it arrives.
            let mut stdin = io::stdin().lock();
            let mut buf = vec![0u8; 2 * chunk];
            loop {
                let n = read_full(&mut stdin, &mut buf)?;
                if n % 2 != 0 {
                    return Err(
                        dctnet::Error::UnsupportedFormat("raw PCM input has an odd number of bytes".into()).into()
                    );
                }
                let samples: Vec<f64> =
                    buf[..n].chunks_exact(2).map(|b| from_pcm16(i16::from_le_bytes([b[0], b[1]]))).collect();
                emit(session.push(&samples)?, &mut sink)?;
                if n < buf.len() {
                    break;
                }
            }
        } else {
            let wave = read_wav(Path::new(&a.input))?;
            for c in wave.samples.chunks(chunk) {
                emit(session.push(c)?, &mut sink)?;
            }
        }
        emit(session.flush()?, &mut sink)?;
        (session.ingested(), frames)
    } else {
        let wave = if a.input == "-" {
            Waveform::new(read_pcm16(&mut io::stdin().lock())?, SAMPLE_RATE)?
        } else {
            read_wav(Path::new(&a.input))?
        };
        let (enhanced, vad) = model.enhance(&wave)?;
        sink.write(&enhanced.samples)?;
        (wave.len(), vad.len())
    };
    let to_stdout = matches!(sink, Sink::Pipe(_));
    sink.finish()?;
    let summary = serde_json::json!({
        "kind": "enhance",
        "mode": if a.stream { "stream" } else { "batch" },
        "samples": ingested,
        "frames": frames,
    });
    if to_stdout {
        eprintln!("{summary}");
    } else {
        json_line(out, &summary)?;
    }
    Ok(())
}

/// Reads until `buf` is full or the input ends; returns the byte count.
fn read_full(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

fn load_split(manifest: &DatasetManifest, split: Split, cfg: &RunConfig) -> Result<Vec<TrainExample>, CliError> {
    let frame = cfg.model.frame_config()?;
    manifest
        .split(split)
        .map(|item| Ok(TrainExample::from(&manifest.load(item, &frame, cfg.model.mask_clip)?)))
        .collect()
}

fn train(a: &TrainArgs, out: &mut impl Write) -> Result<(), CliError> {
    let cfg = RunConfig::load(&a.config)?;
    let manifest = DatasetManifest::read(&a.data)?;
    let train_set = load_split(&manifest, Split::Train, &cfg)?;
    let val_set = load_split(&manifest, Split::Val, &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    let (best, state) = output_paths(&a.out);
    let mut trainer = if a.resume {
        Trainer::<f32>::load_state(&state)?
    } else {
        let model = ModelParams::<f32>::build(&cfg.model, cfg.train.seed)?;
        Trainer::new(model, cfg.train.clone(), cfg.loss)?
    };
    let mut write_err = None;
    let history = trainer.fit(&train_set, &val_set, Some(&a.out), |e| {
        let line = serde_json::json!({ "kind": "epoch", "log": e });
        if let Err(err) = json_line(out, &line) {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    json_line(
        out,
        &serde_json::json!({
            "kind": "summary",
            "steps": trainer.state.step,
            "epochs_logged": history.len(),
            "best_val": trainer.state.best_val,
            "best_checkpoint": best,
            "state_checkpoint": state,
        }),
    )
}

fn eval(a: &EvalArgs, out: &mut impl Write) -> Result<(), CliError> {
    let bytes = std::fs::read(&a.checkpoint)?;
    let model = ModelParams::<f32>::load(&a.checkpoint)?;
    let manifest = DatasetManifest::read(&a.data)?;
    let split = match a.split {
        Some(s) => s.into(),
        None if manifest.split(Split::Test).next().is_some() => Split::Test,
        None => Split::Val,
    };
    let report = evaluate(&model, &manifest, split, &sha256_hex(&bytes))?;
    report.write_jsonl(BufWriter::new(File::create(&a.report)?))?;
    json_line(out, &serde_json::json!({ "kind": "summary", "split": split, "summary": report.summary }))
}

fn synth(a: &SynthArgs, out: &mut impl Write) -> Result<(), CliError> {
    let spec: SynthSpec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| CliError::Config(format!("bad corpus spec: {e}")))?
        }
        None => SynthSpec::default(),
    };
    let manifest = synth_dataset(&spec, a.seed, &a.out)?;
    json_line(
        out,
        &serde_json::json!({
            "kind": "synth-data",
            "items": manifest.items.len(),
            "seed": a.seed,
            "out": a.out,
        }),
    )
}

fn bench(a: &BenchArgs, out: &mut impl Write) -> Result<(), CliError> {
    let model = match (&a.checkpoint, &a.preset) {
        (Some(p), _) => ModelParams::<f32>::load(p)?,
        (None, Some(name)) => ModelParams::<f32>::build(&RunConfig::preset(name)?.model, 0)?,
        (None, None) => unreachable!("clap requires one of --checkpoint or --preset"),
    };
    let report = match a.precision {
        Precision::F32 => benchmark_rtf(Arc::new(model), a.seconds, a.chunk_ms)?,
        Precision::F64 => benchmark_rtf(Arc::new(model.cast::<f64>()), a.seconds, a.chunk_ms)?,
    };
    json_line(out, &serde_json::json!({ "kind": "bench", "report": report }))
}

fn gradcheck(a: &GradcheckArgs, out: &mut impl Write) -> Result<(), CliError> {
    let cfg = RunConfig::load(&a.config)?;
    let r = model_gradcheck(&cfg.model, a.seed, a.probes)?;
    let pass = r.max_rel_err < MODEL_GRADCHECK_TOL;
    json_line(
        out,
        &serde_json::json!({
            "kind": "gradcheck",
            "seed": a.seed,
            "max_rel_err": r.max_rel_err,
            "tolerance": MODEL_GRADCHECK_TOL,
            "checked": r.checked,
            "refined": r.refined,
            "skipped": r.skipped,
            "pass": pass,
        }),
    )?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Check(format!("max relative error {:.3e} exceeds {MODEL_GRADCHECK_TOL:.0e}", r.max_rel_err)))
    }
}
