//! The `melstego` command-line tool.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 on a data or
//! format error. Every random choice derives from `--seed`, which defaults
//! to [`DEFAULT_SEED`], so repeated invocations produce identical files.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use melstego::bundle::{self, BundleError, LoadedBundle, RenderOptions};
use melstego::codec::{self, StegoParams};
use melstego::eval::{self, AbxConfig, RateInput};
use melstego::midi::{self, QuantizationConfig, VOCAB_SIZE};
use melstego::model::{self, Alpha, ConditionalModel, GenerationMode, GenerationParams, NGramModel, MODEL_MAGIC};
use melstego::neural::{LstmWeights, NeuralConfig, NeuralModel, WEIGHTS_MAGIC};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

/// Seed used when `--seed` is not given.
pub const DEFAULT_SEED: u64 = 42;

#[derive(Parser, Debug)]
#[command(name = "melstego", version, about = "Hide data in generated melodies", arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Model file (n-gram or neural weights).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print reports as JSON on standard output.
    #[arg(long, global = true)]
    json_output: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an n-gram model on a directory of MIDI files.
    Train(TrainArgs),
    /// Write a randomly initialized neural model.
    InitNeural(InitNeuralArgs),
    /// Generate melodies without hidden data.
    Gen(GenArgs),
    /// Hide a file inside generated melodies.
    Embed(EmbedArgs),
    /// Recover a hidden file from melodies.
    Extract(ExtractArgs),
    /// Measure embedding rate or likelihood score.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Build a blinded listening-test set with an answer key.
    Abx(AbxArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = model::DEFAULT_ORDER, value_parser = order_in_range)]
    order: usize,
    /// Additive smoothing, as a fraction `N/D` or a decimal.
    #[arg(long, default_value = "1/10", value_parser = parse_alpha)]
    alpha: Alpha,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..=960))]
    steps_per_quarter: u32,
    #[arg(long, default_value_t = 1, value_parser = positive)]
    min_events: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InitNeuralArgs {
    #[arg(long, default_value_t = 64, value_parser = positive)]
    hidden: usize,
    #[arg(long, default_value_t = 2, value_parser = positive)]
    layers: usize,
    #[arg(long, default_value_t = 40, value_parser = positive)]
    att_hidden: usize,
    #[arg(long, default_value_t = 40, value_parser = positive)]
    att_window: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Copy)]
struct RenderArgs {
    #[arg(long, default_value_t = midi::DEFAULT_TEMPO_BPM, value_parser = parse_tempo)]
    tempo: f64,
    #[arg(long, default_value_t = midi::DEFAULT_PROGRAM, value_parser = clap::value_parser!(u8).range(0..=127))]
    program: u8,
}

impl From<RenderArgs> for RenderOptions {
    fn from(r: RenderArgs) -> Self {
        RenderOptions { tempo_bpm: r.tempo, program: r.program }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Mode {
    Greedy,
    Sampled,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 1, value_parser = positive)]
    count: usize,
    #[arg(long, value_enum, default_value_t = Mode::Sampled)]
    mode: Mode,
    #[arg(long, default_value_t = 160, value_parser = parse_max_events)]
    max_events: usize,
    #[command(flatten)]
    render: RenderArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long, value_parser = parse_cps)]
    cps: usize,
    /// Secret file, read as raw bytes.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 160, value_parser = parse_max_events)]
    max_events: usize,
    #[command(flatten)]
    render: RenderArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long, value_parser = parse_cps)]
    cps: usize,
    /// A bundle directory, or melody files in order.
    #[arg(long = "in", num_args = 1.., required = true)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// Embedded bits over file bits.
    Rate(RateArgs),
    /// Mean negative log-likelihood per event.
    Score(ScoreArgs),
}

#[derive(Args, Debug)]
struct RateArgs {
    /// Defaults to the value recorded in the bundle manifest.
    #[arg(long, value_parser = parse_cps)]
    cps: Option<usize>,
    #[arg(long = "in", num_args = 1.., required = true)]
    input: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long = "in", num_args = 1.., required = true)]
    input: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct AbxArgs {
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32", value_parser = parse_cps)]
    cps_list: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    n_stego: usize,
    #[arg(long, default_value_t = 15)]
    n_clean: usize,
    #[arg(long, default_value_t = 160, value_parser = parse_max_events)]
    max_events: usize,
    #[command(flatten)]
    render: RenderArgs,
    #[arg(long)]
    out: PathBuf,
}

fn parse_cps(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|_| format!("`{s}` is not an integer"))?;
    if (2..=VOCAB_SIZE).contains(&v) {
        Ok(v)
    } else {
        Err(format!("cps must be in [2, {VOCAB_SIZE}]"))
    }
}

fn parse_max_events(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 2 => Ok(v),
        _ => Err("max events must be an integer of at least 2".into()),
    }
}

fn order_in_range(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if (1..=16).contains(&v) => Ok(v),
        _ => Err("order must be an integer in [1, 16]".into()),
    }
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err("expected a positive integer".into()),
    }
}

fn parse_tempo(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err("tempo must be a positive number".into()),
    }
}

fn parse_alpha(s: &str) -> Result<Alpha, String> {
    Alpha::parse(s).map_err(|e| e.to_string())
}

/// Errors that map to exit status 1.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            // A bare invocation prints help through the error path.
            let bare = e.kind() == clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand;
            return if bare { 1 } else { code };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                1
            } else {
                2
            }
        }
    }
}

enum LoadedModel {
    NGram(NGramModel),
    Neural(Box<NeuralModel>),
}

impl LoadedModel {
    fn as_dyn(&self) -> &dyn ConditionalModel {
        match self {
            LoadedModel::NGram(m) => m,
            LoadedModel::Neural(m) => m.as_ref(),
        }
    }
}

fn load_model(global: &Global) -> Result<(LoadedModel, String)> {
    let path = global.model.as_deref().ok_or_else(|| usage("--model is required"))?;
    let bytes = fs::read(path).with_context(|| format!("reading model {}", path.display()))?;
    let model = if bytes.starts_with(MODEL_MAGIC) {
        LoadedModel::NGram(NGramModel::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?)
    } else if bytes.starts_with(WEIGHTS_MAGIC) {
        let weights = LstmWeights::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?;
        LoadedModel::Neural(Box::new(NeuralModel::new(weights)?))
    } else {
        anyhow::bail!("{}: not a model file (bad magic)", path.display());
    };
    Ok((model, bundle::model_digest(&bytes)))
}

fn load_melodies(inputs: &[PathBuf]) -> Result<LoadedBundle> {
    let loaded = match inputs {
        [dir] if dir.is_dir() => bundle::read_bundle_dir(dir)?,
        files => bundle::read_bundle_files(files, 4)?,
    };
    Ok(loaded)
}

fn emit(global: &Global, value: serde_json::Value, text: impl FnOnce() -> String) {
    let body = if global.json_output {
        serde_json::to_string_pretty(&value).expect("json values serialize")
    } else {
        text()
    };
    // A closed pipe on stdout is not worth a panic.
    let _ = writeln!(std::io::stdout(), "{body}");
}

fn execute(cli: Cli) -> Result<()> {
    let global = &cli.global;
    let seed = global.seed.unwrap_or(DEFAULT_SEED);
    match cli.command {
        Command::Train(args) => {
            let cfg = QuantizationConfig {
                steps_per_quarter: args.steps_per_quarter,
                min_melody_events: args.min_events,
                ..QuantizationConfig::default()
            };
            let corpus = midi::load_corpus(&args.corpus, &cfg)?;
            let model = model::train_ngram(&corpus.melodies, args.order, args.alpha)?;
            let bytes = model.to_bytes();
            bundle::write_file_atomically(&args.out, &bytes)?;
            emit(
                global,
                json!({
                    "files_parsed": corpus.files_parsed,
                    "files_skipped": corpus.skipped,
                    "melodies": corpus.melodies.len(),
                    "contexts": model.contexts().count(),
                    "model_sha256": bundle::model_digest(&bytes),
                }),
                || {
                    format!(
                        "trained order-{} model on {} melodies from {} files ({} skipped), {} contexts",
                        args.order,
                        corpus.melodies.len(),
                        corpus.files_parsed,
                        corpus.skipped,
                        model.contexts().count()
                    )
                },
            );
        }
        Command::InitNeural(args) => {
            let config = NeuralConfig {
                vocab: VOCAB_SIZE,
                hidden: args.hidden,
                layers: args.layers,
                att_hidden: args.att_hidden,
                att_window: args.att_window,
            };
            let bytes = LstmWeights::random(config, seed).to_bytes();
            bundle::write_file_atomically(&args.out, &bytes)?;
            emit(global, json!({ "model_sha256": bundle::model_digest(&bytes) }), || {
                format!("wrote random neural model to {}", args.out.display())
            });
        }
        Command::Gen(args) => {
            let (model, _) = load_model(global)?;
            let model = model.as_dyn();
            let mode = match args.mode {
                Mode::Greedy => GenerationMode::Greedy,
                Mode::Sampled => GenerationMode::Sampled,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let melodies = (0..args.count)
                .map(|_| {
                    let params = GenerationParams {
                        max_events: args.max_events,
                        ..GenerationParams::new(model.start_notes().to_vec(), rng.next_u64())
                    };
                    model::generate(model, &params, mode)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let render = RenderOptions::from(args.render);
            bundle::write_dir_atomically(&args.out, |dir| -> Result<(), BundleError> {
                for (i, m) in melodies.iter().enumerate() {
                    let path = dir.join(bundle::melody_file_name(i));
                    fs::write(&path, midi::render_midi(m, render.tempo_bpm, render.program))
                        .map_err(|source| BundleError::Io { path, source })?;
                }
                Ok(())
            })?;
            emit(global, json!({ "melodies": melodies.len() }), || {
                format!("wrote {} melodies to {}", melodies.len(), args.out.display())
            });
        }
        Command::Embed(args) => {
            if global.seed.is_none() {
                eprintln!("warning: no --seed given, using the public default {DEFAULT_SEED}");
            }
            let (model, digest) = load_model(global)?;
            let secret = fs::read(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
            let params = StegoParams { max_events_per_melody: args.max_events, ..StegoParams::new(args.cps, seed) };
            let stego = codec::embed(model.as_dyn(), &params, &secret)?;
            let manifest = bundle::write_bundle(&args.out, &stego, &digest, args.render.into())?;
            emit(
                global,
                json!({
                    "melodies": manifest.melodies.len(),
                    "secret_bytes": secret.len(),
                    "embedded_bits": stego.total_bits(),
                }),
                || {
                    format!(
                        "embedded {} bytes ({} frame bits) in {} melodies at {}",
                        secret.len(),
                        stego.total_bits(),
                        manifest.melodies.len(),
                        args.out.display()
                    )
                },
            );
        }
        Command::Extract(args) => {
            let (model, digest) = load_model(global)?;
            let loaded = load_melodies(&args.input)?;
            if let Some(m) = &loaded.manifest {
                if m.model_sha256 != digest {
                    eprintln!("warning: bundle was written with a different model file");
                }
            }
            let params = StegoParams::new(args.cps, seed);
            let secret = codec::extract(model.as_dyn(), &params, &loaded.sequences())?;
            bundle::write_file_atomically(&args.out, &secret)?;
            emit(global, json!({ "secret_bytes": secret.len() }), || {
                format!("extracted {} bytes to {}", secret.len(), args.out.display())
            });
        }
        Command::Eval(EvalCommand::Rate(args)) => {
            let (model, _) = load_model(global)?;
            let loaded = load_melodies(&args.input)?;
            let cps = args
                .cps
                .or(loaded.manifest.as_ref().map(|m| m.cps))
                .ok_or_else(|| usage("--cps is required when the input has no manifest"))?;
            let detail = codec::extract_detailed(model.as_dyn(), &StegoParams::new(cps, seed), &loaded.sequences())?;
            let inputs: Vec<RateInput> = loaded
                .melodies
                .iter()
                .zip(&detail.frame_bits_per_melody)
                .map(|(m, &bits)| RateInput { events: m.melody.len(), embedded_bits: bits, file_bytes: m.file_bytes })
                .collect();
            let report = eval::embedding_rate(&inputs)?;
            let data_notes: usize = detail.data_notes_per_melody.iter().sum();
            let bits_per_data_note =
                if data_notes == 0 { 0.0 } else { report.total_embedded_bits as f64 / data_notes as f64 };
            emit(
                global,
                json!({ "cps": cps, "report": report, "data_notes": data_notes, "bits_per_data_note": bits_per_data_note }),
                || {
                    let mut out = String::from("melody  notes  bits  file_bits\n");
                    for (i, input) in inputs.iter().enumerate() {
                        out += &format!("{i:>6}  {:>5}  {:>4}  {:>9}\n", input.events, input.embedded_bits, input.file_bytes * 8);
                    }
                    out += &format!(
                        "cps {cps}: {} melodies, {} bits, mean notes {:.1}, mean bytes {:.1}, \
                         bits/note {:.3} ({:.3} over data notes), ER {:.2}%",
                        report.melodies,
                        report.total_embedded_bits,
                        report.mean_notes,
                        report.mean_file_bytes,
                        report.mean_bits_per_note,
                        bits_per_data_note,
                        report.embedding_rate * 100.0
                    );
                    out
                },
            );
        }
        Command::Eval(EvalCommand::Score(args)) => {
            let (model, _) = load_model(global)?;
            let loaded = load_melodies(&args.input)?;
            let report = eval::likelihood_score(model.as_dyn(), &loaded.sequences())?;
            emit(global, json!({ "report": report }), || {
                format!(
                    "{} melodies, mean score {:.6} nats ({:.6} bits) per event",
                    report.per_sequence.len(),
                    report.mean,
                    report.mean_base2
                )
            });
        }
        Command::Abx(args) => {
            let (model, _) = load_model(global)?;
            let config = AbxConfig {
                cps_values: args.cps_list,
                n_stego: args.n_stego,
                n_clean: args.n_clean,
                seed,
                max_events: args.max_events,
                steps_per_quarter: 4,
                render: args.render.into(),
            };
            let entries = eval::make_abx_set(model.as_dyn(), &config, &args.out)?;
            emit(global, json!({ "samples": entries.len() }), || {
                format!("wrote {} samples and an answer key to {}", entries.len(), args.out.display())
            });
        }
    }
    Ok(())
}
