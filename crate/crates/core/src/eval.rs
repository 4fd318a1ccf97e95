//! Capacity and imperceptibility measurements, and blinded listening-test
//! material.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::bundle::{self, BundleError, RenderOptions};
use crate::codec::{self, CodecError, StegoParams};
use crate::midi::{self, MelodySequence};
use crate::model::{self, ConditionalModel, GenerationMode, GenerationParams, ModelError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    EmptyInput,
    #[error("sequence {0} is too short to score (needs at least 2 events)")]
    SequenceTooShort(usize),
    #[error("sequence {sequence}, event {position} has zero probability under the model")]
    ZeroProbability { sequence: usize, position: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("answer key: {0}")]
    AnswerKey(String),
}

/// Per-melody inputs to the embedding rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RateInput {
    pub events: usize,
    pub embedded_bits: usize,
    pub file_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateReport {
    pub melodies: usize,
    pub total_embedded_bits: usize,
    pub note_counts: Vec<usize>,
    pub file_bits: Vec<usize>,
    pub mean_notes: f64,
    pub mean_file_bytes: f64,
    /// Mean bits per melody divided by (mean notes - 1).
    pub mean_bits_per_note: f64,
    /// Total embedded bits over total file bits.
    pub embedding_rate: f64,
}

/// Embedding rate from the averages a results table reports:
/// `(notes - 1) · bits_per_note / (bytes · 8)`.
pub fn table_embedding_rate(bits_per_note: f64, mean_notes: f64, mean_bytes: f64) -> f64 {
    (mean_notes - 1.0) * bits_per_note / (mean_bytes * 8.0)
}

pub fn embedding_rate(inputs: &[RateInput]) -> Result<RateReport, EvalError> {
    if inputs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = inputs.len() as f64;
    let total_embedded_bits: usize = inputs.iter().map(|i| i.embedded_bits).sum();
    let total_file_bits: usize = inputs.iter().map(|i| i.file_bytes * 8).sum();
    let mean_notes = inputs.iter().map(|i| i.events).sum::<usize>() as f64 / n;
    let mean_bits = total_embedded_bits as f64 / n;
    let mean_bits_per_note = if mean_notes > 1.0 { mean_bits / (mean_notes - 1.0) } else { 0.0 };
    Ok(RateReport {
        melodies: inputs.len(),
        total_embedded_bits,
        note_counts: inputs.iter().map(|i| i.events).collect(),
        file_bits: inputs.iter().map(|i| i.file_bytes * 8).collect(),
        mean_notes,
        mean_file_bytes: total_file_bits as f64 / 8.0 / n,
        mean_bits_per_note,
        embedding_rate: if total_file_bits == 0 { 0.0 } else { total_embedded_bits as f64 / total_file_bits as f64 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreReport {
    /// Mean negative log-likelihood per scored event, natural log.
    pub per_sequence: Vec<f64>,
    pub mean: f64,
    /// `mean` in bits.
    pub mean_base2: f64,
}

/// Mean over sequences of the per-event negative log-likelihood, skipping
/// each sequence's key note. Summation order is fixed.
pub fn likelihood_score(
    model: &dyn ConditionalModel,
    sequences: &[MelodySequence],
) -> Result<ScoreReport, EvalError> {
    if sequences.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut per_sequence = Vec::with_capacity(sequences.len());
    for (index, seq) in sequences.iter().enumerate() {
        let events = seq.events();
        if events.len() < 2 {
            return Err(EvalError::SequenceTooShort(index));
        }
        let mut session = model.session();
        session.observe(events[0])?;
        let mut log_sum = 0.0;
        for (position, &e) in events.iter().enumerate().skip(1) {
            let p = session.distribution()?.probability(e);
            if p <= 0.0 {
                return Err(EvalError::ZeroProbability { sequence: index, position });
            }
            log_sum += p.ln();
            session.observe(e)?;
        }
        per_sequence.push(-log_sum / (events.len() - 1) as f64);
    }
    let mean = per_sequence.iter().sum::<f64>() / per_sequence.len() as f64;
    Ok(ScoreReport { per_sequence, mean, mean_base2: mean / std::f64::consts::LN_2 })
}

// ---------------------------------------------------------------------------
// A/B/X test set
// ---------------------------------------------------------------------------

pub const ANSWER_KEY_FILE: &str = "answer_key.csv";
pub const SAMPLES_DIR: &str = "samples";

#[derive(Clone, Debug)]
pub struct AbxConfig {
    pub cps_values: Vec<usize>,
    pub n_stego: usize,
    pub n_clean: usize,
    pub seed: u64,
    pub max_events: usize,
    pub steps_per_quarter: u32,
    pub render: RenderOptions,
}

impl Default for AbxConfig {
    /// 50 stego samples spread over five pool sizes plus 15 clean ones.
    fn default() -> Self {
        Self {
            cps_values: vec![2, 4, 8, 16, 32],
            n_stego: 50,
            n_clean: 15,
            seed: 0,
            max_events: 160,
            steps_per_quarter: 4,
            render: RenderOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AbxEntry {
    pub filename: String,
    pub label: &'static str,
    pub cps: Option<usize>,
}

/// Writes anonymized samples into `out/samples/` and the answer key into
/// `out/answer_key.csv`, all in one atomic directory swap.
pub fn make_abx_set(
    model: &dyn ConditionalModel,
    config: &AbxConfig,
    out: &Path,
) -> Result<Vec<AbxEntry>, EvalError> {
    if config.n_stego > 0 && config.cps_values.is_empty() {
        return Err(CodecError::InvalidParams("stego samples need at least one cps value".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut samples: Vec<(MelodySequence, Option<usize>)> = Vec::new();
    for i in 0..config.n_stego {
        let cps = config.cps_values[i % config.cps_values.len()];
        let params = StegoParams {
            cps,
            seed: rng.next_u64(),
            max_events_per_melody: config.max_events,
            steps_per_quarter: config.steps_per_quarter,
        };
        // Enough payload that the first melody is data-bearing throughout.
        let bits_per_note = usize::BITS - (cps - 1).leading_zeros();
        let payload = random_payload(&mut rng, config.max_events * bits_per_note as usize / 8 + 16);
        let bundle = codec::embed(model, &params, &payload)?;
        samples.push((bundle.melodies.into_iter().next().expect("embed yields a melody"), Some(cps)));
    }
    for _ in 0..config.n_clean {
        let params = GenerationParams {
            max_events: config.max_events,
            seed: rng.next_u64(),
            start_notes: model.start_notes().to_vec(),
            steps_per_quarter: config.steps_per_quarter,
        };
        samples.push((model::generate(model, &params, GenerationMode::Sampled)?, None));
    }
    samples.shuffle(&mut rng);

    let width = samples.len().max(1).to_string().len().max(3);
    let entries: Vec<AbxEntry> = samples
        .iter()
        .enumerate()
        .map(|(i, (_, cps))| AbxEntry {
            filename: format!("{:0width$}.mid", i + 1),
            label: if cps.is_some() { "stego" } else { "clean" },
            cps: *cps,
        })
        .collect();

    bundle::write_dir_atomically(out, |dir| -> Result<(), EvalError> {
        let sample_dir = dir.join(SAMPLES_DIR);
        fs::create_dir_all(&sample_dir)
            .map_err(|source| BundleError::Io { path: sample_dir.clone(), source })?;
        for ((melody, _), entry) in samples.iter().zip(&entries) {
            let path = sample_dir.join(&entry.filename);
            fs::write(&path, midi::render_midi(melody, config.render.tempo_bpm, config.render.program))
                .map_err(|source| BundleError::Io { path, source })?;
        }
        let mut writer = csv::Writer::from_path(dir.join(ANSWER_KEY_FILE))
            .map_err(|e| EvalError::AnswerKey(e.to_string()))?;
        writer.write_record(["filename", "label", "cps"]).map_err(|e| EvalError::AnswerKey(e.to_string()))?;
        for entry in &entries {
            let cps = entry.cps.map(|c| c.to_string()).unwrap_or_default();
            writer
                .write_record([entry.filename.as_str(), entry.label, cps.as_str()])
                .map_err(|e| EvalError::AnswerKey(e.to_string()))?;
        }
        writer.flush().map_err(|e| EvalError::AnswerKey(e.to_string()))?;
        Ok(())
    })?;
    Ok(entries)
}

/// Draws uniformly random payload bytes from a seeded generator.
pub fn random_payload(rng: &mut impl Rng, len: usize) -> Vec<u8> {
    let mut payload = vec![0u8; len];
    rng.fill_bytes(&mut payload);
    payload
}
